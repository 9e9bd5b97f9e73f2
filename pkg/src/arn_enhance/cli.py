"""Command-line entry point: ``arn-enhance <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import __version__, dsp, metrics, mixer, model, objective, plotting, trainer
from .audio_io import WavError, list_wavs, read_wav, write_wav

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SELECT = {"min-pcm": "min_pcm", "max-stoi": "max_stoi"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> Parser:
    p = Parser(prog="arn-enhance", description="Time-domain speech enhancement toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    m = sub.add_parser("mix", help="mix clean speech with noise into a corpus",
                       description="Write clean/, noise/, noisy/ WAVs and manifest.json into OUT.")
    m.add_argument("--clean-dir", required=True, help="directory of clean speech WAVs")
    m.add_argument("--noise-dir", required=True, help="directory of noise WAVs")
    m.add_argument("--count", type=int, required=True, help="number of mixtures to write")
    m.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--target-rms", type=float, default=0.05, help="RMS of every mixture (default: 0.05)")
    m.add_argument("--no-loop", action="store_true", help="reject noise shorter than the utterance")
    g = m.add_mutually_exclusive_group()
    g.add_argument("--snr-fixed", type=float, metavar="DB", help="use one SNR for every mixture")
    g.add_argument("--snr-paper-ranges", action="store_true",
                   help="draw from [-7, 0] or [0, 10] dB with equal probability (default)")

    t = sub.add_parser("train", help="train a model from an INI config",
                       description="Train and write checkpoints, train_log.jsonl and training_curves.png.")
    t.add_argument("--config", required=True, help="INI file with [model] [train] [loss] [data] sections")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, help="override the [train] seed")
    t.add_argument("--epochs", type=int, help="override the [train] epoch count")

    e = sub.add_parser("enhance", help="enhance a WAV file or a directory of WAVs",
                       description="Run a trained model on noisy input.")
    e.add_argument("--checkpoint", required=True, help="checkpoint file, or a run directory")
    e.add_argument("--in", dest="inp", required=True, help="noisy WAV file or directory")
    e.add_argument("--out", required=True, help="output WAV file or directory")
    e.add_argument("--select", choices=sorted(SELECT),
                   help="with a run directory: pick the min-PCM or max-STOI checkpoint (default: min-pcm)")
    e.add_argument("--seed", type=int, default=0, help="accepted for uniformity; enhancement is deterministic")

    v = sub.add_parser("evaluate", help="score processed speech against clean references",
                       description="Write a tab-separated report and a STOI-per-SNR figure.")
    v.add_argument("--clean", required=True, help="directory of clean reference WAVs")
    v.add_argument("--processed", required=True, help="directory of processed WAVs with matching names")
    v.add_argument("--out", required=True, help="report path (TSV)")
    v.add_argument("--noisy", help="directory of the unprocessed mixtures (adds mixture and PCM rows)")
    v.add_argument("--manifest", help="corpus manifest giving each utterance's SNR")
    v.add_argument("--bin-width", type=float, default=1.0, help="SNR bin width in dB (default: 1)")
    v.add_argument("--config", help="INI file whose [loss] section configures the PCM column")
    v.add_argument("--figure", help="figure path (default: report path with .png)")
    v.add_argument("--seed", type=int, default=0, help="accepted for uniformity; scoring is deterministic")

    f = sub.add_parser("features", help="extract log-mel features with deltas",
                       description="Write a binary feature file (T x 240 by default).")
    f.add_argument("--in", dest="inp", required=True, help="16 kHz WAV file")
    f.add_argument("--out", required=True, help="feature file")
    f.add_argument("--n-mels", type=int, default=80, help="mel bands (default: 80)")
    f.add_argument("--seed", type=int, default=0, help="accepted for uniformity; extraction is deterministic")

    w = sub.add_parser("score-wer", help="word error rate between transcript files",
                       description="Each line of either file is 'utterance-id word word ...'.")
    w.add_argument("--ref", required=True, help="reference transcripts")
    w.add_argument("--hyp", required=True, help="hypothesis transcripts")
    w.add_argument("--seed", type=int, default=0, help="accepted for uniformity; scoring is deterministic")
    return p


def cmd_mix(args) -> int:
    policy = mixer.SnrPolicy(fixed=args.snr_fixed) if args.snr_fixed is not None else mixer.SnrPolicy()
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    man = mixer.build_corpus(args.clean_dir, args.noise_dir, args.count, args.seed, args.out, policy,
                             args.target_rms, loop_noise=not args.no_loop)
    print(f"wrote {len(man.entries)} mixtures to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = trainer.load_config(args.config)
    tcfg = run.train
    over = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    if over:
        tcfg = dataclasses.replace(tcfg, **over)
    source = trainer.make_source(run.data, tcfg)
    os.makedirs(args.out, exist_ok=True)
    curves = os.path.join(args.out, "training_curves.png")

    def on_epoch(_rec):
        plotting.plot_training_curves(trainer.read_log(os.path.join(args.out, trainer.LOG_NAME)), curves)

    res = trainer.train(tcfg, run.model, source, args.out, run.loss, on_epoch=on_epoch)
    for crit in trainer.CRITERIA:
        print(f"{crit}\tepoch {trainer.select_checkpoint(res.records, crit)}\t{res.checkpoint_path(crit)}")
    return EXIT_OK


def resolve_checkpoint(path: str, select: str | None) -> str:
    if os.path.isdir(path):
        name = trainer.BEST_STOI if select == "max-stoi" else trainer.BEST_PCM
        path = os.path.join(path, name)
        if not os.path.exists(path):
            raise DataError(f"{path} does not exist")
    elif select is not None:
        raise UsageError("--select needs --checkpoint to be a run directory")
    return path


def cmd_enhance(args) -> int:
    path = resolve_checkpoint(args.checkpoint, args.select)
    ckpt = model.load_checkpoint(path)
    print(f"checkpoint {path} epoch {ckpt.epoch} val_pcm {ckpt.val_pcm!r} val_stoi {ckpt.val_stoi!r}",
          file=sys.stderr)
    params = ckpt.float_params(np.float64)
    if os.path.isdir(args.inp):
        names = list_wavs(args.inp)
        if not names:
            raise DataError(f"no WAV files in {args.inp}")
        os.makedirs(args.out, exist_ok=True)
        jobs = [(os.path.join(args.inp, n), os.path.join(args.out, n)) for n in names]
    else:
        jobs = [(args.inp, args.out)]
    for src, dst in jobs:
        write_wav(model.enhance(read_wav(src), params, ckpt.config), dst)
    print(f"enhanced {len(jobs)} file(s)")
    return EXIT_OK


def _bin(snr: float, width: float) -> float:
    return float(round(snr / width) * width)


def cmd_evaluate(args) -> int:
    names = list_wavs(args.clean)
    if not names:
        raise DataError(f"no WAV files in {args.clean}")
    missing = [n for n in names if not os.path.exists(os.path.join(args.processed, n))]
    if missing:
        raise DataError(f"{len(missing)} processed files missing, e.g. {missing[0]}")
    snrs = {}
    if args.manifest:
        man = mixer.CorpusManifest.load(args.manifest)
        snrs = {e["id"]: e["snr_db"] for e in man.entries}
    loss_cfg = trainer.load_config(args.config).loss if args.config else objective.LossConfig()
    report = metrics.MetricsReport()
    for name in names:
        utt = os.path.splitext(name)[0]
        clean = read_wav(os.path.join(args.clean, name))
        proc = read_wav(os.path.join(args.processed, name))
        stoi_mix = snr_in = pcm = None
        if args.noisy:
            noisy = read_wav(os.path.join(args.noisy, name))
            stoi_mix = metrics.stoi(clean, noisy)
            snr_in = metrics.snr_db(clean, noisy)
            pcm = objective.pcm_loss(proc, clean, noisy, loss_cfg)
        snr_bin = _bin(snrs[utt], args.bin_width) if utt in snrs else metrics.ALL_BINS
        report.add(utt, snr_bin, metrics.stoi(clean, proc), metrics.snr_db(clean, proc), stoi_mix, snr_in, pcm)
    report.write(args.out)
    figure = args.figure or os.path.splitext(args.out)[0] + ".png"
    plotting.plot_stoi_by_snr(report, figure)
    with open(args.out) as fh:
        for line in fh:
            if line.strip() == "":
                break
            sys.stdout.write(line)
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = dsp.FeatureConfig(n_mels=args.n_mels)
    feats = dsp.log_mel_features(read_wav(args.inp), cfg)
    dsp.write_features(feats, args.out)
    t, d = feats.values.shape
    print(f"{t} frames x {d} dims")
    return EXIT_OK


def cmd_score_wer(args) -> int:
    res = metrics.corpus_wer(metrics.read_transcripts(args.ref), metrics.read_transcripts(args.hyp))
    print(f"WER {100 * res.rate:.2f}% [S={res.substitutions} D={res.deletions} I={res.insertions} "
          f"N={res.ref_len}]")
    return EXIT_OK


COMMANDS = {"mix": cmd_mix, "train": cmd_train, "enhance": cmd_enhance, "evaluate": cmd_evaluate,
            "features": cmd_features, "score-wer": cmd_score_wer}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code or EXIT_OK
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"arn-enhance: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingAborted, FloatingPointError) as exc:
        print(f"arn-enhance: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, WavError, ValueError, OSError, KeyError) as exc:
        print(f"arn-enhance: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
