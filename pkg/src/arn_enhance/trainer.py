"""Training loop, learning-rate schedule and checkpoint selection.

Each step mixes a fresh batch, runs the network, takes the PCM loss and an
Adam step. After every epoch the model is scored on a fixed validation set
by PCM loss and STOI. The best checkpoint under each criterion is kept.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, mixer, model, objective
from .audio_io import AudioBuffer, dequantize, list_wavs, quantize, read_wav, write_wav
from .autodiff import AdamState, NonFiniteGradientError, Tape, Tensor, adam_step, backward

log = logging.getLogger(__name__)

BEST_PCM = "best_pcm.arnc"
BEST_STOI = "best_stoi.arnc"
LAST = "last.arnc"
LOG_NAME = "train_log.jsonl"
CRITERIA = ("min_pcm", "max_stoi")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    utterances_per_epoch: int = 157036
    batch_size: int = 16
    utterance_len: int = 64000
    lr_init: float = 2e-4
    lr_final: float = 2e-5
    lr_fixed_epochs: int = 33
    seed: int = 0
    val_snr_db: float = -6.0
    target_rms: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    dtype: str = "float64"
    prefetch: int = 2
    keep_all: bool = False

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.lr_fixed_epochs < self.epochs:
            raise ValueError("need epochs >= 1 and 0 <= lr_fixed_epochs < epochs")
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.utterances_per_epoch < 1:
            raise ValueError("batch_size and utterances_per_epoch must be positive")

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.utterances_per_epoch // self.batch_size)


@dataclass(frozen=True)
class DataConfig:
    """Where training material comes from.

    ``source = synthetic`` generates speech-like signals and coloured noise;
    ``source = directories`` reads WAV folders.
    """

    source: str = "synthetic"
    train_seconds: float = 60.0
    utterance_seconds: float = 2.0
    noise_kinds: tuple = ("white", "pink")
    noise_seconds: float = 30.0
    valid_utterances: int = 8
    valid_seconds: float = 2.0
    clean_dir: str | None = None
    noise_dir: str | None = None
    valid_clean_dir: str | None = None
    valid_noise_dir: str | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_pcm: float
    val_stoi: float
    lr: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant for the first ``lr_fixed_epochs`` epochs, then geometric decay to ``lr_final``."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.lr_fixed_epochs:
        return cfg.lr_init
    frac = (epoch - cfg.lr_fixed_epochs) / (cfg.epochs - cfg.lr_fixed_epochs)
    return cfg.lr_init * (cfg.lr_final / cfg.lr_init) ** frac


def select_checkpoint(records, criterion: str) -> int:
    """Epoch chosen by ``min_pcm`` or ``max_stoi``; ties go to the later epoch."""
    if not records:
        raise ValueError("empty training log")
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    best = None
    for r in records:
        r = r if isinstance(r, EpochRecord) else EpochRecord(**r)
        if criterion == "min_pcm":
            better = best is None or r.val_pcm <= best.val_pcm
        else:
            better = best is None or r.val_stoi >= best.val_stoi
        if better:
            best = r
    return best.epoch


def read_log(path) -> list[EpochRecord]:
    with open(path) as fh:
        return [EpochRecord(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class ValidationItem:
    utt_id: str
    clean: AudioBuffer
    noisy: AudioBuffer


@dataclass
class CorpusSource:
    cleans: list
    noises: list
    validation: list = field(default_factory=list)


def synthetic_source(data: DataConfig, seed: int, val_snr_db: float, target_rms: float) -> CorpusSource:
    """Speech-like training and validation material generated from *seed*."""
    n_train = max(1, int(round(data.train_seconds / data.utterance_seconds)))
    cleans = [mixer.synth_speech_like(seed * 100003 + i, data.utterance_seconds) for i in range(n_train)]
    noises = [mixer.synth_noise(seed * 100003 + 50000 + k, data.noise_seconds, kind)
              for k, kind in enumerate(data.noise_kinds)]
    val_noises = [mixer.synth_noise(seed * 100003 + 60000 + k, data.noise_seconds, kind)
                  for k, kind in enumerate(data.noise_kinds)]
    valid = []
    for i in range(data.valid_utterances):
        rng = mixer.entry_rng(seed + 7919, i)
        s = mixer.synth_speech_like(seed * 100003 + 70000 + i, data.valid_seconds)
        noise = val_noises[i % len(val_noises)]
        seg, _ = mixer.fit_noise(noise.samples, len(s), rng)
        pair = mixer.mix_at_snr(s, s.with_samples(seg), val_snr_db, target_rms)
        valid.append(ValidationItem(f"val{i:03d}", pair.clean, pair.mixture))
    return CorpusSource(cleans, noises, valid)


def directory_source(data: DataConfig, seed: int, val_snr_db: float, target_rms: float) -> CorpusSource:
    if not data.clean_dir or not data.noise_dir:
        raise ValueError("directory source needs clean_dir and noise_dir")
    cleans = [read_wav(os.path.join(data.clean_dir, f)) for f in list_wavs(data.clean_dir)]
    noises = [read_wav(os.path.join(data.noise_dir, f)) for f in list_wavs(data.noise_dir)]
    if not cleans or not noises:
        raise ValueError("training directories contain no WAV files")
    valid = []
    vc = data.valid_clean_dir or data.clean_dir
    vn = data.valid_noise_dir or data.noise_dir
    vnoises = [read_wav(os.path.join(vn, f)) for f in list_wavs(vn)]
    for i, name in enumerate(list_wavs(vc)[: data.valid_utterances]):
        rng = mixer.entry_rng(seed + 7919, i)
        s = read_wav(os.path.join(vc, name))
        noise = vnoises[i % len(vnoises)]
        seg, _ = mixer.fit_noise(noise.samples, len(s), rng)
        pair = mixer.mix_at_snr(s, s.with_samples(seg), val_snr_db, target_rms)
        valid.append(ValidationItem(os.path.splitext(name)[0], pair.clean, pair.mixture))
    return CorpusSource(cleans, noises, valid)


def make_source(data: DataConfig, train_cfg: TrainConfig) -> CorpusSource:
    build = synthetic_source if data.source == "synthetic" else directory_source
    if data.source not in ("synthetic", "directories"):
        raise ValueError(f"unknown data source {data.source!r}")
    return build(data, train_cfg.seed, train_cfg.val_snr_db, train_cfg.target_rms)


def _through_wav(x: np.ndarray) -> np.ndarray:
    return dequantize(quantize(x))


def persist_validation(items: list, out_dir) -> list:
    """Write the validation set as WAVs and return it re-read from disk.

    Scoring the re-read signals makes logged validation metrics reproducible
    by running ``enhance`` and ``evaluate`` on these files.
    """
    dirs = {k: os.path.join(out_dir, "valid", k) for k in ("clean", "noisy")}
    for d in dirs.values():
        os.makedirs(d, exist_ok=True)
    out = []
    for item in items:
        name = item.utt_id + ".wav"
        write_wav(item.clean, os.path.join(dirs["clean"], name))
        write_wav(item.noisy, os.path.join(dirs["noisy"], name))
        out.append(ValidationItem(item.utt_id, read_wav(os.path.join(dirs["clean"], name)),
                                  read_wav(os.path.join(dirs["noisy"], name))))
    return out


def validate(params: dict, cfg: model.ArnConfig, items: list, loss_cfg: objective.LossConfig):
    """Mean PCM loss and mean STOI of the 16-bit enhanced validation signals."""
    losses, scores = [], []
    for item in items:
        enhanced = model.enhance(item.noisy, params, cfg)
        enhanced = enhanced.with_samples(_through_wav(enhanced.samples))
        losses.append(objective.pcm_loss(enhanced, item.clean, item.noisy, loss_cfg))
        scores.append(metrics.stoi(item.clean, enhanced))
    return float(np.mean(losses)), float(np.mean(scores))


class TrainingAborted(RuntimeError):
    pass


def _batches(mix: mixer.DynamicMixer, cfg: TrainConfig, epoch: int):
    """Yield the epoch's batches, produced ahead by a worker thread."""
    def make(step):
        rng = np.random.default_rng([cfg.seed, epoch, step])
        return mix.batch(rng, cfg.batch_size)

    if cfg.prefetch <= 0:
        for step in range(cfg.steps_per_epoch):
            yield make(step)
        return
    q: queue.Queue = queue.Queue(maxsize=cfg.prefetch)
    stop = threading.Event()

    def produce():
        for step in range(cfg.steps_per_epoch):
            if stop.is_set():
                return
            try:
                item = make(step)
            except Exception as exc:  # handed to the consumer
                item = exc
            q.put(item)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        for _ in range(cfg.steps_per_epoch):
            item = q.get()
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)


def train_step(params: dict, state: AdamState, batch, cfg: model.ArnConfig, train_cfg: TrainConfig,
               loss_cfg: objective.LossConfig, lr: float, rng) -> float:
    s, _, y = batch
    dtype = np.dtype(train_cfg.dtype)
    tensors = model.as_tensors(params, requires_grad=True)
    with Tape() as tape:
        out = model.arn_forward(Tensor(y.astype(dtype)), tensors, cfg, train=True, rng=rng)
        loss = objective.pcm_loss_tensor(out, s.astype(dtype), y.astype(dtype), loss_cfg)
    grads = backward(loss, tensors, tape)
    adam_step(params, grads, state, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps,
              train_cfg.clip_norm)
    return float(loss.data)


@dataclass
class TrainResult:
    records: list
    out_dir: str

    def checkpoint_path(self, criterion: str) -> str:
        return os.path.join(self.out_dir, BEST_PCM if criterion == "min_pcm" else BEST_STOI)


def train(train_cfg: TrainConfig, model_cfg: model.ArnConfig, source: CorpusSource, out_dir,
          loss_cfg: objective.LossConfig = objective.LossConfig(), init_seed: int | None = None,
          on_epoch=None) -> TrainResult:
    """Run the full schedule, writing checkpoints and ``train_log.jsonl`` into *out_dir*."""
    os.makedirs(out_dir, exist_ok=True)
    dtype = np.dtype(train_cfg.dtype)
    params = model.init_params(model_cfg, train_cfg.seed if init_seed is None else init_seed, dtype)
    state = AdamState()
    valid = persist_validation(source.validation, out_dir)
    mix = mixer.DynamicMixer(source.cleans, source.noises, train_cfg.utterance_len,
                             target_rms=train_cfg.target_rms)
    log_path = os.path.join(out_dir, LOG_NAME)
    open(log_path, "w").close()
    records: list[EpochRecord] = []
    best_pcm, best_stoi = math.inf, -math.inf
    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_at_epoch(epoch, train_cfg)
        t0 = time.perf_counter()
        losses = []
        for step, batch in enumerate(_batches(mix, train_cfg, epoch)):
            rng = np.random.default_rng([train_cfg.seed, epoch, step, 1])
            try:
                losses.append(train_step(params, state, batch, model_cfg, train_cfg, loss_cfg, lr, rng))
            except (FloatingPointError, NonFiniteGradientError) as exc:
                raise TrainingAborted(f"epoch {epoch} step {step}: {exc}; last good checkpoint kept "
                                      f"in {os.path.join(out_dir, LAST)}") from exc
        stored = {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}
        val_pcm, val_stoi = validate(stored, model_cfg, valid, loss_cfg) if valid else (math.nan, math.nan)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_pcm, val_stoi, lr, time.perf_counter() - t0)
        records.append(rec)
        with open(log_path, "a") as fh:
            fh.write(rec.to_json() + "\n")
        ckpt = model.Checkpoint(model_cfg, {k: v.astype(np.float32) for k, v in params.items()},
                                epoch, val_pcm, val_stoi)
        model.save_checkpoint(ckpt, os.path.join(out_dir, LAST))
        if train_cfg.keep_all:
            model.save_checkpoint(ckpt, os.path.join(out_dir, f"epoch{epoch:03d}.arnc"))
        if val_pcm <= best_pcm:
            best_pcm = val_pcm
            model.save_checkpoint(ckpt, os.path.join(out_dir, BEST_PCM))
        if val_stoi >= best_stoi:
            best_stoi = val_stoi
            model.save_checkpoint(ckpt, os.path.join(out_dir, BEST_STOI))
        log.info("epoch %d lr %.3g train %.4f val_pcm %.4f val_stoi %.4f (%.1fs)",
                 epoch, lr, rec.train_loss, val_pcm, val_stoi, rec.wall_time)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(records, os.fspath(out_dir))


def _coerce(value: str, kind):
    if kind is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if kind is tuple:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if value.strip().lower() in ("none", ""):
        return None
    return float(value) if kind is float else int(value) if kind is int else value.strip()


def _section(parser, name, cls):
    if not parser.has_section(name):
        return cls()
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in parser.items(name):
        if key not in hints:
            raise ValueError(f"[{name}] unknown key {key!r}")
        default = hints[key].default
        kind = type(default) if default is not None else str
        if key == "clip_norm":
            kind = float
        kwargs[key] = _coerce(raw, kind)
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    model: model.ArnConfig
    train: TrainConfig
    loss: objective.LossConfig
    data: DataConfig


def load_config(path) -> RunConfig:
    """Read an INI file with optional ``[model]``, ``[train]``, ``[loss]``, ``[data]`` sections."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    unknown = set(parser.sections()) - {"model", "train", "loss", "data"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(_section(parser, "model", model.ArnConfig), _section(parser, "train", TrainConfig),
                     _section(parser, "loss", objective.LossConfig), _section(parser, "data", DataConfig))
