"""The attentive recurrent network (ARN) and its checkpoint format.

Waveform frames are projected to a latent width, passed through a stack of
blocks, projected back to frame length and overlap-added::

    frames (T, L) -> Linear -> [BLSTM -> +MHSA(LN) -> +FFN(LN)] x blocks -> Linear -> OLA

Block internals (pre-norm residual sublayers, tanh feedforward, no
positional encoding) are a reconstruction; see ``ArnConfig`` for knobs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .audio_io import AudioBuffer
from .autodiff import Tensor, ops

CHECKPOINT_MAGIC = b"ARNC"
CHECKPOINT_VERSION = 1
_FOOTER = struct.Struct("<Idd")


@dataclass(frozen=True)
class ArnConfig:
    frame_len: int = 256
    hop: int = 32
    latent: int = 1024
    num_blocks: int = 4
    heads: int = 8
    ffn_expansion: int = 4
    dropout: float = 0.05

    def __post_init__(self):
        if self.frame_len <= 0 or not 0 < self.hop <= self.frame_len:
            raise ValueError(f"invalid framing L={self.frame_len}, H={self.hop}")
        if self.latent % 2:
            raise ValueError(f"latent width must be even, got {self.latent}")
        if self.heads <= 0 or self.latent % self.heads:
            raise ValueError(f"latent width {self.latent} not divisible by {self.heads} heads")
        if self.num_blocks < 0 or self.ffn_expansion <= 0:
            raise ValueError("num_blocks must be >= 0 and ffn_expansion > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def toy(cls, **overrides) -> "ArnConfig":
        base = dict(frame_len=16, hop=4, latent=16, num_blocks=2, heads=2, ffn_expansion=4, dropout=0.0)
        base.update(overrides)
        return cls(**base)

    @property
    def hidden(self) -> int:
        return self.latent // 2


def param_shapes(cfg: ArnConfig) -> dict[str, tuple]:
    """Parameter names and shapes, in canonical (serialization) order."""
    n, h, L = cfg.latent, cfg.hidden, cfg.frame_len
    shapes = {"encoder.W": (L, n), "encoder.b": (n,)}
    for k in range(cfg.num_blocks):
        p = f"block{k}."
        for d in ("fwd", "bwd"):
            shapes[p + f"lstm_{d}.W_ih"] = (n, 4 * h)
            shapes[p + f"lstm_{d}.W_hh"] = (h, 4 * h)
            shapes[p + f"lstm_{d}.b"] = (4 * h,)
        shapes[p + "ln1.gain"] = (n,)
        shapes[p + "ln1.bias"] = (n,)
        for w in ("W_q", "W_k", "W_v", "W_o"):
            shapes[p + "attn." + w] = (n, n)
        shapes[p + "ln2.gain"] = (n,)
        shapes[p + "ln2.bias"] = (n,)
        shapes[p + "ffn.W1"] = (n, cfg.ffn_expansion * n)
        shapes[p + "ffn.W2"] = (cfg.ffn_expansion * n, n)
    shapes["decoder.W"] = (n, L)
    shapes["decoder.b"] = (L,)
    return shapes


def _fan_in(name: str, cfg: ArnConfig) -> int:
    if name.startswith("encoder"):
        return cfg.frame_len
    if ".lstm_" in name:
        return cfg.hidden
    if name.endswith("ffn.W2"):
        return cfg.ffn_expansion * cfg.latent
    return cfg.latent


def init_params(cfg: ArnConfig, seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget-gate bias +1; unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            k = 1.0 / math.sqrt(_fan_in(name, cfg))
            arr = rng.uniform(-k, k, size=shape)
            if ".lstm_" in name and name.endswith(".b"):
                arr[cfg.hidden : 2 * cfg.hidden] += 1.0
        params[name] = arr.astype(dtype)
    return params


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def bilstm_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Forward and backward LSTMs over the frame axis, concatenated to width N."""
    fwd = ops.lstm(x, params[prefix + "lstm_fwd.W_ih"], params[prefix + "lstm_fwd.W_hh"],
                   params[prefix + "lstm_fwd.b"])
    bwd = ops.lstm(x, params[prefix + "lstm_bwd.W_ih"], params[prefix + "lstm_bwd.W_hh"],
                   params[prefix + "lstm_bwd.b"], reverse=True)
    return ops.concat([fwd, bwd], axis=-1)


def self_attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                   return_weights: bool = False):
    """Unmasked multi-head scaled dot-product attention over all frames."""
    b, t, n = x.shape
    d = n // heads

    def split(w):
        proj = ops.reshape(ops.matmul(x, params[prefix + w]), (b, t, heads, d))
        return ops.transpose(proj, (0, 2, 1, 3))

    q, k, v = split("attn.W_q"), split("attn.W_k"), split("attn.W_v")
    # scaling q is cheaper than scaling the T x T scores
    scores = ops.matmul(ops.scale(q, 1.0 / math.sqrt(d)), ops.transpose(k, (0, 1, 3, 2)))
    weights = ops.softmax(scores)
    ctx = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (b, t, n))
    out = ops.matmul(ctx, params[prefix + "attn.W_o"])
    return (out, weights) if return_weights else out


def feedforward(x: Tensor, params: dict[str, Tensor], prefix: str, p: float, train: bool, rng) -> Tensor:
    hidden = ops.dropout(ops.tanh(ops.matmul(x, params[prefix + "ffn.W1"])), p, train, rng)
    return ops.matmul(hidden, params[prefix + "ffn.W2"])


def arn_block(x: Tensor, params: dict[str, Tensor], index: int, cfg: ArnConfig,
              train: bool = False, rng=None) -> Tensor:
    p = f"block{index}."
    h = bilstm_forward(x, params, p)
    normed = ops.layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
    a = ops.add(h, self_attention(normed, params, p, cfg.heads))
    normed = ops.layer_norm(a, params[p + "ln2.gain"], params[p + "ln2.bias"])
    return ops.add(a, feedforward(normed, params, p, cfg.dropout, train, rng))


def arn_forward(noisy, params: dict[str, Tensor], cfg: ArnConfig, train: bool = False, rng=None) -> Tensor:
    """Enhance a ``(B, M)`` batch of waveforms; the output has the same shape."""
    noisy = noisy if isinstance(noisy, Tensor) else Tensor(noisy)
    if noisy.ndim != 2:
        raise ValueError(f"expected a (batch, samples) input, got {noisy.shape}")
    m = noisy.shape[1]
    if m < cfg.frame_len:
        raise ValueError(f"input of {m} samples is shorter than one frame ({cfg.frame_len})")
    frames = ops.frame(noisy, cfg.frame_len, cfg.hop)
    x = ops.bias_add(ops.matmul(frames, params["encoder.W"]), params["encoder.b"])
    for k in range(cfg.num_blocks):
        x = arn_block(x, params, k, cfg, train, rng)
    out = ops.bias_add(ops.matmul(x, params["decoder.W"]), params["decoder.b"])
    return ops.overlap_add(out, cfg.hop, m)


def enhance(noisy: AudioBuffer, params: dict[str, np.ndarray], cfg: ArnConfig) -> AudioBuffer:
    """Eval-mode enhancement of one utterance."""
    dtype = next(iter(params.values())).dtype
    x = noisy.samples.astype(dtype)[None, :]
    out = arn_forward(Tensor(x), as_tensors(params), cfg, train=False)
    return noisy.with_samples(out.data[0].astype(np.float64))


def num_parameters(cfg: ArnConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@dataclass
class Checkpoint:
    config: ArnConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    val_pcm: float = float("nan")
    val_stoi: float = float("nan")

    def float_params(self, dtype=np.float64) -> dict[str, np.ndarray]:
        return {k: v.astype(dtype) for k, v in self.params.items()}


def _config_bytes(cfg: ArnConfig) -> bytes:
    vals = asdict(cfg)
    return struct.pack("<6If", *(vals[f.name] for f in fields(ArnConfig)))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the binary checkpoint; parameters are stored as little-endian f32."""
    expected = param_shapes(ckpt.config)
    if list(ckpt.params) != list(expected):
        raise ValueError("checkpoint parameters do not match the configuration")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _config_bytes(ckpt.config)]
    for name, arr in ckpt.params.items():
        if arr.shape != expected[name]:
            raise ValueError(f"{name}: shape {arr.shape} != {expected[name]}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    chunks.append(_FOOTER.pack(ckpt.epoch, ckpt.val_pcm, ckpt.val_stoi))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ARN checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    raw_cfg = struct.unpack_from("<6If", data, 8)
    names = [f.name for f in fields(ArnConfig)]
    cfg_vals = dict(zip(names, raw_cfg))
    cfg_vals["dropout"] = float(str(np.float32(cfg_vals["dropout"])))  # shortest f32 repr: 0.05, not 0.0500000007
    cfg = ArnConfig(**cfg_vals)
    pos = 8 + struct.calcsize("<6If")
    end = len(data) - _FOOTER.size
    params = {}
    while pos < end:
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    if pos != end:
        raise ValueError(f"{path}: truncated checkpoint")
    expected = param_shapes(cfg)
    if list(params) != list(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise ValueError(f"{path}: parameters do not match the stored configuration")
    epoch, val_pcm, val_stoi = _FOOTER.unpack_from(data, end)
    return Checkpoint(cfg, params, epoch, val_pcm, val_stoi)


def quantize_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round to the f32 values a checkpoint would store, keeping the working dtype."""
    return {k: v.astype(np.float32).astype(v.dtype) for k, v in params.items()}
