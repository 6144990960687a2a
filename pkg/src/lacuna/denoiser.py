"""Conditional denoiser x_theta(t, M_ctx * x_t, M_ctx).

A small residual convolutional network.  The pre-masked field and the context
mask are stacked along channels, lifted by a 1x1 convolution, passed through
residual blocks whose inner activations are modulated per sample by an
embedding of t, and projected back to field channels by a zero-initialised
1x1 head.  Frames of a trajectory are expected to be folded into channels by
the caller.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    field_channels: int
    hidden_channels: int = 32
    n_blocks: int = 2
    kernel: int | tuple = 3
    time_embed_dim: int = 32
    time_hidden: int = 64
    padding: str = "periodic"
    dtype: str = "float32"

    def __post_init__(self):
        k = self.kernel
        k = (int(k), int(k)) if np.isscalar(k) else tuple(int(v) for v in k)
        object.__setattr__(self, "kernel", k)
        for name in ("field_channels", "hidden_channels", "n_blocks", "time_embed_dim", "time_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if len(k) != 2 or min(k) < 1 or k[0] % 2 == 0 or k[1] % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.padding not in ("periodic", "zero"):
            raise ConfigError(f"unknown padding {self.padding!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self):
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(cfg: DenoiserConfig) -> dict:
    """Ordered name -> shape for every trainable tensor."""
    C, F, kh, kw = cfg.hidden_channels, cfg.field_channels, *cfg.kernel
    E, T = cfg.time_embed_dim, cfg.time_hidden
    shapes = {
        "lift.w": (C, 2 * F, 1, 1), "lift.b": (C,),
        "temb.w1": (E, T), "temb.b1": (T,),
        "temb.w2": (T, T), "temb.b2": (T,),
    }
    for i in range(cfg.n_blocks):
        shapes[f"block{i}.conv1.w"] = (C, C, kh, kw)
        shapes[f"block{i}.conv1.b"] = (C,)
        shapes[f"block{i}.scale.w"] = (T, C)
        shapes[f"block{i}.scale.b"] = (C,)
        shapes[f"block{i}.shift.w"] = (T, C)
        shapes[f"block{i}.shift.b"] = (C,)
        shapes[f"block{i}.conv2.w"] = (C, C, kh, kw)
        shapes[f"block{i}.conv2.b"] = (C,)
    shapes["head.w"] = (F, C, 1, 1)
    shapes["head.b"] = (F,)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    """Closed form of ``sum(prod(shape))`` over :func:`param_shapes`."""
    C, F, kh, kw = cfg.hidden_channels, cfg.field_channels, *cfg.kernel
    E, T = cfg.time_embed_dim, cfg.time_hidden
    lift = 2 * F * C + C
    temb = E * T + T + T * T + T
    block = 2 * (C * C * kh * kw + C) + 2 * (T * C + C)
    head = C * F + F
    return lift + temb + cfg.n_blocks * block + head


def init(cfg: DenoiserConfig, rng) -> dict:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head.") or name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape)
            continue
        # weights: conv (out, in, kh, kw) fan_in = in*kh*kw; linear (in, out) fan_in = in
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        std = np.sqrt(2.0 / fan_in)
        if ".scale." in name or ".shift." in name:
            std *= 0.1  # start near identity modulation
        params[name] = rng.standard_normal(shape) * std
    return {k: v.astype(cfg.dtype) for k, v in params.items()}


def time_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def apply(cfg: DenoiserConfig, p: dict, t, masked_input, ctx_mask) -> tc.Tensor:
    """Differentiable forward on a batch.

    ``p`` maps names to tensors (or arrays); masked_input and ctx_mask are
    (B, F, H, W); t is a scalar or a length-B vector.
    """
    x = np.asarray(masked_input)
    m = np.asarray(ctx_mask)
    if x.ndim != 4 or x.shape[1] != cfg.field_channels:
        raise ShapeError(f"expected (B, {cfg.field_channels}, H, W) input, got {x.shape}")
    if m.shape != x.shape:
        raise ShapeError(f"ctx_mask shape {m.shape} != input shape {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    dt = np.dtype(cfg.dtype)
    pad = cfg.padding

    emb = tc.as_tensor(time_features(t, cfg.time_embed_dim).astype(dt))
    temb = tc.gelu(tc.linear(emb, p["temb.w1"], p["temb.b1"]))
    temb = tc.gelu(tc.linear(temb, p["temb.w2"], p["temb.b2"]))

    inp = tc.as_tensor(np.concatenate([x, m], axis=1).astype(dt))
    h = tc.conv2d(inp, p["lift.w"], p["lift.b"], padding=pad)
    for i in range(cfg.n_blocks):
        pre = f"block{i}."
        r = tc.conv2d(tc.gelu(h), p[pre + "conv1.w"], p[pre + "conv1.b"], padding=pad)
        scale = tc.linear(temb, p[pre + "scale.w"], p[pre + "scale.b"])
        shift = tc.linear(temb, p[pre + "shift.w"], p[pre + "shift.b"])
        r = tc.modulate(r, scale, shift)
        r = tc.conv2d(tc.gelu(r), p[pre + "conv2.w"], p[pre + "conv2.b"], padding=pad)
        h = h + r
    return tc.conv2d(tc.gelu(h), p["head.w"], p["head.b"], padding=pad)


def forward(cfg: DenoiserConfig, params: dict, t, masked_input, ctx_mask) -> np.ndarray:
    """Numpy-in, numpy-out forward; accepts a single (F, H, W) field or a batch."""
    x = np.asarray(masked_input)
    single = x.ndim == 3
    if single:
        x, ctx_mask = x[None], np.asarray(ctx_mask)[None]
    out = apply(cfg, params, t, x, ctx_mask).data
    return out[0] if single else out


def as_model(cfg: DenoiserConfig, params: dict):
    """Wrap parameters as ``model(t, masked_input, ctx_mask) -> x0 estimate``."""
    def model(t, masked_input, ctx_mask):
        return forward(cfg, params, t, masked_input, ctx_mask)
    return model


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, then PFLD tensors


_CKPT_MAGIC = b"LCKP"


def save_checkpoint(path, cfg: DenoiserConfig, params: dict, schedule_kind="cosine_vp", extra=None):
    from .pdegen import encode_array

    names = list(param_shapes(cfg))
    header = {
        "config": cfg.to_dict(),
        "schedule": schedule_kind,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(hb).to_bytes(4, "little"))
        fh.write(hb)
        for n in names:
            fh.write(encode_array(params[n]))


def load_checkpoint(path):
    """Returns (config, params, header)."""
    from .pdegen import decode_array_stream

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint")
    n = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8:8 + n])
    cfg = DenoiserConfig.from_dict(header["config"])
    arrays = decode_array_stream(blob[8 + n:])
    params = {}
    for spec, arr in zip(header["tensors"], arrays):
        if list(arr.shape) != spec["shape"]:
            raise ShapeError(f"checkpoint tensor {spec['name']} has shape {arr.shape}")
        params[spec["name"]] = arr
    if len(params) != len(param_shapes(cfg)):
        raise ShapeError("checkpoint is missing tensors")
    return cfg, params, header
