"""Two-layer face/voice encoders, the shared identity classifier, and SGD.

Checkpoint layout (little-endian)::

    8 bytes   magic b"VFCKPT01"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: dims {d_in, H, D, M}, iteration, seed,
              order (block names), extra (keys sorted)
    blocks    float64, C order, in PARAM_ORDER:
              face.W1 (d_in x H), face.b1 (H), face.W2 (H x D), face.b2 (D),
              voice.W1, voice.b1, voice.W2, voice.b2, W (D x M)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Modality
from .rng import Rng

CKPT_MAGIC = b"VFCKPT01"
PARAM_ORDER = (
    "face.W1", "face.b1", "face.W2", "face.b2",
    "voice.W1", "voice.b1", "voice.W2", "voice.b2",
    "W",
)
DECAYED = frozenset({"face.W1", "face.W2", "voice.W1", "voice.W2", "W"})


@dataclass
class MLPParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class EncoderParams:
    face: MLPParams
    voice: MLPParams
    W: np.ndarray

    @property
    def dims(self) -> dict[str, int]:
        d_in, H = self.face.W1.shape
        D, M = self.W.shape
        return {"d_in": d_in, "H": H, "D": D, "M": M}

    def encoder(self, modality: Modality) -> MLPParams:
        return self.face if modality == Modality.FACE else self.voice

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mlp in (("face", self.face), ("voice", self.voice)):
            for k in ("W1", "b1", "W2", "b2"):
                out[f"{prefix}.{k}"] = getattr(mlp, k)
        out["W"] = self.W
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        def mlp(prefix):
            return MLPParams(*(arrays[f"{prefix}.{k}"] for k in ("W1", "b1", "W2", "b2")))
        return cls(mlp("face"), mlp("voice"), arrays["W"])

    def copy(self) -> "EncoderParams":
        return EncoderParams.from_named({k: v.copy() for k, v in self.named().items()})

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams.from_named({k: np.zeros_like(v) for k, v in self.named().items()})


def init(dims: dict[str, int], rng: Rng) -> EncoderParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    d_in, H, D, M = dims["d_in"], dims["H"], dims["D"], dims["M"]
    if min(d_in, H, D, M) < 1:
        raise ValueError(f"all dims must be >= 1, got {dims}")

    def uni(shape, fan_in):
        a = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-a, a, shape)

    def mlp():
        return MLPParams(uni((d_in, H), d_in), np.zeros(H), uni((H, D), H), np.zeros(D))

    face = mlp()
    voice = mlp()
    return EncoderParams(face, voice, uni((D, M), D))


@dataclass
class ForwardCache:
    modality: Modality
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    nonlinear: bool = True


def forward(params: EncoderParams, x: np.ndarray, modality: Modality,
            nonlinear: bool = True) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.face.W1.shape[0]:
        raise ValueError(f"expected N x {params.face.W1.shape[0]} features, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input features")
    enc = params.encoder(modality)
    pre = x @ enc.W1 + enc.b1
    hidden = np.maximum(pre, 0.0) if nonlinear else pre
    return hidden @ enc.W2 + enc.b2, ForwardCache(modality, x, pre, hidden, nonlinear)


def embed(params: EncoderParams, x: np.ndarray, modality: Modality) -> np.ndarray:
    return forward(params, x, modality)[0]


def backward(params: EncoderParams, cache: ForwardCache, grad_emb: np.ndarray) -> MLPParams:
    """Gradients of sum(grad_emb * embeddings) w.r.t. the cached encoder."""
    enc = params.encoder(cache.modality)
    if grad_emb.shape != (cache.x.shape[0], enc.W2.shape[1]):
        raise ValueError(f"grad shape {grad_emb.shape} does not match embeddings "
                         f"{(cache.x.shape[0], enc.W2.shape[1])}")
    gW2 = cache.hidden.T @ grad_emb
    gb2 = grad_emb.sum(axis=0)
    g_hidden = grad_emb @ enc.W2.T
    g_pre = g_hidden * (cache.pre > 0) if cache.nonlinear else g_hidden
    gW1 = cache.x.T @ g_pre
    gb1 = g_pre.sum(axis=0)
    return MLPParams(gW1, gb1, gW2, gb2)


@dataclass
class OptimizerState:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: EncoderParams, grads: EncoderParams, opt: OptimizerState) -> EncoderParams:
    """buf <- momentum*buf + grad + wd*param (weights only); param <- param - lr*buf."""
    new = {}
    g = grads.named()
    for name, p in params.named().items():
        if g[name].shape != p.shape:
            raise ValueError(f"{name}: grad shape {g[name].shape} != param shape {p.shape}")
        step = g[name] + opt.weight_decay * p if name in DECAYED else g[name]
        buf = opt.buffers.get(name)
        buf = step.copy() if buf is None else opt.momentum * buf + step
        opt.buffers[name] = buf
        new[name] = p - opt.lr * buf
    return EncoderParams.from_named(new)


def lr_at(base_lr: float, t: int, milestones=(2000, 3000), factor: float = 0.1) -> float:
    """Step schedule: multiply by ``factor`` once for every milestone <= t."""
    return base_lr * factor ** sum(1 for m in milestones if t >= m)


def save_checkpoint(path: str | Path, params: EncoderParams, iteration: int, seed: int,
                    extra: dict | None = None) -> None:
    header = {"dims": params.dims, "iteration": int(iteration), "seed": int(seed),
              "order": list(PARAM_ORDER), "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    named = params.named()
    body = b"".join(np.ascontiguousarray(named[k], dtype="<f8").tobytes() for k in PARAM_ORDER)
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + body)


def _shapes(dims):
    d_in, H, D, M = dims["d_in"], dims["H"], dims["D"], dims["M"]
    enc = {"W1": (d_in, H), "b1": (H,), "W2": (H, D), "b2": (D,)}
    out = {f"{p}.{k}": s for p in ("face", "voice") for k, s in enc.items()}
    out["W"] = (D, M)
    return out


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a vfalign checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    shapes = _shapes(header["dims"])
    off = 16 + hlen
    arrays = {}
    for name in header["order"]:
        n = int(np.prod(shapes[name]))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shapes[name]).copy()
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: trailing or missing bytes")
    return EncoderParams.from_named(arrays), header
