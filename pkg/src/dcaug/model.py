"""Two-layer dense classifier with hand-written gradients, Adam and EMA.

The same architecture serves as label classifier and domain classifier;
only the output width differs. Parameters are plain numpy arrays held in
small dataclasses. ``step`` and ``ema_update`` write into those arrays in
place (fresh 200k-element buffers per step cost more than the maths); take
``copy()`` first when a snapshot has to survive an update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

_MAGIC = b"DCKP"
_PIXEL_SCALE = np.arange(256) / 127.5 - 1.0


@dataclass(frozen=True)
class ClassifierParams:
    """flatten -> dense(hidden, tanh) -> dense(classes)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    @property
    def input_size(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(t.shape for t in self.tensors)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors)

    @classmethod
    def from_tensors(cls, tensors) -> ClassifierParams:
        return cls(*(np.asarray(t, dtype=np.float64) for t in tensors))

    def map(self, fn, *others: ClassifierParams) -> ClassifierParams:
        return ClassifierParams.from_tensors(
            fn(*ts) for ts in zip(self.tensors, *(o.tensors for o in others))
        )

    def copy(self) -> ClassifierParams:
        return self.map(np.copy)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.flat().tobytes()).hexdigest()


def init_params(input_size: int, hidden: int, num_classes: int, rng: np.random.Generator) -> ClassifierParams:
    """Glorot-uniform weights, zero biases."""

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return ClassifierParams(
        glorot(input_size, hidden),
        np.zeros(hidden),
        glorot(hidden, num_classes),
        np.zeros(num_classes),
    )


def zeros_like(p: ClassifierParams) -> ClassifierParams:
    return p.map(np.zeros_like)


def as_features(x: np.ndarray) -> np.ndarray:
    """Centre 8-bit pixels to [-1, 1]; anything else passes through.

    Converting once lets several models score the same batch.
    """
    x = np.asarray(x)
    if x.dtype != np.uint8:
        return x
    return _lookup(np.ascontiguousarray(x).reshape(-1), _PIXEL_SCALE).reshape(x.shape)


@njit(cache=True)
def _lookup(x, table):
    out = np.empty(x.size)
    for i in range(x.size):
        out[i] = table[x[i]]
    return out


def _features(p: ClassifierParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Flatten images (or already-flat features) into an (N, D) float matrix.

    8-bit images are centred to [-1, 1]; float input is used as given.
    """
    x = as_features(x)
    single = x.ndim in (1, 3)
    if single:
        x = x[None]
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != p.input_size:
        raise ValueError(f"input has {x.shape[1]} features, model expects {p.input_size}")
    return x, single


def forward(p: ClassifierParams, x: np.ndarray) -> np.ndarray:
    """Logits for one image ``(H, W, 3)`` or a batch ``(N, H, W, 3)``."""
    feats, single = _features(p, x)
    logits = np.tanh(feats @ p.w1 + p.b1) @ p.w2 + p.b2
    return logits[0] if single else logits


def predict(p: ClassifierParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(p, x), axis=-1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> np.ndarray | float:
    """Per-sample ``-log softmax(logits)[label]`` with max-shift stabilisation."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        return float(-logp[int(labels)])
    return -np.take_along_axis(logp, labels.reshape(-1, 1).astype(np.int64), axis=1)[:, 0]


def loss_and_grad(p: ClassifierParams, x: np.ndarray, labels) -> tuple[float, ClassifierParams]:
    """Mean cross-entropy over the batch and its gradient for every tensor."""
    feats, _ = _features(p, x)
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    n = feats.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"{labels.shape[0]} labels for {n} inputs")
    hidden = np.tanh(feats @ p.w1 + p.b1)
    logits = hidden @ p.w2 + p.b2
    losses = cross_entropy(logits, labels)

    dlogits = np.exp(log_softmax(logits))
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dw2 = hidden.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dpre = (dlogits @ p.w2.T) * (1.0 - hidden**2)
    dw1 = feats.T @ dpre
    db1 = dpre.sum(axis=0)
    return float(np.mean(losses)), ClassifierParams(dw1, db1, dw2, db2)


def backward(p: ClassifierParams, x: np.ndarray, labels) -> ClassifierParams:
    return loss_and_grad(p, x, labels)[1]


@dataclass
class OptimState:
    m: ClassifierParams
    v: ClassifierParams
    t: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def copy(self) -> OptimState:
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_init(p: ClassifierParams, lr: float = 1e-3, weight_decay: float = 0.0) -> OptimState:
    return OptimState(zeros_like(p), zeros_like(p), 0, lr, weight_decay=weight_decay)


def _check_congruent(a: ClassifierParams, b: ClassifierParams) -> None:
    if a.shapes != b.shapes:
        raise ValueError(f"shape mismatch: {a.shapes} vs {b.shapes}")


def _flat(a: np.ndarray) -> np.ndarray:
    """1-D view sharing memory with ``a``; the kernels write through it."""
    if not a.flags.c_contiguous:
        raise ValueError("parameter tensors must be C-contiguous")
    return a.reshape(-1)


@njit(cache=True, fastmath=True)
def _adam_kernel(p, g, m, v, lr_t, b1, b2, c2, eps, wd):
    for i in range(p.size):
        gi = g[i] + wd * p[i]
        m[i] = b1 * m[i] + (1 - b1) * gi
        v[i] = b2 * v[i] + (1 - b2) * (gi * gi)
        p[i] -= lr_t * m[i] / (np.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def _ema_kernel(shadow, src, beta):
    for i in range(shadow.size):
        shadow[i] = beta * shadow[i] + (1.0 - beta) * src[i]


def step(p: ClassifierParams, g: ClassifierParams, s: OptimState) -> tuple[ClassifierParams, OptimState]:
    """One bias-corrected Adam update, in place on ``p`` and ``s``.

    Weight decay is classic L2, folded into the gradient.
    """
    _check_congruent(p, g)
    _check_congruent(p, s.m)
    b1, b2 = s.betas
    s.t += 1
    lr_t = s.lr / (1 - b1**s.t)
    c2 = 1 - b2**s.t
    for pi, gi, mi, vi in zip(p.tensors, g.tensors, s.m.tensors, s.v.tensors):
        _adam_kernel(_flat(pi), np.ravel(gi), _flat(mi), _flat(vi), lr_t, b1, b2, c2, s.eps, s.weight_decay)
    return p, s


@dataclass
class EmaState:
    shadow: ClassifierParams
    beta: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"EMA beta must be in [0, 1), got {self.beta}")

    @classmethod
    def of(cls, p: ClassifierParams, beta: float = 0.999) -> EmaState:
        """Shadow starts as a copy of the source."""
        return cls(p.copy(), beta)

    def copy(self) -> EmaState:
        return EmaState(self.shadow.copy(), self.beta)


def ema_update(e: EmaState, p: ClassifierParams) -> EmaState:
    """``shadow <- (1 - beta) * source + beta * shadow``, in place."""
    _check_congruent(e.shadow, p)
    for si, xi in zip(e.shadow.tensors, p.tensors):
        _ema_kernel(_flat(si), np.ravel(xi), e.beta)
    return e


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    def window_mean(self, fraction: float = 0.2) -> float:
        n = max(1, int(round(len(self.losses) * fraction)))
        return float(np.mean(self.losses[-n:]))


def save_checkpoint(p: ClassifierParams, path: str | Path) -> None:
    """Shape header then little-endian float32 payload, tensor by tensor."""
    header = [_MAGIC, struct.pack("<I", len(p.tensors))]
    for t in p.tensors:
        header.append(struct.pack("<I", t.ndim))
        header.append(struct.pack(f"<{t.ndim}I", *t.shape))
    payload = b"".join(t.astype("<f4").tobytes() for t in p.tensors)
    Path(path).write_bytes(b"".join(header) + payload)


def load_checkpoint(path: str | Path) -> ClassifierParams:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 4
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", buf, pos))
        pos += 4 * ndim
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape))
        tensors.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape))
        pos += 4 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return ClassifierParams.from_tensors(tensors)
