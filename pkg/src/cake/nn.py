"""Dense two-hidden-layer MLP with hand-written backpropagation.

Architecture ``d_in -> h -> h -> d_out`` with tanh hidden layers. The head is
one of ``softmax`` (classifier), ``sigmoid`` (discriminator, ``d_out == 1``),
``linear``, ``residual`` (``out = x + logits``) or ``tanh_residual``
(``out = tanh(atanh(x) + logits)``, a residual that keeps outputs in (-1, 1);
used by style generators).
All arrays are float64 numpy arrays; a "Matrix" is a 2-d ndarray.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DimensionError, NonFiniteError, StaleCacheError

HEADS = ("softmax", "sigmoid", "linear", "residual", "tanh_residual")
ATANH_CLIP = 1.0 - 1e-6
CE_FLOOR = 1e-300
PROB_FLOOR = 1e-12


def _finite(op, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(op)


@dataclass
class MlpModel:
    weights: list
    biases: list
    head: str = "softmax"
    seed: int | None = None
    version: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head in ("residual", "tanh_residual") and self.d_in != self.d_out:
            raise DimensionError("residual head needs d_in == d_out")

    @property
    def arch(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        """``[W1, b1, W2, b2, W3, b3]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def clone(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.head, self.seed, self.version)


def init_mlp(d_in, hidden, d_out, seed=0, head="softmax", zero_last=False) -> MlpModel:
    """Glorot-uniform weights, zero biases. ``zero_last`` zeroes the output layer
    (a residual generator then starts as the identity map)."""
    rng = np.random.default_rng(seed)
    sizes = [d_in, hidden, hidden, d_out]
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (a + b))
        w = rng.uniform(-lim, lim, size=(a, b))
        if zero_last and i == 2:
            w[:] = 0.0
        weights.append(w)
        biases.append(np.zeros(b))
    return MlpModel(weights, biases, head, seed)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Cache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    version: int
    model_id: int


@dataclass
class Forward:
    features: np.ndarray
    logits: np.ndarray
    out: np.ndarray
    cache: Cache

    @property
    def probs(self) -> np.ndarray:
        return self.out


def forward(model: MlpModel, batch: np.ndarray) -> Forward:
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[1] != model.d_in:
        raise DimensionError(f"batch has {x.shape[1]} columns, model expects {model.d_in}")
    (w1, w2, w3), (b1, b2, b3) = model.weights, model.biases
    h1 = np.tanh(x @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    logits = h2 @ w3 + b3
    if model.head == "softmax":
        out = softmax(logits)
    elif model.head == "sigmoid":
        out = sigmoid(logits)
    elif model.head == "residual":
        out = x + logits
    elif model.head == "tanh_residual":
        out = np.tanh(np.arctanh(np.clip(x, -ATANH_CLIP, ATANH_CLIP)) + logits)
    else:
        out = logits
    _finite("forward", out)
    return Forward(h2, logits, out, Cache(x, h1, h2, model.version, id(model)))


@dataclass
class Gradients:
    params: list
    dinput: np.ndarray | None = None

    def __add__(self, other: "Gradients") -> "Gradients":
        if other is None:
            return self
        din = None
        if self.dinput is not None and other.dinput is not None:
            din = self.dinput + other.dinput
        return Gradients([a + b for a, b in zip(self.params, other.params)], din)

    __radd__ = __add__

    def scale(self, s: float) -> "Gradients":
        return Gradients([s * g for g in self.params], None if self.dinput is None else s * self.dinput)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.params])

    def norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.params)))


def zero_gradients(model: MlpModel) -> Gradients:
    return Gradients([np.zeros_like(p) for p in model.params])


def backward(model: MlpModel, cache: Cache, dlogits: np.ndarray, dfeatures: np.ndarray | None = None) -> Gradients:
    """Gradients given upstream gradients w.r.t. the pre-head ``logits`` and,
    optionally, the last hidden ``features``.

    ``dlogits`` is always w.r.t. the pre-head logits (see
    :func:`output_grad_to_logits`). For the residual heads the skip path adds
    its share to ``dinput``.
    """
    if cache.version != model.version or cache.model_id != id(model):
        raise StaleCacheError("cache was produced by a different model state")
    (w1, w2, w3) = model.weights
    dlogits = np.asarray(dlogits, dtype=np.float64)
    dw3 = cache.h2.T @ dlogits
    db3 = dlogits.sum(axis=0)
    dh2 = dlogits @ w3.T
    if dfeatures is not None:
        dh2 = dh2 + dfeatures
    da2 = dh2 * (1.0 - cache.h2 ** 2)
    dw2 = cache.h1.T @ da2
    db2 = da2.sum(axis=0)
    dh1 = da2 @ w2.T
    da1 = dh1 * (1.0 - cache.h1 ** 2)
    dw1 = cache.x.T @ da1
    db1 = da1.sum(axis=0)
    dx = da1 @ w1.T
    if model.head == "residual":
        dx = dx + dlogits
    elif model.head == "tanh_residual":
        inside = np.abs(cache.x) < ATANH_CLIP
        dx = dx + np.where(inside, dlogits / (1.0 - np.where(inside, cache.x, 0.0) ** 2), 0.0)
    grads = [dw1, db1, dw2, db2, dw3, db3]
    _finite("backward", *grads)
    return Gradients(grads, dx)


def output_grad_to_logits(fwd: Forward, dout: np.ndarray, head: str) -> np.ndarray:
    """Chain a gradient w.r.t. the head output back to the logits."""
    if head in ("linear", "residual"):
        return dout
    if head == "tanh_residual":
        return dout * (1.0 - fwd.out ** 2)
    if head == "sigmoid":
        return dout * fwd.out * (1.0 - fwd.out)
    raise ValueError("softmax outputs are handled by the loss functions")


# -- losses ----------------------------------------------------------------

@dataclass
class LossResult:
    loss: float
    dlogits: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def cross_entropy(probs: np.ndarray, labels, weights=None) -> LossResult:
    """Weighted CE ``-sum w_i log p_i[y_i] / sum w_i`` and its gradient w.r.t.
    the softmax logits, ``w_i (p_i - onehot_i) / sum w``."""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("labels must be n class indices in [0, K)")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("sample weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("sample weights sum to zero")
    p_true = probs[np.arange(n), labels]
    clamped = int(np.count_nonzero(p_true < CE_FLOOR))
    loss = -float((w * np.log(np.maximum(p_true, CE_FLOOR))).sum() / total)
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d *= (w / total)[:, None]
    return LossResult(loss, d, {"clamped": clamped})


def kl_divergence(p, q) -> float:
    """``sum p log(p/q)`` with ``q`` clamped at 1e-12; ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probability vectors must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-8 or abs(q.sum() - 1.0) > 1e-8:
        raise ValueError("probability vectors must sum to 1")
    q = np.maximum(q, PROB_FLOOR)
    mask = p > 0
    return float(max(0.0, np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


# -- optimiser ---------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: list
    learning_rate: float
    momentum: float = 0.9


def init_optimizer(model: MlpModel, learning_rate: float, momentum: float = 0.9) -> OptimizerState:
    return OptimizerState([np.zeros_like(p) for p in model.params], learning_rate, momentum)


def sgd_step(model: MlpModel, grads: Gradients, state: OptimizerState) -> None:
    """``v <- m v - lr g``; ``theta <- theta + v``, in place.

    Non-finite gradients abort the step before anything is modified.
    """
    params = model.params
    if len(grads.params) != len(params) or any(g.shape != p.shape for g, p in zip(grads.params, params)):
        raise DimensionError("gradient shapes do not match model parameters")
    if len(state.velocity) != len(params) or any(v.shape != p.shape for v, p in zip(state.velocity, params)):
        raise DimensionError("optimizer buffers do not match model parameters")
    _finite("sgd_step", *grads.params)
    for p, g, v in zip(params, grads.params, state.velocity):
        v *= state.momentum
        v -= state.learning_rate * g
        p += v
    model.version += 1


# -- gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tolerance: float
    passed: bool
    worst_index: int


def finite_diff_check(
    loss_fn: Callable[[MlpModel], tuple[float, Gradients]],
    model: MlpModel,
    tolerance: float = 1e-4,
    n_params: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Central differences on a random subset of parameters.

    ``loss_fn(model)`` must return ``(loss, Gradients)`` and be deterministic.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    _, grads = loss_fn(model)
    analytic = grads.flat()
    params = model.params
    offsets = np.cumsum([0] + [p.size for p in params])
    rng = np.random.default_rng(seed)
    idx = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
    worst, worst_i, worst_abs = 0.0, -1, 0.0
    for flat_i in idx:
        j = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        p = params[j].reshape(-1)
        local = flat_i - offsets[j]
        orig = p[local]
        p[local] = orig + h
        model.version += 1
        lp, _ = loss_fn(model)
        p[local] = orig - h
        model.version += 1
        lm, _ = loss_fn(model)
        p[local] = orig
        model.version += 1
        num = (lp - lm) / (2 * h)
        a = analytic[flat_i]
        err = abs(a - num)
        rel = err / max(abs(a), abs(num), abs_floor)
        worst_abs = max(worst_abs, err)
        if rel > worst:
            worst, worst_i = rel, int(flat_i)
    return GradCheckReport(worst, worst_abs, int(idx.size), tolerance, worst < tolerance, worst_i)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: MlpModel, path, seed=None, iteration=0, **extra) -> tuple[Path, Path]:
    """Raw little-endian float64 parameters ``W1 b1 W2 b2 W3 b3`` (row-major)
    plus a JSON sidecar ``<path>.json`` with ``arch``, ``head``, ``seed``,
    ``iteration`` and any ``extra`` keys."""
    path = Path(path)
    flat = np.concatenate([p.ravel() for p in model.params]).astype("<f8")
    path.write_bytes(flat.tobytes())
    side = {"arch": model.arch, "head": model.head, "seed": seed if seed is not None else model.seed,
            "iteration": int(iteration), **extra}
    side_path = path.with_name(path.name + ".json")
    side_path.write_text(json.dumps(side, sort_keys=True) + "\n", encoding="utf-8")
    return path, side_path


def load_checkpoint(path) -> tuple[MlpModel, dict]:
    path = Path(path)
    side = json.loads(path.with_name(path.name + ".json").read_text(encoding="utf-8"))
    flat = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    arch = side["arch"]
    weights, biases, pos = [], [], 0
    for a, b in zip(arch[:-1], arch[1:]):
        weights.append(flat[pos:pos + a * b].reshape(a, b).copy())
        pos += a * b
        biases.append(flat[pos:pos + b].copy())
        pos += b
    if pos != flat.size:
        raise DimensionError(f"checkpoint holds {flat.size} values, architecture {arch} needs {pos}")
    return MlpModel(weights, biases, side.get("head", "softmax"), side.get("seed")), side
