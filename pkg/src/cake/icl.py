"""Invariant concept learning: classification over originals and their
style-changed variants, a prediction-invariance penalty and a feature-distance
penalty, all trained on one MLP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .nn import Gradients, MlpModel, backward, cross_entropy, forward, log_softmax


@dataclass
class IclBatch:
    originals: np.ndarray
    intra_variants: np.ndarray
    cross_variants: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        shapes = {self.originals.shape, self.intra_variants.shape, self.cross_variants.shape}
        if len(shapes) != 1 or self.originals.shape[0] != np.shape(self.labels)[0]:
            raise DimensionError("originals, variants and labels must be row-aligned")

    @property
    def size(self) -> int:
        return self.originals.shape[0]


@dataclass(frozen=True)
class IclWeights:
    lambda_ir: float = 0.1
    lambda_feat: float = 0.1

    def __post_init__(self):
        if self.lambda_ir < 0 or self.lambda_feat < 0:
            raise ValueError("ICL weights must be nonnegative")


@dataclass
class IclResult:
    loss: float
    grads: Gradients
    diagnostics: dict = field(default_factory=dict)


def invariance_penalty(logits_blocks):
    """Mean over rows of the symmetrised pairwise KL among the blocks' predictive
    distributions: ``(1/6) sum_{a != b} KL(p_a || p_b)`` for three blocks.

    Returns ``(value, [dlogits per block])``. Log-probabilities come from a
    stable log-softmax, so no clamping is needed on this path.
    """
    logp = [log_softmax(z) for z in logits_blocks]
    p = [np.exp(lp) for lp in logp]
    m = len(p)
    n = p[0].shape[0]
    norm = 1.0 / (m * (m - 1) * n)
    value = 0.0
    grads = [np.zeros_like(z) for z in logits_blocks]
    for a in range(m):
        for b in range(m):
            if a == b:
                continue
            diff = logp[a] - logp[b]
            kl = (p[a] * diff).sum(axis=1, keepdims=True)
            value += float(kl.sum())
            grads[a] += p[a] * (diff - kl)
            grads[b] += p[b] - p[a]
    return value * norm, [g * norm for g in grads]


def feature_penalty(feature_blocks):
    """Mean over rows of summed squared distances between every pair of blocks."""
    n = feature_blocks[0].shape[0]
    value = 0.0
    grads = [np.zeros_like(f) for f in feature_blocks]
    m = len(feature_blocks)
    for a in range(m):
        for b in range(a + 1, m):
            d = feature_blocks[a] - feature_blocks[b]
            value += float((d * d).sum())
            grads[a] += 2.0 * d
            grads[b] -= 2.0 * d
    return value / n, [g / n for g in grads]


def icl_loss(model: MlpModel, batch: IclBatch, w: IclWeights = IclWeights()) -> IclResult:
    b = batch.size
    x = np.vstack([batch.originals, batch.intra_variants, batch.cross_variants])
    fwd = forward(model, x)
    labels = np.tile(np.asarray(batch.labels, dtype=np.int64), 3)
    ce = cross_entropy(fwd.probs, labels)
    blocks = [slice(0, b), slice(b, 2 * b), slice(2 * b, 3 * b)]
    l_ir, d_ir = invariance_penalty([fwd.logits[s] for s in blocks])
    l_feat, d_feat = feature_penalty([fwd.features[s] for s in blocks])
    dlogits = ce.dlogits + w.lambda_ir * np.vstack(d_ir)
    dfeat = w.lambda_feat * np.vstack(d_feat) if w.lambda_feat else None
    grads = backward(model, fwd.cache, dlogits, dfeat)
    loss = ce.loss + w.lambda_ir * l_ir + w.lambda_feat * l_feat
    diag = {"ce": ce.loss, "l_ir": l_ir, "l_feat": l_feat, "clamped": ce.diagnostics["clamped"]}
    return IclResult(loss, Gradients(grads.params), diag)


def mean_symmetric_kl(model: MlpModel, x, x_variant) -> float:
    """Average ``(KL(p||q) + KL(q||p)) / 2`` between predictions on paired rows."""
    la, lb = log_softmax(forward(model, x).logits), log_softmax(forward(model, x_variant).logits)
    pa, pb = np.exp(la), np.exp(lb)
    return float(np.mean(0.5 * ((pa * (la - lb)).sum(1) + (pb * (lb - la)).sum(1))))


def icl_train(model: MlpModel, bundle, factors, config, metrics_path=None, eval_x=None, eval_y=None):
    """Source-only ICL subroutine: minibatch SGD over ``s_l`` with fresh
    variants per batch. Returns the per-log-interval metric rows.

    ``config`` needs ``batch_size``, ``t_max``, ``learning_rate``, ``momentum``,
    ``lambda_ir``, ``lambda_feat``, ``log_interval`` and ``seed``.
    """
    from .nn import init_optimizer, sgd_step

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x49434C]))
    opt = init_optimizer(model, config.learning_rate, config.momentum)
    w = IclWeights(config.lambda_ir, config.lambda_feat)
    s_l = bundle.s_l
    y_all = bundle.labels("s_l")
    if eval_x is None:
        eval_x, eval_y = s_l.x, y_all
    rows_out = []
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for it in range(config.t_max + 1):
            rows = rng.choice(len(s_l), size=config.batch_size, replace=False)
            batch = IclBatch(s_l.x[rows], factors.intra(s_l, rows, rng), factors.cross(s_l, rows, rng), y_all[rows])
            res = icl_loss(model, batch, w)
            if it % config.log_interval == 0:
                acc = float(np.mean(forward(model, eval_x).probs.argmax(1) == eval_y))
                row = {"iter": it, "ce": res.diagnostics["ce"], "l_ir": res.diagnostics["l_ir"],
                       "l_feat": res.diagnostics["l_feat"], "src_acc": acc}
                rows_out.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
            if it < config.t_max:
                sgd_step(model, res.grads, opt)
    finally:
        if fh:
            fh.close()
    return rows_out
