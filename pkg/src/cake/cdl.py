"""Collaborative debiasing: two peer classifiers exchanging threshold-gated
pseudo-labels, an inverse-propensity weighted supervised loss driven by a
moving label-marginal estimate, and self-penalisation of low-confidence
predictions."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .nn import Gradients, MlpModel, backward, cross_entropy, forward, zero_gradients

IPW_GUARD = 1e-3
IPW_MAX = 10.0
MARGINAL_FLOOR = 1e-6


class Proposer(str, enum.Enum):
    SOURCE_MODEL = "source_model"
    TARGET_MODEL = "target_model"


class Status(str, enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_PEER = "rejected_peer_threshold"
    REJECTED_RECIPIENT = "rejected_recipient_threshold"


_STATUS = (Status.ACCEPTED, Status.REJECTED_PEER, Status.REJECTED_RECIPIENT)


@dataclass(frozen=True)
class PseudoLabelRecord:
    sample_id: int
    proposed: int
    proposer: Proposer
    peer_conf: float
    recip_conf: float
    iteration: int
    status: Status
    correct: bool | None = None


@dataclass
class SslModelPair:
    m_s: MlpModel
    m_t: MlpModel

    def __post_init__(self):
        if self.m_s.arch != self.m_t.arch:
            raise DimensionError("peer models must share the architecture")
        if self.m_s is self.m_t:
            raise ValueError("peer models must have independent parameters")


@dataclass
class Direction:
    """One proposer -> recipient pass over an unlabeled batch (column-wise)."""

    proposer: Proposer
    ids: np.ndarray
    proposed: np.ndarray
    peer_conf: np.ndarray
    recip_conf: np.ndarray
    status: np.ndarray  # index into _STATUS
    correct: np.ndarray | None = None

    @property
    def accepted(self) -> np.ndarray:
        return self.status == 0

    @property
    def n_accepted(self) -> int:
        return int(np.count_nonzero(self.accepted))

    def records(self, iteration: int) -> list[PseudoLabelRecord]:
        return [PseudoLabelRecord(int(self.ids[i]), int(self.proposed[i]), self.proposer, float(self.peer_conf[i]),
                                  float(self.recip_conf[i]), iteration, _STATUS[self.status[i]],
                                  None if self.correct is None else bool(self.correct[i]))
                for i in range(self.ids.size)]


@dataclass
class ExchangeResult:
    iteration: int
    for_s: Direction  # proposals from m_t, to train m_s
    for_t: Direction  # proposals from m_s, to train m_t

    def records(self) -> list[PseudoLabelRecord]:
        return self.for_s.records(self.iteration) + self.for_t.records(self.iteration)


def gate(peer_probs, recip_probs, tau_peer, tau_recip, peer_only=False):
    """Vectorised pseudo-label gate. The peer proposes its argmax if its
    confidence exceeds ``tau_peer``; the recipient accepts if its own
    probability of that class exceeds ``tau_recip``."""
    proposed = peer_probs.argmax(axis=1)
    rows = np.arange(proposed.size)
    peer_conf = peer_probs[rows, proposed]
    recip_conf = recip_probs[rows, proposed]
    status = np.full(proposed.size, 2, dtype=np.int8)
    status[~(peer_conf > tau_peer)] = 1
    ok = (peer_conf > tau_peer) & (peer_only | (recip_conf > tau_recip))
    status[ok] = 0
    return proposed, peer_conf, recip_conf, status


def exchange_pseudo_labels(pair: SslModelPair, x_u, ids, tau_s: float, tau_t: float, iteration: int,
                           true_labels=None, peer_only: bool = False, probs_s=None, probs_t=None) -> ExchangeResult:
    """Both directions of the pseudo-label exchange on one unlabeled batch."""
    if not (0.0 <= tau_s < 1.0 and 0.0 <= tau_t < 1.0):
        raise ValueError("thresholds must lie in [0, 1)")
    if probs_s is None:
        probs_s = forward(pair.m_s, x_u).probs
    if probs_t is None:
        probs_t = forward(pair.m_t, x_u).probs
    ids = np.asarray(ids)
    dirs = []
    for proposer, peer, recip, tp, tr in ((Proposer.TARGET_MODEL, probs_t, probs_s, tau_t, tau_s),
                                          (Proposer.SOURCE_MODEL, probs_s, probs_t, tau_s, tau_t)):
        proposed, pc, rc, st = gate(peer, recip, tp, tr, peer_only)
        correct = None if true_labels is None else proposed == np.asarray(true_labels)
        dirs.append(Direction(proposer, ids, proposed, pc, rc, st, correct))
    return ExchangeResult(iteration, dirs[0], dirs[1])


def self_training_labels(probs, tau):
    """Solo variant: a model's own confident argmax labels."""
    proposed = probs.argmax(axis=1)
    conf = probs[np.arange(proposed.size), proposed]
    return proposed, conf > tau


# -- marginal estimation and IPW -----------------------------------------------------

@dataclass(frozen=True)
class MarginalEstimator:
    p: np.ndarray
    momentum: float = 0.9
    count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("ema momentum must lie in [0, 1)")

    @classmethod
    def uniform(cls, n_classes: int, momentum: float = 0.9) -> "MarginalEstimator":
        return cls(np.full(n_classes, 1.0 / n_classes), momentum, 0)


def _floor_renormalize(p, floor=MARGINAL_FLOOR):
    """Pin entries below ``floor`` to it and rescale the rest so the vector
    sums to 1; repeats while rescaling pushes further entries under."""
    p = np.asarray(p, dtype=np.float64).copy()
    pinned = np.zeros(p.size, dtype=bool)
    while True:
        low = ~pinned & (p < floor)
        if not low.any():
            break
        pinned |= low
        p[pinned] = floor
        free = ~pinned
        p[free] *= (1.0 - floor * pinned.sum()) / p[free].sum()
    return p / p.sum() if not pinned.any() else p


def update_marginal(est: MarginalEstimator, labels) -> MarginalEstimator:
    """``p <- m p + (1 - m) hist(labels)``, then floor and renormalise."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("marginal update needs a non-empty batch")
    k = est.p.size
    hist = np.bincount(labels, minlength=k)[:k] / labels.size
    p = est.momentum * est.p + (1.0 - est.momentum) * hist
    return MarginalEstimator(_floor_renormalize(p), est.momentum, est.count + 1)


def ipw_score(p_y_given_x, p_y, guard: float = IPW_GUARD, w_max: float = IPW_MAX):
    """``P(y|x) / (log P(y|x) - log P(y))`` with guards: a negative
    denominator gives weight 0, a denominator below ``guard`` is raised to it,
    and the result is clipped at ``w_max``."""
    p = np.asarray(p_y_given_x, dtype=np.float64)
    q = np.asarray(p_y, dtype=np.float64)
    # one log of the ratio keeps the sign right when p and q differ by an ulp
    denom = np.log(np.maximum(p, 1e-300) / np.maximum(q, 1e-300))
    w = np.where(denom < 0.0, 0.0, p / np.maximum(denom, guard))
    w = np.clip(w, 0.0, w_max)
    return w if w.ndim else float(w)


@dataclass
class TermResult:
    loss: float
    grads: Gradients
    diagnostics: dict = field(default_factory=dict)


def debiased_supervised_loss(model: MlpModel, x, y, est: MarginalEstimator | None,
                             guard: float = IPW_GUARD, w_max: float = IPW_MAX, weights=None) -> TermResult:
    """CE with per-sample IPW weights normalised to batch mean 1.

    Weights come from the current forward pass and are held constant for
    differentiation. ``est=None`` gives plain CE. Passing ``weights`` (e.g.
    the ``diagnostics["weights"]`` of an earlier call) skips the IPW step.
    """
    y = np.asarray(y, dtype=np.int64)
    fwd = forward(model, x)
    p_true = fwd.probs[np.arange(y.size), y]
    fallback = False
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
    elif est is None:
        w = np.ones(y.size)
    else:
        w = ipw_score(p_true, est.p[y], guard, w_max)
        if w.sum() <= 0.0:
            w, fallback = np.ones(y.size), True
        else:
            w = w / w.mean()
    ce = cross_entropy(fwd.probs, y, w)
    g = backward(model, fwd.cache, ce.dlogits)
    return TermResult(ce.loss, Gradients(g.params), {"weights": w, "fallback_uniform": fallback, **ce.diagnostics})


def self_penalization_loss(model: MlpModel, x, tau: float) -> TermResult:
    """Mean of ``-log(1 - P(yhat|x))`` over samples whose top-1 probability is
    below ``tau``; ``yhat`` is that top-1 class (the negative pseudo-label)."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    fwd = forward(model, x)
    probs = fwd.probs
    n = probs.shape[0]
    top = probs.argmax(axis=1)
    q = probs[np.arange(n), top]
    mask = q < tau
    m = int(np.count_nonzero(mask))
    if m == 0:
        return TermResult(0.0, zero_gradients(model), {"n_penalized": 0})
    loss = -float(np.log(1.0 - q[mask]).sum() / m)
    d = np.zeros_like(probs)
    onehot = np.zeros_like(probs[mask])
    onehot[np.arange(m), top[mask]] = 1.0
    # d/dz [-log(1 - q)] = q/(1-q) * (onehot - p)
    d[mask] = (q[mask] / (1.0 - q[mask]))[:, None] * (onehot - probs[mask]) / m
    g = backward(model, fwd.cache, d)
    return TermResult(loss, Gradients(g.params), {"n_penalized": m})


def pseudo_label_loss(model: MlpModel, x, y) -> TermResult:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        return TermResult(0.0, zero_gradients(model), {"n": 0})
    fwd = forward(model, x)
    ce = cross_entropy(fwd.probs, y)
    g = backward(model, fwd.cache, ce.dlogits)
    return TermResult(ce.loss, Gradients(g.params), {"n": int(y.size)})


@dataclass(frozen=True)
class CdlWeights:
    lambda_u: float = 1.0
    lambda_sp: float = 0.1


def cdl_model_risk(model, labeled_x, labeled_y, pseudo_x, pseudo_y, unlabeled_x, est, tau,
                   w: CdlWeights = CdlWeights(), use_ipw: bool = True, sup_weights=None) -> TermResult:
    """One peer's risk: debiased supervised + ``lambda_u`` pseudo-label CE +
    ``lambda_sp`` self-penalisation."""
    sup = debiased_supervised_loss(model, labeled_x, labeled_y, est if use_ipw else None, weights=sup_weights)
    pl = pseudo_label_loss(model, pseudo_x, pseudo_y)
    total_loss = sup.loss + w.lambda_u * pl.loss
    grads = sup.grads + pl.grads.scale(w.lambda_u)
    sp_loss, n_pen = 0.0, 0
    if w.lambda_sp:
        sp = self_penalization_loss(model, unlabeled_x, tau)
        sp_loss, n_pen = sp.loss, sp.diagnostics["n_penalized"]
        total_loss += w.lambda_sp * sp.loss
        grads = grads + sp.grads.scale(w.lambda_sp)
    diag = {"sup": sup.loss, "pl": pl.loss, "sp": sp_loss, "n_pseudo": int(np.size(pseudo_y)),
            "n_penalized": n_pen, "ipw_fallback": sup.diagnostics["fallback_uniform"],
            "weights": sup.diagnostics["weights"]}
    return TermResult(total_loss, grads, diag)


def cdl_risk(pair: SslModelPair, source_labeled, target_labeled, unlabeled, exchange: ExchangeResult,
             weights: CdlWeights, estimators, taus, use_ipw: bool = True, sup_weights=(None, None)):
    """Risks of both peers given one exchange.

    ``source_labeled``/``target_labeled`` are ``(x, y)``; ``unlabeled`` is the
    matrix of unlabeled rows the exchange ran on (optionally with extra
    variant rows appended after them). ``estimators`` and ``taus`` are
    ``(for m_s, for m_t)`` pairs.
    """
    n_u = exchange.for_s.ids.size
    x_u = unlabeled[:n_u]
    out = []
    for i, (model, (lx, ly), d) in enumerate(((pair.m_s, source_labeled, exchange.for_s),
                                              (pair.m_t, target_labeled, exchange.for_t))):
        acc = d.accepted
        out.append(cdl_model_risk(model, lx, ly, x_u[acc], d.proposed[acc], unlabeled, estimators[i], taus[i],
                                  weights, use_ipw, sup_weights[i]))
    return out[0], out[1]
