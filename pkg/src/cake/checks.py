"""Finite-difference checks of every composite loss on small random problems."""

from __future__ import annotations

import numpy as np

from .cdl import (
    CdlWeights, MarginalEstimator, SslModelPair, cdl_risk, debiased_supervised_loss, exchange_pseudo_labels,
    self_penalization_loss,
)
from .icl import IclBatch, IclWeights, icl_loss
from .nn import cross_entropy, backward, finite_diff_check, forward, init_mlp


def _problem(seed, d_x=8, hidden=10, k=4, n=12):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d_x))
    y = rng.integers(0, k, size=n)
    return rng, x, y, d_x, hidden, k


def _away_from_threshold(model, x, tau, margin=1e-3):
    """Drop rows whose top-1 probability sits within ``margin`` of ``tau``, so
    the self-penalisation mask cannot flip under the finite-difference step."""
    top = forward(model, x).probs.max(axis=1)
    return x[np.abs(top - tau) > margin]


def composite_gradchecks(seed: int = 0, n_params: int = 200, tolerance: float = 1e-4):
    """``{loss name: GradCheckReport}`` for the CE, ICL, IPW, self-penalisation
    and both halves of the CDL risk. IPW weights are frozen at the base point."""
    rng, x, y, d_x, h, k = _problem(seed)
    reports = {}

    model = init_mlp(d_x, h, k, seed)

    def ce_fn(m):
        f = forward(m, x)
        ce = cross_entropy(f.probs, y)
        return ce.loss, backward(m, f.cache, ce.dlogits)
    reports["cross_entropy"] = finite_diff_check(ce_fn, model, tolerance, n_params, seed=seed)

    batch = IclBatch(x, x + 0.3 * rng.normal(size=x.shape), x + 0.5 * rng.normal(size=x.shape), y)
    w = IclWeights(0.7, 0.3)
    reports["icl_loss"] = finite_diff_check(lambda m: (lambda r: (r.loss, r.grads))(icl_loss(m, batch, w)),
                                            model, tolerance, n_params, seed=seed)

    est = MarginalEstimator(np.array([0.55, 0.25, 0.15, 0.05]))
    frozen = debiased_supervised_loss(model, x, y, est).diagnostics["weights"]
    reports["debiased_supervised_loss"] = finite_diff_check(
        lambda m: (lambda r: (r.loss, r.grads))(debiased_supervised_loss(m, x, y, est, weights=frozen)),
        model, tolerance, n_params, seed=seed)

    tau = 0.32
    xu = _away_from_threshold(model, rng.normal(size=(16, d_x)), tau)
    reports["self_penalization_loss"] = finite_diff_check(
        lambda m: (lambda r: (r.loss, r.grads))(self_penalization_loss(m, xu, tau)), model, tolerance, n_params,
        seed=seed)

    pair = SslModelPair(init_mlp(d_x, h, k, seed + 1), init_mlp(d_x, h, k, seed + 2))
    xs, ys = x, y
    xl, yl = rng.normal(size=(8, d_x)), rng.integers(0, k, size=8)
    xu = rng.normal(size=(10, d_x))
    for mdl in (pair.m_s, pair.m_t):
        xu = _away_from_threshold(mdl, xu, tau)
    ex = exchange_pseudo_labels(pair, xu, np.arange(len(xu)), 0.25, 0.25, 0)
    ests = (est, MarginalEstimator.uniform(k))
    cw = CdlWeights(1.0, 0.1)
    base = cdl_risk(pair, (xs, ys), (xl, yl), xu, ex, cw, ests, (tau, tau))
    frozen_pair = (base[0].diagnostics["weights"], base[1].diagnostics["weights"])

    def risk_fn(side):
        def fn(m):
            p = SslModelPair(m, pair.m_t) if side == 0 else SslModelPair(pair.m_s, m)
            r = cdl_risk(p, (xs, ys), (xl, yl), xu, ex, cw, ests, (tau, tau), sup_weights=frozen_pair)[side]
            return r.loss, r.grads
        return fn
    reports["cdl_risk[m_s]"] = finite_diff_check(risk_fn(0), pair.m_s, tolerance, n_params, seed=seed)
    reports["cdl_risk[m_t]"] = finite_diff_check(risk_fn(1), pair.m_t, tolerance, n_params, seed=seed)
    return reports
