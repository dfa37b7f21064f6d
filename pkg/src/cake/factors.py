"""Invariant causal factors: concept-preserving, style-changed variants.

Two generator families are provided.

* ``oracle``: re-renders from the generative latents. Intra-domain variants
  perturb ``s_i``; cross-domain variants redraw ``s_c`` from the other
  domain's style distribution. The concept and label never change.
* ``learned``: a cycle-consistent adversarial mapper trained on observations
  only (source -> target style), plus a sealed intra-domain perturbation that
  estimates latents by ridge inversion of the render map.

Both re-render as ``x' = x + tanh(z') - tanh(z)`` where ``z`` is the
pre-activation, so per-sample observation noise is carried over unchanged and
a zero perturbation returns ``x`` bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DomainSpec, RenderParams, Sample, Split, pre_activation, recover_latents
from .errors import DimensionError, SealedSampleError, UntrainedModelError
from .nn import (
    Gradients, MlpModel, backward, forward, init_mlp, init_optimizer, output_grad_to_logits, save_checkpoint,
    sgd_step,
)


@dataclass(frozen=True)
class AugmentSpec:
    sigma_i: float = 0.5
    n_variants: int = 1

    def __post_init__(self):
        if self.sigma_i < 0:
            raise ValueError("sigma_i must be nonnegative")


class StyleEstimator:
    """Ridge inversion of a known render map, used on sealed observations."""

    def __init__(self, params: RenderParams, ridge: float = 1e-3):
        self.params = params
        self.ridge = ridge

    def latents(self, x):
        return recover_latents(x, self.params, ridge=self.ridge)

    def pre_activation(self, x):
        c, s_c, s_i = self.latents(x)
        return pre_activation(c, s_c, s_i, self.params)


# -- single-sample operations --------------------------------------------------

def intra_domain_factor(sample: Sample, spec: AugmentSpec, rng: np.random.Generator,
                        params: RenderParams, estimator: StyleEstimator | None = None) -> Sample:
    """Replace ``s_i`` by ``s_i + eps``, ``eps ~ N(0, sigma_i^2 I)``, and re-render."""
    d_si = params.dims[3]
    eps = spec.sigma_i * rng.standard_normal(d_si)
    if sample.c is not None:
        z = pre_activation(sample.c, sample.s_c, sample.s_i, params)[0]
        s_i = sample.s_i + eps
        x = sample.x + (np.tanh(z + params.a_si @ eps) - np.tanh(z))
        return replace(sample, x=x, s_i=s_i)
    if estimator is None:
        raise SealedSampleError("sealed sample needs a style estimator for intra-domain intervention")
    z = estimator.pre_activation(sample.x)[0]
    x = sample.x + (np.tanh(z + params.a_si @ eps) - np.tanh(z))
    return replace(sample, x=x)


def oracle_cross_domain(sample: Sample, target: DomainSpec, rng: np.random.Generator,
                        params: RenderParams) -> Sample:
    """Redraw ``s_c`` from ``target``'s style distribution; concept and label kept."""
    if sample.c is None:
        raise SealedSampleError("oracle cross-domain factor needs latents")
    s_c = target.sample_cross_style(1, rng)[0]
    z = pre_activation(sample.c, sample.s_c, sample.s_i, params)[0]
    z2 = pre_activation(sample.c, s_c, sample.s_i, params)[0]
    return replace(sample, x=sample.x + (np.tanh(z2) - np.tanh(z)), s_c=s_c)


# -- batched generators used by the trainer --------------------------------------

class OracleFactors:
    """Latent-based generators. ``cross_to`` maps a split's domain to the
    style distribution its cross-domain variants are drawn from."""

    mode = "oracle"

    def __init__(self, params: RenderParams, source: DomainSpec, target: DomainSpec,
                 aug: AugmentSpec, n_g: int = 2):
        self.params, self.source, self.target, self.aug, self.n_g = params, source, target, aug, n_g
        self.k = 0

    def intra(self, split: Split, rows, rng) -> np.ndarray:
        if not split.has_latents:
            raise SealedSampleError("oracle generators need latents")
        rows = np.asarray(rows)
        z = pre_activation(split.c[rows], split.s_c[rows], split.s_i[rows], self.params)
        eps = self.aug.sigma_i * rng.standard_normal((rows.size, self.params.dims[3]))
        return split.x[rows] + (np.tanh(z + eps @ self.params.a_si.T) - np.tanh(z))

    def cross(self, split: Split, rows, rng, pair: int | None = None) -> np.ndarray:
        if not split.has_latents:
            raise SealedSampleError("oracle generators need latents")
        rows = np.asarray(rows)
        other = self.target if split.domain.value == "source" else self.source
        c, s_c, s_i = split.c[rows], split.s_c[rows], split.s_i[rows]
        new_sc = other.sample_cross_style(rows.size, rng)
        z, z2 = pre_activation(c, s_c, s_i, self.params), pre_activation(c, new_sc, s_i, self.params)
        return split.x[rows] + (np.tanh(z2) - np.tanh(z))

    def composed(self, split: Split, rows, rng) -> np.ndarray:
        """Cross-domain style redraw and intra-domain perturbation applied jointly."""
        if not split.has_latents:
            raise SealedSampleError("oracle generators need latents")
        rows = np.asarray(rows)
        other = self.target if split.domain.value == "source" else self.source
        c, s_c, s_i = split.c[rows], split.s_c[rows], split.s_i[rows]
        new_sc = other.sample_cross_style(rows.size, rng)
        eps = self.aug.sigma_i * rng.standard_normal((rows.size, self.params.dims[3]))
        z, z2 = pre_activation(c, s_c, s_i, self.params), pre_activation(c, new_sc, s_i + eps, self.params)
        return split.x[rows] + (np.tanh(z2) - np.tanh(z))

    def variant_set(self, split: Split, rows, rng) -> list[np.ndarray]:
        """The full factor set: ``n_g`` intra plus ``n_g`` cross variants."""
        return ([self.intra(split, rows, rng) for _ in range(self.n_g)]
                + [self.cross(split, rows, rng, pair=j) for j in range(self.n_g)])


class LearnedFactors:
    """Observation-only generators: the selected style-transfer pair for
    cross-domain variants and ridge-inverted style perturbation for intra."""

    mode = "learned"

    def __init__(self, pairs: list, k: int, estimator: StyleEstimator, aug: AugmentSpec):
        self.pairs, self.k, self.estimator, self.aug = pairs, k, estimator, aug
        self.n_g = len(pairs)

    def intra(self, split: Split, rows, rng) -> np.ndarray:
        x = split.x[np.asarray(rows)]
        return sealed_intra_batch(x, self.estimator, self.aug.sigma_i, rng)

    def cross(self, split: Split, rows, rng, pair: int | None = None) -> np.ndarray:
        x = split.x[np.asarray(rows)]
        model = self.pairs[self.k if pair is None else pair]
        if split.domain.value == "source":
            return apply_cross_domain(model, x)
        return apply_cross_domain(model, x, reverse=True)

    def composed(self, split: Split, rows, rng) -> np.ndarray:
        return sealed_intra_batch(self.cross(split, rows, rng), self.estimator, self.aug.sigma_i, rng)

    def variant_set(self, split: Split, rows, rng) -> list[np.ndarray]:
        return ([self.intra(split, rows, rng) for _ in range(self.n_g)]
                + [self.cross(split, rows, rng, pair=j) for j in range(self.n_g)])


def sealed_intra_batch(x, estimator: StyleEstimator, sigma_i: float, rng) -> np.ndarray:
    params = estimator.params
    z = estimator.pre_activation(x)
    eps = sigma_i * rng.standard_normal((x.shape[0], params.dims[3]))
    return x + (np.tanh(z + eps @ params.a_si.T) - np.tanh(z))


# -- learned cross-domain style transfer -------------------------------------------

@dataclass
class StyleTransferModel:
    """One generator/discriminator pair. ``g_rev`` is the reverse mapper used
    by the cycle loss."""

    g_st: MlpModel
    g_rev: MlpModel
    d_t: MlpModel
    lambda_cyc: float = 10.0
    lambda_idt: float = 5.0
    index: int = 0
    adv_loss: str = "saturating"
    trained: bool = False
    history: dict = field(default_factory=lambda: {k: [] for k in ("l_st", "l_adv", "l_cyc", "l_idt", "l_ridt",
                                                                      "d_loss")})
    warnings: list = field(default_factory=list)

    @property
    def final_window_loss(self) -> float:
        h = self.history["l_st"]
        if not h:
            return math.inf
        n = max(1, len(h) // 10)
        return float(np.mean(h[-n:]))


def apply_cross_domain(model: StyleTransferModel, x, reverse: bool = False) -> np.ndarray:
    """``G_st(x)`` (or ``G_rev(x)``); row-wise, so batching does not matter."""
    if not model.trained:
        raise UntrainedModelError("style transfer model has not been trained")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = model.g_rev if reverse else model.g_st
    if x.shape[1] != g.d_in:
        raise DimensionError(f"input has {x.shape[1]} columns, generator expects {g.d_in}")
    return forward(g, x).out


def cycle_residual(model: StyleTransferModel, x) -> np.ndarray:
    x = np.atleast_2d(x)
    return apply_cross_domain(model, apply_cross_domain(model, x), reverse=True) - x


def _dl(model, fwd, dout):
    return output_grad_to_logits(fwd, dout, model.head)


def _mse(a, b):
    d = a - b
    return float(np.mean(d * d)), 2.0 * d / d.size


def style_transfer_losses(pair: StyleTransferModel, xs, xt):
    """Objective terms and gradients for one minibatch.

    Discriminator maximises ``log D(x_t) + log(1 - D(G(x_s)))``; the generator
    minimises ``log(1 - D(G(x_s))) + l_cyc * |G_rev(G(x_s)) - x_s|^2 +
    l_idt * |G(x_t) - x_t|^2``; the reverse mapper minimises the cycle term
    plus its own identity term on source. Squared norms are element means.
    Returns ``(terms, grads)`` with grads for ``g_st``, ``g_rev``, ``d_t``.
    """
    g, gr, d = pair.g_st, pair.g_rev, pair.d_t
    b_s, b_t = xs.shape[0], xt.shape[0]
    fake_f = forward(g, xs)
    fake = fake_f.out
    # discriminator
    real_d = forward(d, xt)
    fake_d = forward(d, fake)
    pr, pf = real_d.out[:, 0], fake_d.out[:, 0]
    eps = 1e-12
    adv_value = float(np.mean(np.log(pr + eps)) + np.mean(np.log(1 - pf + eps)))
    # D minimises -adv_value
    gd = backward(d, real_d.cache, (-(1 - pr) / b_t)[:, None]) + backward(d, fake_d.cache, (pf / b_s)[:, None])
    # generator adversarial term: mean log(1 - D(G(xs)))
    if pair.adv_loss == "nonsaturating":
        l_adv = -float(np.mean(np.log(pf + eps)))
    else:
        l_adv = float(np.mean(np.log(1 - pf + eps)))
    if pair.adv_loss == "nonsaturating":
        # same fixed point, but -log D(G(x)) keeps its gradient when D wins
        gd_through = backward(d, fake_d.cache, (-(1 - pf) / b_s)[:, None])
    else:
        gd_through = backward(d, fake_d.cache, (-pf / b_s)[:, None])
    dfake = gd_through.dinput
    # cycle
    rec_f = forward(gr, fake)
    l_cyc, drec = _mse(rec_f.out, xs)
    g_rev_cyc = backward(gr, rec_f.cache, _dl(gr, rec_f, pair.lambda_cyc * drec))
    dfake = dfake + g_rev_cyc.dinput
    g_main = backward(g, fake_f.cache, _dl(g, fake_f, dfake))
    # identity
    idt_f = forward(g, xt)
    l_idt, didt = _mse(idt_f.out, xt)
    g_main = g_main + backward(g, idt_f.cache, _dl(g, idt_f, pair.lambda_idt * didt))
    ridt_f = forward(gr, xs)
    l_ridt, dridt = _mse(ridt_f.out, xs)
    g_rev = g_rev_cyc + backward(gr, ridt_f.cache, _dl(gr, ridt_f, pair.lambda_idt * dridt))
    l_st = l_adv + pair.lambda_cyc * l_cyc + pair.lambda_idt * l_idt
    terms = {"l_st": l_st, "l_adv": l_adv, "l_cyc": l_cyc, "l_idt": l_idt, "l_ridt": l_ridt,
             "d_loss": -adv_value}
    return terms, {"g_st": Gradients(g_main.params), "g_rev": Gradients(g_rev.params), "d_t": Gradients(gd.params)}


def init_style_pair(d_x, hidden, seed, index=0, lambda_cyc=10.0, lambda_idt=5.0,
                    adv_loss="saturating", head="tanh_residual") -> StyleTransferModel:
    ss = np.random.SeedSequence([seed, index]).generate_state(3)
    return StyleTransferModel(
        g_st=init_mlp(d_x, hidden, d_x, int(ss[0]), head=head, zero_last=True),
        g_rev=init_mlp(d_x, hidden, d_x, int(ss[1]), head=head, zero_last=True),
        d_t=init_mlp(d_x, hidden, 1, int(ss[2]), head="sigmoid"),
        lambda_cyc=lambda_cyc, lambda_idt=lambda_idt, index=index, adv_loss=adv_loss,
    )


@dataclass
class StyleTransferResult:
    pairs: list
    k: int


def train_style_transfer(s_l, t_all, n_g: int, iters: int, seed: int, hidden: int = 32,
                         batch_size: int = 64, lr: float = 0.01, momentum: float = 0.5,
                         lambda_cyc: float = 10.0, lambda_idt: float = 5.0, adv_loss: str = "saturating",
                         d_lr: float | None = None, source_p=None) -> StyleTransferResult:
    """Train ``n_g`` independent pairs; select ``k`` with the lowest mean
    ``L_st`` over the final 10% of iterations.

    ``source_p`` optionally gives per-row sampling probabilities for ``s_l``
    (e.g. class-balanced, so the discriminator cannot key on label shift).
    """
    s_l = np.atleast_2d(np.asarray(s_l, dtype=np.float64))
    t_all = np.atleast_2d(np.asarray(t_all, dtype=np.float64))
    if n_g < 1:
        raise ValueError("n_g must be at least 1")
    if s_l.shape[0] == 0 or t_all.shape[0] == 0:
        raise ValueError("style transfer needs non-empty source and target sets")
    if s_l.shape[1] != t_all.shape[1]:
        raise DimensionError("source and target observations differ in dimension")
    pairs = []
    for j in range(n_g):
        pair = init_style_pair(s_l.shape[1], hidden, seed, j, lambda_cyc, lambda_idt, adv_loss)
        rng = np.random.default_rng(np.random.SeedSequence([seed, j, 0x5354]))
        opts = {name: init_optimizer(getattr(pair, name), lr, momentum) for name in ("g_st", "g_rev")}
        opts["d_t"] = init_optimizer(pair.d_t, lr if d_lr is None else d_lr, momentum)
        plateau = 0
        for _ in range(iters):
            if source_p is None:
                xs = s_l[rng.integers(0, s_l.shape[0], batch_size)]
            else:
                xs = s_l[rng.choice(s_l.shape[0], batch_size, p=source_p)]
            xt = t_all[rng.integers(0, t_all.shape[0], batch_size)]
            terms, grads = style_transfer_losses(pair, xs, xt)
            for key, val in terms.items():
                pair.history[key].append(val)
            if abs(terms["d_loss"] - math.log(4.0)) < 1e-3 and grads["d_t"].norm() < 1e-8:
                plateau += 1
            sgd_step(pair.d_t, grads["d_t"], opts["d_t"])
            sgd_step(pair.g_st, grads["g_st"], opts["g_st"])
            sgd_step(pair.g_rev, grads["g_rev"], opts["g_rev"])
        if plateau:
            pair.warnings.append(f"discriminator saturated at log 4 on {plateau} iterations")
        pair.trained = True
        pairs.append(pair)
    k = int(np.argmin([p.final_window_loss for p in pairs]))
    return StyleTransferResult(pairs, k)


def save_style_pairs(result: StyleTransferResult, out_dir) -> list:
    """Checkpoint every network of every pair; sidecars carry ``role`` and ``pair``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for j, pair in enumerate(result.pairs):
        for role in ("g_st", "g_rev", "d_t"):
            written.append(save_checkpoint(getattr(pair, role), out_dir / f"{role}_pair{j}.bin",
                                           iteration=len(pair.history["l_st"]), role=role, pair=j,
                                           selected=j == result.k)[0])
    return written


def smoothed(series, window: int = 100) -> np.ndarray:
    """Non-overlapping window means."""
    s = np.asarray(series, dtype=np.float64)
    n = s.size // window
    return s[: n * window].reshape(n, window).mean(axis=1)
