import json

import numpy as np
import pytest
from conftest import small_config
from scipy.stats import wasserstein_distance

from cake.config import Config, build_bundle, domain_specs
from cake.data import recover_latents
from cake.errors import SealedSampleError, UntrainedModelError
from cake.factors import (
    AugmentSpec, OracleFactors, StyleEstimator, apply_cross_domain, cycle_residual, init_style_pair,
    intra_domain_factor, oracle_cross_domain, save_style_pairs, smoothed, style_transfer_losses,
    train_style_transfer,
)
from cake.nn import cross_entropy, backward, forward, init_mlp, init_optimizer, sgd_step
from cake.trainer import prepare_factors


@pytest.fixture(scope="module")
def default_bundle():
    return build_bundle(Config().data)


@pytest.fixture(scope="module")
def learned_pair(default_bundle):
    """One style-transfer pair trained with the default generator settings."""
    cfg = Config().with_overrides({"generator.n_g": 1})
    return prepare_factors(cfg, default_bundle, 0)


# -- intra-domain ----------------------------------------------------------------------

def test_intra_zero_sigma_is_identity(small_bundle, rng):
    s = small_bundle.s_l.sample(3)
    out = intra_domain_factor(s, AugmentSpec(0.0), rng, small_bundle.render)
    assert np.array_equal(out.x, s.x)
    assert np.array_equal(out.s_i, s.s_i)


def test_intra_keeps_concept_and_label(small_bundle, rng):
    s = small_bundle.s_l.sample(0)
    out = intra_domain_factor(s, AugmentSpec(0.7), rng, small_bundle.render)
    assert np.array_equal(out.c, s.c)
    assert out.y == s.y
    assert not np.array_equal(out.x, s.x)


def test_intra_style_moments(small_bundle):
    # 10^4 draws: mean within 3 sigma / 100, variance near sigma^2
    s = small_bundle.s_l.sample(5)
    sigma = 0.5
    rng = np.random.default_rng(7)
    draws = np.array([intra_domain_factor(s, AugmentSpec(sigma), rng, small_bundle.render).s_i
                      for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0) - s.s_i) <= 3 * sigma / 100)
    np.testing.assert_allclose(draws.var(axis=0), sigma ** 2, rtol=0.05)


def test_intra_rerender_matches_render(small_bundle, rng):
    # x' - x equals the change of the noiseless render
    from cake.data import render
    s = small_bundle.s_l.sample(2)
    out = intra_domain_factor(s, AugmentSpec(0.5), rng, small_bundle.render)
    p = small_bundle.render
    expected = render(s.c, s.s_c, out.s_i, p) - render(s.c, s.s_c, s.s_i, p)
    np.testing.assert_allclose(out.x - s.x, expected, atol=1e-12)


def test_intra_sealed_needs_estimator(small_bundle, rng):
    s = small_bundle.t_u.sample(0)
    sealed = type(s)(**{**s.__dict__, "c": None, "s_c": None, "s_i": None})
    with pytest.raises(SealedSampleError):
        intra_domain_factor(sealed, AugmentSpec(0.5), rng, small_bundle.render)
    est = StyleEstimator(small_bundle.render)
    out = intra_domain_factor(sealed, AugmentSpec(0.0), rng, small_bundle.render, est)
    assert np.array_equal(out.x, s.x)


# -- oracle cross-domain ---------------------------------------------------------------

def test_oracle_cross_keeps_concept(small_bundle, rng):
    source, target = domain_specs(small_config().data)
    s = small_bundle.s_l.sample(1)
    out = oracle_cross_domain(s, target, rng, small_bundle.render)
    assert np.array_equal(out.c, s.c) and out.y == s.y
    assert not np.array_equal(out.s_c, s.s_c)


def test_oracle_cross_same_style_matches_intra_moments(small_bundle):
    # target style equal to source: cross re-render has the same moments as a
    # fresh draw from the source style distribution
    source, _ = domain_specs(small_config().data)
    split = small_bundle.s_l
    fac = OracleFactors(small_bundle.render, source, source, AugmentSpec(0.5))
    rng = np.random.default_rng(3)
    rows = np.arange(len(split))
    x_cross = np.vstack([fac.cross(split, rows, rng) for _ in range(10)])
    x_orig = np.vstack([split.x] * 10)
    np.testing.assert_allclose(x_cross.mean(axis=0), x_orig.mean(axis=0), atol=0.03)
    np.testing.assert_allclose(x_cross.std(axis=0), x_orig.std(axis=0), atol=0.03)


def test_oracle_zero_concept_drift_10k():
    # exact equality: the oracle never touches concept or label
    cfg = Config().with_overrides({"data.n_s": 10_000, "data.n_u": 300, "data.n_test": 100})
    bundle = build_bundle(cfg.data)
    source, target = domain_specs(cfg.data)
    fac = OracleFactors(bundle.render, source, target, AugmentSpec(0.5))
    split = bundle.s_l
    rows = np.arange(len(split))
    rng = np.random.default_rng(0)
    for x_var in (fac.cross(split, rows, rng), fac.intra(split, rows, rng), fac.composed(split, rows, rng)):
        assert x_var.shape == split.x.shape
    samples = [oracle_cross_domain(split.sample(i), target, rng, bundle.render) for i in range(len(split))]
    assert all(np.array_equal(s.c, split.c[i]) and s.y == split.y[i] for i, s in enumerate(samples))


def test_source_model_worse_on_transferred(default_bundle):
    # a source-only classifier loses accuracy on oracle-transferred samples
    cfg = Config()
    source, target = domain_specs(cfg.data)
    b = default_bundle
    m = init_mlp(b.d_x, 64, b.n_classes, 0)
    opt = init_optimizer(m, 0.05, 0.9)
    rng = np.random.default_rng(0)
    for _ in range(1500):
        idx = rng.choice(len(b.s_l), 64, replace=False)
        f = forward(m, b.s_l.x[idx])
        ce = cross_entropy(f.probs, b.s_l.y[idx])
        sgd_step(m, backward(m, f.cache, ce.dlogits), opt)
    fac = OracleFactors(b.render, source, target, AugmentSpec(0.5))
    x_t = fac.cross(b.s_l, np.arange(len(b.s_l)), rng)
    acc_src = np.mean(forward(m, b.s_l.x).probs.argmax(1) == b.s_l.y)
    acc_tr = np.mean(forward(m, x_t).probs.argmax(1) == b.s_l.y)
    print(f"source-only model: source acc {acc_src:.3f}, transferred acc {acc_tr:.3f}")
    assert acc_tr < acc_src


def test_oracle_needs_latents(small_bundle, rng):
    s = small_bundle.s_l.sample(0)
    sealed = type(s)(**{**s.__dict__, "c": None, "s_c": None, "s_i": None})
    source, target = domain_specs(small_config().data)
    with pytest.raises(SealedSampleError):
        oracle_cross_domain(sealed, target, rng, small_bundle.render)


def test_augment_spec_rejects_negative():
    with pytest.raises(ValueError):
        AugmentSpec(-0.1)


# -- learned style transfer ----------------------------------------------------------

def test_untrained_model_rejected():
    pair = init_style_pair(6, 8, 0)
    with pytest.raises(UntrainedModelError):
        apply_cross_domain(pair, np.zeros((2, 6)))


def test_identity_init_has_zero_identity_loss(rng):
    pair = init_style_pair(6, 8, 0)
    xs = np.tanh(rng.normal(size=(20, 6)))
    xt = np.tanh(rng.normal(size=(20, 6)))
    terms, _ = style_transfer_losses(pair, xs, xt)
    assert terms["l_idt"] == pytest.approx(0.0, abs=1e-20)
    assert terms["l_cyc"] == pytest.approx(0.0, abs=1e-20)


def test_single_pair_selects_zero(rng):
    xs = np.tanh(rng.normal(size=(40, 5)))
    xt = np.tanh(rng.normal(size=(40, 5)) + 0.5)
    res = train_style_transfer(xs, xt, 1, 20, 0, hidden=8, batch_size=16)
    assert res.k == 0 and len(res.pairs) == 1


def test_selection_is_argmin_final_window(rng):
    xs = np.tanh(rng.normal(size=(40, 5)))
    xt = np.tanh(rng.normal(size=(40, 5)) + 0.5)
    res = train_style_transfer(xs, xt, 3, 50, 1, hidden=8, batch_size=16)
    finals = [np.mean(p.history["l_st"][-5:]) for p in res.pairs]
    assert res.k == int(np.argmin(finals))


def test_train_style_transfer_rejects_bad_input():
    with pytest.raises(ValueError):
        train_style_transfer(np.zeros((3, 2)), np.zeros((3, 2)), 0, 5, 0)
    with pytest.raises(ValueError):
        train_style_transfer(np.zeros((0, 2)), np.zeros((3, 2)), 1, 5, 0)


def test_style_losses_gradients(rng):
    # central differences on each network's own objective
    from cake.nn import finite_diff_check
    pair = init_style_pair(4, 6, 2, adv_loss="nonsaturating", head="tanh_residual")
    for m in (pair.g_st, pair.g_rev):
        for w in m.weights:
            w += 0.2 * rng.normal(size=w.shape)
    xs = np.tanh(rng.normal(size=(8, 4)))
    xt = np.tanh(rng.normal(size=(8, 4)) + 0.3)

    def objective(name, value_fn):
        def fn(model):
            setattr(pair, name, model)
            terms, grads = style_transfer_losses(pair, xs, xt)
            return value_fn(terms), grads[name]
        return fn
    checks = {
        "g_st": lambda t: t["l_st"],
        "g_rev": lambda t: pair.lambda_cyc * t["l_cyc"] + pair.lambda_idt * t["l_ridt"],
        "d_t": lambda t: t["d_loss"],
    }
    for name, value in checks.items():
        rep = finite_diff_check(objective(name, value), getattr(pair, name), 1e-4, 100, seed=0)
        assert rep.passed, (name, rep.max_rel_error)


def test_learned_w1_reduction(default_bundle, learned_pair):
    b = default_bundle
    pair = learned_pair.pairs[0]
    x_hat = apply_cross_domain(pair, b.s_l.x)
    _, sc_src, _ = recover_latents(b.s_l.x, b.render, 1e-3)
    _, sc_hat, _ = recover_latents(x_hat, b.render, 1e-3)
    _, sc_tgt, _ = recover_latents(b.t_u.x, b.render, 1e-3)
    for j in range(sc_src.shape[1]):
        before = wasserstein_distance(sc_src[:, j], sc_tgt[:, j])
        after = wasserstein_distance(sc_hat[:, j], sc_tgt[:, j])
        print(f"s_c[{j}]: W1 {before:.3f} -> {after:.3f} ({1 - after / before:.0%} reduction)")
        assert after <= 0.5 * before


def test_learned_cycle_residual_reported(default_bundle, learned_pair):
    pair = learned_pair.pairs[0]
    res = cycle_residual(pair, default_bundle.s_l.x)
    mse = float(np.mean(res ** 2))
    final = float(np.mean(pair.history["l_cyc"][-100:]))
    print(f"cycle residual mse {mse:.2e}, final-window training l_cyc {final:.2e}")
    assert mse < 5 * final + 1e-6


def test_learned_cycle_loss_decreases_after_peak(learned_pair):
    # the generator starts as the identity map (l_cyc = 0), so the curve first
    # rises; from its peak on the 100-iteration means must not increase
    curve = smoothed(learned_pair.pairs[0].history["l_cyc"], 100)
    peak = int(np.argmax(curve))
    tail = curve[peak:]
    print("smoothed l_cyc:", np.array2string(curve, precision=5))
    assert tail[-1] < tail[0]
    assert np.all(np.diff(tail) <= 0.05 * tail[0])


def test_batch_equals_per_sample(default_bundle, learned_pair):
    pair = learned_pair.pairs[0]
    x = default_bundle.s_l.x[:10]
    batch = apply_cross_domain(pair, x)
    single = np.vstack([apply_cross_domain(pair, row) for row in x])
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-15)
    assert batch.shape == x.shape


def test_learned_output_in_range(default_bundle, learned_pair):
    x_hat = apply_cross_domain(learned_pair.pairs[0], default_bundle.s_l.x)
    assert np.all(np.abs(x_hat) < 1)


def test_checkpoint_sidecars(tmp_path, learned_pair):
    from cake.factors import StyleTransferResult
    from cake.nn import load_checkpoint
    paths = save_style_pairs(StyleTransferResult(learned_pair.pairs, learned_pair.k), tmp_path)
    assert len(paths) == 3
    model, side = load_checkpoint(tmp_path / "g_st_pair0.bin")
    assert side["role"] == "g_st" and side["pair"] == 0 and side["selected"]
    x = np.zeros((1, model.d_in))
    np.testing.assert_array_equal(forward(model, x).out, forward(learned_pair.pairs[0].g_st, x).out)
    assert json.loads((tmp_path / "d_t_pair0.bin.json").read_text())["role"] == "d_t"


def test_variant_set_size(small_bundle, rng):
    source, target = domain_specs(small_config().data)
    for n_g in (1, 2, 3):
        fac = OracleFactors(small_bundle.render, source, target, AugmentSpec(0.5), n_g)
        assert len(fac.variant_set(small_bundle.s_l, np.arange(5), rng)) == 2 * n_g
