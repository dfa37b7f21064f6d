"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or as a script. The
directional criteria (4 to 7) share one 5-seed ablation suite on the default
config, which takes about eight minutes on one core.
"""

import math
import time

import numpy as np
import pytest

from cake.cdl import SslModelPair, exchange_pseudo_labels, ipw_score, self_penalization_loss
from cake.checks import composite_gradchecks
from cake.config import Config, build_bundle, domain_specs
from cake.factors import AugmentSpec, intra_domain_factor, oracle_cross_domain
from cake.icl import invariance_penalty
from cake.nn import MlpModel, cross_entropy, kl_divergence, load_checkpoint
from cake.scm import load_scm, verify_adjustment
from cake.trainer import run_ablation_suite, summarize

SEEDS = [0, 1, 2, 3, 4]
RESULTS: dict = {}


def record(n, passed, detail):
    line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return passed


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    cfg = Config()
    bundle = build_bundle(cfg.data)
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    table, errors = run_ablation_suite(cfg, bundle, SEEDS, None, out)
    assert not errors, errors
    means = {row["variant"]: row for row in summarize(table)}
    return table, means, time.perf_counter() - t0


def test_criterion_1_causal_adjustment():
    from cake.cli import default_scm_path
    t0 = time.perf_counter()
    rep = verify_adjustment(load_scm(default_scm_path()), 1e-10, 2, 0)
    dt = time.perf_counter() - t0
    ok = rep.max_tv < 1e-10 and dt < 1.0
    assert record(1, ok, f"max TV {rep.max_tv:.2e} (< 1e-10), {dt:.3f} s (< 1 s)")


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    reps = composite_gradchecks(seed=0, n_params=200, tolerance=1e-4)
    dt = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in reps.values())
    ok = all(r.passed and r.n_checked >= 200 for r in reps.values()) and dt < 30
    assert record(2, ok, f"{len(reps)} losses, worst rel err {worst:.2e} (< 1e-4), "
                         f"min params {min(r.n_checked for r in reps.values())}, {dt:.1f} s (< 30 s)")


def test_criterion_3_closed_form_values():
    k = 7
    ce = cross_entropy(np.full((3, k), 1.0 / k), [0, 3, 6]).loss
    p = np.array([0.2, 0.3, 0.5])
    kl = kl_divergence(p, p)
    z = np.random.default_rng(0).normal(size=(4, 5))
    l_ir = invariance_penalty([z, z, z])[0]
    w = ipw_score(0.9, 0.5)
    # logits (0, log(0.55/0.45)) give probs (0.45, 0.55)
    model = MlpModel([np.eye(1), np.eye(1), np.array([[0.0, 1.0]])], [np.zeros(1), np.zeros(1), np.zeros(2)])
    u = np.log(0.55 / 0.45)
    sp = self_penalization_loss(model, np.array([[np.arctanh(np.arctanh(u))]]), 0.6).loss
    checks = [abs(ce - math.log(k)) <= 1e-12, kl == 0.0, l_ir == 0.0, abs(w - 1.5312) <= 1e-4,
              abs(sp - 0.7985) <= 1e-4]
    assert record(3, all(checks), f"CE {ce:.15f} vs ln {k}, KL {kl}, IPW {w:.6f}, self-pen {sp:.6f}")


def test_criterion_4_main_result(suite):
    table, means, _ = suite
    full, st = means["full"]["mean"], means["s+t"]["mean"]
    runtime = sum(r.wall_clock for v in ("full", "s+t") for r in table[v])
    ok = full - st >= 0.05 and runtime < 25 * 60
    assert record(4, ok, f"full {full:.4f} vs S+T {st:.4f}: +{100 * (full - st):.1f} pts (>= 5), "
                         f"runtime {runtime / 60:.1f} min (< 25)")


def test_criterion_5_ablations(suite):
    _, means, _ = suite
    full = means["full"]["mean"]
    names = ["-ipw", "-invariant_reg", "-self_pen", "-causal_intervention"]
    drops = {v: full - means[v]["mean"] for v in names}
    second = sorted(drops.values(), reverse=True)[1]
    below = all(d >= 0 for d in drops.values())
    key = all(drops[v] >= second - 0.005 for v in ("-causal_intervention", "-ipw"))
    detail = ", ".join(f"{v} {100 * d:+.2f}" for v, d in drops.items())
    assert record(5, below and key, f"drops in pts: {detail}; all >= 0: {below}; "
                                    f"-causal_intervention and -ipw largest: {key}")


def test_criterion_6_cooperation(suite):
    _, means, _ = suite
    full = means["full"]["mean"]
    ms, mt = means["solo_ms"]["mean"], means["solo_mt"]["mean"]
    assert record(6, ms < full and mt < full, f"full {full:.4f}, solo m_s {ms:.4f}, solo m_t {mt:.4f}")


def test_criterion_7_head_tail(suite):
    _, means, _ = suite
    tail = means["full"]["tail"] - means["-ipw"]["tail"]
    head = means["full"]["head"] - means["-ipw"]["head"]
    ok = tail > 0 and abs(head) < 0.03
    assert record(7, ok, f"tail full - (-ipw) {100 * tail:+.2f} pts (> 0), head {100 * head:+.2f} pts (|.| < 3)")


def test_criterion_8_pseudo_label_dynamics(tmp_path):
    cfg = Config()
    bundle = build_bundle(cfg.data)
    series = {}
    for tau in (0.5, 0.99):
        run_cfg = cfg.with_overrides({"train.tau_s": tau, "train.tau_t": tau})
        table, errors = run_ablation_suite(run_cfg, bundle, [0], ["full"], tmp_path / f"tau{tau}")
        assert not errors
        series[tau] = table["full"][0].series
        assert all("pl_count" in row and "pl_acc" in row for row in series[tau])
        assert (tmp_path / f"tau{tau}" / "full_seed0" / "ledger.csv").stat().st_size > 0
    lo = [r["pl_count"] for r in series[0.5]]
    hi = [r["pl_count"] for r in series[0.99]]
    logged = all(h <= l for h, l in zip(hi, lo)) and all(h < l for h, l in zip(hi[1:], lo[1:]))
    # same trained models: raising both thresholds never accepts more
    m_s, _ = load_checkpoint(tmp_path / "tau0.5" / "full_seed0" / "m_s.bin")
    m_t, _ = load_checkpoint(tmp_path / "tau0.5" / "full_seed0" / "m_t.bin")
    pair = SslModelPair(m_s, m_t)
    x_u = bundle.features("t_u")
    taus = np.linspace(0.0, 0.99, 34)
    counts = [exchange_pseudo_labels(pair, x_u, bundle.t_u.ids, t, t, 0).for_t.n_accepted for t in taus]
    exact = all(b <= a for a, b in zip(counts, counts[1:]))
    assert record(8, logged and exact, f"cumulative accepted at final step: tau 0.5 {lo[-1]}, tau 0.99 {hi[-1]}; "
                                       f"every logged step fewer: {logged}; same-model monotone: {exact}")


def test_criterion_9_concept_preservation():
    cfg = Config().with_overrides({"data.n_s": 10_000, "data.n_u": 300, "data.n_test": 100})
    bundle = build_bundle(cfg.data)
    _, target = domain_specs(cfg.data)
    aug = AugmentSpec(cfg.generator.sigma_i)
    split = bundle.s_l
    rng = np.random.default_rng(0)
    drift = 0
    for i in range(len(split)):
        s = split.sample(i)
        for out in (oracle_cross_domain(s, target, rng, bundle.render),
                    intra_domain_factor(s, aug, rng, bundle.render)):
            drift += int(not (np.array_equal(out.c, s.c) and out.y == s.y))
    assert record(9, drift == 0, f"{len(split)} samples x 2 oracle generators, {drift} with concept or label drift")


def test_criterion_10_determinism(tmp_path):
    from cake.cli import main
    small = ["--set", "data.n_s=600", "--set", "data.n_u=200", "--set", "data.n_test=200",
             "--set", "train.t_max=200", "--set", "generator.iters=200"]
    commands = [
        lambda o: ["generate", "--out", str(o / "data")] + small,
        lambda o: ["train", "--out", str(o), "--name", "run"] + small,
        lambda o: ["ablate", "--out", str(o / "abl"), "--seeds", "0", "--variants=-ipw,solo_mt,s+t"] + small,
        lambda o: ["sweep-threshold", "--out", str(o / "sweep"), "--taus", "0.7", "--seeds", "1"] + small,
        lambda o: ["verify-causal"],
        lambda o: ["gradcheck"],
        lambda o: ["report", str(o / "abl"), str(o / "run"), "--out", str(o / "report")],
    ]
    for name in ("a", "b"):
        for cmd in commands:
            assert main(cmd(tmp_path / name)) == 0

    def files(root):
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file() and p.name != "timing.json"}
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    differing = sorted(k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))
    assert record(10, not differing and len(fa) > 20,
                  f"{len(fa)} output files compared (timing.json excluded), {len(differing)} differ")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-s", "-q"]))
