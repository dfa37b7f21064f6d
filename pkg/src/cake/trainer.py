"""Full training runs: CAKE, its ablations, solo variants and the S+T baseline.

Order of work inside one CAKE iteration (fixed; see ``peer_order``):

1. draw one batch each from ``s_l``, ``t_l`` and ``t_u``;
2. build causal-factor variants (intra for all three, cross for ``s_l``);
3. exchange pseudo-labels on the unlabeled originals;
4. update both label-marginal estimators;
5. source-side model: ICL loss + its CDL risk, one SGD step;
6. target-side model: its CDL risk, one SGD step.

The target-side model is evaluated on ``t_test``; the source-side model's
test accuracy is logged alongside it.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cdl import (
    CdlWeights, MarginalEstimator, SslModelPair, cdl_model_risk, exchange_pseudo_labels,
    self_training_labels, update_marginal,
)
from .config import Config, domain_specs
from .data import DatasetBundle
from .errors import NonFiniteError
from .factors import (
    AugmentSpec, LearnedFactors, OracleFactors, StyleEstimator, StyleTransferResult, save_style_pairs,
    train_style_transfer,
)
from .icl import IclBatch, IclWeights, icl_loss
from .nn import cross_entropy, backward, forward, init_mlp, init_optimizer, save_checkpoint, sgd_step

LEDGER_HEADER = ["iter", "id", "proposer", "proposed", "peer_conf", "recip_conf", "status", "correct"]


@dataclass
class RunResult:
    variant: str
    target_acc: float
    per_class_acc: list
    head_acc: float
    tail_acc: float
    source_model_acc: float | None
    pl_count: int
    pl_acc: float | None
    series: list
    head_classes: list
    tail_classes: list
    config: str
    ledger_path: str | None = None
    class_rank: list = field(default_factory=list)
    seed: int = 0
    wall_clock: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        """Deterministic serialisation; wall-clock goes to ``timing.json`` instead."""
        d = asdict(self)
        d.pop("wall_clock")
        d.pop("series")
        # relative to the run directory, so reruns elsewhere compare equal
        if d["ledger_path"]:
            d["ledger_path"] = Path(d["ledger_path"]).name
        return json.dumps(d, sort_keys=True, indent=1) + "\n"


def class_rank(bundle: DatasetBundle) -> list[int]:
    """Classes by decreasing labeled-source frequency (ties by index)."""
    counts = np.bincount(bundle.labels("s_l"), minlength=bundle.n_classes)
    return sorted(range(bundle.n_classes), key=lambda k: (-counts[k], k))


def head_tail_classes(bundle: DatasetBundle):
    """Classes ranked by labeled-source frequency; top half is head."""
    order = class_rank(bundle)
    half = bundle.n_classes // 2
    return sorted(order[:half]), sorted(order[half:])


def evaluate(model, bundle: DatasetBundle):
    y = bundle.hidden_labels("t_test", "eval")
    pred = forward(model, bundle.features("t_test")).probs.argmax(axis=1)
    per_class = [float(np.mean(pred[y == k] == k)) if np.any(y == k) else float("nan") for k in range(bundle.n_classes)]
    return float(np.mean(pred == y)), per_class


def prepare_factors(cfg: Config, bundle: DatasetBundle, seed: int):
    g = cfg.generator
    aug = AugmentSpec(g.sigma_i)
    if g.mode == "oracle":
        source, target = bundle.source, bundle.target
        if source is None:
            source, target = domain_specs(cfg.data)
        return OracleFactors(bundle.render, source, target, aug, g.n_g)
    t_all = np.vstack([bundle.features("t_l"), bundle.features("t_u")])
    source_p = None
    if g.balance_source:
        y = bundle.labels("s_l")
        source_p = 1.0 / np.bincount(y)[y]
        source_p /= source_p.sum()
    res = train_style_transfer(bundle.features("s_l"), t_all, g.n_g, g.iters, seed, g.hidden, g.batch_size,
                               g.learning_rate, g.momentum, g.lambda_cyc, g.lambda_idt, g.adv_loss,
                               source_p=source_p)
    return LearnedFactors(res.pairs, res.k, StyleEstimator(bundle.render, g.ridge), aug)


def variant_name(t) -> str:
    if t.solo:
        return f"solo_m{t.solo}"
    flags = [n for n in ("no_ipw", "no_invariant_reg", "no_self_pen", "no_causal_intervention") if getattr(t, n)]
    return "full" if not flags else "+".join(flags)


class _Writer:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir else None
        self.metrics = self.ledger = self._ledger_fh = self._metrics_fh = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._metrics_fh = open(self.out_dir / "metrics.jsonl", "w", encoding="utf-8")
            self._ledger_fh = open(self.out_dir / "ledger.csv", "w", newline="", encoding="utf-8")
            self.ledger = csv.writer(self._ledger_fh, lineterminator="\n")
            self.ledger.writerow(LEDGER_HEADER)

    def metric(self, row):
        if self._metrics_fh:
            self._metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")

    def exchange(self, ex):
        if not self.ledger:
            return
        for d in (ex.for_s, ex.for_t):
            for r in d.records(ex.iteration):
                self.ledger.writerow([r.iteration, r.sample_id, r.proposer.value, r.proposed, format(r.peer_conf, ".17g"),
                                      format(r.recip_conf, ".17g"), r.status.value,
                                      "" if r.correct is None else int(r.correct)])

    def close(self):
        for fh in (self._metrics_fh, self._ledger_fh):
            if fh:
                fh.close()

    @property
    def ledger_path(self):
        return str(self.out_dir / "ledger.csv") if self.out_dir else None


def _finish(result: RunResult, cfg: Config, out_dir, t0):
    result.wall_clock = time.perf_counter() - t0
    if out_dir:
        out = Path(out_dir)
        (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")
        (out / "result.json").write_text(result.to_json(), encoding="utf-8")
        (out / "timing.json").write_text(json.dumps({"wall_clock": result.wall_clock}) + "\n", encoding="utf-8")
    return result


def _save_models(out: Path, pair: SslModelPair, solo, factors, t):
    for role, model in (("m_s", pair.m_s), ("m_t", pair.m_t)):
        if not solo or role == f"m_{solo}":
            save_checkpoint(model, out / f"{role}.bin", iteration=t.t_max, role=role)
    if isinstance(factors, LearnedFactors):
        save_style_pairs(StyleTransferResult(factors.pairs, factors.k), out / "generators")


def _snapshot(out_dir, it, last_row, exc):
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "failure.json").write_text(
            json.dumps({"iteration": it, "error": str(exc), "op": getattr(exc, "op", None), "last_metrics": last_row},
                       sort_keys=True) + "\n", encoding="utf-8")


def train_cake(cfg: Config, bundle: DatasetBundle, out_dir=None, factors=None) -> RunResult:
    """One CAKE run (or an ablation / solo variant selected by ``cfg.train``)."""
    t0 = time.perf_counter()
    t = cfg.train
    k = bundle.n_classes
    ss = np.random.SeedSequence([t.seed, 0xCA4E])
    s_init, s_batch, s_var, s_gen = ss.spawn(4)
    init_seeds = s_init.generate_state(3)
    rng = np.random.default_rng(s_batch)
    vrng = np.random.default_rng(s_var)
    causal = not t.no_causal_intervention
    if causal and factors is None:
        try:
            factors = prepare_factors(cfg, bundle, int(s_gen.generate_state(1)[0]))
        except NonFiniteError as exc:
            _snapshot(out_dir, -1, None, exc)
            raise

    m_s = init_mlp(bundle.d_x, t.hidden, k, int(init_seeds[0]))
    m_t = init_mlp(bundle.d_x, t.hidden, k, int(init_seeds[1]))
    pair = SslModelPair(m_s, m_t)
    opt_s = init_optimizer(m_s, t.learning_rate, t.momentum)
    opt_t = init_optimizer(m_t, t.learning_rate, t.momentum)
    m_icl, opt_icl = m_s, opt_s
    if causal and not t.share_icl:
        m_icl = init_mlp(bundle.d_x, t.hidden, k, int(init_seeds[2]))
        opt_icl = init_optimizer(m_icl, t.learning_rate, t.momentum)
    est_s = MarginalEstimator.uniform(k, t.ema_momentum)
    est_t = MarginalEstimator.uniform(k, t.ema_momentum)
    icl_w = IclWeights(0.0 if t.no_invariant_reg else t.lambda_ir, t.lambda_feat)
    cdl_w = CdlWeights(t.lambda_u, 0.0 if t.no_self_pen else t.lambda_sp)
    solo = t.solo

    s_l, t_l, t_u = bundle.s_l, bundle.t_l, bundle.t_u
    y_s, y_l = bundle.labels("s_l"), bundle.labels("t_l")
    y_u_hidden = bundle.hidden_labels("t_u", "ledger")
    b = t.batch_size
    writer = _Writer(out_dir)
    series, last_row = [], None
    cum_acc = cum_cor = 0
    icl_diag = {"ce": None, "l_ir": None, "l_feat": None}
    eval_model = m_s if solo == "s" else m_t
    it = 0
    try:
        for it in range(t.t_max + 1):
            if it % t.log_interval == 0 or it == t.t_max:
                acc_t, _ = evaluate(eval_model, bundle)
                acc_s = None if solo else evaluate(m_s, bundle)[0]
                last_row = {"iter": it, "acc_t": acc_t, "acc_s": acc_s, "pl_count": cum_acc,
                            "pl_correct": cum_cor, "pl_acc": (cum_cor / cum_acc) if cum_acc else None, **icl_diag}
                series.append(last_row)
                writer.metric(last_row)
            if it == t.t_max:
                break
            rs = rng.choice(len(s_l), size=min(b, len(s_l)), replace=False)
            rl = rng.choice(len(t_l), size=min(b, len(t_l)), replace=False)
            ru = rng.choice(len(t_u), size=min(b, len(t_u)), replace=False)
            xs, ys, xl, yl, xu = s_l.x[rs], y_s[rs], t_l.x[rl], y_l[rl], t_u.x[ru]
            if causal:
                xs_i = factors.intra(s_l, rs, vrng)
                xs_c = factors.composed(s_l, rs, vrng) if cfg.generator.compose else factors.cross(s_l, rs, vrng)
                xl_i, xu_i = factors.intra(t_l, rl, vrng), factors.intra(t_u, ru, vrng)
                src = (np.vstack([xs, xs_i, xs_c]), np.tile(ys, 3))
                tgt = (np.vstack([xl, xl_i]), np.tile(yl, 2))
                unl = np.vstack([xu, xu_i])
            else:
                src, tgt, unl = (xs, ys), (xl, yl), xu

            # pseudo-labels
            exchange_now = it % t.exchange_interval == 0
            empty = (np.zeros((0, bundle.d_x)), np.zeros(0, dtype=np.int64))
            pl_s, pl_t = empty, empty
            if exchange_now and not solo:
                ex = exchange_pseudo_labels(pair, xu, t_u.ids[ru], t.tau_s, t.tau_t, it,
                                            true_labels=y_u_hidden[ru], peer_only=t.peer_only)
                pl_s = (xu[ex.for_s.accepted], ex.for_s.proposed[ex.for_s.accepted])
                pl_t = (xu[ex.for_t.accepted], ex.for_t.proposed[ex.for_t.accepted])
                cum_acc += ex.for_t.n_accepted
                cum_cor += int(np.count_nonzero(ex.for_t.correct[ex.for_t.accepted]))
                if t.ledger_interval and it % t.ledger_interval == 0:
                    writer.exchange(ex)
            elif exchange_now:
                own = m_s if solo == "s" else m_t
                tau = t.tau_s if solo == "s" else t.tau_t
                lab, ok = self_training_labels(forward(own, xu).probs, tau)
                chosen = (xu[ok], lab[ok])
                if solo == "s":
                    pl_s = chosen
                else:
                    pl_t = chosen
                cum_acc += int(ok.sum())
                cum_cor += int(np.count_nonzero(lab[ok] == y_u_hidden[ru][ok]))

            est_s = update_marginal(est_s, np.concatenate([ys, pl_s[1]]))
            est_t = update_marginal(est_t, np.concatenate([yl, pl_t[1]]))

            use_ipw = not t.no_ipw and it >= t.ipw_warmup
            steps = []
            if solo != "t":
                def step_s():
                    g = cdl_model_risk(m_s, *src, *pl_s, unl, est_s, t.tau_s, cdl_w, use_ipw).grads
                    if causal:
                        icl = icl_loss(m_icl, IclBatch(xs, xs_i, xs_c, ys), icl_w)
                        icl_diag.update({key: icl.diagnostics[key] for key in ("ce", "l_ir", "l_feat")})
                        if m_icl is m_s:
                            g = g + icl.grads
                        else:
                            sgd_step(m_icl, icl.grads, opt_icl)
                    sgd_step(m_s, g, opt_s)
                steps.append(step_s)
            if solo != "s":
                def step_t():
                    g = cdl_model_risk(m_t, *tgt, *pl_t, unl, est_t, t.tau_t, cdl_w, use_ipw).grads
                    sgd_step(m_t, g, opt_t)
                steps.append(step_t)
            if t.peer_order == "t_first":
                steps.reverse()
            for step in steps:
                step()
    except NonFiniteError as exc:
        _snapshot(out_dir, it, last_row, exc)
        writer.close()
        raise
    writer.close()
    if out_dir:
        _save_models(Path(out_dir), pair, solo, factors, t)

    acc, per_class = evaluate(eval_model, bundle)
    head, tail = head_tail_classes(bundle)
    result = RunResult(
        variant=variant_name(t), target_acc=acc, per_class_acc=per_class,
        head_acc=float(np.nanmean([per_class[c] for c in head])), tail_acc=float(np.nanmean([per_class[c] for c in tail])),
        source_model_acc=None if solo else evaluate(m_s, bundle)[0],
        pl_count=cum_acc, pl_acc=(cum_cor / cum_acc) if cum_acc else None,
        series=series, head_classes=head, tail_classes=tail, config=cfg.echo(), ledger_path=writer.ledger_path,
        class_rank=class_rank(bundle))
    return _finish(result, cfg, out_dir, t0)


def train_baseline_st(cfg: Config, bundle: DatasetBundle, out_dir=None) -> RunResult:
    """S+T: plain CE on labeled source plus labeled target; one batch of each per iteration."""
    t0 = time.perf_counter()
    t = cfg.train
    k = bundle.n_classes
    ss = np.random.SeedSequence([t.seed, 0x5354])
    s_init, s_batch = ss.spawn(2)
    rng = np.random.default_rng(s_batch)
    model = init_mlp(bundle.d_x, t.hidden, k, int(s_init.generate_state(1)[0]))
    opt = init_optimizer(model, t.learning_rate, t.momentum)
    s_l, t_l = bundle.s_l, bundle.t_l
    y_s, y_l = bundle.labels("s_l"), bundle.labels("t_l")
    writer = _Writer(out_dir)
    series = []
    for it in range(t.t_max + 1):
        if it % t.log_interval == 0 or it == t.t_max:
            row = {"iter": it, "acc_t": evaluate(model, bundle)[0]}
            series.append(row)
            writer.metric(row)
        if it == t.t_max:
            break
        rs = rng.choice(len(s_l), size=min(t.batch_size, len(s_l)), replace=False)
        parts_x, parts_y = [s_l.x[rs]], [y_s[rs]]
        if len(t_l):
            rl = rng.choice(len(t_l), size=min(t.batch_size, len(t_l)), replace=False)
            parts_x.append(t_l.x[rl])
            parts_y.append(y_l[rl])
        fwd = forward(model, np.vstack(parts_x))
        ce = cross_entropy(fwd.probs, np.concatenate(parts_y))
        sgd_step(model, backward(model, fwd.cache, ce.dlogits), opt)
    writer.close()
    acc, per_class = evaluate(model, bundle)
    head, tail = head_tail_classes(bundle)
    result = RunResult("s+t", acc, per_class, float(np.nanmean([per_class[c] for c in head])),
                       float(np.nanmean([per_class[c] for c in tail])), None, 0, None, series, head, tail,
                       cfg.echo(), writer.ledger_path, class_rank(bundle))
    return _finish(result, cfg, out_dir, t0)


ABLATION_VARIANTS = {
    "full": {},
    "-ipw": {"train.no_ipw": True},
    "-invariant_reg": {"train.no_invariant_reg": True},
    "-self_pen": {"train.no_self_pen": True},
    "-causal_intervention": {"train.no_causal_intervention": True},
    "s+t": None,
    "solo_ms": {"train.solo": "s"},
    "solo_mt": {"train.solo": "t"},
}


def run_variant(cfg: Config, bundle: DatasetBundle, variant: str, seed: int, out_dir=None) -> RunResult:
    over = dict(ABLATION_VARIANTS[variant] or {})
    over["train.seed"] = seed
    run_cfg = cfg.with_overrides(over)
    if ABLATION_VARIANTS[variant] is None:
        res = train_baseline_st(run_cfg, bundle, out_dir)
    else:
        res = train_cake(run_cfg, bundle, out_dir)
    res.variant = variant
    res.seed = seed
    if out_dir:
        (Path(out_dir) / "result.json").write_text(res.to_json(), encoding="utf-8")
    return res


def _run_job(args):
    cfg, bundle, variant, seed, out_dir = args
    try:
        return variant, seed, run_variant(cfg, bundle, variant, seed, out_dir), None
    except Exception as exc:  # the suite keeps going; the error is reported per run
        return variant, seed, None, f"{type(exc).__name__}: {exc}"


def run_ablation_suite(cfg: Config, bundle: DatasetBundle, seeds, variants=None, out_root=None, jobs: int = 1):
    """Run every variant for every seed. Returns ``{variant: [RunResult, ...]}``
    and a list of ``(variant, seed, error)`` for failed runs."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    variants = list(variants or ABLATION_VARIANTS)
    jobs_args = [(cfg, bundle, v, s, (Path(out_root) / f"{v}_seed{s}") if out_root else None)
                 for v in variants for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_job, jobs_args))
    else:
        outs = [_run_job(a) for a in jobs_args]
    table = {v: [] for v in variants}
    errors = []
    for v, s, res, err in outs:
        if err is None:
            table[v].append(res)
        else:
            errors.append((v, s, err))
    return table, errors


def summarize(table) -> list[dict]:
    rows = []
    for v, results in table.items():
        accs = np.array([r.target_acc for r in results])
        rows.append({"variant": v, "n": len(results),
                     "mean": float(accs.mean()) if accs.size else float("nan"),
                     "std": float(accs.std(ddof=1)) if accs.size > 1 else 0.0,
                     "head": float(np.mean([r.head_acc for r in results])) if results else float("nan"),
                     "tail": float(np.mean([r.tail_acc for r in results])) if results else float("nan")})
    return rows
