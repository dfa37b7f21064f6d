"""``cake`` command-line harness.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

from .config import Config, build_bundle, key_docs, load_config
from .errors import CakeError, ConfigError, InfeasibleSizesError, ScmError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def config_epilog() -> str:
    lines = ["config keys (override with --set section.key=value):"]
    lines += [f"  {key} = {default}    {help}" for key, default, help in key_docs()]
    return "\n".join(lines)


def default_scm_path() -> Path:
    return Path(str(resources.files("cake") / "resources" / "default_scm.ini"))


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _cfg(args) -> Config:
    return load_config(args.config, args.set)


# -- subcommands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .data import SPLITS, write_bundle_csv

    cfg = _cfg(args)
    bundle = build_bundle(cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path, lat_path = write_bundle_csv(bundle, out / "bundle.csv")
    (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")
    manifest = {
        "config_sha256": cfg.digest(),
        "counts": {name: len(bundle.split(name)) for name in SPLITS},
        "files": {p.name: _sha256(p) for p in (data_path, lat_path)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {data_path} ({sum(manifest['counts'].values())} rows), config {manifest['config_sha256'][:12]}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import ABLATION_VARIANTS, run_variant

    cfg = _cfg(args)
    if args.variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; choose from {', '.join(ABLATION_VARIANTS)}")
    bundle = build_bundle(cfg.data)
    name = args.name or f"{args.variant}_seed{cfg.train.seed}"
    res = run_variant(cfg, bundle, args.variant, cfg.train.seed, Path(args.out) / name)
    print(f"{name}: target_acc={res.target_acc:.4f} head={res.head_acc:.4f} tail={res.tail_acc:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .report import ABLATION_HEADER, SUMMARY_HEADER, write_csv
    from .trainer import ABLATION_VARIANTS, run_ablation_suite, summarize

    cfg = _cfg(args)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {', '.join(ABLATION_VARIANTS)}")
    seeds = _ints(args.seeds)
    bundle = build_bundle(cfg.data)
    out = Path(args.out)
    table, errors = run_ablation_suite(cfg, bundle, seeds, variants, out, args.jobs)
    rows = [(v, r.seed, r.target_acc, r.head_acc, r.tail_acc, r.pl_count, r.pl_acc)
            for v in variants for r in table[v]]
    write_csv(out / "ablation_summary.csv", SUMMARY_HEADER, rows)
    summary = summarize(table)
    write_csv(out / "ablation_table.csv", ABLATION_HEADER,
              [(s["variant"], s["n"], s["mean"], s["std"], s["head"], s["tail"]) for s in summary])
    for s in summary:
        print(f"{s['variant']:>22}  {s['mean']:.4f} +- {s['std']:.4f}  (n={s['n']})")
    for v, seed, err in errors:
        print(f"FAILED {v} seed {seed}: {err}", file=sys.stderr)
    return EXIT_RUNTIME if errors else EXIT_OK


def cmd_sweep_threshold(args) -> int:
    from .report import write_csv
    from .trainer import run_ablation_suite

    taus = _floats(args.taus)
    for tau in taus:
        if not 0.0 < tau < 1.0:
            raise ConfigError(f"threshold {tau} outside (0, 1)")
    cfg = _cfg(args)
    seeds = _ints(args.seeds)
    bundle = build_bundle(cfg.data)
    out = Path(args.out)
    rows, failed = [], False
    for tau in taus:
        run_cfg = cfg.with_overrides({"train.tau_s": tau, "train.tau_t": tau})
        table, errors = run_ablation_suite(run_cfg, bundle, seeds, ["full"], out / f"tau{tau:g}", args.jobs)
        failed |= bool(errors)
        rows += [(tau, r.seed, r.target_acc, r.pl_count, r.pl_acc) for r in table["full"]]
        for _, seed, err in errors:
            print(f"FAILED tau={tau} seed {seed}: {err}", file=sys.stderr)
    write_csv(out / "threshold_sweep.csv", ["tau", "seed", "target_acc", "pl_count", "pl_acc"], rows)
    for row in rows:
        print("tau={} seed={} acc={:.4f} pl_count={}".format(*row[:4]))
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_verify_causal(args) -> int:
    from .scm import load_scm, verify_adjustment

    scm = load_scm(args.scm or default_scm_path())
    rep = verify_adjustment(scm, args.tolerance, args.n_g, args.seed)
    for x, tv in sorted(rep.per_x.items()):
        print(f"x={x}  tv(adjustment, brute force)={tv:.3e}")
    print(f"max tv {rep.max_tv:.3e} (tolerance {rep.tolerance:g})")
    print(f"subsampled style set of size {2 * args.n_g}: max tv {rep.subsample_gap:.3e}")
    print(f"adjustment vs observational conditional: max tv {rep.observational_gap:.3e}")
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_gradcheck(args) -> int:
    from .checks import composite_gradchecks

    ok = True
    for name, rep in composite_gradchecks(args.seed, args.n_params, args.tolerance).items():
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:<26} max rel err {rep.max_rel_error:.2e} "
              f"over {rep.n_checked} params")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_report(args) -> int:
    from .report import build_report

    runs = []
    for d in args.runs:
        p = Path(d)
        # a suite directory expands to its run subdirectories
        if p.is_dir() and not (p / "result.json").exists() and any(p.glob("*/result.json")):
            runs += sorted(q.parent for q in p.glob("*/result.json"))
        else:
            runs.append(p)
    skipped = build_report(runs, args.out)
    for run, why in skipped:
        print(f"skipped {run}: {why}", file=sys.stderr)
    print(f"report over {len(runs) - len(skipped)} runs written to {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = config_epilog()
    p = argparse.ArgumentParser(prog="cake", description="Synthetic semi-supervised domain adaptation harness.",
                                formatter_class=fmt, epilog=epilog)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, config=True):
        sp = sub.add_parser(name, help=help, description=help, formatter_class=fmt, epilog=epilog)
        if config:
            sp.add_argument("--config", help="config file with [data], [generator], [train] sections")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted override, repeatable (e.g. train.tau_s=0.7)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("generate", cmd_generate, "write a synthetic bundle as CSV plus a manifest")
    sp.add_argument("--out", default="out/data")

    sp = add("train", cmd_train, "train one variant and write its run directory")
    sp.add_argument("--out", default="out")
    sp.add_argument("--name", help="run directory name (default <variant>_seed<seed>)")
    sp.add_argument("--variant", default="full", help="full, -ipw, -invariant_reg, -self_pen, "
                    "-causal_intervention, s+t, solo_ms or solo_mt")

    sp = add("ablate", cmd_ablate, "run the ablation suite over seeds")
    sp.add_argument("--out", default="out/ablation")
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--variants", help="comma-separated subset (default all)")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("sweep-threshold", cmd_sweep_threshold, "accuracy and pseudo-label counts versus threshold")
    sp.add_argument("--out", default="out/sweep")
    sp.add_argument("--taus", default="0.5,0.7,0.9,0.95,0.99")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("verify-causal", cmd_verify_causal, "compare the adjustment formula with brute-force intervention",
             config=False)
    sp.add_argument("--scm", help="SCM file (default: the shipped two-class binary SCM)")
    sp.add_argument("--tolerance", type=float, default=1e-10)
    sp.add_argument("--n-g", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every composite loss", config=False)
    sp.add_argument("--n-params", type=int, default=200)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("report", cmd_report, "consolidate run directories into plot-ready CSVs", config=False)
    sp.add_argument("runs", nargs="*", help="run directories, or suite directories holding them")
    sp.add_argument("--out", default="out/report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InfeasibleSizesError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScmError as exc:
        print(f"invalid SCM: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CakeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
