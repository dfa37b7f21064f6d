"""The ablation suite over a few seeds, printed as a mean and std table.

The default config over 5 seeds takes about 8 minutes on one core; pass
fewer seeds or --iters for a quicker look.

    python demos/ablation.py --seeds 0,1 --iters 2000
"""

import argparse

from cake.config import Config, build_bundle
from cake.trainer import run_ablation_suite, summarize


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--out", default=None, help="optional directory for run outputs")
    args = ap.parse_args()

    cfg = Config()
    if args.iters:
        cfg = cfg.with_overrides({"train.t_max": args.iters, "train.ipw_warmup": args.iters // 10})
    table, errors = run_ablation_suite(cfg, build_bundle(cfg.data), [int(s) for s in args.seeds.split(",")],
                                       None, args.out)
    print(f"{'variant':<22}{'mean':>7}{'std':>7}{'head':>7}{'tail':>7}")
    for row in summarize(table):
        print(f"{row['variant']:<22}{row['mean']:>7.3f}{row['std']:>7.3f}{row['head']:>7.3f}{row['tail']:>7.3f}")
    for variant, seed, err in errors:
        print(f"failed: {variant} seed {seed}: {err}")


if __name__ == "__main__":
    main()
