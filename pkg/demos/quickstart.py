"""Train full CAKE and the S+T baseline on a reduced bundle and compare them.

    python demos/quickstart.py [--iters 1500]
"""

import argparse

from cake.config import Config, build_bundle
from cake.trainer import train_baseline_st, train_cake


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = Config().with_overrides({"train.t_max": args.iters, "train.seed": args.seed,
                                   "train.ipw_warmup": args.iters // 10})
    bundle = build_bundle(cfg.data)
    print(f"bundle: {bundle.n_classes} classes, {len(bundle.s_l)} labeled source, "
          f"{len(bundle.t_l)} labeled target, {len(bundle.t_u)} unlabeled target")

    st = train_baseline_st(cfg, bundle)
    full = train_cake(cfg, bundle)
    print(f"S+T   target acc {st.target_acc:.3f}  head {st.head_acc:.3f}  tail {st.tail_acc:.3f}")
    print(f"CAKE  target acc {full.target_acc:.3f}  head {full.head_acc:.3f}  tail {full.tail_acc:.3f}"
          f"  (source-side model {full.source_model_acc:.3f})")
    print(f"pseudo-labels accepted: {full.pl_count}, of which correct: {full.pl_acc:.3f}")
    for row in full.series[:: max(1, len(full.series) // 8)]:
        print(f"  iter {row['iter']:>5}  acc_t {row['acc_t']:.3f}  pl_count {row['pl_count']}")


if __name__ == "__main__":
    main()
