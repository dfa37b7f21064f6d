"""Pseudo-label volume and accuracy as the exchange threshold rises.

    python demos/threshold_sweep.py [--iters 1000]
"""

import argparse

from cake.config import Config, build_bundle
from cake.trainer import train_cake


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--taus", default="0.5,0.7,0.9,0.99")
    args = ap.parse_args()

    base = Config().with_overrides({"train.t_max": args.iters, "train.ipw_warmup": args.iters // 10})
    bundle = build_bundle(base.data)
    print(f"{'tau':>5} {'target acc':>10} {'accepted':>9} {'pl acc':>7}")
    for tau in (float(t) for t in args.taus.split(",")):
        res = train_cake(base.with_overrides({"train.tau_s": tau, "train.tau_t": tau}), bundle)
        pl_acc = "-" if res.pl_acc is None else f"{res.pl_acc:.3f}"
        print(f"{tau:>5} {res.target_acc:>10.3f} {res.pl_count:>9} {pl_acc:>7}")


if __name__ == "__main__":
    main()
