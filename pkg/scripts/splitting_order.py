"""First-order splitting error on the smooth two-continuum case.

    python scripts/splitting_order.py --n 50 --steps 25,50,100,200
"""

import argparse

from fracflow.experiments import smooth_two_continuum, splitting_order_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--T", type=float, default=0.002)
    ap.add_argument("--steps", default="25,50,100,200")
    args = ap.parse_args()
    steps = [int(s) for s in args.steps.split(",")]
    res = splitting_order_study(smooth_two_continuum(args.n), args.T, steps)
    print("N_T     " + "".join(f"{s:>12}" for s in res))
    for j, nt in enumerate(steps):
        print(f"{nt:<8}" + "".join(f"{res[s]['diff'][j]:12.4e}" for s in res))
    for s, v in res.items():
        print(f"{s}: ratios " + ", ".join(f"{r:.3f}" for r in v["ratio"]))


if __name__ == "__main__":
    main()
