"""Fine and NLMC runs of the 2C and 3C scenarios; prints the summary tables.

    python scripts/run_paper_tables.py --out runs --n 200
"""

import argparse
import logging
from pathlib import Path

from fracflow.experiments import paper_scenario, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--n", type=int, default=200, help="fine cells per side")
    ap.add_argument("--kinds", default="2c,3c")
    ap.add_argument("--no-coarse", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    for kind in args.kinds.split(","):
        sc = paper_scenario(kind, args.n, "builtin:fractures_25")
        out = Path(args.out) / f"{kind}_{args.n}"
        report = run_scenario(sc, out=out, coarse=not args.no_coarse)
        print(f"\n{kind.upper()} {args.n}x{args.n} -> {out}")
        for r in report.summary_rows():
            iters = " ".join(f"{k[9:]}={v:.2f}" for k, v in r.items() if k.startswith("avg_iter_"))
            print(f"  {r['level']:>12} {r['scheme']:>8} dofs={r['dofs']:<6} "
                  f"e={r['final_error_pct']:.4f}%  N_it {iters}")


if __name__ == "__main__":
    main()
