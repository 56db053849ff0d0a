"""L2 (and dG) errors of the IETI-DP solution under uniform refinement."""
import argparse

import numpy as np

from ietidp.harness.driver import CaseConfig, run_case


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--patches", type=int, nargs="+", default=[2, 2])
    ap.add_argument("--degrees", type=int, nargs="+", default=[2, 3])
    ap.add_argument("--max-refine", type=int, default=5)
    ap.add_argument("--form", default="cg")
    ap.add_argument("--problem", default="homogeneous")
    args = ap.parse_args()

    for p in args.degrees:
        prev = None
        print(f"degree {p} ({args.form}, {args.problem})")
        for r in range(1, args.max_refine + 1):
            rep = run_case(CaseConfig(dim=args.dim, patches=tuple(args.patches), degree=p, refine=r,
                                      form=args.form, problem=args.problem, tol=1e-12))
            rate = "" if prev is None else f"  rate {np.log2(prev / rep.l2_error):.3f}"
            extra = "" if rep.dg_error is None else f"  dG {rep.dg_error:.3e}"
            print(f"  r={r} dofs={rep.dofs:7d} L2 {rep.l2_error:.3e}{extra}{rate}")
            prev = rep.l2_error


if __name__ == "__main__":
    main()
