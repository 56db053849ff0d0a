"""Lanczos condition estimates and iteration counts under uniform refinement."""
import argparse
import json

import numpy as np

from ietidp.harness.driver import CaseConfig, run_case


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--patches", type=int, nargs="+", default=[4, 4])
    ap.add_argument("--degrees", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--refine", type=int, nargs="+", default=[1, 2, 3, 4])
    ap.add_argument("--forms", nargs="+", default=["cg", "dg"])
    args = ap.parse_args()

    rows = []
    for form in args.forms:
        for p in args.degrees:
            for r in args.refine:
                cfg = CaseConfig(dim=len(args.patches), patches=tuple(args.patches), degree=p, refine=r, form=form)
                rep = run_case(cfg)
                x = (1 + np.log(2.0 ** r)) ** 2
                rows.append(dict(form=form, degree=p, refine=r, H_over_h=2 ** r, log_term=x,
                                 iterations=rep.iterations, kappa=rep.kappa, dofs=rep.dofs))
                print(f"{form} p={p} r={r}: dofs={rep.dofs:6d} it={rep.iterations:3d} kappa={rep.kappa:.4f}")
    print(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
