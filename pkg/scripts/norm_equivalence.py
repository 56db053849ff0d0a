"""Ratio a_h(u, u) / |u|_dG^2 over random coefficient vectors on two patches."""
import argparse

import numpy as np
import scipy.linalg as sla

from ietidp.assembly.system import assemble_global, default_delta, dg_norm
from ietidp.harness.problems import grid_discretization


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--degree", type=int, default=2)
    ap.add_argument("--delta", type=float, default=None)
    ap.add_argument("--refine", type=int, nargs="+", default=[1, 2, 3, 4])
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    delta = default_delta(args.degree) if args.delta is None else args.delta

    for r in args.refine:
        disc = grid_discretization(2, (2, 1), args.degree, r, "dg", "homogeneous", delta=delta)
        A, _ = assemble_global(disc)
        P, _ = assemble_global(disc, penalty_only=True, with_load=False)
        fr = disc.dofmap.free_gids
        rng = np.random.default_rng(args.seed)
        ratios = []
        for _ in range(args.samples):
            u = np.zeros(disc.dofmap.n_global)
            u[fr] = rng.standard_normal(fr.size)
            ratios.append((u @ A @ u) / dg_norm(disc, u, P))
        ev = sla.eigh(A[fr][:, fr].toarray(), P[fr][:, fr].toarray(), eigvals_only=True)
        print(f"r={r} delta={delta:g}: sampled [{min(ratios):.4f}, {max(ratios):.4f}]"
              f"  spectrum [{ev[0]:.4f}, {ev[-1]:.4f}]")


if __name__ == "__main__":
    main()
