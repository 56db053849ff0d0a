"""Signed jump operators ``B`` and their scaled counterparts ``B_D``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import TopologyError
from .dofs import DofMap

__all__ = ["JumpOperators", "build_jump_operators"]


@dataclass
class JumpOperators:
    """
    Constraints ``u_a - u_b = 0`` between local copies of shared dofs.

    Attributes
    ----------
    rows : list of tuple
        Per multiplier ``(gid, (k_a, i_a), (k_b, i_b))``; ``+1`` acts on
        ``(k_a, i_a)`` and ``-1`` on ``(k_b, i_b)`` (local dof indices).
    patch_rows : list of ndarray
        Sorted multiplier indices touching each patch.
    B, B_D : list of csr_matrix
        Per patch, shape ``(len(patch_rows[k]), n_B^(k))`` acting on the
        patch's interface dofs in the order of ``DofMap.split(k)[0]``.
    delta_dagger : dict
        ``(k, i) -> delta^dagger`` for every local dof taking part in a constraint.
    """

    n_multipliers: int
    rows: list
    patch_rows: list
    B: list
    B_D: list
    delta_dagger: dict = field(repr=False)

    def dense(self, scaled: bool = False, n_B=None) -> np.ndarray:
        """Global matrix acting on the concatenation of all patches' interface dofs."""
        mats = self.B_D if scaled else self.B
        offs = np.concatenate([[0], np.cumsum([m.shape[1] for m in mats])])
        out = np.zeros((self.n_multipliers, offs[-1]))
        for k, m in enumerate(mats):
            out[np.ix_(self.patch_rows[k], np.arange(offs[k], offs[k + 1]))] += m.toarray()
        return out


def build_jump_operators(dofmap: DofMap, alphas=None, rho: str = "alpha", redundancy: str = "full",
                         exclude_gids=()) -> JumpOperators:
    """
    Constraints for every free gid held by more than one local dof.

    Parameters
    ----------
    rho : {"alpha", "multiplicity"}
        Scaling weights in ``delta^dagger``; coefficient values or ones.
    redundancy : {"full", "tree"}
        ``full`` couples every pair of copies, ``tree`` only the star around
        the first copy (the owner in the dG layout).
    exclude_gids : iterable of int
        Gids kept continuous otherwise (primal vertex values).
    """
    if rho not in ("alpha", "multiplicity"):
        raise ValueError(f"unknown scaling {rho!r}")
    if redundancy not in ("full", "tree"):
        raise ValueError(f"unknown redundancy mode {redundancy!r}")
    n_patches = len(dofmap.patches)
    alphas = np.ones(n_patches) if alphas is None else np.asarray(alphas, dtype=float)
    weight = alphas if rho == "alpha" else np.ones(n_patches)
    excluded = {int(g) for g in exclude_gids}

    splits = [dofmap.split(k) for k in range(n_patches)]
    bpos = []
    for k, (B, _, _) in enumerate(splits):
        pos = np.full(dofmap.patches[k].n_local, -1)
        pos[B] = np.arange(B.size)
        bpos.append(pos)

    rows = []
    delta = {}
    for g in sorted(dofmap.holders):
        if dofmap.dirichlet[g] or g in excluded:
            continue
        hs = dofmap.holders[g]
        if len(hs) < 2:
            raise TopologyError(f"dangling interface dof {g}")
        total = sum(weight[k] for k, _ in hs)
        for k, i in hs:
            delta[(k, i)] = weight[k] / total
        if redundancy == "full":
            pairs = [(hs[a], hs[b]) for a in range(len(hs)) for b in range(a + 1, len(hs))]
        else:
            own = [h for h in hs if h[1] < dofmap.patches[h[0]].n_own]
            c = own[0] if own else hs[0]
            pairs = [(c, h) if (c[0], c[1]) < (h[0], h[1]) else (h, c) for h in hs if h != c]
        for a, b in pairs:
            rows.append((g, a, b))

    n_mult = len(rows)
    per_patch = [[] for _ in range(n_patches)]
    for r, (_, a, b) in enumerate(rows):
        per_patch[a[0]].append(r)
        if b[0] != a[0]:
            per_patch[b[0]].append(r)
    patch_rows = [np.array(sorted(set(pr)), dtype=int) for pr in per_patch]

    Bs, BDs = [], []
    for k in range(n_patches):
        where = {r: j for j, r in enumerate(patch_rows[k])}
        ri, ci, vb, vd = [], [], [], []
        for r in patch_rows[k]:
            _, a, b = rows[r]
            for (kk, i), sgn, other in ((a, 1.0, b), (b, -1.0, a)):
                if kk != k:
                    continue
                ri.append(where[r])
                ci.append(bpos[k][i])
                vb.append(sgn)
                vd.append(sgn * delta[other])
        shape = (patch_rows[k].size, splits[k][0].size)
        Bs.append(sp.csr_matrix((vb, (ri, ci)), shape=shape))
        BDs.append(sp.csr_matrix((vd, (ri, ci)), shape=shape))
    return JumpOperators(n_mult, rows, patch_rows, Bs, BDs, delta)
