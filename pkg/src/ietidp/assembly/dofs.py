"""
Global numbering of patch-local dofs for the cG and the dG layout.

Every patch owns the coefficients of its own basis.  In the dG layout it also
stores, per interface, a copy block with the neighbour's coefficients on the
shared side (the extra layer of dofs the interface terms act on).  Each local
dof carries a global id ("gid"): in cG the matched interface dofs of adjacent
patches share one gid, in dG a copy carries the gid of the dof it mirrors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TopologyError, UnsupportedConfigurationError
from .patch import side_dofs
from .topology import MultiPatchTopology, Orientation, side_axis, tangential_axes

__all__ = ["CopyBlock", "PatchDofs", "DofMap", "build_dofmap", "matched_side_dofs"]


def matched_side_dofs(basis_k, side_k, basis_l, side_l, orientation: Orientation) -> np.ndarray:
    """
    For every dof of ``side_dofs(basis_k, side_k)`` the flat dof of ``l`` it coincides with.

    Requires the shared side to be discretized identically on both patches.
    """
    d = basis_k.dim
    tan_k = tangential_axes(d, side_k)
    tan_l = tangential_axes(d, side_l)
    for j, a_l in enumerate(tan_l):
        kv_k = basis_k.kvs[tan_k[orientation.perm[j]]]
        if orientation.flips[j]:
            kv_k = kv_k.reversed()
        if kv_k != basis_l.kvs[a_l]:
            raise UnsupportedConfigurationError("non-matching interface discretizations")
    ks = side_dofs(basis_k, side_k)
    mk = basis_k.multi_index(ks)
    ml = [None] * d
    ax_l = side_axis(side_l)
    ml[ax_l] = np.full(ks.size, basis_l.shape[ax_l] - 1 if side_l % 2 else 0)
    for j, a_l in enumerate(tan_l):
        t = mk[tan_k[orientation.perm[j]]]
        ml[a_l] = basis_l.shape[a_l] - 1 - t if orientation.flips[j] else t
    return basis_l.flat_index(ml)


@dataclass(frozen=True)
class CopyBlock:
    """Copies of the neighbour's side dofs held by a patch (dG only)."""

    neighbor: int
    side: int            # side of the holding patch
    neighbor_side: int
    orientation: Orientation  # holder -> neighbour
    start: int           # first local index of the block
    neighbor_dofs: np.ndarray  # flat dofs of the neighbour, ordered like side_dofs(neighbour)

    @property
    def size(self) -> int:
        return int(self.neighbor_dofs.size)


@dataclass
class PatchDofs:
    patch: int
    n_own: int
    gids: np.ndarray
    blocks: list = field(default_factory=list)

    @property
    def n_local(self) -> int:
        return int(self.gids.size)


@dataclass
class DofMap:
    """
    Local-to-global maps of all patches.

    Attributes
    ----------
    form : {"cg", "dg"}
    patches : list of PatchDofs
    n_global : int
        Number of gids (Dirichlet ones included).
    dirichlet : ndarray of bool
        Per gid flag; Dirichlet gids carry no equation.
    multiplicity : ndarray of int
        Number of local dofs (over all patches) carrying each gid.
    """

    form: str
    patches: list
    n_global: int
    dirichlet: np.ndarray
    multiplicity: np.ndarray = field(init=False)
    holders: dict = field(init=False, repr=False)

    def __post_init__(self):
        mult = np.zeros(self.n_global, dtype=int)
        holders = {}
        for pd in self.patches:
            np.add.at(mult, pd.gids, 1)
        for pd in self.patches:
            for i, g in enumerate(pd.gids):
                if mult[g] > 1:
                    holders.setdefault(int(g), []).append((pd.patch, i))
        self.multiplicity = mult
        self.holders = holders

    def split(self, k: int):
        """Local indices ``(B, I, D)`` of patch ``k``: interface, interior, Dirichlet."""
        g = self.patches[k].gids
        D = np.flatnonzero(self.dirichlet[g])
        free = ~self.dirichlet[g]
        B = np.flatnonzero(free & (self.multiplicity[g] > 1))
        I = np.flatnonzero(free & (self.multiplicity[g] == 1))
        return B, I, D

    @property
    def free_gids(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet)

    def patches_holding(self, gids) -> list:
        """Patches that hold every gid in ``gids``."""
        sets = None
        for g in gids:
            h = {k for k, _ in self.holders.get(int(g), [])}
            sets = h if sets is None else sets & h
        return sorted(sets) if sets else []

    def local_index(self, k: int, gid: int) -> int:
        """First local index of patch ``k`` carrying ``gid`` (-1 if none)."""
        hit = np.flatnonzero(self.patches[k].gids == gid)
        return int(hit[0]) if hit.size else -1


def _dirichlet_own(bases, topology):
    flags = [np.zeros(b.size, dtype=bool) for b in bases]
    for k, s in topology.dirichlet_sides:
        flags[k][side_dofs(bases[k], s)] = True
    return flags


def build_dofmap(bases, topology: MultiPatchTopology, form: str = "cg") -> DofMap:
    """Build the cG or dG dof layout for patches with the given bases."""
    if form not in ("cg", "dg"):
        raise ValueError(f"unknown formulation {form!r}")
    n = topology.n_patches
    if len(bases) != n:
        raise ValueError("one basis per patch required")
    own_dir = _dirichlet_own(bases, topology)

    if form == "cg":
        offsets = np.concatenate([[0], np.cumsum([b.size for b in bases])])
        parent = np.arange(offsets[-1])

        def find(a):
            root = a
            while parent[root] != root:
                root = parent[root]
            while parent[a] != root:
                parent[a], a = root, parent[a]
            return root

        for itf in topology.interfaces:
            ks = side_dofs(bases[itf.k], itf.side_k)
            ls = matched_side_dofs(bases[itf.k], itf.side_k, bases[itf.l], itf.side_l, itf.orientation)
            for a, b in zip(ks + offsets[itf.k], ls + offsets[itf.l]):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(a) for a in range(offsets[-1])])
        # gids in order of first appearance
        _, first, inv = np.unique(roots, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        gid_all = rank[inv]
        dirichlet = np.zeros(order.size, dtype=bool)
        patches = []
        for k in range(n):
            g = gid_all[offsets[k]:offsets[k + 1]]
            dirichlet[g[own_dir[k]]] = True
            patches.append(PatchDofs(k, bases[k].size, g.copy()))
        return DofMap("cg", patches, int(order.size), dirichlet)

    offsets = np.concatenate([[0], np.cumsum([b.size for b in bases])])
    dirichlet = np.concatenate(own_dir) if n else np.zeros(0, dtype=bool)
    patches = []
    for k in range(n):
        gids = [offsets[k] + np.arange(bases[k].size)]
        blocks = []
        start = bases[k].size
        for l, sk, sl, o in topology.neighbors(k):
            # sanity check of the matching (raises on non-matching knots)
            matched_side_dofs(bases[k], sk, bases[l], sl, o)
            nd = side_dofs(bases[l], sl)
            blocks.append(CopyBlock(l, sk, sl, o, start, nd))
            gids.append(offsets[l] + nd)
            start += nd.size
        patches.append(PatchDofs(k, bases[k].size, np.concatenate(gids), blocks))
    if any(pd.gids.size and pd.gids.max() >= offsets[-1] for pd in patches):
        raise TopologyError("dangling interface dof")
    return DofMap("dg", patches, int(offsets[-1]), dirichlet)
