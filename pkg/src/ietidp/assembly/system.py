"""
Patch systems of a multipatch discretization.

A :class:`Discretization` bundles the read-only description shared by all
workers (geometry, bases, topology, dof layout, problem data).  The heavy
per-patch data is built on demand by :func:`build_patch_system`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from ..splines import GeometryMap, PatchMesh, TensorBasis, collocation_matrix, eval_points
from .dofs import DofMap, build_dofmap
from .patch import _kron_cols, assemble_patch, harmonic_mesh_size, interface_matrix, side_dofs
from .topology import MultiPatchTopology, side_axis, side_end, tangential_axes

__all__ = [
    "Problem",
    "Discretization",
    "PatchSystem",
    "make_discretization",
    "default_delta",
    "assemble_local",
    "assemble_dg_interface",
    "eliminate_dirichlet",
    "build_patch_system",
    "assemble_global",
    "dg_norm",
    "dirichlet_side_values",
    "export_triplets",
]


@dataclass(frozen=True)
class Problem:
    """``-div(alpha grad u) = f`` with Dirichlet data ``g_D`` and Neumann data ``g_N``."""

    f: Optional[Callable] = None
    g_D: Optional[Callable] = None
    g_N: Optional[Callable] = None  # g_N(x, normal)
    exact: Optional[Callable] = None
    exact_grad: Optional[Callable] = None


def default_delta(p: int) -> float:
    return 4.0 * (p + 1) ** 2


@dataclass
class Discretization:
    geometries: list
    bases: list
    topology: MultiPatchTopology
    dofmap: DofMap
    alphas: np.ndarray
    meshes: list
    problem: Problem
    form: str = "cg"
    delta: float = 0.0
    quad_order: Optional[int] = None
    g_D: np.ndarray = field(default=None, repr=False)

    @property
    def n_patches(self) -> int:
        return len(self.bases)

    @property
    def dim(self) -> int:
        return self.topology.dim


def dirichlet_side_values(G: GeometryMap, basis: TensorBasis, side: int, g) -> tuple:
    """
    Coefficients of the Greville interpolant of ``g`` on one side.

    Returns ``(dofs, values)`` with dofs ordered like :func:`side_dofs`.
    """
    d = basis.dim
    tan = tangential_axes(d, side)
    grev = [basis.kvs[a].greville for a in tan]
    mesh = np.meshgrid(*grev, indexing="ij")
    tpts = np.stack([m.ravel(order="F") for m in mesh], axis=1) if tan else np.zeros((1, 0))
    pts = np.zeros((tpts.shape[0], d))
    pts[:, side_axis(side)] = float(side_end(side))
    for j, a in enumerate(tan):
        pts[:, a] = tpts[:, j]
    x, _ = eval_points(G, pts)
    vals = np.asarray(g(x), dtype=float).reshape(-1)
    A = _kron_cols([collocation_matrix(basis.kvs[a], basis.kvs[a].greville) for a in tan])
    return side_dofs(basis, side), np.linalg.solve(A, vals)


def make_discretization(geometries, bases, topology, problem: Problem, form="cg", alphas=None,
                        delta=None, quad_order=None) -> Discretization:
    """Dof layout, mesh sizes and Dirichlet values of a multipatch problem."""
    n = len(bases)
    if len(geometries) != n:
        raise ValueError("one geometry per basis required")
    alphas = np.ones(n) if alphas is None else np.asarray(alphas, dtype=float)
    if alphas.shape != (n,) or np.any(alphas <= 0):
        raise ValueError("diffusion coefficients must be positive, one per patch")
    dofmap = build_dofmap(bases, topology, form)
    meshes = [PatchMesh.from_geometry(G, b) for G, b in zip(geometries, bases)]
    if delta is None:
        delta = default_delta(max(max(b.degrees) for b in bases))
    if form == "dg" and delta <= 0:
        raise ValueError("penalty parameter must be positive")
    gD = np.zeros(dofmap.n_global)
    if problem.g_D is not None:
        done = np.zeros(dofmap.n_global, dtype=bool)
        for k, s in sorted(map(tuple, topology.dirichlet_sides)):
            dofs, vals = dirichlet_side_values(geometries[k], bases[k], s, problem.g_D)
            gids = dofmap.patches[k].gids[dofs]
            new = ~done[gids]
            gD[gids[new]] = vals[new]
            done[gids] = True
    return Discretization(list(geometries), list(bases), topology, dofmap, alphas, meshes, problem,
                          form, float(delta), quad_order, gD)


def assemble_dg_interface(disc: Discretization, k: int, block, consistency: bool = True) -> tuple:
    """SIP terms of patch ``k`` for one copy block: ``(local indices, dense matrix)``."""
    l = block.neighbor
    h_kl = harmonic_mesh_size(disc.meshes[k].h, disc.meshes[l].h)
    cols, M = interface_matrix(disc.geometries[k], disc.bases[k], block.side, disc.bases[l],
                               block.neighbor_side, block.orientation, disc.alphas[k], disc.delta,
                               h_kl, disc.quad_order, consistency=consistency)
    idx = np.concatenate([cols, block.start + np.arange(block.size)])
    return idx, M


def _add_dense(K, idx, M):
    r = np.repeat(idx, idx.size)
    c = np.tile(idx, idx.size)
    return K + sp.csr_matrix((M.ravel(), (r, c)), shape=K.shape)


def assemble_local(disc: Discretization, k: int, penalty_only: bool = False, with_load: bool = True,
                   volume: bool = True):
    """
    Local matrix and load over all local dofs of patch ``k`` (before Dirichlet elimination).

    With ``penalty_only`` the interface terms are reduced to the penalty part,
    which gives the matrix of the dG norm; ``volume=False`` drops the patch
    integral (leaving the interface terms only).
    """
    pd = disc.dofmap.patches[k]
    prob = disc.problem
    neumann = []
    if with_load and prob.g_N is not None:
        neumann = [(s, prob.g_N) for kk, s in disc.topology.neumann_sides if kk == k]
    K, rhs = assemble_patch(disc.geometries[k], disc.bases[k], disc.alphas[k],
                            prob.f if with_load else None, neumann, disc.quad_order)
    if not volume:
        K = sp.csr_matrix(K.shape)
    if pd.n_local > pd.n_own:
        K = sp.block_diag([K, sp.csr_matrix((pd.n_local - pd.n_own,) * 2)], format="csr")
        rhs = np.concatenate([rhs, np.zeros(pd.n_local - pd.n_own)])
        for blk in pd.blocks:
            K = _add_dense(K, *assemble_dg_interface(disc, k, blk, consistency=not penalty_only))
    K = sp.csr_matrix(K)
    K.sum_duplicates()
    K.eliminate_zeros()
    K.sort_indices()
    return K, rhs


@dataclass
class PatchSystem:
    """
    Dirichlet-reduced system of one patch, split into interface (B) and interior (I) dofs.

    ``B``, ``I`` and ``D`` are local indices into the patch's dof list.
    """

    patch: int
    K_BB: sp.csr_matrix
    K_BI: sp.csr_matrix
    K_IB: sp.csr_matrix
    K_II: sp.csr_matrix
    f_B: np.ndarray
    f_I: np.ndarray
    B: np.ndarray
    I: np.ndarray
    D: np.ndarray
    g_D: np.ndarray
    alpha: float = 1.0
    h: float = 0.0
    H: float = 0.0

    @property
    def n_B(self) -> int:
        return int(self.B.size)

    @property
    def n_I(self) -> int:
        return int(self.I.size)

    def local_vector(self, u_B, u_I) -> np.ndarray:
        """Full local coefficient vector with the Dirichlet values filled in."""
        n = self.B.size + self.I.size + self.D.size
        u = np.zeros(n)
        u[self.B] = u_B
        u[self.I] = u_I
        u[self.D] = self.g_D
        return u


def eliminate_dirichlet(K, rhs, B, I, D, g_D):
    """Drop Dirichlet rows/cols and move ``K[:, D] g_D`` to the right-hand side."""
    K = sp.csr_matrix(K)
    g_D = np.asarray(g_D, dtype=float)
    if D.size and np.any(g_D):
        rhs = rhs - K[:, D] @ g_D
    KB = K[B]
    KI = K[I]
    return (KB[:, B].tocsr(), KB[:, I].tocsr(), KI[:, B].tocsr(), KI[:, I].tocsr(),
            np.asarray(rhs[B], dtype=float), np.asarray(rhs[I], dtype=float))


def build_patch_system(disc: Discretization, k: int) -> PatchSystem:
    K, rhs = assemble_local(disc, k)
    B, I, D = disc.dofmap.split(k)
    gD = disc.g_D[disc.dofmap.patches[k].gids[D]]
    K_BB, K_BI, K_IB, K_II, f_B, f_I = eliminate_dirichlet(K, rhs, B, I, D, gD)
    return PatchSystem(k, K_BB, K_BI, K_IB, K_II, f_B, f_I, B, I, D, gD,
                       float(disc.alphas[k]), disc.meshes[k].h, disc.meshes[k].H)


def assemble_global(disc: Discretization, penalty_only: bool = False, with_load: bool = True,
                    volume: bool = True):
    """Monolithic matrix and load over all gids (no boundary conditions imposed)."""
    n = disc.dofmap.n_global
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for k in range(disc.n_patches):
        K, f = assemble_local(disc, k, penalty_only=penalty_only, with_load=with_load, volume=volume)
        g = disc.dofmap.patches[k].gids
        K = K.tocoo()
        rows.append(g[K.row])
        cols.append(g[K.col])
        vals.append(K.data)
        np.add.at(rhs, g, f)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    A.sum_duplicates()
    return A, rhs


def dg_norm(disc: Discretization, u: np.ndarray, matrix=None) -> float:
    """Squared dG norm of the global coefficient vector ``u`` (one value per gid)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (disc.dofmap.n_global,):
        raise ValueError(f"expected {disc.dofmap.n_global} coefficients, got {u.shape}")
    if matrix is None:
        matrix, _ = assemble_global(disc, penalty_only=True, with_load=False)
    return float(u @ (matrix @ u))


def export_triplets(path, A) -> None:
    """Write a sparse matrix as ``rows cols`` header plus one ``i j value`` line per entry."""
    from ..linalg import write_triplets

    write_triplets(path, A)

