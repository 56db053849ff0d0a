"""
Dual-primal tearing and interconnecting on top of the patch systems.

Per patch, :class:`PatchIeti` holds the factorized augmented matrix

    [[K_BB, K_BI, C^T],
     [K_IB, K_II, 0  ],
     [C,    0,    0  ]]

and the energy-minimizing primal basis ``Phi``.  :class:`IetiOperators` glues
the patches together serially (global vectors as plain arrays); the
distributed counterpart lives in :mod:`ietidp.runtime`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.sparse as sp

from .assembly.jumps import JumpOperators, build_jump_operators
from .assembly.patch import entity_average_weights, entity_dofs
from .assembly.system import Discretization, PatchSystem, build_patch_system
from .errors import ConfigurationError, SingularMatrixError
from .linalg import Factorization, apply_schur, factorize, pcg, schur_rhs

__all__ = [
    "Primal",
    "PrimalSpec",
    "select_primals",
    "AugmentedSystem",
    "build_augmented",
    "apply_SDeltaDelta_inv",
    "PatchIeti",
    "build_patch_ieti",
    "assemble_Spipi",
    "IetiOperators",
    "build_ieti",
]


# ---------------------------------------------------------------------------
# primal variables

@dataclass(frozen=True)
class Primal:
    """One primal functional ``psi(u) = sum_g weights[g] u[g]`` over gids."""

    kind: str          # vertex | edge-average | face-average
    patch: int         # patch whose entity generated it
    entity: tuple      # ((axis, end), ...) fixed parameter coordinates
    gids: np.ndarray
    weights: np.ndarray
    patches: tuple     # patches holding every gid, sorted


@dataclass
class PrimalSpec:
    primals: list
    local: list = field(default_factory=list)  # per patch: global primal ids i(k, j)

    @property
    def n_primal(self) -> int:
        return len(self.primals)

    def n_local(self, k: int) -> int:
        return int(self.local[k].size)

    def single_gid_primals(self) -> set:
        """Gids fixed by a one-dof primal (kept continuous without multipliers)."""
        return {int(p.gids[0]) for p in self.primals if p.gids.size == 1}

    def slot(self, i: int, k: int) -> int:
        """Position of patch ``k`` among the patches sharing primal ``i``."""
        return self.primals[i].patches.index(k)

    @property
    def max_multiplicity(self) -> int:
        return max((len(p.patches) for p in self.primals), default=0)


_KINDS = {0: "vertex", 1: "edge-average", 2: "face-average"}


def _entities(dim: int, kinds):
    """Fixed-coordinate dictionaries of the requested sub-entities of the unit cube."""
    out = []
    for n_free in sorted(kinds):
        n_fixed = dim - n_free
        for axes in product(range(dim), repeat=n_fixed):
            if list(axes) != sorted(set(axes)) or len(set(axes)) != n_fixed:
                continue
            for ends in product((0, 1), repeat=n_fixed):
                out.append(dict(zip(axes, ends)))
    return out


def _strategy_kinds(dim: int, strategy: str):
    if strategy == "default":
        return {0, 1} if dim == 2 else {1}
    table = {"vertices": {0}, "edges": {1}, "vertices+edges": {0, 1}, "faces": {2},
             "edges+faces": {1, 2}, "vertices+edges+faces": {0, 1, 2}}
    if strategy not in table or max(table[strategy]) >= dim:
        raise ConfigurationError(f"unknown primal strategy {strategy!r} for dimension {dim}")
    return table[strategy]


def select_primals(disc: Discretization, strategy: str = "default", mean: str = "integral",
                   allow_empty: bool = False) -> PrimalSpec:
    """
    Vertex values and interface averages kept continuous across patches.

    Every vertex / edge / face of every patch is a candidate.  Its functional
    involves the patch's own non-Dirichlet dofs on the entity; it becomes a
    primal variable when at least two patches hold all of them.  Candidates
    with identical dof sets are merged (the first patch defines the weights).
    """
    dm = disc.dofmap
    kinds = _strategy_kinds(disc.dim, strategy)
    seen = set()
    primals = []
    for k, basis in enumerate(disc.bases):
        gids_k = dm.patches[k].gids
        for fixed in _entities(disc.dim, kinds):
            dofs = entity_dofs(basis, fixed)
            g = gids_k[dofs]
            keep = ~dm.dirichlet[g]
            if not keep.any():
                continue
            g = g[keep]
            key = frozenset(g.tolist())
            if key in seen:
                continue
            holders = dm.patches_holding(g)
            if len(holders) < 2:
                continue
            seen.add(key)
            n_free = disc.dim - len(fixed)
            if n_free == 0:
                w = np.ones(1)
            else:
                _, w = entity_average_weights(disc.geometries[k], basis, fixed, disc.quad_order, mean)
                w = w[keep]
            primals.append(Primal(_KINDS[n_free], k, tuple(sorted(fixed.items())), g.copy(), w,
                                  tuple(holders)))
    if not primals and not allow_empty:
        raise ConfigurationError("no primal variables: the coarse problem would be empty")
    local = [[] for _ in disc.bases]
    for i, p in enumerate(primals):
        for k in p.patches:
            local[k].append(i)
    return PrimalSpec(primals, [np.array(l, dtype=int) for l in local])


def primal_constraints(spec: PrimalSpec, disc: Discretization, k: int, B: np.ndarray) -> sp.csr_matrix:
    """Rows ``C^(k)`` of the local primal functionals over the interface dofs ``B``."""
    dm = disc.dofmap
    gids = dm.patches[k].gids
    bpos = {int(i): j for j, i in enumerate(B)}
    first = {}
    for i, g in enumerate(gids):
        first.setdefault(int(g), i)
    rows, cols, vals = [], [], []
    for r, i in enumerate(spec.local[k]):
        p = spec.primals[i]
        for g, w in zip(p.gids, p.weights):
            rows.append(r)
            cols.append(bpos[first[int(g)]])
            vals.append(w)
    C = sp.csr_matrix((vals, (rows, cols)), shape=(spec.local[k].size, B.size))
    C.sum_duplicates()
    C.sort_indices()
    return C


# ---------------------------------------------------------------------------
# augmented local systems

@dataclass
class AugmentedSystem:
    """Factorized saddle-point matrix of one patch plus its primal basis."""

    n_B: int
    n_I: int
    C: sp.csr_matrix
    fact: Factorization
    Phi: np.ndarray       # (n_B, n_c): boundary part of the primal basis
    Phi_I: np.ndarray     # (n_I, n_c): interior extension
    mu: np.ndarray        # (n_c, n_c): Lagrange multipliers
    S_pp: np.ndarray      # (n_c, n_c): local coarse matrix = -mu

    @property
    def n_c(self) -> int:
        return self.C.shape[0]


def build_augmented(ps: PatchSystem, C) -> AugmentedSystem:
    """Factorize the augmented matrix and compute ``Phi``, ``mu`` and ``S_PiPi^(k)``."""
    C = sp.csr_matrix(C, dtype=float)
    n_B, n_I, n_c = ps.n_B, ps.n_I, C.shape[0]
    if C.shape[1] != n_B:
        raise ValueError(f"constraint matrix has {C.shape[1]} columns, expected {n_B}")
    if n_c and np.linalg.matrix_rank(C.toarray()) < n_c:
        raise ConfigurationError(f"primal constraints of patch {ps.patch} are rank deficient")
    A = sp.bmat([[ps.K_BB, ps.K_BI, C.T],
                 [ps.K_IB, ps.K_II, None],
                 [C, None, None]], format="csr")
    # bmat drops empty blocks; keep the full shape
    A.resize((n_B + n_I + n_c, n_B + n_I + n_c))
    try:
        fact = factorize(A, "indefinite")
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            f"augmented system of patch {ps.patch} is singular (too few primal constraints?)",
            pivot=exc.pivot) from exc
    rhs = np.zeros((n_B + n_I + n_c, n_c))
    rhs[n_B + n_I:, :] = np.eye(n_c)
    sol = fact.solve(rhs)
    Phi = sol[:n_B]
    Phi_I = sol[n_B:n_B + n_I]
    mu = sol[n_B + n_I:]
    return AugmentedSystem(n_B, n_I, C, fact, Phi, Phi_I, mu, -mu)


def apply_SDeltaDelta_inv(aug: AugmentedSystem, f_delta) -> np.ndarray:
    """Boundary part of the saddle solve with right-hand side ``(f_delta, 0, 0)``."""
    if aug.fact is None:
        raise ValueError("augmented system is not factorized")
    f_delta = np.asarray(f_delta, dtype=float)
    rhs = np.zeros((aug.n_B + aug.n_I + aug.n_c,) + f_delta.shape[1:])
    rhs[:aug.n_B] = f_delta
    return aug.fact.solve(rhs)[:aug.n_B]


# ---------------------------------------------------------------------------
# per-patch IETI data

@dataclass
class PatchIeti:
    """Everything one worker needs for one patch during the solve."""

    ps: PatchSystem
    aug: AugmentedSystem
    fact_II: Factorization
    primal_idx: np.ndarray  # global primal ids of the local constraints
    rows: np.ndarray        # global multiplier ids touching the patch
    B: sp.csr_matrix
    B_D: sp.csr_matrix
    g: np.ndarray           # condensed right-hand side

    @property
    def patch(self) -> int:
        return self.ps.patch

    def adjoint_embed(self, f):
        """``(Phi^T f, f - C^T Phi^T f)``: local primal part and dual part."""
        fp = self.aug.Phi.T @ f
        return fp, f - self.aug.C.T @ fp

    def dual_solve(self, f_delta):
        return apply_SDeltaDelta_inv(self.aug, f_delta)

    def embed(self, w_pi_local, w_delta):
        return self.aug.Phi @ w_pi_local + w_delta

    def apply_MsD(self, lam_local):
        return self.B_D @ apply_schur(self.ps, self.fact_II, self.B_D.T @ lam_local)

    def interior(self, w):
        """Interior values from the boundary values ``w``."""
        if self.ps.n_I == 0:
            return np.zeros(0)
        return self.fact_II.solve(self.ps.f_I - self.ps.K_IB @ w)

    def local_solution(self, w):
        return self.ps.local_vector(w, self.interior(w))


def build_patch_ieti(disc: Discretization, k: int, spec: PrimalSpec, jumps: JumpOperators,
                     ps: PatchSystem | None = None, timings: dict | None = None) -> PatchIeti:
    """Assemble, factorize and set up the primal basis of patch ``k``."""
    import time

    t = time.perf_counter()
    ps = build_patch_system(disc, k) if ps is None else ps
    t1 = time.perf_counter()
    try:
        fact_II = factorize(ps.K_II, "spd")
    except SingularMatrixError as exc:
        raise SingularMatrixError(f"interior matrix of patch {k} is singular", pivot=exc.pivot) from exc
    t2 = time.perf_counter()
    C = primal_constraints(spec, disc, k, ps.B)
    aug = build_augmented(ps, C)
    t3 = time.perf_counter()
    g = schur_rhs(ps, fact_II)
    if timings is not None:
        timings["local_assembly"] = timings.get("local_assembly", 0.0) + (t1 - t)
        timings["interior_factorization"] = timings.get("interior_factorization", 0.0) + (t2 - t1)
        timings["augmented_setup"] = timings.get("augmented_setup", 0.0) + (t3 - t2)
    return PatchIeti(ps, aug, fact_II, spec.local[k], jumps.patch_rows[k], jumps.B[k], jumps.B_D[k], g)


def assemble_Spipi(blocks, n_primal: int) -> sp.csr_matrix:
    """
    ``S_PiPi = sum_k A^(k) S_PiPi^(k) A^(k)^T``.

    ``blocks`` is a sequence of ``(primal_idx, S_k)`` in patch order; the
    summation order of duplicate entries follows that sequence.
    """
    rows, cols, vals = [], [], []
    for idx, S in blocks:
        idx = np.asarray(idx, dtype=int)
        rows.append(np.repeat(idx, idx.size))
        cols.append(np.tile(idx, idx.size))
        vals.append(np.asarray(S, dtype=float).ravel())
    if not rows:
        return sp.csr_matrix((n_primal, n_primal))
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_primal, n_primal)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def factorize_Spipi(S: sp.csr_matrix) -> Factorization:
    try:
        return factorize(S, "spd")
    except SingularMatrixError as exc:
        raise ConfigurationError("coarse matrix is singular: the primal set does not fix the floating patches") from exc


# ---------------------------------------------------------------------------
# serial operators

@dataclass
class IetiOperators:
    """
    Serial realization of ``F``, ``M_sD^{-1}`` and the solution recovery.

    Multiplier vectors are global arrays of length ``jumps.n_multipliers``.
    """

    disc: Discretization
    spec: PrimalSpec
    jumps: JumpOperators
    patches: list
    S_pp: sp.csr_matrix
    S_pp_fact: Factorization

    @property
    def n_multipliers(self) -> int:
        return self.jumps.n_multipliers

    # pieces of F ------------------------------------------------------------
    def embed_adjoint(self, f_list):
        f_pi = np.zeros(self.spec.n_primal)
        slots = np.zeros((max(self.spec.max_multiplicity, 1), self.spec.n_primal))
        f_delta = []
        for pi, f in zip(self.patches, f_list):
            fp, fd = pi.adjoint_embed(f)
            for j, i in enumerate(pi.primal_idx):
                slots[self.spec.slot(i, pi.patch), i] = fp[j]
            f_delta.append(fd)
        for s in range(slots.shape[0]):
            f_pi = f_pi + slots[s]
        return f_pi, f_delta

    def embed(self, w_pi, w_delta):
        return [pi.embed(w_pi[pi.primal_idx], wd) for pi, wd in zip(self.patches, w_delta)]

    def apply_Stilde_inv(self, f_pi, f_delta):
        w_pi = self.S_pp_fact.solve(f_pi)
        return w_pi, [pi.dual_solve(fd) for pi, fd in zip(self.patches, f_delta)]

    def _BT(self, lam):
        return [pi.B.T @ lam[pi.rows] for pi in self.patches]

    def _B(self, w_list, scaled=False):
        out = np.zeros(self.n_multipliers)
        for pi, w in zip(self.patches, w_list):
            np.add.at(out, pi.rows, (pi.B_D if scaled else pi.B) @ w)
        return out

    def _solve_embedded(self, f_list):
        return self.embed(*self.apply_Stilde_inv(*self.embed_adjoint(f_list)))

    def apply_F(self, lam):
        return self._B(self._solve_embedded(self._BT(np.asarray(lam, dtype=float))))

    def apply_MsD(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = np.zeros(self.n_multipliers)
        for pi in self.patches:
            np.add.at(out, pi.rows, pi.apply_MsD(lam[pi.rows]))
        return out

    def rhs(self):
        w = self._solve_embedded([pi.g for pi in self.patches])
        d = self._B(w)
        scale = max((float(np.abs(pi.B @ wk).max(initial=0.0)) for pi, wk in zip(self.patches, w)), default=0.0)
        if rhs_is_negligible(float(np.abs(d).max(initial=0.0)), scale):
            d[:] = 0.0
        return d

    def recover_boundary(self, lam):
        BT = self._BT(np.asarray(lam, dtype=float))
        return self._solve_embedded([pi.g - f for pi, f in zip(self.patches, BT)])

    def recover_solution(self, lam):
        """Global coefficient vector (one value per gid, Dirichlet values included)."""
        w = self.recover_boundary(lam)
        return gather_global(self.disc, [pi.local_solution(wk) for pi, wk in zip(self.patches, w)])

    def solve(self, tol=1e-8, maxit=500):
        d = self.rhs()
        lam, report = pcg(self.apply_F, self.apply_MsD, d, tol=tol, maxit=maxit)
        return self.recover_solution(lam), lam, report

    # dense oracles for small instances -------------------------------------
    def dense_schur(self, k):
        ps = self.patches[k].ps
        K_II = ps.K_II.toarray()
        S = ps.K_BB.toarray()
        if ps.n_I:
            S = S - ps.K_BI.toarray() @ np.linalg.solve(K_II, ps.K_IB.toarray())
        return S


def rhs_is_negligible(d_max: float, contribution_max: float) -> bool:
    """
    True when the condensed right-hand side is cancellation noise.

    This happens when the primal constraints already enforce all continuity
    (``F`` vanishes); the multipliers are then zero.
    """
    return d_max <= 64 * np.finfo(float).eps * contribution_max


def gather_global(disc: Discretization, local_vectors) -> np.ndarray:
    """Global gid vector; each gid takes the value of its first holder in patch order."""
    u = np.zeros(disc.dofmap.n_global)
    done = np.zeros(disc.dofmap.n_global, dtype=bool)
    for k, v in enumerate(local_vectors):
        g = disc.dofmap.patches[k].gids
        new = ~done[g]
        u[g[new]] = v[new]
        done[g] = True
    return u


def build_ieti(disc: Discretization, strategy: str = "default", mean: str = "integral",
               rho: str = "alpha", redundancy: str = "full") -> IetiOperators:
    """Serial setup of all patches and of the coarse problem."""
    spec = select_primals(disc, strategy, mean, allow_empty=not disc.topology.interfaces)
    jumps = build_jump_operators(disc.dofmap, disc.alphas, rho, redundancy, spec.single_gid_primals())
    patches = [build_patch_ieti(disc, k, spec, jumps) for k in range(disc.n_patches)]
    S = assemble_Spipi([(pi.primal_idx, pi.aug.S_pp) for pi in patches], spec.n_primal)
    return IetiOperators(disc, spec, jumps, patches, S, factorize_Spipi(S))
