"""Case configuration, the SPMD solve driver, reference solves and error norms."""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse.linalg as spla

from ..assembly.jumps import build_jump_operators
from ..assembly.patch import field_quadrature
from ..assembly.system import Discretization, assemble_global, dg_norm
from ..errors import ConfigurationError
from ..ieti import (
    PrimalSpec,
    assemble_Spipi,
    build_patch_ieti,
    factorize_Spipi,
    gather_global,
    rhs_is_negligible,
    select_primals,
)
from ..runtime import (
    Context,
    DVector,
    MultiplierLayout,
    PrimalLayout,
    RuntimeConfig,
    parallel_pcg,
    spawn,
)
from .problems import grid_discretization

__all__ = [
    "CaseConfig",
    "SolveReport",
    "build_case",
    "run_case",
    "solve_distributed",
    "direct_solve",
    "error_norms",
]


@dataclass
class CaseConfig:
    """One benchmark case; every field is overridable from the command line."""

    dim: int = 2
    patches: tuple = (4, 4)
    degree: int = 2
    refine: int = 2
    form: str = "cg"
    delta: float | None = None
    primal: str = "default"
    mean: str = "integral"
    rho: str = "alpha"
    redundancy: str = "full"
    workers: int = 1
    holders: int = 1
    tol: float = 1e-8
    maxit: int = 500
    problem: str = "benchmark"
    boundary: str = "dirichlet"
    backend: str = "thread"
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.patches, int):
            self.patches = (self.patches,) * self.dim
        self.patches = tuple(int(n) for n in self.patches)
        if self.dim not in (2, 3):
            raise ConfigurationError("dimension must be 2 or 3")
        if len(self.patches) != self.dim:
            raise ConfigurationError("patch grid must have one entry per dimension")
        if min(self.patches) < 1 or self.degree < 1 or self.refine < 0:
            raise ConfigurationError("patch counts and degree must be positive, refinement >= 0")
        if self.workers < 1 or not 1 <= self.holders <= self.workers:
            raise ConfigurationError("need workers >= 1 and 1 <= holders <= workers")
        if not 0 < self.tol < 1:
            raise ConfigurationError("tolerance must lie in (0, 1)")
        if self.form not in ("cg", "dg"):
            raise ConfigurationError(f"unknown formulation {self.form!r}")
        if self.boundary not in ("dirichlet", "mixed"):
            raise ConfigurationError(f"unknown boundary setting {self.boundary!r}")

    @property
    def n_patches(self) -> int:
        return int(np.prod(self.patches))


@dataclass
class SolveReport:
    dim: int
    patches: str
    degree: int
    refine: int
    form: str
    workers: int
    holders: int
    dofs: int
    n_primal: int
    n_multipliers: int
    iterations: int
    kappa: float
    assembling_time: float
    solving_time: float
    total_time: float
    l2_error: float
    dg_error: float | None
    messages_assembling: int
    bytes_assembling: int
    messages_solving: int
    bytes_solving: int
    solution_digest: str

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def _neumann_sides(cfg: CaseConfig):
    if cfg.boundary == "dirichlet":
        return ()
    # mixed: the face x_1 = 1 of the box is a Neumann boundary
    n = cfg.patches
    out = []
    for k in range(cfg.n_patches):
        idx = np.unravel_index(k, n, order="F")
        if idx[0] == n[0] - 1:
            out.append((k, 1))
    return out


def build_case(cfg: CaseConfig) -> Discretization:
    from dataclasses import replace

    from .problems import make_problem

    prob = make_problem(cfg.problem, cfg.dim)
    if cfg.boundary == "mixed":
        grad = prob.exact_grad
        prob = replace(prob, g_N=lambda x, nrm: np.sum(grad(x) * nrm, axis=1))
    return grid_discretization(cfg.dim, cfg.patches, cfg.degree, cfg.refine, cfg.form, prob,
                               delta=cfg.delta, neumann=_neumann_sides(cfg))


# ---------------------------------------------------------------------------
# distributed solve

@dataclass
class DistributedResult:
    u: np.ndarray                 # global coefficient vector (per gid)
    lam: np.ndarray               # global multiplier vector
    report: object                # PcgReport
    timings: dict
    messages: list
    spec: PrimalSpec
    n_multipliers: int
    locals: dict = field(default_factory=dict, repr=False)


def _worker(comm, group, disc, spec, jumps, tol, maxit):
    rank = comm.rank
    mine = group.assignment[rank]
    ml = MultiplierLayout.build(jumps.patch_rows, mine)
    slots = {k: np.array([spec.slot(i, k) for i in spec.local[k]], dtype=int) for k in mine}
    needed = {q: np.array(sorted({int(i) for k in group.assignment[q] for i in spec.local[k]}), dtype=int)
              for q in range(group.size)}
    pl = PrimalLayout(spec.n_primal, slots, spec.max_multiplicity, needed)
    ctx = Context(comm, group, ml, {k: spec.local[k] for k in mine}, pl)
    holder = rank in group.holders
    timings = {}

    comm.barrier()
    comm.phase = "assembling"
    t0 = time.perf_counter()
    pis = {k: build_patch_ieti(disc, k, spec, jumps, timings=timings) for k in mine}

    t = time.perf_counter()
    grp = ctx._group()
    blocks = comm.gather([(k, pis[k].primal_idx, pis[k].aug.S_pp) for k in mine], grp[0], grp)
    fact = None
    if holder:
        mine_blocks = [b for part in blocks for b in part]
        allb = comm.allgather(mine_blocks, group.holders)
        allb = sorted((b for part in allb for b in part), key=lambda b: b[0])
        S = assemble_Spipi([(idx, S) for _, idx, S in allb], spec.n_primal)
        fact = factorize_Spipi(S)
    timings["coarse_setup"] = time.perf_counter() - t

    def solve_embedded(f_local):
        contrib, fdel = {}, {}
        for k in mine:
            contrib[k], fdel[k] = pis[k].adjoint_embed(f_local[k])
        f_pi = ctx.reduce_primal(contrib)
        w_pi = fact.solve(f_pi) if holder else None
        w_pi = ctx.scatter_primal(w_pi)
        return {k: pis[k].embed(w_pi[pis[k].primal_idx], pis[k].dual_solve(fdel[k])) for k in mine}

    def apply_F(lam):
        w = solve_embedded({k: pis[k].B.T @ lam.segs[k] for k in mine})
        return DVector("dist", {k: pis[k].B @ w[k] for k in mine})

    def apply_M(lam):
        return DVector("dist", {k: pis[k].apply_MsD(lam.segs[k]) for k in mine})

    # condensed right-hand side (part of the setup)
    w_g = solve_embedded({k: pis[k].g for k in mine})
    d = DVector("dist", {k: pis[k].B @ w_g[k] for k in mine})
    d_acc = ctx.accumulate(d)
    local = (max((float(np.abs(v).max(initial=0.0)) for v in d_acc.segs.values()), default=0.0),
             max((float(np.abs(v).max(initial=0.0)) for v in d.segs.values()), default=0.0))
    d_max, c_max = comm.allreduce(local, op=lambda a, b: (max(a[0], b[0]), max(a[1], b[1])))
    if rhs_is_negligible(d_max, c_max):
        d = d * 0.0
    comm.barrier()
    t_ass = time.perf_counter() - t0

    comm.phase = "solving"
    t1 = time.perf_counter()
    lam, report = parallel_pcg(ctx, apply_F, apply_M, d, tol=tol, maxit=maxit)
    w = solve_embedded({k: pis[k].g - pis[k].B.T @ lam.segs[k] for k in mine})
    u_loc = {k: pis[k].local_solution(w[k]) for k in mine}
    comm.barrier()
    t_sol = time.perf_counter() - t1
    timings.update(assembling=t_ass, solving=t_sol)
    return {"u": u_loc, "lam": lam.segs, "report": report, "timings": timings}


def solve_distributed(disc: Discretization, cfg: CaseConfig) -> DistributedResult:
    """Set up the metadata, run the worker group and collect the results."""
    spec = select_primals(disc, cfg.primal, cfg.mean, allow_empty=not disc.topology.interfaces)
    jumps = build_jump_operators(disc.dofmap, disc.alphas, cfg.rho, cfg.redundancy,
                                 spec.single_gid_primals())
    rc = RuntimeConfig(cfg.workers, cfg.holders, cfg.backend, cfg.deterministic)
    adjacency = [(i.k, i.l) for i in disc.topology.interfaces]
    group = spawn(rc, disc.n_patches, adjacency)
    results, log = group.run(_worker, disc, spec, jumps, cfg.tol, cfg.maxit)
    u_loc, lam_segs = {}, {}
    for r in results:
        u_loc.update(r["u"])
        lam_segs.update(r["lam"])
    u = gather_global(disc, [u_loc[k] for k in range(disc.n_patches)])
    lam = np.zeros(jumps.n_multipliers)
    for k, rows in enumerate(jumps.patch_rows):
        if rows.size:
            lam[rows] = lam_segs[k]
    timings = dict(results[0]["timings"])
    for key in ("local_assembly", "interior_factorization", "augmented_setup", "coarse_setup"):
        timings[key] = max(r["timings"].get(key, 0.0) for r in results)
    return DistributedResult(u, lam, results[0]["report"], timings, log, spec, jumps.n_multipliers, u_loc)


# ---------------------------------------------------------------------------
# reference solve and errors

def direct_solve(disc: Discretization) -> np.ndarray:
    """Monolithic sparse direct solve of the coupled system (one value per gid)."""
    A, f = assemble_global(disc)
    dm = disc.dofmap
    fr = dm.free_gids
    D = np.flatnonzero(dm.dirichlet)
    u = disc.g_D.copy()
    rhs = f[fr] - A[fr][:, D] @ disc.g_D[D]
    u[fr] = spla.spsolve(A[fr][:, fr].tocsc(), rhs)
    return u


def error_norms(disc: Discretization, u: np.ndarray, exact=None, exact_grad=None):
    """
    ``(L2 error, dG-norm error)``; the second entry is ``None`` for cG.

    The dG error combines the broken energy error with the penalty-weighted
    jumps of the discrete solution (the exact solution has no jumps).
    """
    exact = disc.problem.exact if exact is None else exact
    exact_grad = disc.problem.exact_grad if exact_grad is None else exact_grad
    if exact is None:
        raise ValueError("no exact solution available")
    nq = (disc.quad_order or max(max(b.degrees) for b in disc.bases) + 1) + 1
    l2 = 0.0
    h1 = 0.0
    for k, (G, basis) in enumerate(zip(disc.geometries, disc.bases)):
        c = u[disc.dofmap.patches[k].gids[:basis.size]]
        x, w, V, grads = field_quadrature(G, basis, nq)
        e = V @ c - exact(x)
        l2 += float(np.dot(w, e * e))
        if disc.form == "dg" and exact_grad is not None:
            ge = np.stack([g @ c for g in grads], axis=1) - exact_grad(x)
            h1 += disc.alphas[k] * float(np.dot(w, np.sum(ge * ge, axis=1)))
    if disc.form != "dg":
        return float(np.sqrt(l2)), None
    P, _ = assemble_global(disc, penalty_only=True, with_load=False, volume=False)
    jump = dg_norm(disc, u, matrix=P)
    return float(np.sqrt(l2)), float(np.sqrt(h1 + jump))


# ---------------------------------------------------------------------------

def run_case(cfg: CaseConfig) -> SolveReport:
    """Build, solve on the simulated runtime and evaluate one case."""
    disc = build_case(cfg)
    res = solve_distributed(disc, cfg)
    l2, edg = error_norms(disc, res.u)
    ma = [m for m in res.messages if m["phase"] == "assembling"]
    ms = [m for m in res.messages if m["phase"] == "solving"]
    t_ass = res.timings["assembling"]
    return SolveReport(
        dim=cfg.dim, patches="x".join(map(str, cfg.patches)), degree=cfg.degree, refine=cfg.refine,
        form=cfg.form, workers=cfg.workers, holders=cfg.holders,
        dofs=int(disc.dofmap.free_gids.size), n_primal=res.spec.n_primal,
        n_multipliers=res.n_multipliers, iterations=res.report.iterations,
        kappa=float(res.report.kappa), assembling_time=t_ass, solving_time=res.timings["solving"],
        total_time=t_ass + res.timings["solving"], l2_error=l2, dg_error=edg,
        messages_assembling=len(ma), bytes_assembling=int(sum(m["nbytes"] for m in ma)),
        messages_solving=len(ms), bytes_solving=int(sum(m["nbytes"] for m in ms)),
        solution_digest=hashlib.sha256(np.ascontiguousarray(res.u).tobytes()).hexdigest(),
    )
