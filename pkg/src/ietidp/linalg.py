"""
Sparse direct factorizations, preconditioned CG with condition estimation and
the Schur-complement kernels of one patch.

Sparse matrices are ``scipy.sparse.csr_matrix`` (sorted indices, no
duplicates); factorizations wrap SuperLU.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonConvergenceError, SingularMatrixError

__all__ = [
    "as_sparse",
    "Factorization",
    "factorize",
    "PcgReport",
    "pcg",
    "lanczos_extremes",
    "schur_rhs",
    "apply_schur",
    "write_triplets",
    "read_triplets",
]


def as_sparse(A) -> sp.csr_matrix:
    """Canonical CSR form: sorted column indices, duplicates summed."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


@dataclass
class Factorization:
    """Factors of a square sparse matrix, reusable for many right-hand sides."""

    n: int
    kind: str
    _lu: object = field(default=None, repr=False)

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has {b.shape[0]} rows, expected {self.n}")
        if self.n == 0 or (b.ndim == 2 and b.shape[1] == 0):
            return np.zeros(b.shape)
        return self._lu.solve(np.ascontiguousarray(b))


def _singular_pivot(A) -> int | None:
    if A.shape[0] > 3000:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = sla.lu_factor(A.toarray(), check_finite=False)
    d = np.abs(np.diag(lu))
    scale = max(float(np.abs(lu).max()), 1.0)
    bad = np.flatnonzero(d <= scale * A.shape[0] * np.finfo(float).eps)
    return int(bad[0]) if bad.size else None


def factorize(A, kind: str = "spd") -> Factorization:
    """
    Sparse LU of ``A`` after a minimum-degree ordering of ``A^T + A``.

    ``kind="spd"`` prefers diagonal pivots (symmetric mode), ``"indefinite"``
    uses threshold partial pivoting as needed by saddle-point matrices.

    Raises
    ------
    SingularMatrixError
        If ``A`` is exactly singular; ``pivot`` holds the offending index when
        it can be located.
    """
    if kind not in ("spd", "indefinite"):
        raise ValueError(f"unknown factorization kind {kind!r}")
    A = as_sparse(A)
    n, m = A.shape
    if n != m:
        raise ValueError("matrix must be square")
    if n == 0:
        return Factorization(0, kind)
    opts = {"permc_spec": "MMD_AT_PLUS_A"}
    if kind == "spd":
        opts.update(diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    try:
        lu = spla.splu(A.tocsc(), **opts)
    except RuntimeError as exc:
        raise SingularMatrixError("matrix is exactly singular", pivot=_singular_pivot(A)) from exc
    if not np.all(np.isfinite(lu.U.diagonal())) or np.any(lu.U.diagonal() == 0.0):
        raise SingularMatrixError("matrix is exactly singular", pivot=_singular_pivot(A))
    return Factorization(n, kind, lu)


# ---------------------------------------------------------------------------
# PCG

@dataclass
class PcgReport:
    iterations: int
    residuals: list
    ritz_min: float
    ritz_max: float
    kappa: float
    converged: bool = True


def lanczos_extremes(alphas, betas) -> tuple:
    """
    Extreme eigenvalues of the Lanczos matrix implied by CG coefficients.

    ``alphas[j]`` are the step lengths, ``betas[j]`` the direction update
    factors of iteration ``j`` (only the first ``len(alphas) - 1`` are used).
    """
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)[: max(len(a) - 1, 0)]
    if a.size == 0:
        return 1.0, 1.0
    diag = 1.0 / a
    diag[1:] += b / a[:-1]
    off = np.sqrt(np.abs(b)) / a[:-1]
    ev = sla.eigvalsh_tridiagonal(diag, off) if a.size > 1 else diag
    return float(ev.min()), float(ev.max())


def _identity(v):
    return v


def pcg(applyF, applyM, d, tol: float = 1e-8, maxit: int = 500, dot=None, accumulate=None,
        raise_on_fail: bool = True):
    """
    Preconditioned CG with zero initial guess.

    Stops when ``sqrt(r^T M r)`` has dropped by ``tol`` relative to its
    initial value.  ``dot`` and ``accumulate`` allow distributed vectors:
    ``dot(u, v)`` must accept a distributed ``u`` and accumulated ``v`` and
    ``accumulate`` converts distributed to accumulated; residuals and
    operator outputs are treated as distributed, iterates and search
    directions as accumulated.

    Returns
    -------
    lam : array-like
    report : PcgReport
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    dot = np.dot if dot is None else dot
    acc = _identity if accumulate is None else accumulate

    r = d * 1.0
    z = acc(applyM(acc(r)))
    rho = float(dot(r, z))
    norm0 = float(np.sqrt(max(rho, 0.0)))
    residuals = [norm0]
    if norm0 == 0.0:
        return acc(d * 0.0), PcgReport(0, residuals, 1.0, 1.0, 1.0)
    lam = None
    p = z
    alphas, betas = [], []
    it = 0
    converged = False
    while it < maxit:
        q = applyF(p)
        pq = float(dot(q, p))
        if pq <= 0.0:
            # p lies in the kernel of F (consistent, fully constrained
            # problems) or F is not positive semi-definite
            converged = pq == 0.0
            break
        alpha = rho / pq
        lam = alpha * p if lam is None else lam + alpha * p
        r = r - alpha * q
        z = acc(applyM(acc(r)))
        rho_new = float(dot(r, z))
        it += 1
        alphas.append(alpha)
        res = float(np.sqrt(max(rho_new, 0.0)))
        residuals.append(res)
        if res <= tol * norm0:
            converged = True
            break
        beta = rho_new / rho
        betas.append(beta)
        p = z + beta * p
        rho = rho_new
    if lam is None:
        lam = acc(d * 0.0)
    lo, hi = lanczos_extremes(alphas, betas)
    kappa = hi / lo if lo > 0 else np.inf
    report = PcgReport(it, residuals, lo, hi, max(kappa, 1.0), converged)
    if not converged and raise_on_fail:
        raise NonConvergenceError(f"PCG did not converge in {maxit} iterations", report)
    return lam, report


# ---------------------------------------------------------------------------
# Schur complement kernels

def schur_rhs(ps, fact_II: Factorization) -> np.ndarray:
    """``g = f_B - K_BI K_II^{-1} f_I``."""
    if ps.n_I == 0:
        return np.array(ps.f_B, dtype=float)
    return ps.f_B - ps.K_BI @ fact_II.solve(ps.f_I)


def apply_schur(ps, fact_II: Factorization, w) -> np.ndarray:
    """``S_e w = K_BB w - K_BI K_II^{-1} K_IB w`` without forming ``S_e``."""
    w = np.asarray(w, dtype=float)
    out = ps.K_BB @ w
    if ps.n_I:
        out = out - ps.K_BI @ fact_II.solve(ps.K_IB @ w)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# triplet text format

def write_triplets(path, A) -> None:
    """Header ``n_rows n_cols nnz``, then one ``row col value`` line per stored entry."""
    A = as_sparse(A).tocoo()
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {float(v)!r}\n")


def read_triplets(path) -> sp.csr_matrix:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError("malformed triplet header")
        n, m, nnz = map(int, header)
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if data.shape[0] != nnz:
        raise ValueError(f"expected {nnz} entries, found {data.shape[0]}")
    return as_sparse(sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(n, m)))
