"""
B-spline bases on [0, 1], tensor-product spaces and patch parametrizations.

Multi-indices are flattened with the first parametric direction running
fastest, i.e. ``flat = i_1 + M_1 * (i_2 + M_2 * i_3)``.  The same ordering is
used for control points, coefficient vectors and geometry files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
from scipy.spatial.distance import pdist

from .errors import KnotVectorError, SingularGeometryError

__all__ = [
    "KnotVector",
    "make_open_knot_vector",
    "find_span",
    "eval_basis",
    "eval_basis_deriv",
    "basis_funs_array",
    "collocation_matrix",
    "gauss_legendre",
    "element_quadrature",
    "TensorBasis",
    "GeometryMap",
    "map_eval",
    "eval_points",
    "identity_map",
    "affine_map",
    "PatchMesh",
    "refine_geometry",
]


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open (clamped) knot vector of a univariate B-spline space."""

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        p = int(self.degree)
        t = np.asarray(self.knots, dtype=float).copy()
        t.setflags(write=False)
        object.__setattr__(self, "degree", p)
        object.__setattr__(self, "knots", t)
        if p < 1:
            raise KnotVectorError(f"degree must be >= 1, got {p}")
        if t.ndim != 1 or np.any(np.diff(t) < 0):
            raise KnotVectorError("knots must be a non-decreasing 1d sequence")
        if t.size < 2 * (p + 1):
            raise KnotVectorError("too few knots for the requested degree")
        if np.any(t[: p + 1] != 0.0) or np.any(t[-(p + 1):] != 1.0):
            raise KnotVectorError("knot vector must be open on [0, 1]")
        # interior multiplicity <= p keeps the space continuous
        _, counts = np.unique(t[p + 1: -(p + 1)], return_counts=True)
        if counts.size and counts.max() > p:
            raise KnotVectorError("interior knot multiplicity exceeds degree")

    @property
    def size(self) -> int:
        """Number of basis functions M = #knots - p - 1."""
        return self.knots.size - self.degree - 1

    @cached_property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def n_elements(self) -> int:
        return self.breakpoints.size - 1

    @cached_property
    def greville(self) -> np.ndarray:
        p, t = self.degree, self.knots
        return np.array([t[i + 1: i + p + 1].mean() for i in range(self.size)])

    def reversed(self) -> "KnotVector":
        return KnotVector(self.degree, 1.0 - self.knots[::-1])

    def __eq__(self, other):
        if not isinstance(other, KnotVector):
            return NotImplemented
        return self.degree == other.degree and np.array_equal(self.knots, other.knots)

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))

    def __repr__(self):
        return f"KnotVector(degree={self.degree}, knots={self.knots.tolist()})"


def make_open_knot_vector(p: int, elements: int) -> KnotVector:
    """Uniform open knot vector with single interior knots."""
    if p < 1 or elements < 1:
        raise KnotVectorError(f"need p >= 1 and elements >= 1, got p={p}, elements={elements}")
    inner = np.arange(1, elements) / elements
    knots = np.concatenate([np.zeros(p + 1), inner, np.ones(p + 1)])
    return KnotVector(p, knots)


def _check_points(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0) or np.any(np.isnan(x)):
        raise KnotVectorError("evaluation point outside [0, 1]")
    return x


def find_span(kv: KnotVector, x):
    """Knot span index ``s`` with ``t[s] <= x < t[s+1]``; ``x = 1`` goes to the last span."""
    x = _check_points(x)
    p, t = kv.degree, kv.knots
    span = np.searchsorted(t, x, side="right") - 1
    return np.clip(span, p, kv.size - 1)


def basis_funs_array(kv: KnotVector, x, nders: int = 0):
    """
    Non-vanishing basis functions (and derivatives) at many points.

    Returns ``(spans, ders)`` where ``ders`` has shape ``(nders + 1, len(x), p + 1)``
    and ``ders[k, :, j]`` is the k-th derivative of basis function ``spans - p + j``.
    """
    x = np.atleast_1d(_check_points(x))
    p, t = kv.degree, kv.knots
    spans = find_span(kv, x)
    n = x.size
    # ndu[j][r]: triangular table of A2.3 (Piegl & Tiller), vectorized over points
    ndu = np.zeros((p + 1, p + 1, n))
    ndu[0, 0] = 1.0
    left = np.zeros((p + 1, n))
    right = np.zeros((p + 1, n))
    for j in range(1, p + 1):
        left[j] = x - t[spans + 1 - j]
        right[j] = t[spans + j] - x
        saved = np.zeros(n)
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((nders + 1, n, p + 1))
    ders[0] = ndu[:, p].T
    if nders:
        a = np.zeros((2, p + 1, n))
        for r in range(p + 1):
            s1, s2 = 0, 1
            a[0, 0] = 1.0
            for k in range(1, nders + 1):
                d = np.zeros(n)
                rk, pk = r - k, p - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                    d = d + a[s2, j] * ndu[rk + j, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d = d + a[s2, k] * ndu[r, pk]
                ders[k, :, r] = d
                s1, s2 = s2, s1
        fac = p
        for k in range(1, nders + 1):
            ders[k] *= fac
            fac *= p - k
    return spans, ders


def eval_basis(kv: KnotVector, x: float):
    """Return ``(first_index, values)`` of the p+1 basis functions not vanishing at ``x``."""
    if np.ndim(x) != 0:
        raise KnotVectorError("eval_basis expects a scalar; use basis_funs_array")
    spans, ders = basis_funs_array(kv, [x])
    return int(spans[0]) - kv.degree, ders[0, 0].copy()


def eval_basis_deriv(kv: KnotVector, x: float):
    """Return ``(first_index, derivatives)`` of the same functions as :func:`eval_basis`."""
    if np.ndim(x) != 0:
        raise KnotVectorError("eval_basis_deriv expects a scalar; use basis_funs_array")
    spans, ders = basis_funs_array(kv, [x], nders=1)
    return int(spans[0]) - kv.degree, ders[1, 0].copy()


def collocation_matrix(kv: KnotVector, x, deriv: int = 0) -> np.ndarray:
    """Dense matrix ``A[i, j] = d^deriv N_j(x_i)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    spans, ders = basis_funs_array(kv, x, nders=deriv)
    A = np.zeros((x.size, kv.size))
    cols = spans[:, None] - kv.degree + np.arange(kv.degree + 1)
    np.put_along_axis(A, cols, ders[deriv], axis=1)
    return A


def gauss_legendre(n: int):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    if n < 1:
        raise ValueError("quadrature order must be >= 1")
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def element_quadrature(breakpoints: np.ndarray, n: int):
    """Tensor of Gauss points on every interval: arrays of shape (n_elements, n)."""
    xg, wg = gauss_legendre(n)
    a, b = breakpoints[:-1, None], breakpoints[1:, None]
    return a + (b - a) * xg, (b - a) * wg


@dataclass(frozen=True, eq=False)
class TensorBasis:
    """Tensor product of univariate spaces, d = len(kvs)."""

    kvs: tuple

    def __post_init__(self):
        object.__setattr__(self, "kvs", tuple(self.kvs))
        if not 1 <= len(self.kvs) <= 3:
            raise KnotVectorError("tensor bases of dimension 1, 2 or 3 only")

    @property
    def dim(self) -> int:
        return len(self.kvs)

    @property
    def shape(self) -> tuple:
        return tuple(kv.size for kv in self.kvs)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def degrees(self) -> tuple:
        return tuple(kv.degree for kv in self.kvs)

    def flat_index(self, multi) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(m) for m in multi), self.shape, order="F")

    def multi_index(self, flat):
        return np.unravel_index(flat, self.shape, order="F")

    def multi_indices(self):
        """All multi-indices in flat order."""
        return [tuple(int(c) for c in reversed(m)) for m in product(*(range(s) for s in reversed(self.shape)))]

    def greville_points(self) -> np.ndarray:
        grids = np.meshgrid(*(kv.greville for kv in self.kvs), indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    def __eq__(self, other):
        return isinstance(other, TensorBasis) and self.kvs == other.kvs

    def __hash__(self):
        return hash(self.kvs)


@dataclass(frozen=True, eq=False)
class GeometryMap:
    """Spline parametrization ``G(xi) = sum_i P_i N_i(xi)`` of one patch."""

    basis: TensorBasis
    control_points: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.control_points, dtype=float).copy()
        if P.shape != (self.basis.size, self.basis.dim):
            raise ValueError(
                f"expected {self.basis.size} control points in R^{self.basis.dim}, got shape {P.shape}"
            )
        P.setflags(write=False)
        object.__setattr__(self, "control_points", P)

    @property
    def dim(self) -> int:
        return self.basis.dim

    def _net(self) -> np.ndarray:
        return self.control_points.reshape(self.basis.shape + (self.dim,), order="F")

    def eval_grid(self, points_per_dir, check: bool = True):
        """
        Evaluate on the tensor grid spanned by ``points_per_dir``.

        Returns ``x`` with shape ``(n_1, ..., n_d, d)`` and the Jacobian
        ``J`` with shape ``(n_1, ..., n_d, d, d)``, ``J[..., a, b] = dx_a / dxi_b``.
        """
        d = self.dim
        vals, ders = [], []
        for kv, pts in zip(self.basis.kvs, points_per_dir):
            vals.append(collocation_matrix(kv, pts))
            ders.append(collocation_matrix(kv, pts, deriv=1))
        net = self._net()
        x = _contract(net, vals)
        J = np.stack(
            [_contract(net, [ders[b] if c == b else vals[c] for c in range(d)]) for b in range(d)],
            axis=-1,
        )
        if check:
            detJ = np.linalg.det(J)
            if np.any(detJ == 0.0) or (np.any(detJ > 0) and np.any(detJ < 0)):
                raise SingularGeometryError("Jacobian determinant vanishes or changes sign")
        return x, J

    def corners(self) -> np.ndarray:
        """Images of the 2^d parameter corners, ordered like flat multi-indices of {0,1}^d."""
        net = self._net()
        out = []
        for c in product(*([0, 1],) * self.dim):
            c = tuple(reversed(c))
            idx = tuple(-1 if ci else 0 for ci in c)
            out.append(net[idx])
        return np.array(out)


def _contract(net, mats):
    # net: (M_1, ..., M_d, d); mats[i]: (n_i, M_i)
    out = net
    for axis, A in enumerate(mats):
        out = np.tensordot(A, out, axes=([1], [axis]))
        out = np.moveaxis(out, 0, axis)
    return out


def eval_points(G: GeometryMap, pts):
    """Batch version of :func:`map_eval` without the singularity check: ``(x, J)``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n, d = pts.shape
    net = G._net()
    vals, ders, first = [], [], []
    for a, kv in enumerate(G.basis.kvs):
        spans, dd = basis_funs_array(kv, pts[:, a], nders=1)
        vals.append(dd[0])
        ders.append(dd[1])
        first.append(spans - kv.degree)
    loc = [np.arange(kv.degree + 1) for kv in G.basis.kvs]
    x = np.zeros((n, d))
    J = np.zeros((n, d, d))
    for off in product(*loc):
        idx = tuple(first[a] + off[a] for a in range(d))
        P = net[idx]  # (n, d)
        w = np.ones(n)
        for a in range(d):
            w = w * vals[a][:, off[a]]
        x += w[:, None] * P
        for b in range(d):
            wb = np.ones(n)
            for a in range(d):
                wb = wb * (ders[a][:, off[a]] if a == b else vals[a][:, off[a]])
            J[:, :, b] += wb[:, None] * P
    return x, J


def map_eval(G: GeometryMap, xi):
    """Point, Jacobian and Jacobian determinant of ``G`` at one parameter point."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (G.dim,):
        raise ValueError(f"parameter point must have {G.dim} coordinates")
    x, J = G.eval_grid([[c] for c in xi], check=False)
    x = x.reshape(G.dim)
    J = J.reshape(G.dim, G.dim)
    detJ = float(np.linalg.det(J))
    if detJ == 0.0:
        raise SingularGeometryError(f"singular Jacobian at xi={xi.tolist()}")
    return x, J, detJ


def affine_map(basis: TensorBasis, A, b) -> GeometryMap:
    """Geometry ``x = A xi + b``; exact because Greville points reproduce linears."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    g = basis.greville_points()
    return GeometryMap(basis, g @ A.T + b)


def identity_map(basis: TensorBasis) -> GeometryMap:
    return affine_map(basis, np.eye(basis.dim), np.zeros(basis.dim))


@dataclass(frozen=True)
class PatchMesh:
    """Breakpoint mesh of a patch and its physical mesh sizes."""

    breakpoints: tuple
    h: float
    H: float
    n_elements: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_elements", int(np.prod([len(b) - 1 for b in self.breakpoints])))

    @classmethod
    def from_geometry(cls, G: GeometryMap, basis: TensorBasis) -> "PatchMesh":
        """Element diameters are measured between the images of element corners."""
        bps = tuple(kv.breakpoints for kv in basis.kvs)
        x, _ = G.eval_grid(bps, check=False)
        d = G.dim
        h = 0.0
        # every corner-to-corner diagonal of every element
        for offs in product(*([0, 1],) * d):
            lo = tuple(slice(0, -1) if o == 0 else slice(1, None) for o in offs)
            hi = tuple(slice(1, None) if o == 0 else slice(0, -1) for o in offs)
            h = max(h, float(np.max(np.linalg.norm(x[lo] - x[hi], axis=-1))))
        pts = x.reshape(-1, d)
        # exact diameter of the breakpoint images; bounding-box diagonal for large meshes
        H = float(pdist(pts).max()) if 1 < len(pts) <= 1024 \
            else float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        return cls(bps, h, H)


def refine_geometry(G: GeometryMap, basis: TensorBasis, check: bool = True) -> GeometryMap:
    """
    Represent ``G`` in a finer space (higher degree and/or more knots).

    The new control points interpolate ``G`` at the Greville points of
    ``basis``; this is exact whenever the new space contains the old one.
    """
    if basis.dim != G.dim:
        raise ValueError("dimension mismatch")
    x, _ = G.eval_grid([kv.greville for kv in basis.kvs], check=False)
    out = x
    for axis, kv in enumerate(basis.kvs):
        A = collocation_matrix(kv, kv.greville)
        out = np.moveaxis(np.tensordot(np.linalg.inv(A), out, axes=([1], [axis])), 0, axis)
    P = np.stack([out[..., c].ravel(order="F") for c in range(G.dim)], axis=1)
    H = GeometryMap(basis, P)
    if check:
        rng = np.random.default_rng(0)
        pts = rng.uniform(size=(16, G.dim))
        if not np.allclose(eval_points(G, pts)[0], eval_points(H, pts)[0], atol=1e-10, rtol=0):
            raise KnotVectorError("target space does not contain the geometry map")
    return H
