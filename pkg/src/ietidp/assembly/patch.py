"""Patch-local Galerkin integrals: stiffness, load, Neumann and SIP interface terms."""
from __future__ import annotations

import string
from itertools import product

import numpy as np
import scipy.sparse as sp

from ..errors import SingularGeometryError, UnsupportedConfigurationError
from ..splines import (
    GeometryMap,
    TensorBasis,
    basis_funs_array,
    collocation_matrix,
    element_quadrature,
)
from .topology import Orientation, side_axis, side_end, tangential_axes

__all__ = [
    "assemble_patch",
    "side_dofs",
    "entity_dofs",
    "side_quadrature",
    "trace_matrix",
    "interface_matrix",
    "entity_average_weights",
    "harmonic_mesh_size",
    "field_quadrature",
]


def _flat_points(arr, nlead):
    """Flatten the first ``nlead`` axes with the first axis fastest."""
    order = list(reversed(range(nlead))) + list(range(nlead, arr.ndim))
    return arr.transpose(order).reshape((-1,) + arr.shape[nlead:])


def _kron_cols(mats):
    """Dense tensor product of per-axis matrices; rows/cols flattened first-axis fastest."""
    out = mats[-1]
    for A in reversed(mats[:-1]):
        out = np.kron(out, A)
    return out


def _flat_cols(col_lists, shape):
    """Flat (first index fastest) dof ids of the tensor product of 1d column lists."""
    grids = np.meshgrid(*col_lists, indexing="ij")
    return np.ravel_multi_index(tuple(g.ravel(order="F") for g in grids), shape, order="F")


def _check_det(detJ):
    if np.any(detJ == 0.0) or (np.any(detJ > 0) and np.any(detJ < 0)):
        raise SingularGeometryError("Jacobian determinant vanishes or changes sign on the patch")


def assemble_patch(G: GeometryMap, basis: TensorBasis, alpha=1.0, f=None, neumann=(), quad_order=None):
    """
    Stiffness matrix and load vector of one patch (no boundary conditions imposed).

    Parameters
    ----------
    G : GeometryMap
        Patch parametrization.
    basis : TensorBasis
        Discretization space on the parameter domain.
    alpha : float
        Constant diffusion coefficient of the patch.
    f : callable, optional
        Source term, ``f(x) -> values`` for points of shape ``(n, d)``.
    neumann : sequence of (side, g)
        Neumann data, ``g(x, normal) -> values``.
    quad_order : int, optional
        Gauss points per direction and element; defaults to ``p + 1``.

    Returns
    -------
    K : scipy.sparse.csr_matrix
    rhs : ndarray
    """
    d = basis.dim
    nq = quad_order if quad_order is not None else max(basis.degrees) + 1
    if nq < 1:
        raise ValueError("quadrature order must be >= 1")
    if alpha <= 0:
        raise ValueError("diffusion coefficient must be positive")

    B, D, W, first, X = [], [], [], [], []
    for kv in basis.kvs:
        xq, wq = element_quadrature(kv.breakpoints, nq)
        spans, ders = basis_funs_array(kv, xq.ravel(), nders=1)
        ne, p = xq.shape[0], kv.degree
        B.append(ders[0].reshape(ne, nq, p + 1))
        D.append(ders[1].reshape(ne, nq, p + 1))
        W.append(wq)
        first.append(spans.reshape(ne, nq)[:, 0] - p)
        X.append(xq.ravel())

    x, J = G.eval_grid(X, check=False)
    # (e_1, q_1, e_2, q_2, ...) -> (e_1, ..., e_d, q_1, ..., q_d)
    ne = [b.shape[0] for b in B]
    shape = []
    for a in range(d):
        shape += [ne[a], nq]
    x = x.reshape(tuple(shape) + (d,))
    J = J.reshape(tuple(shape) + (d, d))
    perm = [2 * a for a in range(d)] + [2 * a + 1 for a in range(d)]
    x = x.transpose(perm + [2 * d]).reshape(-1, nq ** d, d)
    J = J.transpose(perm + [2 * d, 2 * d + 1]).reshape(-1, nq ** d, d, d)
    detJ = np.linalg.det(J)
    _check_det(detJ)
    Jinv = np.linalg.inv(J)

    letters = string.ascii_lowercase
    e_idx, q_idx, a_idx = letters[:d], letters[d:2 * d], letters[2 * d:3 * d]
    ins = ",".join(e_idx[a] + q_idx[a] + a_idx[a] for a in range(d))
    spec = f"{ins}->{e_idx}{q_idx}{a_idx}"
    nloc = int(np.prod([b.shape[2] for b in B]))
    N = np.einsum(spec, *B).reshape(-1, nq ** d, nloc)
    dN = np.stack(
        [np.einsum(spec, *[D[a] if a == b else B[a] for a in range(d)]).reshape(-1, nq ** d, nloc)
         for b in range(d)],
        axis=-1,
    )
    w = np.einsum(",".join(e_idx[a] + q_idx[a] for a in range(d)) + f"->{e_idx}{q_idx}", *W)
    w = w.reshape(-1, nq ** d) * np.abs(detJ)

    grad = np.einsum("eqbc,eqab->eqac", Jinv, dN)
    Kloc = alpha * np.einsum("eq,eqac,eqbc->eab", w, grad, grad)

    # global (flat, first index fastest) ids of the local functions of each element
    loc = [np.arange(b.shape[2]) for b in B]
    offs = np.array(list(product(*loc)))  # C order over (a_1, ..., a_d) like the einsum output
    el = np.array(list(product(*[range(n) for n in ne])))
    multi = [first[a][el[:, a]][:, None] + offs[None, :, a] for a in range(d)]
    gids = np.ravel_multi_index(tuple(multi), basis.shape, order="F")

    n = basis.size
    rows = np.repeat(gids, nloc, axis=1).ravel()
    cols = np.tile(gids, (1, nloc)).ravel()
    K = sp.csr_matrix((Kloc.ravel(), (rows, cols)), shape=(n, n))
    K.sum_duplicates()
    K.sort_indices()

    rhs = np.zeros(n)
    if f is not None:
        fv = np.asarray(f(x.reshape(-1, d)), dtype=float).reshape(w.shape)
        np.add.at(rhs, gids.ravel(), np.einsum("eq,eqa->ea", w * fv, N).ravel())
    for side, g in neumann:
        pts, wts, nrm, cols, vals = side_quadrature(G, basis, side, nq, layers=1)
        gv = np.asarray(g(pts, nrm), dtype=float)
        np.add.at(rhs, cols, vals.T @ (wts * gv))
    return K, rhs


# ---------------------------------------------------------------------------
# sides and sub-entities

def entity_dofs(basis: TensorBasis, fixed: dict) -> np.ndarray:
    """
    Dofs whose trace is non-zero on the entity ``{xi_a = fixed[a]}``.

    ``fixed`` maps axis -> 0/1.  Free axes vary with the first one fastest.
    """
    cols = []
    for a, kv in enumerate(basis.kvs):
        if a in fixed:
            cols.append(np.array([kv.size - 1 if fixed[a] else 0]))
        else:
            cols.append(np.arange(kv.size))
    return _flat_cols(cols, basis.shape)


def side_dofs(basis: TensorBasis, side: int) -> np.ndarray:
    return entity_dofs(basis, {side_axis(side): side_end(side)})


def side_quadrature(G, basis, side, nq, layers=1, tangential_points=None):
    """
    Gauss rule on one side with trace (and normal derivative) evaluations.

    Returns ``(x, w, normal, cols, vals)``; with ``layers > 1`` also the
    normal derivatives are appended as ``vals`` becomes ``(values, dnormal)``.
    ``cols`` are the flat dofs of the first ``layers`` layers next to the side.
    Points run over tangential elements, first tangential axis fastest.
    """
    d = basis.dim
    ax, end = side_axis(side), side_end(side)
    tan = tangential_axes(d, side)
    if tangential_points is None:
        tp, tw = [], []
        for a in tan:
            xq, wq = element_quadrature(basis.kvs[a].breakpoints, nq)
            tp.append(xq.ravel())
            tw.append(wq.ravel())
    else:
        tp, tw = tangential_points
    pts_per_dir = []
    it = iter(tp)
    for a in range(d):
        pts_per_dir.append(np.array([float(end)]) if a == ax else next(it))
    x, J = G.eval_grid(pts_per_dir, check=False)
    x = _flat_points(x, d)
    J = _flat_points(J, d)
    detJ = np.linalg.det(J)
    _check_det(detJ)
    Jinv = np.linalg.inv(J)
    # Nanson: n ds = det(J) J^{-T} e_ax dS
    g = Jinv[:, ax, :]
    gn = np.linalg.norm(g, axis=1)
    normal = (1.0 if end else -1.0) * g / gn[:, None]
    w = _kron_cols([np.atleast_1d(t)[:, None] for t in tw])[:, 0] if len(tw) else np.ones(1)
    w = w * np.abs(detJ) * gn

    kvn = basis.kvs[ax]
    ncols = np.arange(kvn.size - layers, kvn.size) if end else np.arange(layers)
    val_mats, der_mats, col_lists = [], [], []
    it = iter(tp)
    for a, kv in enumerate(basis.kvs):
        if a == ax:
            Vn = collocation_matrix(kv, [float(end)])[:, ncols]
            Dn = collocation_matrix(kv, [float(end)], deriv=1)[:, ncols]
            val_mats.append(Vn)
            der_mats.append(Dn)
            col_lists.append(ncols)
        else:
            pts = next(it)
            val_mats.append(collocation_matrix(kv, pts))
            der_mats.append(collocation_matrix(kv, pts, deriv=1))
            col_lists.append(np.arange(kv.size))
    cols = _flat_cols(col_lists, basis.shape)
    vals = _kron_cols(val_mats)
    if layers == 1:
        return x, w, normal, cols, vals
    dparam = [_kron_cols([der_mats[a] if a == b else val_mats[a] for a in range(d)]) for b in range(d)]
    # physical gradient = J^{-T} grad_xi, projected on the normal
    coef = np.einsum("qbc,qc->qb", Jinv, normal)
    dn = sum(coef[:, b][:, None] * dparam[b] for b in range(d))
    return x, w, normal, cols, (vals, dn)


def trace_matrix(basis: TensorBasis, side: int, tangential_points) -> np.ndarray:
    """Values of the side dofs (ordered like :func:`side_dofs`) at tangential points."""
    tan = tangential_axes(basis.dim, side)
    mats = [collocation_matrix(basis.kvs[a], tp) for a, tp in zip(tan, tangential_points)]
    return _kron_cols(mats)


def harmonic_mesh_size(hk: float, hl: float) -> float:
    return 2.0 * hk * hl / (hk + hl)


def interface_matrix(G_k, basis_k, side_k, basis_l, side_l, orientation: Orientation,
                     alpha_k, delta, h_kl, quad_order=None, consistency=True):
    """
    SIP contributions ``s^(k) + p^(k)`` of one interface as seen from patch ``k``.

    The neighbour trace is represented by the side dofs of ``basis_l`` (the
    extra dofs of patch ``k``).  Returns ``(own_cols, M)`` where ``M`` acts on
    ``[own_cols, neighbour side dofs]``.  With ``consistency=False`` only the
    penalty term is returned (the jump part of the dG norm).
    """
    d = basis_k.dim
    nq = quad_order if quad_order is not None else max(basis_k.degrees) + 1
    tan_k = tangential_axes(d, side_k)
    tan_l = tangential_axes(d, side_l)
    # matching discretizations: side knot vectors agree up to the orientation
    for j, a_l in enumerate(tan_l):
        kv_l = basis_l.kvs[a_l]
        kv_k = basis_k.kvs[tan_k[orientation.perm[j]]]
        if orientation.flips[j]:
            kv_k = kv_k.reversed()
        if kv_k != kv_l:
            raise UnsupportedConfigurationError("non-matching interface discretizations")

    tp, tw = [], []
    for a in tan_k:
        xq, wq = element_quadrature(basis_k.kvs[a].breakpoints, nq)
        tp.append(xq.ravel())
        tw.append(wq.ravel())
    # only the first two layers have a non-zero normal derivative on an open side
    layers = 2
    _, w, _, cols, (Vk, Dk) = side_quadrature(G_k, basis_k, side_k, nq, layers=layers,
                                              tangential_points=(tp, tw))
    # neighbour trace at the same physical points
    mats = []
    for j, a_l in enumerate(tan_l):
        t = tp[orientation.perm[j]]
        if orientation.flips[j]:
            t = 1.0 - t
        mats.append((j, orientation.perm[j], collocation_matrix(basis_l.kvs[a_l], t)))
    # rows of the kron product follow k's tangential ordering
    Vl = _neighbour_trace(mats, [len(t) for t in tp])

    jump = np.hstack([-Vk, Vl])  # u^(l) - u^(k)
    dnu = np.hstack([Dk, np.zeros_like(Vl)])
    pen = delta * alpha_k / h_kl
    M = (jump * (w * pen)[:, None]).T @ jump
    if consistency:
        half = 0.5 * alpha_k * w
        S = (dnu * half[:, None]).T @ jump
        M += S + S.T
    return cols, M


def _neighbour_trace(mats, npts):
    """
    Dense matrix of neighbour side functions on k's tangential point grid.

    ``mats`` holds, per neighbour tangential axis ``j``, the index of k's
    tangential axis it follows and its collocation matrix.
    """
    m = len(npts)
    if m == 1:
        return mats[0][2]
    # m == 2: rows (q_0 fastest, q_1) of k; columns (c_0 fastest, c_1) of l
    (_, src0, A0), (_, src1, A1) = mats
    n0, n1 = npts
    if src0 == 0:
        # l axis 0 follows k axis 0
        out = np.einsum("ia,jb->jiba", A0, A1)
    else:
        # l axis 0 follows k axis 1, l axis 1 follows k axis 0
        out = np.einsum("ja,ib->jiba", A0, A1)
    return out.reshape(n1 * n0, -1)


def entity_average_weights(G: GeometryMap, basis: TensorBasis, fixed: dict, nq=None, mean="integral"):
    """
    Weights ``w_i`` of the average functional over an edge / face entity.

    ``mean="integral"`` gives the integral mean of the trace in physical
    measure, ``mean="coefficient"`` the plain mean of the coefficients.
    Ordering follows :func:`entity_dofs`.
    """
    d = basis.dim
    free = [a for a in range(d) if a not in fixed]
    cols = entity_dofs(basis, fixed)
    if mean == "coefficient":
        return cols, np.full(cols.size, 1.0 / cols.size)
    if mean != "integral":
        raise ValueError(f"unknown mean {mean!r}")
    nq = nq if nq is not None else max(basis.degrees) + 1
    pts_per_dir, wts, mats = [], [], []
    for a in range(d):
        if a in fixed:
            pts_per_dir.append(np.array([float(fixed[a])]))
        else:
            xq, wq = element_quadrature(basis.kvs[a].breakpoints, nq)
            pts_per_dir.append(xq.ravel())
            wts.append(wq.ravel())
            mats.append(collocation_matrix(basis.kvs[a], xq.ravel()))
    x, J = G.eval_grid(pts_per_dir, check=False)
    J = _flat_points(J, d)
    T = J[:, :, free]
    if len(free) == 1:
        meas = np.linalg.norm(T[:, :, 0], axis=1)
    else:
        gram = np.einsum("qai,qaj->qij", T, T)
        meas = np.sqrt(np.abs(np.linalg.det(gram)))
    w = _kron_cols([t[:, None] for t in wts])[:, 0] * meas
    V = _kron_cols(mats)
    integrals = V.T @ w
    return cols, integrals / w.sum()


def field_quadrature(G: GeometryMap, basis: TensorBasis, nq: int):
    """
    Gauss rule on the whole patch with sparse evaluation matrices.

    Returns ``(x, w, V, grads)``: points, weights (including ``|det J|``),
    ``V @ c`` gives field values and ``grads[a] @ c`` the physical partial
    derivative in direction ``a`` for a coefficient vector ``c``.
    """
    d = basis.dim
    pts, wts, vals, ders = [], [], [], []
    for kv in basis.kvs:
        xq, wq = element_quadrature(kv.breakpoints, nq)
        pts.append(xq.ravel())
        wts.append(wq.ravel())
        vals.append(sp.csr_matrix(collocation_matrix(kv, xq.ravel())))
        ders.append(sp.csr_matrix(collocation_matrix(kv, xq.ravel(), deriv=1)))
    x, J = G.eval_grid(pts, check=False)
    x = _flat_points(x, d)
    J = _flat_points(J, d)
    detJ = np.linalg.det(J)
    _check_det(detJ)
    Jinv = np.linalg.inv(J)

    def kron(mats):
        out = mats[-1]
        for A in reversed(mats[:-1]):
            out = sp.kron(out, A, format="csr")
        return out

    w = _kron_cols([t[:, None] for t in wts])[:, 0] * np.abs(detJ)
    V = kron(vals)
    dparam = [kron([ders[a] if a == b else vals[a] for a in range(d)]) for b in range(d)]
    grads = []
    for a in range(d):
        # d/dx_a = sum_b (J^{-1})_{b a} d/dxi_b
        grads.append(sum(sp.diags(Jinv[:, b, a]) @ dparam[b] for b in range(d)).tocsr())
    return x, w, V, grads
