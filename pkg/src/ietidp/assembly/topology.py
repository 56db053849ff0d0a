"""Multipatch connectivity: side matching, orientation and boundary labels."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import permutations, product
from pathlib import Path

import numpy as np

from ..errors import TopologyError, UnsupportedConfigurationError
from ..splines import GeometryMap, KnotVector, TensorBasis, eval_points

__all__ = [
    "Orientation",
    "Interface",
    "MultiPatchTopology",
    "side_axis",
    "side_end",
    "tangential_axes",
    "build_topology",
    "load_geometry",
    "save_geometry",
    "grid_geometry",
]


def side_axis(side: int) -> int:
    return side // 2


def side_end(side: int) -> int:
    return side % 2


def tangential_axes(dim: int, side: int) -> tuple:
    a = side_axis(side)
    return tuple(i for i in range(dim) if i != a)


@dataclass(frozen=True)
class Orientation:
    """
    Map from tangential coordinates of one side to those of the matching side.

    Tangential coordinate ``j`` on the target side equals coordinate
    ``perm[j]`` on the source side, reflected (``t -> 1 - t``) if ``flips[j]``.
    """

    perm: tuple = ()
    flips: tuple = ()

    def apply(self, t: np.ndarray) -> np.ndarray:
        """Map source tangential points (n, d-1) to target ones."""
        t = np.atleast_2d(t)
        out = t[:, list(self.perm)] if self.perm else t.copy()
        for j, f in enumerate(self.flips):
            if f:
                out[:, j] = 1.0 - out[:, j]
        return out

    def inverse(self) -> "Orientation":
        m = len(self.perm)
        inv = [0] * m
        flips = [False] * m
        for j, pj in enumerate(self.perm):
            inv[pj] = j
            flips[pj] = self.flips[j]
        return Orientation(tuple(inv), tuple(flips))

    @property
    def reversed(self) -> bool:
        """2d shorthand: the shared edge is traversed in opposite directions."""
        return bool(self.flips and self.flips[0])


@dataclass(frozen=True)
class Interface:
    """Shared side between patches ``k`` and ``l`` (always ``k < l``)."""

    k: int
    side_k: int
    l: int
    side_l: int
    orientation: Orientation  # tangential coords of side_k -> side_l


@dataclass
class MultiPatchTopology:
    dim: int
    n_patches: int
    interfaces: list
    dirichlet_sides: list
    neumann_sides: list
    _nbrs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        nb = {k: [] for k in range(self.n_patches)}
        for itf in self.interfaces:
            if itf.k == itf.l:
                raise TopologyError("an interface must join two different patches")
            nb[itf.k].append((itf.l, itf.side_k, itf.side_l, itf.orientation))
            nb[itf.l].append((itf.k, itf.side_l, itf.side_k, itf.orientation.inverse()))
        for k in nb:
            nb[k].sort(key=lambda e: (e[1], e[0]))
        self._nbrs = nb

    def neighbors(self, k: int) -> list:
        """``(l, side_of_k, side_of_l, orientation k->l)`` for every interface of ``k``."""
        return self._nbrs[k]

    def neighbor_set(self, k: int) -> list:
        return sorted({e[0] for e in self._nbrs[k]})

    def is_dirichlet(self, k: int, side: int) -> bool:
        return (k, side) in set(map(tuple, self.dirichlet_sides))

    def interface_sides(self, k: int) -> set:
        return {e[1] for e in self._nbrs[k]}


# ---------------------------------------------------------------------------
# geometry helpers

def _side_param_points(dim, side, tangential):
    """Parameter points on ``side`` for tangential coordinates (n, dim-1)."""
    tangential = np.atleast_2d(tangential)
    pts = np.empty((tangential.shape[0], dim))
    pts[:, side_axis(side)] = float(side_end(side))
    for j, ax in enumerate(tangential_axes(dim, side)):
        pts[:, ax] = tangential[:, j]
    return pts


def _eval_points(G: GeometryMap, pts):
    return eval_points(G, pts)[0] if len(pts) else np.zeros((0, G.dim))


def _tangential_corners(dim):
    # corners of [0,1]^(dim-1), first coordinate fastest
    return np.array([tuple(reversed(c)) for c in product(*([0.0, 1.0],) * (dim - 1))]).reshape(-1, dim - 1)


def _square_symmetries(m):
    for perm in permutations(range(m)):
        for flips in product([False, True], repeat=m):
            yield Orientation(tuple(perm), tuple(flips))


def _match_sides(Gk, sk, Gl, sl, tol):
    dim = Gk.dim
    tc = _tangential_corners(dim)
    ck = _eval_points(Gk, _side_param_points(dim, sk, tc))
    cl = _eval_points(Gl, _side_param_points(dim, sl, tc))
    scale = max(1.0, float(np.abs(ck).max()))
    # cheap rejection: corner sets must coincide
    d = np.linalg.norm(ck[:, None, :] - cl[None, :, :], axis=-1)
    if not np.all(d.min(axis=1) <= tol * scale) or not np.all(d.min(axis=0) <= tol * scale):
        return None
    # sample points decide between symmetries (and reject non-conforming curved sides)
    rng = np.random.default_rng(12345)
    probe = np.vstack([tc, rng.uniform(0.1, 0.9, size=(3, dim - 1))])
    xk = _eval_points(Gk, _side_param_points(dim, sk, probe))
    found = []
    for o in _square_symmetries(dim - 1):
        xl = _eval_points(Gl, _side_param_points(dim, sl, o.apply(probe)))
        if np.max(np.linalg.norm(xk - xl, axis=-1)) <= tol * scale * 10:
            found.append(o)
    if not found:
        raise TopologyError(
            "sides share their corners but the parametrizations do not conform (gap/overlap)"
        )
    if len(found) > 1:
        raise TopologyError("degenerate side: orientation cannot be resolved")
    return found[0]


def _point_side_distance(G, side, q, n_samples=17):
    """Distance of ``q`` to a side and the tangential foot point (sampled + Gauss-Newton)."""
    dim = G.dim
    g = np.linspace(0.0, 1.0, n_samples)
    grid = np.array(list(product(*([g] * (dim - 1))))).reshape(-1, dim - 1)
    pts = _side_param_points(dim, side, grid)
    xs = _eval_points(G, pts)
    i = int(np.argmin(np.linalg.norm(xs - q, axis=1)))
    t = grid[i].copy()
    tan = tangential_axes(dim, side)
    for _ in range(8):
        x, J = eval_points(G, _side_param_points(dim, side, t))
        Jt = J[0][:, list(tan)]
        step, *_ = np.linalg.lstsq(Jt, q - x[0], rcond=None)
        t = np.clip(t + step, 0.0, 1.0)
    x = eval_points(G, _side_param_points(dim, side, t))[0][0]
    return float(np.linalg.norm(x - q)), t


def build_topology(patches, neumann=(), tol: float = 1e-10) -> MultiPatchTopology:
    """
    Detect interfaces between ``patches`` (a sequence of :class:`GeometryMap`)
    and label the remaining sides as Dirichlet unless listed in ``neumann``.

    ``patches`` may also be a path to a geometry file.
    """
    if isinstance(patches, (str, Path)):
        geo = load_geometry(patches)
        patches, neumann = geo["geometries"], geo["neumann"]
    patches = list(patches)
    if not patches:
        raise TopologyError("no patches")
    dim = patches[0].dim
    if any(G.dim != dim for G in patches):
        raise TopologyError("mixed patch dimensions")
    nsides = 2 * dim
    tc = _tangential_corners(dim)
    scale = max(1.0, max(float(np.abs(G.control_points).max()) for G in patches))
    side_corners = {
        (k, s): _eval_points(G, _side_param_points(dim, s, tc))
        for k, G in enumerate(patches)
        for s in range(nsides)
    }
    # candidate pairs: sides whose rounded corner sets coincide
    buckets = {}
    digits = max(0, int(-np.log10(tol * scale)) - 2)
    for key, c in side_corners.items():
        sig = tuple(sorted(map(tuple, np.round(c / scale, digits))))
        buckets.setdefault(sig, []).append(key)
    matches = {}
    for group in buckets.values():
        for i, (k, sk) in enumerate(group):
            for l, sl in group[i + 1:]:
                if k == l:
                    continue
                a, b = ((k, sk), (l, sl)) if k < l else ((l, sl), (k, sk))
                o = _match_sides(patches[a[0]], a[1], patches[b[0]], b[1], tol)
                if o is not None:
                    matches.setdefault(a, []).append((b[0], b[1], o))
                    matches.setdefault(b, []).append((a[0], a[1], o.inverse()))
    for key, m in matches.items():
        if len(m) > 1:
            raise TopologyError(f"side {key[1]} of patch {key[0]} matches several sides: ambiguous")
    interfaces = []
    for (k, sk), [(l, sl, o)] in sorted(matches.items()):
        if k < l:
            interfaces.append(Interface(k, sk, l, sl, o))

    # T-junctions: a patch corner lying strictly inside a side of another patch
    owners = [(k, q) for k, G in enumerate(patches) for q in G.corners()]
    pts = np.array([q for _, q in owners])
    for (k, s), c in side_corners.items():
        G = patches[k]
        net = G._net()
        index = [slice(None)] * dim
        index[side_axis(s)] = -1 if side_end(s) else 0
        cp = net[tuple(index)].reshape(-1, dim)  # control points of the side (convex hull)
        lo = cp.min(axis=0) - 1e-9 * scale
        hi = cp.max(axis=0) + 1e-9 * scale
        near = np.all((pts >= lo) & (pts <= hi), axis=1)
        near &= np.min(np.linalg.norm(pts[:, None, :] - c[None], axis=-1), axis=1) > tol * scale
        for idx in np.flatnonzero(near):
            l, q = owners[idx]
            if l == k:
                continue
            dist, t = _point_side_distance(G, s, q)
            if dist <= 1e-8 * scale:
                raise TopologyError(f"T-junction: corner of patch {l} lies inside side {s} of patch {k}")

    matched = set(matches)
    neumann = {tuple(x) for x in neumann}
    dirichlet, neu = [], []
    for k in range(len(patches)):
        for s in range(nsides):
            if (k, s) in matched:
                if (k, s) in neumann:
                    raise TopologyError(f"side {s} of patch {k} is an interface, not a boundary side")
                continue
            (neu if (k, s) in neumann else dirichlet).append((k, s))
    return MultiPatchTopology(dim, len(patches), interfaces, dirichlet, neu)


# ---------------------------------------------------------------------------
# geometry files

def save_geometry(path, geometries, neumann=(), alphas=None):
    """Write patches as JSON: degrees, knot vectors and control points (first index fastest)."""
    doc = {"dim": geometries[0].dim, "patches": [], "neumann": [list(x) for x in neumann]}
    for k, G in enumerate(geometries):
        doc["patches"].append(
            {
                "degrees": list(G.basis.degrees),
                "knots": [kv.knots.tolist() for kv in G.basis.kvs],
                "control_points": G.control_points.tolist(),
                "alpha": 1.0 if alphas is None else float(alphas[k]),
            }
        )
    Path(path).write_text(json.dumps(doc, indent=1))


def load_geometry(path) -> dict:
    """
    Read a geometry file.

    Each patch entry holds ``degrees`` and either ``knots`` (full open knot
    vectors) or ``elements`` (uniform knot vectors), plus ``control_points``.
    """
    doc = json.loads(Path(path).read_text())
    from ..splines import make_open_knot_vector

    geoms, alphas = [], []
    for entry in doc["patches"]:
        degs = entry["degrees"]
        if "knots" in entry:
            kvs = [KnotVector(p, t) for p, t in zip(degs, entry["knots"])]
        else:
            kvs = [make_open_knot_vector(p, n) for p, n in zip(degs, entry["elements"])]
        geoms.append(GeometryMap(TensorBasis(kvs), np.asarray(entry["control_points"], dtype=float)))
        alphas.append(float(entry.get("alpha", 1.0)))
    if any(G.dim != doc.get("dim", geoms[0].dim) for G in geoms):
        raise UnsupportedConfigurationError("patch dimension differs from the declared one")
    return {"geometries": geoms, "alphas": alphas, "neumann": [tuple(x) for x in doc.get("neumann", [])]}


def grid_geometry(n_patches, extent=None) -> list:
    """Uniform grid of affine (degree 1) patches on the box ``[0, extent]``."""
    from ..splines import affine_map, make_open_knot_vector

    n_patches = tuple(int(n) for n in n_patches)
    dim = len(n_patches)
    extent = np.ones(dim) if extent is None else np.asarray(extent, dtype=float)
    size = extent / np.array(n_patches)
    basis = TensorBasis([make_open_knot_vector(1, 1)] * dim)
    out = []
    # patch index: first direction fastest
    for idx in product(*(range(n) for n in reversed(n_patches))):
        idx = tuple(reversed(idx))
        out.append(affine_map(basis, np.diag(size), np.array(idx) * size))
    return out
