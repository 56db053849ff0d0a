"""Model problems on uniform patch grids and their exact solutions."""
from __future__ import annotations

import numpy as np

from ..assembly.system import Discretization, Problem, make_discretization
from ..assembly.topology import build_topology, grid_geometry
from ..splines import TensorBasis, make_open_knot_vector, refine_geometry

__all__ = ["PROBLEMS", "make_problem", "grid_discretization", "discretize_geometries"]

PI = np.pi


def _benchmark_2d():
    def u(x):
        return np.sin(4 * PI * (x[:, 0] + 0.4)) * np.sin(2 * PI * (x[:, 1] + 0.3)) + x[:, 0] + x[:, 1]

    def f(x):
        return 20 * PI ** 2 * np.sin(4 * PI * (x[:, 0] + 0.4)) * np.sin(2 * PI * (x[:, 1] + 0.3))

    def grad(x):
        a, b = 4 * PI * (x[:, 0] + 0.4), 2 * PI * (x[:, 1] + 0.3)
        return np.stack([4 * PI * np.cos(a) * np.sin(b) + 1, 2 * PI * np.sin(a) * np.cos(b) + 1], axis=1)

    return Problem(f=f, g_D=u, exact=u, exact_grad=grad)


def _homogeneous_2d():
    def u(x):
        return np.sin(2 * PI * x[:, 0]) * np.sin(2 * PI * x[:, 1])

    def f(x):
        return 8 * PI ** 2 * u(x)

    def grad(x):
        a, b = 2 * PI * x[:, 0], 2 * PI * x[:, 1]
        return 2 * PI * np.stack([np.cos(a) * np.sin(b), np.sin(a) * np.cos(b)], axis=1)

    return Problem(f=f, g_D=u, exact=u, exact_grad=grad)


def _homogeneous_3d():
    def u(x):
        return np.sin(2 * PI * x[:, 0]) * np.sin(2 * PI * x[:, 1]) * np.sin(PI * x[:, 2])

    def f(x):
        return 9 * PI ** 2 * u(x)

    def grad(x):
        a, b, c = 2 * PI * x[:, 0], 2 * PI * x[:, 1], PI * x[:, 2]
        return PI * np.stack([2 * np.cos(a) * np.sin(b) * np.sin(c),
                              2 * np.sin(a) * np.cos(b) * np.sin(c),
                              np.sin(a) * np.sin(b) * np.cos(c)], axis=1)

    return Problem(f=f, g_D=u, exact=u, exact_grad=grad)


PROBLEMS = {
    "benchmark": {2: _benchmark_2d, 3: _homogeneous_3d},
    "homogeneous": {2: _homogeneous_2d, 3: _homogeneous_3d},
}


def make_problem(name: str, dim: int) -> Problem:
    """``benchmark`` is the non-homogeneous 2D benchmark (3D falls back to the separable one)."""
    try:
        return PROBLEMS[name][dim]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r} in {dim}D") from None


def discretize_geometries(geometries, degree: int, refine: int):
    """Uniform spaces of degree ``degree`` with ``2**refine`` elements per direction."""
    bases, maps = [], []
    for G in geometries:
        kv = make_open_knot_vector(degree, 2 ** refine)
        basis = TensorBasis([kv] * G.dim)
        bases.append(basis)
        maps.append(refine_geometry(G, basis))
    return maps, bases


def grid_discretization(dim: int, patches, degree: int, refine: int, form: str = "cg",
                        problem: str | Problem = "benchmark", delta=None, neumann=(), alphas=None,
                        quad_order=None) -> Discretization:
    """Uniform patch grid on the unit square / cube."""
    patches = tuple(patches) if np.iterable(patches) else (int(patches),) * dim
    if len(patches) != dim:
        raise ValueError("patch grid must have one entry per dimension")
    geoms = grid_geometry(patches)
    maps, bases = discretize_geometries(geoms, degree, refine)
    topo = build_topology(maps, neumann=neumann)
    prob = make_problem(problem, dim) if isinstance(problem, str) else problem
    return make_discretization(maps, bases, topo, prob, form=form, alphas=alphas, delta=delta,
                               quad_order=quad_order)
