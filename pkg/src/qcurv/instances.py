"""Named test instances: grids, metrics, curvature bundles, operators.

Every constructor is cached, so repeated requests inside one process share
grids and assembled operators.  These are the concrete geometries the test
suite and the command-line runner agree on.

The perturbed five-torus deserves a note.  Tori carry no metric of positive
scalar curvature, so the first eigenvalue of the conformal Laplacian of any
non-flat torus metric is strictly negative, and by Perron-Frobenius its
Green kernel can never be entrywise positive.  The closed-form-power
machinery (H, the analytic Gamma_1) therefore has no honest torus Green
kernel to run on.  What it does have: the underlying identity is local, so
any *positive* kernel row that the conformal Laplacian annihilates outside
a small masked ball satisfies the same off-mask identity.
:func:`harmonized_kernel_rows` builds exactly that — per-pivot solves of
L u = (mollified unit bump at the pivot) — and is the kernel the torus
Gamma_1 comparisons run on.  The honest Green kernel of the perturbed torus
remains available and is the documented way to witness the sign-violation
error.
"""
from __future__ import annotations

import functools
import math

import numpy as np

from .curvature import (chart_metric, conformal_deform, curvature_from_metric,
                        flat_metric, homogeneous_catalog)
from .grids import sphere3_nodes, torus_grid
from .operators import assemble_operator

__all__ = [
    "flat_torus", "perturbed_torus5", "round_sphere3", "zonal_sphere3",
    "product_s2_s1", "harmonized_kernel_rows",
]


@functools.lru_cache(maxsize=None)
def flat_torus(n: int, shape: tuple, period: float = 2.0 * math.pi) -> dict:
    """Flat T^n with the identity metric on a uniform periodic chart."""
    grid = torus_grid(n, tuple(shape), period=period)
    metric = flat_metric(grid)
    bundle = curvature_from_metric(metric)
    return {"grid": grid, "metric": metric, "bundle": bundle, "n": n}


def _torus5_perturbation(coords: dict, eps: float) -> np.ndarray:
    """Frozen symmetric band-limited perturbation h(x) of the T^5 metric.

    Frequency-one waves only, each component driven by a different
    coordinate, plus weaker off-diagonal couplings; the pattern is cyclic so
    no direction is privileged.
    """
    x = [coords[f"x{i + 1}"] for i in range(5)]
    N = len(x[0])
    h = np.zeros((N, 5, 5))
    for i in range(5):
        h[:, i, i] = np.cos(x[(i + 1) % 5])
    pairs = [(0, 1, 3), (1, 2, 4), (2, 3, 0), (3, 4, 1), (0, 4, 2)]
    for i, j, k in pairs:
        h[:, i, j] = h[:, j, i] = 0.4 * np.sin(x[k])
    return eps * h


@functools.lru_cache(maxsize=None)
def perturbed_torus5(shape: tuple = (6,) * 5, eps: float = 0.3) -> dict:
    """Non-conformally-flat perturbed T^5: g = identity + eps h(x).

    A conformally flat perturbation would leave the Paneitz operator with
    the exact kernel of the flat bilaplacian (rescaled constants), so the
    perturbation must bend the conformal class; this one does.
    """
    grid = torus_grid(5, tuple(shape))
    g = np.tile(np.eye(5), (grid.nnodes, 1, 1))
    g += _torus5_perturbation(grid.coords, eps)
    metric = chart_metric(grid, g, params={"eps": eps})
    bundle = curvature_from_metric(metric)
    return {"grid": grid, "metric": metric, "bundle": bundle, "n": 5}


@functools.lru_cache(maxsize=None)
def round_sphere3(degree: int, r: float = 1.0) -> dict:
    grid = sphere3_nodes(degree)
    metric, bundle = homogeneous_catalog("round_sphere", grid, n=3, r=r)
    return {"grid": grid, "metric": metric, "bundle": bundle, "n": 3}


@functools.lru_cache(maxsize=None)
def zonal_sphere3(degree: int, expr: str = "1+0.1*cos(theta)",
                  convention: str = "rho-neg4") -> dict:
    base = round_sphere3(degree)
    metric = conformal_deform(base["metric"], expr, convention)
    bundle = curvature_from_metric(metric)
    return {"grid": base["grid"], "metric": metric, "bundle": bundle,
            "n": 3, "base": base}


@functools.lru_cache(maxsize=None)
def product_s2_s1(degree: int, nz: int | None = None,
                  period: float = 2.0 * math.pi, r: float = 1.0) -> dict:
    params = {"r": r, "degree": degree, "period": period}
    if nz is not None:
        params["nz"] = nz
    metric, bundle = homogeneous_catalog("product_s2_s1", **params)
    return {"grid": metric.grid, "metric": metric, "bundle": bundle, "n": 3}


@functools.lru_cache(maxsize=None)
def get_operator(which: str, kind: str, *args, **kwargs):
    """Cached operator assembly: which in {flat_torus, perturbed_torus5,
    round_sphere3, zonal_sphere3, product_s2_s1}."""
    inst = globals()[which](*args, **kwargs)
    return assemble_operator(kind, inst["metric"], inst["bundle"])


def harmonized_kernel_rows(op_L, pivots, mask_radius: float,
                           solver) -> np.ndarray:
    """Positive kernel rows annihilated by L outside masked balls.

    For each pivot p, solve L u = b_p where b_p is a unit-mass smooth bump
    supported inside ``mask_radius``/2 of p.  Off the bump support the rows
    are L-harmonic, so the closed-form-power identity holds there — the
    property the Gamma_1 comparison tests — while entrywise positivity is
    achievable on instances whose honest Green kernel cannot be positive.
    ``solver(rhs) -> u`` must invert the operator's nodal matrix.
    """
    from .kernels import pivot_distances

    grid = op_L.grid
    W = op_L.W
    rows = np.zeros((len(pivots), grid.nnodes))
    sigma = mask_radius / 4.0
    for i, p in enumerate(pivots):
        d = pivot_distances(grid, int(p))
        b = np.exp(-0.5 * (d / sigma) ** 2)
        b[d > 0.5 * mask_radius] = 0.0
        b /= b @ W
        rows[i] = solver(W * b)
    return rows
