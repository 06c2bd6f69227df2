"""Structured grids on charts and spheres with finite-difference calculus.

A Grid is a tensor product of 1-D axes.  Each axis is one of

* ``periodic`` -- uniform nodes on a circle; stencils wrap around,
* ``polar``    -- uniform interior nodes on (0, pi) excluding both poles;
                  ghost values come from reflecting through the pole, which
                  permutes the *other* axes (an isometry of the sphere),
* ``open``     -- nonuniform nodes on (0, pi) (Gauss--Legendre in the cosine)
                  with the same reflection rule.

Quadrature weights on each axis integrate against that axis' share of the
base volume (so on spheres the product of axis weights integrates against
the round volume element).  For a coordinate metric g the volume weights are
``weights * sqrt(det g) / base_density``.

Differentiation is by Fornberg finite-difference stencils on the actual node
positions (arbitrary spacing, arbitrary accuracy order), applied either
matrix-free along an axis or assembled into sparse matrices.  Second
derivatives along one axis use a dedicated wide stencil rather than applying
the first-derivative twice (the composed operator has a sawtooth null mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


def fornberg_weights(z: float, x: np.ndarray, m: int) -> np.ndarray:
    """Weights of f(x[j]) in the d-th derivative at z, for d = 0..m.

    Classic recursive algorithm for arbitrary node positions; returns an
    array of shape (len(x), m+1).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    c = np.zeros((n, m + 1))
    c1 = 1.0
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


@dataclass
class Axis:
    """One factor of the tensor-product grid."""

    name: str
    nodes: np.ndarray  # (m,) strictly increasing
    weights: np.ndarray  # (m,) 1-D quadrature against this axis' base measure
    kind: str  # periodic | polar | open
    period: float = 0.0  # periodic only
    # reflection rule (polar/open): other-axis index -> permutation of that
    # axis' nodes, applied when a stencil reaches past either end
    reflect: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.nodes)


class Grid:
    """Tensor-product node set with quadrature and FD calculus."""

    def __init__(self, kind: str, dim: int, axes: list[Axis],
                 base_density_fn=None, fd_order: int = 4):
        self.kind = kind
        self.dim = dim
        self.axes = axes
        self.shape = tuple(ax.size for ax in axes)
        self.nnodes = int(np.prod(self.shape))
        self.fd_order = fd_order
        self.coord_names = tuple(ax.name for ax in axes)

        mesh = np.meshgrid(*[ax.nodes for ax in axes], indexing="ij")
        self.coords = {ax.name: m.ravel() for ax, m in zip(axes, mesh)}

        wmesh = np.meshgrid(*[ax.weights for ax in axes], indexing="ij")
        w = np.ones(self.shape)
        for wm in wmesh:
            w = w * wm
        self.weights = w.ravel()

        if base_density_fn is None:
            self.base_density = np.ones(self.nnodes)
        else:
            self.base_density = base_density_fn(self.coords)

        self._wtab_cache: dict = {}
        self._dmat_cache: dict = {}
        self._perm_cache: dict = {}
        # optional spectral attachment (set by the sphere-harmonic layer)
        self.spectral = None

    # ---------------- quadrature ----------------

    def integrate_base(self, f: np.ndarray) -> float:
        return float(self.weights @ np.asarray(f))

    def coords_env(self) -> dict[str, np.ndarray]:
        return dict(self.coords)

    # ---------------- stencil tables ----------------

    def _halfwidth(self) -> int:
        # order-p accuracy for 1st/2nd derivatives: 2*halfwidth+1 points
        return self.fd_order // 2

    def _ext_positions(self, iax: int) -> np.ndarray:
        ax = self.axes[iax]
        p = self._halfwidth()
        x = ax.nodes
        if ax.kind == "periodic":
            lo = x[-p:] - ax.period
            hi = x[:p] + ax.period
        else:  # polar / open: reflect through 0 and through pi
            lo = (-x[:p])[::-1]
            hi = (2.0 * math.pi - x[-p:])[::-1]
        return np.concatenate([lo, x, hi])

    def _weight_table(self, iax: int, order: int) -> np.ndarray:
        key = (iax, order)
        if key in self._wtab_cache:
            return self._wtab_cache[key]
        ax = self.axes[iax]
        p = self._halfwidth()
        pos = self._ext_positions(iax)
        m = ax.size
        W = np.empty((m, 2 * p + 1))
        for j in range(m):
            window = pos[j: j + 2 * p + 1]
            W[j] = fornberg_weights(ax.nodes[j], window, order)[:, order]
        self._wtab_cache[key] = W
        return W

    # ---------------- ghost construction ----------------

    def _reflect_block(self, F: np.ndarray, iax: int, idx: list[int]) -> np.ndarray:
        ax = self.axes[iax]
        block = F.take(idx, axis=iax)
        for oax, perm in ax.reflect.items():
            block = block.take(perm, axis=oax)
        return block

    def _extend(self, F: np.ndarray, iax: int) -> np.ndarray:
        ax = self.axes[iax]
        p = self._halfwidth()
        m = ax.size
        if ax.kind == "periodic":
            lo = F.take(range(m - p, m), axis=iax)
            hi = F.take(range(p), axis=iax)
        else:
            lo = self._reflect_block(F, iax, list(range(p - 1, -1, -1)))
            hi = self._reflect_block(F, iax, list(range(m - 1, m - p - 1, -1)))
        return np.concatenate([lo, F, hi], axis=iax)

    # ---------------- differentiation ----------------

    def diff(self, f: np.ndarray, axis: int | str, order: int = 1) -> np.ndarray:
        """FD derivative of given order along one axis (matrix-free)."""
        iax = self._axis_index(axis)
        ax = self.axes[iax]
        p = self._halfwidth()
        m = ax.size
        F = np.asarray(f, dtype=float).reshape(self.shape)
        ext = self._extend(F, iax)
        W = self._weight_table(iax, order)
        out = np.zeros_like(F)
        wshape = [1] * len(self.shape)
        wshape[iax] = m
        for k in range(2 * p + 1):
            seg = ext.take(range(k, k + m), axis=iax)
            out += W[:, k].reshape(wshape) * seg
        return out.ravel()

    def d2(self, f: np.ndarray, a: int | str, b: int | str) -> np.ndarray:
        """Second derivative: dedicated stencil if a == b, else composed."""
        ia, ib = self._axis_index(a), self._axis_index(b)
        if ia == ib:
            return self.diff(f, ia, order=2)
        return self.diff(self.diff(f, ia, 1), ib, 1)

    def _axis_index(self, axis: int | str) -> int:
        if isinstance(axis, int):
            return axis
        return self.coord_names.index(axis)

    # ---------------- sparse derivative matrices ----------------

    def _ghost_perm_flat(self, iax: int) -> np.ndarray:
        """Flat-index permutation realizing the reflection companion map."""
        if iax in self._perm_cache:
            return self._perm_cache[iax]
        ax = self.axes[iax]
        idx = [np.arange(s) for s in self.shape]
        for oax, perm in ax.reflect.items():
            idx[oax] = perm
        mesh = np.meshgrid(*idx, indexing="ij")
        flat = np.ravel_multi_index([m.ravel() for m in mesh], self.shape)
        self._perm_cache[iax] = flat
        return flat

    def dmatrix(self, axis: int | str, order: int = 1) -> sp.csr_matrix:
        """Sparse matrix of diff(., axis, order) acting on flat node vectors."""
        iax = self._axis_index(axis)
        key = (iax, order, "mat")
        if key in self._dmat_cache:
            return self._dmat_cache[key]
        ax = self.axes[iax]
        p = self._halfwidth()
        m = ax.size
        W = self._weight_table(iax, order)
        multi = np.indices(self.shape)
        j_ax = multi[iax].ravel()
        strides = np.array(
            [int(np.prod(self.shape[i + 1:])) for i in range(len(self.shape))]
        )
        flat_all = np.arange(self.nnodes)
        base = flat_all - j_ax * strides[iax]  # flat index with axis idx zeroed
        ghost_perm = None
        if ax.kind != "periodic":
            ghost_perm = self._ghost_perm_flat(iax)

        rows, cols, vals = [], [], []
        for k in range(2 * p + 1):
            s = j_ax + k - p  # shifted axis index, may run off either end
            v = W[j_ax, k]
            if ax.kind == "periodic":
                col = base + (s % m) * strides[iax]
            else:
                col = np.empty(self.nnodes, dtype=np.int64)
                inside = (s >= 0) & (s < m)
                col[inside] = base[inside] + s[inside] * strides[iax]
                lo = s < 0
                if lo.any():
                    c = base[lo] + (-s[lo] - 1) * strides[iax]
                    col[lo] = ghost_perm[c]
                hi = s >= m
                if hi.any():
                    c = base[hi] + (2 * m - 1 - s[hi]) * strides[iax]
                    col[hi] = ghost_perm[c]
            rows.append(flat_all)
            cols.append(col)
            vals.append(v)
        M = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.nnodes, self.nnodes),
        )
        self._dmat_cache[key] = M
        return M


# ---------------- builders ----------------


def torus_grid(n: int, shape: tuple[int, ...], period: float = 2.0 * math.pi,
               fd_order: int = 4) -> Grid:
    """Uniform periodic chart grid on the n-torus (coords x1..xn)."""
    if len(shape) != n:
        raise ValueError("shape must have one entry per dimension")
    axes = []
    for i, m in enumerate(shape):
        h = period / m
        axes.append(Axis(
            name=f"x{i + 1}",
            nodes=h * np.arange(m),
            weights=np.full(m, h),
            kind="periodic",
            period=period,
        ))
    return Grid("torus", n, axes, fd_order=fd_order)


def sphere2_nodes(degree: int, fd_order: int = 4) -> Grid:
    """Node set for S^2 resolving spherical harmonics up to ``degree``.

    Gauss--Legendre in cos(theta) x uniform phi; quadrature is exact for
    products of two resolved harmonics.  phi count is even so the reflection
    theta -> -theta (companion phi -> phi + pi) lands on grid nodes.
    """
    L = degree
    ntheta = L + 1
    nphi = 2 * L + 2
    u, wu = np.polynomial.legendre.leggauss(ntheta)
    theta = np.arccos(u[::-1])  # ascending in theta
    wtheta = wu[::-1]
    hphi = 2.0 * math.pi / nphi
    phi = hphi * np.arange(nphi)
    roll = np.roll(np.arange(nphi), -nphi // 2)

    ax_theta = Axis("theta", theta, wtheta, "open", reflect={1: roll})
    ax_phi = Axis("phi", phi, np.full(nphi, hphi), "periodic", period=2 * math.pi)
    g = Grid("sphere2", 2, [ax_theta, ax_phi],
             base_density_fn=lambda c: np.sin(c["theta"]),
             fd_order=fd_order)
    g.degree = L
    return g


def sphere3_nodes(degree: int, fd_order: int = 4) -> Grid:
    """Node set for S^3 resolving hyperspherical harmonics up to ``degree``.

    Coordinates (theta, eta, phi) with x = (cos th, sin th cos eta,
    sin th sin eta cos ph, sin th sin eta sin ph).  theta takes uniform
    interior nodes with the Gauss rule for the sin^2 weight; eta takes
    Gauss--Legendre in cos(eta); phi is uniform with even count.
    """
    L = degree
    ntheta = L + 1
    neta = L + 1
    nphi = 2 * L + 2
    # Gauss-Chebyshev (2nd kind): exact for trig polys against sin^2 theta
    htheta = math.pi / (ntheta + 1)
    theta = htheta * np.arange(1, ntheta + 1)
    wtheta = htheta * np.sin(theta) ** 2

    u, wu = np.polynomial.legendre.leggauss(neta)
    eta = np.arccos(u[::-1])
    weta = wu[::-1]

    hphi = 2.0 * math.pi / nphi
    phi = hphi * np.arange(nphi)
    roll = np.roll(np.arange(nphi), -nphi // 2)
    flip_eta = np.arange(neta)[::-1].copy()

    ax_theta = Axis("theta", theta, wtheta, "polar",
                    reflect={1: flip_eta, 2: roll})
    ax_eta = Axis("eta", eta, weta, "open", reflect={2: roll})
    ax_phi = Axis("phi", phi, np.full(nphi, hphi), "periodic", period=2 * math.pi)
    g = Grid("sphere3", 3, [ax_theta, ax_eta, ax_phi],
             base_density_fn=lambda c: np.sin(c["theta"]) ** 2 * np.sin(c["eta"]),
             fd_order=fd_order)
    g.degree = L
    return g


def product_s2_torus_grid(degree: int, tshape: tuple[int, ...],
                          period: float = 2.0 * math.pi,
                          fd_order: int = 4) -> Grid:
    """S^2 x T^k product grid: sphere2 axes followed by periodic x1..xk."""
    s2 = sphere2_nodes(degree, fd_order=fd_order)
    axes = [s2.axes[0], s2.axes[1]]
    for i, m in enumerate(tshape):
        h = period / m
        axes.append(Axis(f"x{i + 1}", h * np.arange(m), np.full(m, h),
                         "periodic", period=period))
    g = Grid("product_s2_torus", 2 + len(tshape), axes,
             base_density_fn=lambda c: np.sin(c["theta"]),
             fd_order=fd_order)
    g.degree = degree
    return g


def point_grid(volume: float, dim: int) -> Grid:
    """Single-node backend for homogeneous spaces (constants only).

    Any attempt to differentiate raises: fields on this backend must be
    constant and all curvature data comes from closed-form catalog values.
    """
    ax = Axis("x1", np.zeros(1), np.array([volume]), "periodic", period=1.0)
    g = Grid("point", dim, [ax])

    def _no_diff(*a, **k):
        raise NotImplementedError(
            "single-node homogeneous backend supports no field derivatives"
        )

    g.diff = _no_diff  # type: ignore[method-assign]
    g.d2 = _no_diff  # type: ignore[method-assign]
    g.dmatrix = _no_diff  # type: ignore[method-assign]
    return g
