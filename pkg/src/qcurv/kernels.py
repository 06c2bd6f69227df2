"""Green's-function kernels and the integral-operator algebra around them.

Conventions
-----------
A :class:`Kernel` stores node values ``K(p, q)`` of an integral kernel
against the metric measure: the associated operator and composition are

    T_K(phi)(p) = int K(p, q) phi(q) dmu(q)      (matrix form  K @ (W * phi))
    (K * K')(p, q) = int K(p, s) K'(s, q) dmu(s) (matrix form  K @ diag(W) @ K')

so the identity kernel is ``diag(1/W)``.

Green kernels come paired with a *mate*: the nodal matrix ``S`` of the
measure-symmetric operator they invert, satisfying ``S @ G = I`` exactly.
On spectral backends the mate completes the unresolved quadrature modes at
the junk stiffness ``tau`` (its reciprocal is the inversion floor), keeping
operator and kernel exact inverses of each other; the mate agrees with the
assembled operator action on the resolved band to ~1e-11.

The two Gamma_1 kernels built here are deliberately different objects:

* ``Gamma1_discrete``  := delta - (P applied in the second argument of H)
  is an exact matrix identity; it drives the Neumann series and the row-sum
  checks at the 1e-10 level.
* ``Gamma1_analytic``  is the curvature formula: the coefficient
  (n-4)/(n-2)^2 times H times |Ric|^2 of the blown-up metric
  ``G_L(p,.)^{4/(n-2)} g``, with the norm taken in the instance metric.  It
  is masked near the diagonal (the blow-up factor is singular at the pivot)
  and drives convergence tests.

Dense kernels are capped at 6000 nodes; larger instances are
operator-backed and evaluated row-wise on deterministic pivot subsets.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .curvature import (CurvatureBundle, chart_metric, curvature_from_metric,
                        zonal_engine)
from .grids import Grid
from .operators import (DEFAULT_TAU, DiscreteOperator,
                        _sphere3_zonal_profiles)
from .sphharm import ambient_coords, geodesic_angles, sphere_basis

__all__ = [
    "Kernel", "NontrivialKernel", "SpectralRadiusAtLeastOne",
    "ball_volume", "h_normalizing_constant",
    "identity_kernel", "kernel_apply", "kernel_compose", "greens_kernel",
    "build_H_gamma", "neumann_green", "spectral_radius", "rowsum_check",
    "identity_residual", "sign_and_mass",
    "deterministic_pivots", "default_mask_radius", "pivot_distances",
    "fit_order", "growth_slopes", "symmetry_defect",
]

DENSE_NODE_CAP = 6000
_FLOOR = 1.0 / DEFAULT_TAU          # eigenvalue floor of kernel inversions


class NontrivialKernel(RuntimeError):
    """The operator has a (near-)null vector and cannot be inverted."""

    def __init__(self, message: str, null_vector=None, eigenvalue=None):
        super().__init__(message)
        self.null_vector = null_vector
        self.eigenvalue = eigenvalue


class SpectralRadiusAtLeastOne(RuntimeError):
    """The Neumann series does not converge: spectral radius >= 1."""

    def __init__(self, radius: float):
        super().__init__(
            f"spectral radius {radius:.6f} >= 1; Neumann series diverges")
        self.radius = radius


# --------------------------------------------------------------------------
# constants
# --------------------------------------------------------------------------


def ball_volume(n: int) -> float:
    """Volume of the unit ball in R^n: pi^(n/2) / Gamma(n/2 + 1)."""
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


def h_normalizing_constant(n: int) -> float:
    """Constant c_n with H = c_n^{-1} G_L^{(n-4)/(n-2)} in dimension n >= 5.

    c_n = 2^{-(n-6)/(n-2)} n^{2/(n-2)} (n-1)^{-(n-4)/(n-2)}
          (n-2)(n-4) omega_n^{2/(n-2)},  omega_n = unit-ball volume.
    """
    if n < 5:
        raise ValueError("the closed-form power of G_L uses n >= 5")
    wn = ball_volume(n)
    return (2.0 ** (-(n - 6.0) / (n - 2.0))
            * n ** (2.0 / (n - 2.0))
            * (n - 1.0) ** (-(n - 4.0) / (n - 2.0))
            * (n - 2.0) * (n - 4.0)
            * wn ** (2.0 / (n - 2.0)))


def _gamma1_coefficient(n: int) -> float:
    """Coefficient of H |Ric_blowup|^2 in Gamma_1 (equals -1 when n = 3)."""
    return (n - 4.0) / (n - 2.0) ** 2


# --------------------------------------------------------------------------
# kernel container
# --------------------------------------------------------------------------


class Kernel:
    """Integral kernel on a grid: dense values or operator-backed rows.

    values:
      * full dense: shape (N, N), ``pivots is None``;
      * pivot rows: shape (len(pivots), N) with ``pivots`` the row indices;
      * None: rows come lazily from ``column_fn`` (symmetric kernels only).
    ``mask_radius > 0`` flags entries within that distance of the diagonal
    as unreliable (singular kernels); integrals over masked kernels need an
    explicitly declared correction.
    """

    def __init__(self, grid: Grid, weights: np.ndarray,
                 values: np.ndarray | None = None,
                 pivots: np.ndarray | None = None,
                 apply_fn: Callable | None = None,
                 column_fn: Callable | None = None,
                 symmetric: bool = True,
                 mask_radius: float = 0.0,
                 meta: dict | None = None):
        self.grid = grid
        self.weights = np.asarray(weights, dtype=float)
        self.values = values
        self.pivots = None if pivots is None else np.asarray(pivots, int)
        self.apply_fn = apply_fn
        self.column_fn = column_fn
        self.symmetric = symmetric
        self.mask_radius = float(mask_radius)
        self.meta = meta or {}
        self._row_cache: dict[int, np.ndarray] = {}
        if self.pivots is not None:
            self._pivot_index = {int(p): i for i, p in enumerate(self.pivots)}
        else:
            self._pivot_index = None

    # -- shape / representation --------------------------------------------

    @property
    def nnodes(self) -> int:
        return self.grid.nnodes

    @property
    def is_dense(self) -> bool:
        return self.values is not None and self.pivots is None

    @property
    def representation(self) -> str:
        return "dense" if self.is_dense else "operator-backed"

    # -- access --------------------------------------------------------------

    def row(self, p: int) -> np.ndarray:
        """Kernel values K(p, .) on all nodes."""
        p = int(p)
        if self.is_dense:
            return self.values[p]
        if self._pivot_index is not None and p in self._pivot_index:
            return self.values[self._pivot_index[p]]
        if p in self._row_cache:
            return self._row_cache[p]
        if self.column_fn is not None:
            if not self.symmetric:
                raise ValueError("row access on a nonsymmetric operator-"
                                 "backed kernel is not defined")
            r = np.asarray(self.column_fn(p), dtype=float)
            self._row_cache[p] = r
            return r
        raise ValueError(f"kernel has no data for row {p}")

    def row_pivots(self) -> np.ndarray:
        """Indices of the rows this kernel can produce without new solves."""
        if self.is_dense:
            return np.arange(self.nnodes)
        if self.pivots is not None:
            return self.pivots
        return np.array(sorted(self._row_cache), dtype=int)

    def apply(self, phi: np.ndarray) -> np.ndarray:
        """T_K(phi) = int K(., q) phi(q) dmu(q)."""
        phi = np.asarray(phi, dtype=float)
        if self.is_dense:
            return self.values @ (self.weights * phi)
        if self.apply_fn is not None:
            return self.apply_fn(phi)
        raise ValueError("kernel is row-sampled only; no global apply")

    def toarray(self) -> np.ndarray:
        if not self.is_dense:
            raise ValueError("kernel is not dense")
        return self.values


def symmetry_defect(K: Kernel) -> float:
    """max |K - K^T| / max |K| for dense kernels."""
    V = K.toarray()
    scale = np.abs(V).max()
    if scale == 0.0:
        return 0.0
    return float(np.abs(V - V.T).max() / scale)


# --------------------------------------------------------------------------
# grid geometry helpers
# --------------------------------------------------------------------------


def _torus_pivot_dist(grid: Grid, p: int) -> np.ndarray:
    d2 = np.zeros(grid.nnodes)
    for ax in grid.axes:
        x = grid.coords[ax.name]
        d = np.abs(x - x[p])
        d = np.minimum(d, ax.period - d)
        d2 += d * d
    return np.sqrt(d2)


def _product_pivot_dist(grid: Grid, p: int) -> np.ndarray:
    th, ph = grid.coords["theta"], grid.coords["phi"]
    xyz = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph),
                    np.cos(th)], axis=1)
    dot = np.clip(xyz @ xyz[p], -1.0, 1.0)
    d2 = np.arccos(dot) ** 2
    for ax in grid.axes[2:]:
        x = grid.coords[ax.name]
        d = np.abs(x - x[p])
        d = np.minimum(d, ax.period - d)
        d2 += d * d
    return np.sqrt(d2)


def pivot_distances(grid: Grid, p: int) -> np.ndarray:
    """Distance proxy from node p to all nodes (angle on spheres)."""
    if grid.kind == "sphere3":
        xyz = ambient_coords(grid)
        return np.arccos(np.clip(xyz @ xyz[p], -1.0, 1.0))
    if grid.kind == "torus":
        return _torus_pivot_dist(grid, p)
    if grid.kind == "product_s2_torus":
        return _product_pivot_dist(grid, p)
    raise ValueError(f"no distance rule for grid kind {grid.kind!r}")


def default_mask_radius(grid: Grid) -> float:
    """4 grid spacings on charts; 4/degree radians on spectral grids."""
    if grid.kind in ("sphere3", "sphere2"):
        return 4.0 / grid.degree
    if grid.kind == "torus":
        return 4.0 * max(float(ax.nodes[1] - ax.nodes[0]) for ax in grid.axes)
    if grid.kind == "product_s2_torus":
        h_t = max(float(ax.nodes[1] - ax.nodes[0]) for ax in grid.axes[2:])
        return max(4.0 / grid.degree, 4.0 * h_t)
    raise ValueError(f"no mask rule for grid kind {grid.kind!r}")


def deterministic_pivots(nnodes: int, count: int = 64) -> np.ndarray:
    """Deterministic, roughly uniform node subsample (>= 64 by default)."""
    count = min(int(count), nnodes)
    return np.unique(np.linspace(0, nnodes - 1, count).astype(int))


def fit_order(hs, errs) -> float:
    """Least-squares slope of log(err) against log(h) (>0: converging)."""
    hs = np.asarray(hs, dtype=float)
    errs = np.maximum(np.asarray(errs, dtype=float), 1e-300)
    lh, le = np.log(hs), np.log(errs)
    A = np.stack([lh, np.ones_like(lh)], axis=1)
    slope = np.linalg.lstsq(A, le, rcond=None)[0][0]
    return float(slope)


def growth_slopes(K: Kernel, pivots, rmin: float, rmax: float) -> np.ndarray:
    """Log-log slope of |K(p, .)| against distance on an annulus, per pivot.

    Near-diagonal growth rates are reported only: the continuum rates carry
    unspecified constants, so nothing is asserted against them.
    """
    out = []
    for p in np.atleast_1d(pivots):
        d = pivot_distances(K.grid, int(p))
        v = np.abs(K.row(int(p)))
        sel = (d > rmin) & (d < rmax) & (v > 0)
        if sel.sum() < 8:
            out.append(np.nan)
            continue
        out.append(fit_order(d[sel], v[sel]))
    return np.asarray(out)


# --------------------------------------------------------------------------
# kernel algebra
# --------------------------------------------------------------------------


def identity_kernel(grid: Grid, weights: np.ndarray) -> Kernel:
    """delta-kernel diag(1/W): T_delta = identity."""
    W = np.asarray(weights, dtype=float)
    N = grid.nnodes
    if N <= DENSE_NODE_CAP:
        vals = np.zeros((N, N))
        np.fill_diagonal(vals, 1.0 / W)
        return Kernel(grid, W, values=vals, meta={"identity": True})
    inv = 1.0 / W

    def col(p, inv=inv):
        e = np.zeros(len(inv))
        e[p] = inv[p]
        return e

    return Kernel(grid, W, apply_fn=lambda phi: np.asarray(phi, float),
                  column_fn=col, meta={"identity": True})


def _check_same_grid(a: Kernel, b) -> None:
    gb = b.grid if hasattr(b, "grid") else None
    if gb is not None and gb is not a.grid:
        if gb.nnodes != a.grid.nnodes or gb.kind != a.grid.kind:
            raise ValueError("kernels/fields live on different grids")


def kernel_apply(K: Kernel, phi: np.ndarray) -> np.ndarray:
    """T_K(phi), the measure-weighted matrix-vector product."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (K.nnodes,):
        raise ValueError(f"field shape {phi.shape} != ({K.nnodes},)")
    return K.apply(phi)


def kernel_compose(A: Kernel, B: Kernel, *,
                   masked_correction: str | None = None) -> Kernel:
    """(A * B)(p, q) = int A(p, s) B(s, q) dmu(s).

    Dense kernels compose eagerly; operator-backed ones compose lazily
    (T_{A*B} = T_A o T_B).  Composing two masked kernels concentrates both
    singularities on the diagonal, so it requires an explicitly declared
    correction.
    """
    _check_same_grid(A, B)
    if A.mask_radius > 0.0 and B.mask_radius > 0.0 \
            and masked_correction is None:
        raise ValueError(
            "composing two masked kernels needs a declared quadrature "
            "correction (pass masked_correction=...)")
    W = A.weights
    if A.is_dense and B.is_dense:
        vals = A.values @ (W[:, None] * B.values)
        return Kernel(A.grid, W, values=vals, symmetric=False,
                      meta={"composed": True})

    def ap(phi, A=A, B=B):
        return A.apply(B.apply(phi))

    def col(q, A=A, B=B):
        return A.apply(B.row(q))

    return Kernel(A.grid, W, apply_fn=ap,
                  column_fn=col if B.symmetric or B.is_dense else None,
                  symmetric=False, meta={"composed": True, "lazy": True})


# --------------------------------------------------------------------------
# floor-inverse mates
# --------------------------------------------------------------------------


def _floor_inverse_pair(G: np.ndarray, W: np.ndarray, floor: float):
    """Exact operator/kernel mates from a sampled kernel.

    Diagonalize the measure-symmetrized kernel, push eigenvalues of modulus
    below ``floor`` out to +-floor (sign kept), and return the nodal pair
    (S, G_floored) with S @ G_floored = I exactly.
    """
    sq = np.sqrt(W)
    isq = 1.0 / sq
    Ksym = sq[:, None] * G * sq[None, :]
    Ksym = 0.5 * (Ksym + Ksym.T)
    sig, V = sla.eigh(Ksym)
    small = np.abs(sig) < floor
    nfloored = int(small.sum())
    sig_f = np.where(small, np.where(sig < 0.0, -floor, floor), sig)
    S = (sq[:, None] * V) @ ((1.0 / sig_f)[:, None] * (V.T * sq[None, :]))
    Gf = (isq[:, None] * V) @ (sig_f[:, None] * (V.T * isq[None, :]))
    return 0.5 * (S + S.T), 0.5 * (Gf + Gf.T), nfloored, sig


def _pin_band(G: np.ndarray, B: np.ndarray, lam: np.ndarray,
              W: np.ndarray) -> np.ndarray:
    """Symmetric rank-correction pinning T_G phi_k = phi_k / lam_k exactly.

    B must be orthonormal against W; the correction is the minimal symmetric
    update removing the Galerkin defect of G on span(B).
    """
    WB = W[:, None] * B
    E = G @ WB - B / lam[None, :]
    M = E.T @ WB
    M = 0.5 * (M + M.T)
    Gt = G - E @ B.T - B @ E.T + B @ M @ B.T
    return 0.5 * (Gt + Gt.T)


# --------------------------------------------------------------------------
# round-S^3 closed-sample suite
# --------------------------------------------------------------------------


def _sphere3_suite(grid: Grid, r: float, tau: float = DEFAULT_TAU) -> dict:
    """Kernel suite on the round S^3(r): closed-form sample + floor mates.

    G_L is sampled from its closed form 1/(64 pi r sin(gamma/2)) with a
    cell-average diagonal; H is the entrywise closed form -G_L^{-1}/(256
    pi^2); the resolved Paneitz band (degree <= 6) is pinned onto H before
    the final floor inversion, so G_P carries the exact band spectrum.
    """
    cache = getattr(grid, "_kernel_suites", None)
    if cache is None:
        cache = {}
        grid._kernel_suites = cache
    key = (round(float(r), 12), float(tau))
    if key in cache:
        return cache[key]

    floor = 1.0 / tau
    gam = geodesic_angles(grid)
    W = grid.weights * r ** 3

    with np.errstate(divide="ignore"):
        GL_raw = 1.0 / (64.0 * math.pi * r * np.sin(0.5 * gam))
    r_eff = (3.0 * W / (4.0 * math.pi)) ** (1.0 / 3.0)
    np.fill_diagonal(GL_raw, 1.5 / (32.0 * math.pi * r_eff))

    S_L, G_L, nfl_L, sig_L = _floor_inverse_pair(GL_raw, W, floor)
    H = -1.0 / (256.0 * math.pi ** 2 * G_L)

    bas7 = sphere_basis(grid, degree=min(6, grid.degree))
    B7 = bas7.matrix() / r ** 1.5
    X = bas7.eigs
    lam7 = (X - 1.25) * (X + 0.75) / r ** 4
    GP0 = _pin_band(H, B7, lam7, W)
    S_P, G_P, nfl_P, sig_P = _floor_inverse_pair(GP0, W, floor)

    cache[key] = dict(
        gamma=gam, W=W, r=r, G_L=G_L, S_L=S_L, H=H, G_P=G_P, S_P=S_P,
        GP0=GP0, G_L_raw=GL_raw, nfloored={"L": nfl_L, "P": nfl_P},
        floor=floor, band_basis=B7, band_eigs=lam7,
    )
    return cache[key]


def _raw_gl_row(G_L: Kernel, p: int) -> np.ndarray:
    """Row of G_L best suited to local differentiation.

    Floor-inverted kernels carry tau-level corrections on unresolved
    quadrature modes; those are essential for the exact inverse algebra but
    poison nested numerical derivatives.  When the closed-form sample is
    available (sphere suites), read it instead — for conjugated instances
    with the conformal factors reattached.
    """
    suite = G_L.meta.get("suite")
    if suite is None:
        return G_L.row(p)
    raw = suite["G_L_raw"][p]
    rho = G_L.meta.get("rho")
    if rho is not None:
        return rho[p] * rho * raw
    return raw


def _sphere3_pinned_paneitz_column(grid: Grid, r: float, p: int,
                                   block: int = 512) -> np.ndarray:
    """One column of the band-pinned Paneitz kernel without a dense solve.

    Streams the closed-form H in row blocks, so it scales to node counts
    where the dense eigendecomposition (and hence the floor step) is out of
    reach; the floor correction it omits is at the inversion-floor level.
    """
    N = grid.nnodes
    W = grid.weights * r ** 3
    xyz = ambient_coords(grid)
    bas7 = sphere_basis(grid, degree=min(6, grid.degree))
    B7 = bas7.matrix() / r ** 1.5
    lam7 = (bas7.eigs - 1.25) * (bas7.eigs + 0.75) / r ** 4
    WB = W[:, None] * B7

    def h_rows(idx):
        gam = np.arccos(np.clip(xyz[idx] @ xyz.T, -1.0, 1.0))
        with np.errstate(divide="ignore"):
            gl = 1.0 / (64.0 * math.pi * r * np.sin(0.5 * gam))
        for i, g in enumerate(idx):
            re = (3.0 * W[g] / (4.0 * math.pi)) ** (1.0 / 3.0)
            gl[i, g] = 1.5 / (32.0 * math.pi * re)
        return -1.0 / (256.0 * math.pi ** 2 * gl)

    E = np.empty((N, B7.shape[1]))
    hcol_p = np.empty(N)
    for start in range(0, N, block):
        idx = np.arange(start, min(start + block, N))
        Hb = h_rows(idx)
        E[idx] = Hb @ WB
        hcol_p[idx] = Hb[:, p]
    E -= B7 / lam7[None, :]
    M = E.T @ WB
    M = 0.5 * (M + M.T)
    col = (hcol_p - E @ B7[p] - B7 @ E[p] + B7 @ (M @ B7[p]))
    return col


# --------------------------------------------------------------------------
# spectral / sandwich / chart Green kernels
# --------------------------------------------------------------------------


def _spectral_mate_pair(op: DiscreteOperator):
    """Exact mates (S, G) for a spectral-route operator.

    G = B Lam^{-1} B^T + (1/tau)(diag(1/W) - B B^T) inverts the
    tau-completed operator exactly: S @ G = I up to rounding.
    """
    B = op.extras["B"]
    lam = np.asarray(op.extras["lam"], dtype=float)
    tau = float(op.extras["tau"])
    W = op.W
    scale = max(np.abs(lam).max(), tau)
    j = int(np.argmin(np.abs(lam)))
    if abs(lam[j]) <= 1e-9 * scale:
        raise NontrivialKernel(
            f"operator has a near-null resolved mode (eigenvalue "
            f"{lam[j]:.3e} vs scale {scale:.3e})",
            null_vector=B[:, j], eigenvalue=float(lam[j]))
    G = (B / lam[None, :]) @ B.T
    G += (1.0 / tau) * (np.diag(1.0 / W) - B @ B.T)
    G = 0.5 * (G + G.T)
    S = (W[:, None] * B * lam[None, :]) @ (B.T * W[None, :])
    S += tau * (np.diag(W) - (W[:, None] * B) @ (B.T * W[None, :]))
    S = 0.5 * (S + S.T)
    return S, G


def _axis_fd_symbol(ax, order: int, fd_order: int = 4) -> np.ndarray:
    """|symbol|^2-ready FD symbol of the axis derivative on its own modes."""
    from .grids import fornberg_weights
    m = ax.size
    h = float(ax.nodes[1] - ax.nodes[0])
    p = fd_order // 2
    offs = np.arange(-p, p + 1)
    w = fornberg_weights(0.0, offs * h, order)[:, order]
    k = 2.0 * math.pi * np.fft.fftfreq(m, d=h)
    sym = np.zeros(m, dtype=complex)
    for o, c in zip(offs, w):
        sym += c * np.exp(1j * k * o * h)
    return sym


def _chart_fft_preconditioner(op: DiscreteOperator):
    """FFT preconditioner from the flat symbol of the chart assembly."""
    grid = op.grid
    shape = grid.shape
    mu0 = float(np.mean(op.W))
    lap = np.zeros(shape)
    stab = np.zeros(shape)
    for i, ax in enumerate(grid.axes):
        s1 = np.abs(_axis_fd_symbol(ax, 1, grid.fd_order)) ** 2
        s2 = np.abs(_axis_fd_symbol(ax, 2, grid.fd_order)) ** 2
        h = float(ax.nodes[1] - ax.nodes[0])
        sh = [1] * len(shape)
        sh[i] = ax.size
        lap = lap + s1.reshape(sh)
        stab = stab + (0.0125 * h ** 6) * (s2 ** 2).reshape(sh)
    grad_sym = mu0 * (lap + stab)
    if op.kind == "paneitz":
        denom = grad_sym ** 2 / mu0
    else:
        denom = 4.0 * (op.n - 1) / (op.n - 2) * grad_sym
    # keep the constant mode finite: it is the operator's softest direction
    nz = denom[denom > 0]
    denom = denom + (1e-3 * nz.min() if nz.size else 1.0)

    def precond(v, denom=denom, shape=shape):
        return np.real(np.fft.ifftn(np.fft.fftn(v.reshape(shape)) / denom)
                       ).ravel()

    return precond


def _sym_solve(action, rhs, precond, rtol=1e-12, maxiter=3000):
    """Preconditioned MINRES solve of the symmetric system S x = rhs.

    MINRES rather than CG: perturbed-torus operators are symmetric but
    indefinite (the soft near-constant mode sits at a small negative
    eigenvalue while the rest of the spectrum is positive).
    """
    N = len(rhs)
    Aop = spla.LinearOperator((N, N), matvec=action, dtype=float)
    Mop = spla.LinearOperator((N, N), matvec=precond, dtype=float)
    try:
        x, info = spla.minres(Aop, rhs, M=Mop, rtol=rtol, maxiter=maxiter)
    except TypeError:                                    # older scipy
        x, info = spla.minres(Aop, rhs, M=Mop, tol=rtol, maxiter=maxiter)
    if info != 0:
        raise RuntimeError(f"iterative symmetric solve failed "
                           f"(info={info})")
    return x


def _chart_invertibility_probe(op: DiscreteOperator, precond) -> dict:
    """Extremal eigenvalue estimates of S u = lam W u (certificate data).

    The smallest generalized eigenpair comes from a preconditioned block
    iteration; it stays well-defined when the operator is singular, so a
    near-null direction is reported instead of a failed solve.
    """
    N = op.nnodes
    rng = np.random.default_rng(0)
    X = np.stack([np.ones(N), rng.standard_normal(N)], axis=1)
    Aop = spla.LinearOperator((N, N), matvec=op.action, dtype=float)
    Mop = spla.LinearOperator((N, N), matvec=precond, dtype=float)
    Bmat = sp.diags(op.W)
    with np.errstate(all="ignore"):
        lam, vecs = spla.lobpcg(Aop, X, B=Bmat, M=Mop, largest=False,
                                tol=1e-8, maxiter=200)
    j = int(np.argmin(np.abs(lam)))
    lam_min, vec_min = float(lam[j]), vecs[:, j]
    w = rng.standard_normal(N)
    lam_max = 0.0
    for _ in range(30):
        y = op.action(w) / op.W
        lam_max = math.sqrt((y @ (op.W * y)) / (w @ (op.W * w)))
        w = y / np.max(np.abs(y))
    return {"min_eig": lam_min, "max_eig": float(lam_max),
            "ratio": float(abs(lam_min) / max(lam_max, 1e-300)),
            "min_vector": vec_min / np.abs(vec_min).max()}


def _chart_dense_pair(op: DiscreteOperator):
    S = op.form_matrix().toarray()
    W = op.W
    sq = np.sqrt(W)
    K = S / sq[:, None] / sq[None, :]
    K = 0.5 * (K + K.T)
    sig, V = sla.eigh(K)
    scale = np.abs(sig).max()
    j = int(np.argmin(np.abs(sig)))
    if abs(sig[j]) <= 1e-9 * scale:
        vec = V[:, j] / sq
        vec /= np.abs(vec).max()
        raise NontrivialKernel(
            f"operator has a near-null vector (eigenvalue {sig[j]:.3e} vs "
            f"scale {scale:.3e}); the reported vector is the offending "
            "direction", null_vector=vec, eigenvalue=float(sig[j]))
    G = (V / sq[:, None]) @ ((1.0 / sig)[:, None] * (V.T / sq[None, :]))
    G = 0.5 * (G + G.T)
    certificate = {"min_eig_sym": float(sig[j]), "scale": float(scale),
                   "ratio": float(abs(sig[j]) / scale)}
    return sp.csr_matrix(S), G, certificate


def greens_kernel(op: DiscreteOperator, mode: str = "full",
                  column: int | None = None) -> Kernel:
    """Discrete Green's kernel of a symmetric invertible operator.

    The returned kernel carries its operator mate in ``meta["mate"]``
    (nodal ``S`` with ``S @ G = I``).  mode="column" computes a single
    column (index ``column``); on round-S^3 Paneitz instances too large for
    the dense suite this streams the band-pinned closed form.
    """
    grid = op.grid
    if mode not in ("full", "column"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "column" and column is None:
        raise ValueError("mode='column' needs a column index")

    # --- spectral sphere instances: closed-sample suite --------------------
    if grid.kind == "sphere3" and op.route == "spectral" \
            and op.kind in ("conformal-laplacian", "paneitz"):
        r = float(op.metric.params.get("r", 1.0))
        if mode == "column" and grid.nnodes > DENSE_NODE_CAP:
            if op.kind == "paneitz":
                col = _sphere3_pinned_paneitz_column(grid, r, int(column))
                meta = {"route": "pinned-column", "floor_applied": False}
            else:
                xyz = ambient_coords(grid)
                gam = np.arccos(np.clip(xyz @ xyz[int(column)], -1, 1))
                with np.errstate(divide="ignore"):
                    col = 1.0 / (64.0 * math.pi * r * np.sin(0.5 * gam))
                W = grid.weights * r ** 3
                re = (3.0 * W[int(column)] / (4.0 * math.pi)) ** (1.0 / 3.0)
                col[int(column)] = 1.5 / (32.0 * math.pi * re)
                meta = {"route": "closed-sample", "floor_applied": False}
            return Kernel(grid, grid.weights * r ** 3, values=col[None, :],
                          pivots=[int(column)], meta=meta)
        suite = _sphere3_suite(grid, r, float(op.extras.get("tau",
                                                            DEFAULT_TAU)))
        if op.kind == "paneitz":
            vals, mate = suite["G_P"], suite["S_P"]
            mask = 0.0
        else:
            vals, mate = suite["G_L"], suite["S_L"]
            mask = default_mask_radius(grid)
        K = Kernel(grid, suite["W"], values=vals, mask_radius=mask,
                   meta={"mate": mate, "route": "closed-sample+floor",
                         "floored_modes": suite["nfloored"],
                         "diagonal": "cell-average" if op.kind ==
                         "conformal-laplacian" else "finite",
                         "suite": suite})
        if mode == "column":
            c = int(column)
            return Kernel(grid, suite["W"], values=vals[c][None, :],
                          pivots=[c], mask_radius=mask,
                          meta={"route": "closed-sample+floor",
                                "suite": suite})
        return K

    # --- other spectral instances: exact tau-mates -------------------------
    if op.route == "spectral":
        S, G = _spectral_mate_pair(op)
        return Kernel(grid, op.W, values=G,
                      meta={"mate": S, "route": "spectral-mate",
                            "diagonal": "band-limited"})

    # --- conformal sandwich: conjugated suite mates -------------------------
    if op.route == "sandwich":
        base = op.extras["base_op"]
        r = float(base.metric.params.get("r", 1.0))
        suite = _sphere3_suite(grid, r, float(op.extras.get("tau",
                                                            DEFAULT_TAU)))
        rho = op.extras["rho"]
        outer = np.outer(rho, rho)
        if op.kind == "paneitz":
            vals = suite["G_P"] / outer
            mate = suite["S_P"] * outer
            mask = 0.0
        else:
            vals = suite["G_L"] * outer
            mate = suite["S_L"] / outer
            mask = default_mask_radius(grid)
        return Kernel(grid, op.W, values=vals, mask_radius=mask,
                      meta={"mate": mate, "route": "conformal-conjugated",
                            "rho": rho, "suite": suite})

    # --- chart instances ----------------------------------------------------
    if op.route == "quadratic-form":
        N = grid.nnodes
        if N <= DENSE_NODE_CAP:
            S, G, certificate = _chart_dense_pair(op)
            K = Kernel(grid, op.W, values=G,
                       meta={"mate": S, "route": "dense-inverse",
                             "invertibility": certificate})
            return K
        precond = _chart_fft_preconditioner(op)
        probe = _chart_invertibility_probe(op, precond)
        if probe["ratio"] <= 1e-9:
            raise NontrivialKernel(
                f"operator has a near-null direction (smallest eigenvalue "
                f"{probe['min_eig']:.3e} vs norm {probe['max_eig']:.3e})",
                null_vector=probe["min_vector"],
                eigenvalue=probe["min_eig"])

        def col(p, op=op, precond=precond):
            e = np.zeros(op.nnodes)
            e[p] = 1.0
            return _sym_solve(op.action, e, precond)

        def ap(phi, op=op, precond=precond):
            return _sym_solve(op.action, op.W * np.asarray(phi, float),
                              precond)

        K = Kernel(grid, op.W, column_fn=col, apply_fn=ap,
                   meta={"route": "minres-columns", "invertibility": probe})
        if mode == "column":
            K.row(int(column))
        return K

    raise ValueError(f"no Green-kernel route for operator route "
                     f"{op.route!r}")


# --------------------------------------------------------------------------
# H and the two Gamma_1 kernels
# --------------------------------------------------------------------------


def _h_from_gl(gl_vals: np.ndarray, n: int) -> np.ndarray:
    if n == 3:
        return -1.0 / (256.0 * math.pi ** 2 * gl_vals)
    return gl_vals ** ((n - 4.0) / (n - 2.0)) / h_normalizing_constant(n)


def _require_positive(vals: np.ndarray, what: str) -> None:
    mn = float(vals.min())
    if mn <= 0.0:
        raise ValueError(
            f"{what} must be strictly positive for the closed-form power "
            f"(minimum entry {mn:.3e})")


def _ric2_base_norm(Ric: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """|T|^2 with indices raised by the base metric, per node."""
    return np.einsum("pik,pjl,pij,pkl->p", ginv, ginv, Ric, Ric,
                     optimize=True)


def _gamma1_analytic_chart(G_L: Kernel, metric, pivots: np.ndarray,
                           mask_radius: float, H: Kernel, n: int):
    """Per-pivot blow-up curvature route on chart grids."""
    grid = G_L.grid
    rows = np.zeros((len(pivots), grid.nnodes))
    coeff = _gamma1_coefficient(n)
    expo = 4.0 / (n - 2.0)
    for i, p in enumerate(pivots):
        gl = G_L.row(int(p))
        _require_positive(gl, "G_L")
        factor = gl ** expo
        ghat = chart_metric(grid, factor[:, None, None] * metric.g)
        bun = curvature_from_metric(ghat)
        rc2 = _ric2_base_norm(bun.Ric, metric.ginv)
        row = coeff * H.row(int(p)) * rc2
        d = pivot_distances(grid, int(p))
        row[d <= mask_radius] = 0.0
        rows[i] = row
    return rows


def _windowed_fit(x_sorted: np.ndarray, y_sorted: np.ndarray,
                  targets: np.ndarray, nderiv: int,
                  window: int = 11, degree: int = 6) -> np.ndarray:
    """Sliding local-polynomial values/derivatives on scattered 1-D samples.

    Returns an array (len(targets), nderiv + 1) with the fitted value and
    derivatives at each target.  Entirely local: accuracy away from any
    singularity of the sampled function is set by the local sample spacing,
    not by global smoothness.
    """
    m = len(x_sorted)
    window = min(window, m)
    degree = min(degree, window - 1)
    out = np.empty((len(targets), nderiv + 1))
    fact = np.array([math.factorial(k) for k in range(nderiv + 1)])
    pos = np.searchsorted(x_sorted, targets)
    for t, (xt, j) in enumerate(zip(targets, pos)):
        lo = max(0, min(j - window // 2, m - window))
        xs = x_sorted[lo:lo + window] - xt
        ys = y_sorted[lo:lo + window]
        s = max(np.abs(xs).max(), 1e-300)
        Vm = np.vander(xs / s, degree + 1, increasing=True)
        cf, *_ = np.linalg.lstsq(Vm, ys, rcond=None)
        for k in range(nderiv + 1):
            out[t, k] = cf[k] * fact[k] / s ** k if k <= degree else 0.0
    return out


def _dedup_profile(gam: np.ndarray, vals: np.ndarray, decimals: int = 9):
    """Collapse repeated abscissae (latitude rings) by averaging."""
    key = np.round(gam, decimals)
    uniq, inv = np.unique(key, return_inverse=True)
    sums = np.zeros(len(uniq))
    cnts = np.zeros(len(uniq))
    np.add.at(sums, inv, vals)
    np.add.at(cnts, inv, 1.0)
    return uniq, sums / cnts


class _ZonalProfile:
    """Scattered zonal samples -> local-polynomial profile evaluations."""

    def __init__(self, gam: np.ndarray, vals: np.ndarray,
                 window: int = 11, degree: int = 6):
        g, v = _dedup_profile(gam, vals)
        self.gam = g
        self.vals = v
        self.window = window
        self.degree = degree

    def __call__(self, theta: np.ndarray, nderiv: int = 0) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        out = _windowed_fit(self.gam, self.vals, theta, nderiv,
                            self.window, self.degree)
        return out[:, nderiv] if nderiv else out[:, 0]

    def table(self, theta: np.ndarray, nderiv: int) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return _windowed_fit(self.gam, self.vals, theta, nderiv,
                             self.window, self.degree)


def _blowup_ric2_profile(gam: np.ndarray, factor_vals: np.ndarray):
    """|Ric|^2 (round-metric contraction) of e^{2w} g_round, w zonal.

    ``factor_vals`` are samples of e^{2w} at angles ``gam`` from the pivot;
    only angles away from the pivot need be supplied, and all derivatives
    are local-polynomial fits, so the log-singularity at the pivot never
    contaminates values away from it.  In the round orthonormal frame the
    Ricci tensor of h = e^{2w} g_round has components

        R_tt = 2 - 2 w'' - 2 cot(t) w'
        R_ee = 2 - w'' - 3 cot(t) w' - (w')^2

    (pivot direction / two latitude-sphere directions); contracting with
    the round metric gives |Ric_h|^2 = R_tt^2 + 2 R_ee^2.  Near the
    antipode cot(t) w' is replaced by its smooth limit w''.  Returns a
    vectorized evaluator of the angle.
    """
    om_prof = _ZonalProfile(gam, 0.5 * np.log(factor_vals))

    def eval_at(theta):
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        tab = om_prof.table(th, 2)
        omp, ompp = tab[:, 1], tab[:, 2]
        st = np.sin(th)
        safe = st > 0.02
        cotw = np.where(safe, np.cos(th) * omp / np.where(safe, st, 1.0),
                        ompp)
        r_tt = 2.0 - 2.0 * ompp - 2.0 * cotw
        r_ee = 2.0 - ompp - 3.0 * cotw - omp ** 2
        return r_tt ** 2 + 2.0 * r_ee ** 2

    return eval_at


def _gamma1_analytic_sphere3(G_L: Kernel, op_P: DiscreteOperator,
                             pivots: np.ndarray, mask_radius: float,
                             H: Kernel):
    """Zonal blow-up curvature route on (possibly deformed) S^3.

    The blow-up factor G_L-hat(p,.)^4 ghat always collapses to a zonal
    function of the angle from the pivot: for conformal instances the two
    deformation factors cancel, leaving rho(p)^4 G_L(gamma)^4 g_round.
    The squared-Ricci norm is then corrected to the instance metric.
    """
    grid = G_L.grid
    r = 1.0
    if op_P.route == "sandwich":
        rho = op_P.extras["rho"]
        r = float(op_P.extras["base_op"].metric.params.get("r", 1.0))
    else:
        rho = np.ones(grid.nnodes)
        r = float(op_P.metric.params.get("r", 1.0))
    if abs(r - 1.0) > 1e-12:
        raise NotImplementedError(
            "zonal blow-up curvature assumes the unit sphere; fold the "
            "radius into the conformal factor")
    xyz = ambient_coords(grid)
    rows = np.zeros((len(pivots), grid.nnodes))
    table_th = table_rc2 = None
    for i, p in enumerate(pivots):
        p = int(p)
        gam = np.arccos(np.clip(xyz @ xyz[p], -1.0, 1.0))
        glrow = _raw_gl_row(G_L, p)
        _require_positive(glrow, "G_L")
        if table_rc2 is None:
            # blow-up factor relative to the round metric: the instance's
            # conformal factors cancel, G_L-hat^4 ghat = (rho(p) G_L)^4
            # g_round, and the constant rho(p)^4 drops out of the Ricci
            # tensor — one zonal profile serves every pivot
            factor = glrow ** 4 * rho ** (-4.0)
            off = gam > 0.5 * mask_radius
            prof = _blowup_ric2_profile(gam[off], factor[off])
            table_th = np.linspace(gam[off].min(), math.pi, 4096)
            table_rc2 = prof(table_th)
        outside = gam > mask_radius
        rc2 = np.zeros(grid.nnodes)
        rc2[outside] = np.interp(gam[outside], table_th, table_rc2)
        # norm in the instance metric: ghat^{-1} = rho^4 g_round^{-1}, twice
        rc2 *= rho ** 8
        rows[i] = _gamma1_coefficient(3) * H.row(p) * rc2
        rows[i][~outside] = 0.0
    return rows


def build_H_gamma(G_L: Kernel, bundle: CurvatureBundle,
                  op_P: DiscreteOperator, n: int, *,
                  pivots=None, mask_radius: float | None = None,
                  analytic: bool = True,
                  analytic_pivots=None) -> dict:
    """H = closed-form power of G_L, plus the two Gamma_1 kernels.

    Gamma1_discrete := delta - (P in the second argument of H) holds as an
    exact matrix identity; Gamma1_analytic is the masked curvature formula
    from the blown-up metric.  Returns {"H", "Gamma1_discrete",
    "Gamma1_analytic"}.
    """
    if n == 4 or n < 3:
        raise ValueError("the H/Gamma_1 construction runs in n = 3 or "
                         "n >= 5")
    grid = G_L.grid
    W = G_L.weights
    N = grid.nnodes
    if mask_radius is None:
        mask_radius = default_mask_radius(grid)

    if G_L.is_dense:
        _require_positive(G_L.values, "G_L")
        H_vals = _h_from_gl(G_L.values, n)
        H = Kernel(grid, W, values=H_vals,
                   mask_radius=0.0 if n == 3 else mask_radius,
                   meta={"from": "closed-form power of G_L"})
        # the Paneitz mate: exact inverse of the G_P this package pairs
        # with op_P, so the discrete residual algebra is exact
        GP = greens_kernel(op_P)
        S_P = GP.meta["mate"]
        if sp.issparse(S_P):
            PH = (S_P @ H_vals.T).T
        else:
            PH = H_vals @ S_P
        g1 = (np.eye(N) - PH) / W[None, :]
        Gamma1_d = Kernel(grid, W, values=g1, symmetric=False,
                          meta={"definition": "delta - P o H",
                                "paneitz_mate": S_P})
    else:
        if pivots is None:
            pivots = deterministic_pivots(N)
        pivots = np.asarray(pivots, int)
        h_rows = np.zeros((len(pivots), N))
        g1_rows = np.zeros((len(pivots), N))
        for i, p in enumerate(pivots):
            gl = G_L.row(int(p))
            _require_positive(gl, "G_L")
            h_rows[i] = _h_from_gl(gl, n)
            ph = op_P.action(h_rows[i])
            row = -ph / W
            row[int(p)] += 1.0 / W[int(p)]
            g1_rows[i] = row
        H = Kernel(grid, W, values=h_rows, pivots=pivots,
                   mask_radius=0.0 if n == 3 else mask_radius,
                   meta={"from": "closed-form power of G_L"})
        Gamma1_d = Kernel(grid, W, values=g1_rows, pivots=pivots,
                          symmetric=False,
                          meta={"definition": "delta - P o H"})

    Gamma1_a = None
    if analytic:
        if analytic_pivots is None:
            if G_L.is_dense and N <= 2000:
                apiv = np.arange(N)
            else:
                apiv = deterministic_pivots(N)
        elif isinstance(analytic_pivots, str) and analytic_pivots == "all":
            apiv = np.arange(N)
        else:
            apiv = np.asarray(analytic_pivots, int)
        if grid.kind == "sphere3":
            rows = _gamma1_analytic_sphere3(G_L, op_P, apiv, mask_radius, H)
        elif grid.kind == "torus":
            rows = _gamma1_analytic_chart(G_L, op_P.metric, apiv,
                                          mask_radius, H, n)
        else:
            raise NotImplementedError(
                f"no blow-up curvature route on grid kind {grid.kind!r}")
        if len(apiv) == N:
            Gamma1_a = Kernel(grid, W, values=rows, symmetric=False,
                              mask_radius=mask_radius,
                              meta={"mask_correction": "zero-fill",
                                    "definition": "coefficient * H * "
                                    "|Ric(blow-up)|^2"})
        else:
            Gamma1_a = Kernel(grid, W, values=rows, pivots=apiv,
                              symmetric=False, mask_radius=mask_radius,
                              meta={"mask_correction": "zero-fill",
                                    "definition": "coefficient * H * "
                                    "|Ric(blow-up)|^2"})

    return {"H": H, "Gamma1_discrete": Gamma1_d, "Gamma1_analytic": Gamma1_a}


# --------------------------------------------------------------------------
# Neumann series, spectral radius, row sums
# --------------------------------------------------------------------------


def spectral_radius(K: Kernel, *, maxiter: int = 5000, rtol: float = 1e-10,
                    details: bool = False, masked_fill: str | None = None):
    """Power-iteration spectral radius of T_K, with a row-sum certificate.

    Starts from the all-ones vector; if that vector is (numerically) in the
    kernel of T_K, restarts from a deterministic perturbation.  For
    entrywise-nonnegative kernels the row-sum bound
    max_p int |K(p, q)| dmu(q) is a rigorous upper certificate.
    """
    if not K.is_dense:
        raise ValueError("spectral radius needs a dense kernel")
    if K.mask_radius > 0.0 and masked_fill != "zero":
        raise ValueError(
            "masked kernel: declare masked_fill='zero' to treat masked "
            "entries as zero (valid when the near-diagonal mass vanishes)")
    W = K.weights
    T = K.values * W[None, :]
    scale = np.abs(T).max()
    if scale == 0.0:
        out = {"radius": 0.0, "rowsum_bound": 0.0, "iterations": 0,
               "certificate_valid": True}
        return out if details else 0.0

    rowsum = float(np.max(np.abs(K.values) @ W))
    nonneg = bool(K.values.min() >= -1e-12 * np.abs(K.values).max())

    v = np.ones(K.nnodes)
    w = T @ v
    if np.abs(w).max() <= 1e-8 * scale:
        # the ones vector lies in ker T (round-sphere row sums vanish);
        # restart from a deterministic perturbation
        v = v + 1e-6 * np.cos(np.arange(K.nnodes, dtype=float))
        w = T @ v
    ray_prev = None
    rays = []
    it = 0
    for it in range(1, maxiter + 1):
        ray = float((v @ w) / (v @ v))
        rays.append(ray)
        nrm = float(np.abs(w).max())
        if nrm == 0.0:
            ray = 0.0
            break
        v = w / nrm
        w = T @ v
        if ray_prev is not None and abs(ray - ray_prev) \
                <= rtol * max(1.0, abs(ray)):
            break
        ray_prev = ray
    else:
        tail = np.array(rays[-20:])
        raise RuntimeError(
            "power iteration did not converge within "
            f"{maxiter} iterations (Rayleigh estimates oscillate in "
            f"[{tail.min():.6g}, {tail.max():.6g}]); the dominant "
            "eigenvalue may be complex or defective")
    radius = abs(rays[-1]) if rays else 0.0
    out = {"radius": float(radius), "rowsum_bound": rowsum,
           "certificate_valid": nonneg, "iterations": it}
    return out if details else float(radius)


def neumann_green(H: Kernel, Gamma1: Kernel, tol: float = 1e-10,
                  kmax: int = 200, *, pivots=None) -> dict:
    """G_P = H + sum_k Gamma_1^{*k} * H, with convergence guarded first.

    Raises SpectralRadiusAtLeastOne when the measured spectral radius of
    T_Gamma1 is >= 1; raises when kmax terms do not reach ``tol``.  Term
    sup-norms are returned so decay ratios can be compared to the spectral
    radius; the tail bound is the geometric extrapolation of the last term.
    With ``pivots`` the series runs on that column block only (the returned
    kernel then answers ``row(p)`` for those indices, by symmetry of G_P).
    """
    if not (H.is_dense and Gamma1.is_dense):
        raise ValueError("the Neumann series needs dense kernels")
    rho = spectral_radius(Gamma1)
    if rho >= 1.0:
        raise SpectralRadiusAtLeastOne(rho)
    W = H.weights
    T = Gamma1.values * W[None, :]
    if pivots is None:
        term = H.values.copy()
    else:
        pivots = np.asarray(pivots, int)
        term = H.values[:, pivots].copy()
    total = term.copy()
    norms = [float(np.abs(term).max())]
    used = 0
    for k in range(1, kmax + 1):
        term = T @ term
        total += term
        nrm = float(np.abs(term).max())
        norms.append(nrm)
        used = k
        if nrm <= tol:
            break
    else:
        raise RuntimeError(
            f"Neumann series did not reach tol={tol:.1e} within {kmax} "
            f"terms (last term {norms[-1]:.3e}, spectral radius "
            f"{rho:.4f})")
    ratio = norms[-1] / norms[-2] if norms[-2] > 0 else 0.0
    tail = norms[-1] * ratio / (1.0 - ratio) if ratio < 1.0 else math.inf
    if pivots is None:
        G = Kernel(H.grid, W, values=total, symmetric=H.symmetric,
                   meta={"route": "neumann", "spectral_radius": rho})
    else:
        G = Kernel(H.grid, W, values=total.T, pivots=pivots,
                   symmetric=H.symmetric,
                   meta={"route": "neumann", "spectral_radius": rho,
                         "column_block": True})
    return {"G_P": G, "terms_used": used, "tail_bound": float(tail),
            "term_norms": np.array(norms), "spectral_radius": rho}


def rowsum_check(H: Kernel, Gamma1: Kernel, Q: np.ndarray, n: int) -> float:
    """max_p |int Gamma_1(p, q) dmu(q) - rhs(p)|.

    rhs = 1 + (1/2) int H(p, q) Q(q) dmu(q)        (n = 3)
    rhs = 1 - ((n-4)/2) int H(p, q) Q(q) dmu(q)    (n >= 5)

    With the discrete-residual Gamma_1 this is a matrix identity (the
    operator kills constants up to its zeroth-order term), so it must hold
    at the 1e-10 level.
    """
    if n == 4 or n < 3:
        raise ValueError("row-sum identity runs in n = 3 or n >= 5")
    W = H.weights
    Q = np.asarray(Q, dtype=float)
    coef = 0.5 if n == 3 else -(n - 4.0) / 2.0
    worst = 0.0
    for p in Gamma1.row_pivots():
        lhs = float(Gamma1.row(int(p)) @ W)
        rhs = 1.0 + coef * float(H.row(int(p)) @ (Q * W))
        worst = max(worst, abs(lhs - rhs))
    return worst


# --------------------------------------------------------------------------
# strong-form identity residual
# --------------------------------------------------------------------------


def _zonal_chain(prof: dict, cot: np.ndarray,
                 gam_s: np.ndarray, u_s: np.ndarray,
                 window: int, degree: int) -> np.ndarray:
    """Pointwise Paneitz chain for a zonal function from scattered samples.

    prof carries the zonal coefficient profiles at the sample angles
    (round: em2=1, omp=0).  Two nested local-FD Laplacians plus the
    first-order divergence terms and the zeroth-order term.
    """
    em2, omp = prof["em2"], prof["omp"]
    tab_u = _windowed_fit(gam_s, u_s, gam_s, 2, window, degree)
    lap_u = em2 * (tab_u[:, 2] + (2.0 * cot + omp) * tab_u[:, 1])
    tab_v = _windowed_fit(gam_s, lap_u, gam_s, 2, window, degree)
    bilap = em2 * (tab_v[:, 2] + (2.0 * cot + omp) * tab_v[:, 1])
    div_th = (prof["M_ttp"] * tab_u[:, 1]
              + prof["M_tt"] * (tab_u[:, 2]
                                + (3.0 * omp + 2.0 * cot) * tab_u[:, 1]))
    return bilap + div_th - 0.5 * prof["Q"] * u_s


def _identity_residual_sphere3(op_P: DiscreteOperator, G_L: Kernel,
                               pivot: int, radii) -> dict:
    """Zonal strong form of the closed-form identity, away from the pivot.

    Everything is sampled along the angle from the pivot and differentiated
    by sliding local polynomials: global band projections cannot localize
    the delta at the pivot, local stencils can.  For deformed instances the
    deformation is taken zonal about the pivot (rotation invariance of the
    instance class), and a covariance-pushforward route is reported
    alongside the direct one.
    """
    grid = G_L.grid
    xyz = ambient_coords(grid)
    gam = np.arccos(np.clip(xyz @ xyz[pivot], -1.0, 1.0))
    conformal = op_P.route == "sandwich"
    if G_L.meta.get("suite") is None:
        raise ValueError("sphere identity residual needs a suite-backed "
                         "G_L kernel")
    glrow_round = G_L.meta["suite"]["G_L_raw"][pivot]

    if conformal:
        eng = zonal_engine()
        rho_tab = op_P.metric.omega["rho"]

        def rho_at(theta):
            return eng.eval_at(rho_tab, np.asarray(theta, float))

        rho_p = float(rho_at(np.zeros(1))[0])
    else:
        rho_p = 1.0

    # zonal profiles of G_L and u about the pivot (latitude rings averaged)
    keep = (gam > 1e-9) & (gam < math.pi - 1e-9)
    gam_s, gl_s = _dedup_profile(gam[keep], glrow_round[keep])
    rho_s = rho_at(gam_s) if conformal else np.ones_like(gam_s)
    # instance kernel about the pivot: G_L-hat = rho(p) rho(gamma) G_L
    u_s = 1.0 / (rho_p * rho_s * gl_s)
    cot = np.cos(gam_s) / np.sin(gam_s)
    window, degree = 11, 6

    # direct route: strong form of the instance operator along the angle,
    # with the deformation taken zonal about the pivot (the instance class
    # is rotation invariant)
    prof = _sphere3_zonal_profiles(op_P.metric, gam_s)
    Pu = _zonal_chain(prof, cot, gam_s, u_s, window, degree)

    # curvature term: the blow-up factor collapses to (rho(p) G_L(gamma))^4
    # relative to the round metric; the norm is taken in the instance metric
    factor = (rho_p * gl_s) ** 4
    rc2_round = _blowup_ric2_profile(gam_s, factor)
    rc2 = rc2_round(gam_s) * rho_s ** 8
    resid = Pu - u_s * rc2

    report = {"radii": list(radii), "pivot": pivot, "residual": {},
              "term_scale": {}}
    for rr in radii:
        sel = gam_s > rr
        if sel.any():
            report["residual"][float(rr)] = float(np.abs(resid[sel]).max())
            report["term_scale"][float(rr)] = float(
                max(np.abs(Pu[sel]).max(), np.abs((u_s * rc2)[sel]).max()))
        else:
            report["residual"][float(rr)] = math.nan

    if conformal:
        # pushforward route: with ghat = rho^{-4} g_round the operator
        # conjugates as P_ghat(phi) = rho^7 P_round(rho phi)
        phi2 = u_s * rho_s
        prof_r = _sphere3_zonal_profiles(
            op_P.extras["base_op"].metric, gam_s)
        Pu2 = rho_s ** 7 * _zonal_chain(prof_r, cot, gam_s, phi2,
                                        window, degree)
        resid2 = Pu2 - u_s * rc2
        report["pushforward_residual"] = {}
        report["route_difference"] = {}
        for rr in radii:
            sel = gam_s > rr
            if sel.any():
                report["pushforward_residual"][float(rr)] = float(
                    np.abs(resid2[sel]).max())
                report["route_difference"][float(rr)] = float(
                    np.abs((resid - resid2)[sel]).max())
    return report


def _reduced_product_grid(mtheta: int, mx: int, period: float):
    htheta = math.pi / mtheta
    hx = period / mx
    th = htheta * (np.arange(mtheta) + 0.5)
    x = hx * np.arange(mx)
    return th, x, htheta, hx


def _reduced_product_operators(mtheta: int, mx: int, period: float):
    """Axisymmetric (theta, x) discretization of S^2 x S^1, r = 1.

    Cell-centered theta with flux-form second-order differences: the
    sin(theta) face weights vanish at both poles, which is exactly the
    smooth-function closure.  Returns the measure weights, the nodal matrix
    of the conformal Laplacian, and local derivative matrices.
    """
    th, x, hth, hx = _reduced_product_grid(mtheta, mx, period)
    st = np.sin(th)
    N = mtheta * mx
    w2 = 2.0 * math.pi * hth * hx * np.outer(st, np.ones(mx))
    W = w2.ravel()

    def lap_matrix():
        rows, cols, vals = [], [], []
        idx = np.arange(N).reshape(mtheta, mx)
        # theta fluxes at interior faces
        sface = np.sin(hth * np.arange(1, mtheta))
        for i in range(mtheta - 1):
            a, b = idx[i, :], idx[i + 1, :]
            c = 2.0 * math.pi * hx * sface[i] / hth
            rows += [a, b, a, b]
            cols += [a, b, b, a]
            vals += [np.full(mx, c), np.full(mx, c),
                     np.full(mx, -c), np.full(mx, -c)]
        # periodic x fluxes
        for j in range(mx):
            a, b = idx[:, j], idx[:, (j + 1) % mx]
            c = 2.0 * math.pi * hth * st / hx
            rows += [a, b, a, b]
            cols += [a, b, b, a]
            vals += [c, c, -c, -c]
        M = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N))
        return M

    Sgrad = lap_matrix()
    S_L = (8.0 * Sgrad + sp.diags(2.0 * W)).tocsr()
    return th, x, W, S_L, Sgrad


def _reduced_fd(F: np.ndarray, axis: int, order: int, h: float,
                periodic: bool) -> np.ndarray:
    """Second-order FD along one axis of a 2-D array (one-sided at edges)."""
    if periodic:
        if order == 1:
            return (np.roll(F, -1, axis) - np.roll(F, 1, axis)) / (2 * h)
        return (np.roll(F, -1, axis) - 2 * F + np.roll(F, 1, axis)) / h ** 2
    out = np.empty_like(F)
    sl = [slice(None)] * F.ndim

    def ax(i):
        s = sl.copy()
        s[axis] = i
        return tuple(s)

    if order == 1:
        out[ax(slice(1, -1))] = (F[ax(slice(2, None))]
                                 - F[ax(slice(0, -2))]) / (2 * h)
        out[ax(0)] = (-1.5 * F[ax(0)] + 2 * F[ax(1)] - 0.5 * F[ax(2)]) / h
        out[ax(-1)] = (1.5 * F[ax(-1)] - 2 * F[ax(-2)]
                       + 0.5 * F[ax(-3)]) / h
    else:
        out[ax(slice(1, -1))] = (F[ax(slice(2, None))] - 2 * F[ax(slice(1, -1))]
                                 + F[ax(slice(0, -2))]) / h ** 2
        out[ax(0)] = (2 * F[ax(0)] - 5 * F[ax(1)] + 4 * F[ax(2)]
                      - F[ax(3)]) / h ** 2
        out[ax(-1)] = (2 * F[ax(-1)] - 5 * F[ax(-2)] + 4 * F[ax(-3)]
                       - F[ax(-4)]) / h ** 2
    return out


def _identity_residual_product(op_P: DiscreteOperator, radii,
                               shape: tuple[int, int]) -> dict:
    """Axisymmetric local route on S^2 x S^1: G_L by sparse inverse, the
    Paneitz strong form and the blow-up curvature by 2-D finite differences.

    Spectral kernels cannot localize the pivot delta pointwise, so this
    instance evaluates the identity in the reduced (theta, x) chart where
    the discrete Green's function is a genuine sparse-operator inverse and
    every derivative is local.
    """
    n = op_P.n
    if n != 3:
        raise NotImplementedError("reduced product route is 3-dimensional")
    period = float(op_P.metric.params.get("period", 2.0 * math.pi))
    r = float(op_P.metric.params.get("r", 1.0))
    if abs(r - 1.0) > 1e-12:
        raise NotImplementedError("reduced product route assumes r = 1")
    mtheta, mx = shape
    th, x, W, S_L, _ = _reduced_product_operators(mtheta, mx, period)
    hth = math.pi / mtheta
    hx = period / mx

    piv = 0                      # first theta cell, x = 0: the pole pivot
    e = np.zeros(len(W))
    e[piv] = 1.0
    glcol = spla.spsolve(S_L.tocsc(), e)
    if glcol.min() <= 0.0:
        raise ValueError("reduced G_L lost positivity; refine the grid")

    TH = np.outer(th, np.ones(mx))
    Xg = np.outer(np.ones(mtheta), x)
    dx = np.abs(Xg - x[0])
    dx = np.minimum(dx, period - dx)
    dist = np.sqrt(TH ** 2 + dx ** 2)

    u = (1.0 / glcol).reshape(mtheta, mx)
    st = np.sin(TH)
    ct = np.cos(TH)
    cot = ct / st

    def lap(F):
        return (_reduced_fd(F, 0, 2, hth, False)
                + cot * _reduced_fd(F, 0, 1, hth, False)
                + _reduced_fd(F, 1, 2, hx, True))

    # Paneitz strong form on the product (J = 1/2, Q = -9/8):
    # P u = lap^2 u + (3/2) lap_{S^2} u - (5/2) u_xx + (9/16) u
    Pu = (lap(lap(u))
          + 1.5 * (_reduced_fd(u, 0, 2, hth, False)
                   + cot * _reduced_fd(u, 0, 1, hth, False))
          - 2.5 * _reduced_fd(u, 1, 2, hx, True)
          + 0.5625 * u)

    # blow-up |Ric|^2: ghat = e^{2 om} g_prod with om = 2 log(G_L column)
    om = 2.0 * np.log(glcol).reshape(mtheta, mx)
    om_t = _reduced_fd(om, 0, 1, hth, False)
    om_x = _reduced_fd(om, 1, 1, hx, True)
    om_tt = _reduced_fd(om, 0, 2, hth, False)
    om_xx = _reduced_fd(om, 1, 2, hx, True)
    om_tx = _reduced_fd(om_t, 1, 1, hx, True)
    hess_tt = om_tt
    hess_tx = om_tx
    hess_xx = om_xx
    hess_ff_over = st * ct * om_t          # phi-phi component / sin^2
    lap_om = om_tt + cot * om_t + om_xx
    grad2 = om_t ** 2 + om_x ** 2
    # Ric_ghat = Ric - (hess(om) - dom x dom) - (lap om + |grad om|^2) g
    com = lap_om + grad2
    rc_tt = 1.0 - (hess_tt - om_t ** 2) - com
    rc_ff_over = 1.0 - (hess_ff_over / st ** 2 - 0.0) - com
    rc_tx = -(hess_tx - om_t * om_x)
    rc_xx = -(hess_xx - om_x ** 2) - com
    rc2 = rc_tt ** 2 + rc_ff_over ** 2 + rc_xx ** 2 + 2.0 * rc_tx ** 2

    resid = Pu - u * rc2
    report = {"radii": list(radii), "shape": shape,
              "h": max(hth, hx), "residual": {}}
    for rr in radii:
        sel = dist > rr
        report["residual"][float(rr)] = float(np.abs(resid[sel]).max()) \
            if sel.any() else math.nan
    return report


def _identity_residual_chart(op_P: DiscreteOperator, G_L: Kernel,
                             pivot: int, radii) -> dict:
    """Local-FD strong form of the identity on chart grids (any n)."""
    n = op_P.n
    grid = G_L.grid
    glrow = G_L.row(int(pivot))
    _require_positive(glrow, "G_L")
    u = glrow ** ((n - 4.0) / (n - 2.0))
    Pu = op_P.apply(u)
    factor = glrow ** (4.0 / (n - 2.0))
    ghat = chart_metric(grid, factor[:, None, None] * op_P.metric.g)
    bun = curvature_from_metric(ghat)
    rc2 = _ric2_base_norm(bun.Ric, op_P.metric.ginv)
    resid = Pu + _gamma1_coefficient(n) * u * rc2
    d = pivot_distances(grid, int(pivot))
    report = {"radii": list(radii), "pivot": int(pivot), "residual": {}}
    for rr in radii:
        sel = d > rr
        report["residual"][float(rr)] = float(np.abs(resid[sel]).max()) \
            if sel.any() else math.nan
    return report


def identity_residual(op_P: DiscreteOperator, G_L: Kernel | None,
                      pivot: int | None = None, radii=None, *,
                      reduced_shape: tuple[int, int] | None = None) -> dict:
    """Strong-form residual of the closed-form identity away from the pivot.

    n = 3:   P(G_L^{-1}) - G_L^{-1} |Ric(G_L^4 g)|^2
    n >= 5:  P(G_L^{(n-4)/(n-2)})
             + ((n-4)/(n-2)^2) G_L^{(n-4)/(n-2)} |Ric(G_L^{4/(n-2)} g)|^2

    Both sides vanish off the pivot in the continuum; the report carries the
    max residual outside each radius.  Sphere instances run a zonal chain
    with sliding local-polynomial derivatives; chart instances use the FD
    strong form; S^2 x S^1 runs a dedicated axisymmetric local route (pass
    ``reduced_shape``), since band-projected kernels cannot localize the
    pivot delta.
    """
    grid = op_P.grid
    if radii is None:
        rm = default_mask_radius(grid) if grid.kind != "product_s2_torus" \
            else 0.5
        radii = [rm, 2.0 * rm]
    if grid.kind == "product_s2_torus":
        if reduced_shape is None:
            L = grid.degree
            reduced_shape = (6 * L, 6 * L)
        return _identity_residual_product(op_P, radii, reduced_shape)
    if pivot is None:
        pivot = grid.nnodes // 2
    if grid.kind == "sphere3":
        return _identity_residual_sphere3(op_P, G_L, int(pivot), radii)
    if grid.kind == "torus":
        return _identity_residual_chart(op_P, G_L, int(pivot), radii)
    raise NotImplementedError(f"no identity-residual route for grid kind "
                              f"{grid.kind!r}")


# --------------------------------------------------------------------------
# sign scans, mass-like constant, pole values
# --------------------------------------------------------------------------


def sign_and_mass(G_P: Kernel, Gamma1: Kernel | None, n: int, *,
                  pivots=None, mask_radius: float | None = None) -> dict:
    """Off-diagonal sign report; mass-like constant (n in {5, 6, 7});
    pole values (n = 3).

    The expected off-diagonal sign is positive for n >= 5 and negative for
    n = 3.  The mass-like constant integrates G_P(p, .) Gamma_1(p, .)
    outside two mask radii {r, 2r} and removes the missing near-diagonal
    mass by Richardson extrapolation with the near-diagonal growth exponent
    8 - n; the reported value is the pivot mean.
    """
    grid = G_P.grid
    W = G_P.weights
    N = grid.nnodes
    if pivots is None:
        pivots = G_P.row_pivots() if not G_P.is_dense \
            else (np.arange(N) if N <= DENSE_NODE_CAP
                  else deterministic_pivots(N))
    pivots = np.asarray(pivots, int)
    if mask_radius is None:
        mask_radius = default_mask_radius(grid)

    want = -1.0 if n == 3 else 1.0
    if G_P.is_dense:
        V = G_P.values
        offmask = ~np.eye(N, dtype=bool)
        mn = float(V[offmask].min())
        mx = float(V[offmask].max())
        violations = int(np.sum((V * want < 0.0) & offmask))
    else:
        mn, mx = math.inf, -math.inf
        violations = 0
        for p in pivots:
            row = G_P.row(int(p))
            off = np.ones(N, dtype=bool)
            off[int(p)] = False
            mn = min(mn, float(row[off].min()))
            mx = max(mx, float(row[off].max()))
            violations += int(np.sum(row[off] * want < 0.0))
    report: dict = {"sign_report": {
        "min_offdiag": mn, "max_offdiag": mx,
        "expected_sign": "negative" if n == 3 else "positive",
        "violations": int(violations),
        "pivots": len(pivots)}}

    if n in (5, 6, 7) and Gamma1 is not None:
        m = 8 - n
        vals = []
        per = {}
        for p in pivots:
            gp = G_P.row(int(p))
            g1 = Gamma1.row(int(p))
            d = pivot_distances(grid, int(p))
            i1 = float(((gp * g1) * W)[d > mask_radius].sum())
            i2 = float(((gp * g1) * W)[d > 2.0 * mask_radius].sum())
            full = i1 + (i1 - i2) / (2.0 ** m - 1.0)
            vals.append(full)
            per[int(p)] = full
        pref = 2.0 * n * (n - 2.0) * (n - 4.0) * ball_volume(n)
        report["A"] = float(pref * np.mean(vals))
        report["A_per_pivot"] = {k: float(pref * v) for k, v in per.items()}
    if n == 3:
        if G_P.is_dense:
            report["pole_values"] = np.diag(G_P.values).copy()
        else:
            report["pole_values"] = np.array(
                [G_P.row(int(p))[int(p)] for p in pivots])
    if Gamma1 is not None:
        rmin = 1.5 * mask_radius
        rmax = min(4.0 * mask_radius, 1.0)
        sl = growth_slopes(Gamma1, Gamma1.row_pivots()[:8], rmin, rmax)
        report["gamma1_growth_slope"] = sl
    return report
