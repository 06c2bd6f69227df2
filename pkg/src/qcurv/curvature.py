"""Curvature bundles: chart metrics, conformal deformations, homogeneous spaces.

Three engines fill the same ``CurvatureBundle`` container:

* a chart pipeline (finite differences on torus-like grids): metric
  components -> Christoffel -> Ricci (direct contraction, so the full
  Riemann tensor is only materialized when cheap or requested) -> scalar
  invariants,
* a zonal conformal engine on the round 3-sphere: for factors that depend
  only on the polar angle, every derived field is resolved exactly in a
  1-D Gegenbauer work basis, so the curvature of e^{2 omega} g_round is
  spectrally exact,
* closed-form constants for the homogeneous catalog (round spheres, Berger
  spheres, S^2 x S^1 and S^2 x T^k products).

Conventions (dimension n >= 3):

    J = R / (2(n-1))                     (trace part of the Schouten tensor)
    A = (Ric - J g) / (n-2)              (Schouten tensor; tr A = J)
    sigma_2(A) = ((tr A)^2 - |A|^2) / 2
    Q = -Delta J - 2 |A|^2 + (n/2) J^2

so on the round S^3 of radius 1: R = 6, J = 3/2, |A|^2 = 3/4, Q = 15/8,
and on the round S^4: Q = 6.  All tensor fields are stored with lowered
indices in chart coordinates, one row per grid node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fieldexpr import evaluate as _eval_expr
from .fieldexpr import parse_expr
from .grids import Grid, point_grid, product_s2_torus_grid

__all__ = [
    "MetricField",
    "CurvatureBundle",
    "chart_metric",
    "flat_metric",
    "conformal_deform",
    "curvature_from_metric",
    "homogeneous_catalog",
    "weyl_gauss_bonnet",
    "round_metric_components",
    "round_christoffels",
    "zonal_engine",
]

_PD_TOL = 1e-12


# --------------------------------------------------------------------------
# metric containers
# --------------------------------------------------------------------------


@dataclass
class MetricField:
    """Riemannian metric sampled on (or attached to) a grid.

    kind:
      * ``chart``       -- explicit components ``g`` (N, n, n); derivatives
                           by the grid's finite differences,
      * ``conformal``   -- e^{2 omega} times a round base, omega zonal;
                           handled by the exact 1-D engine,
      * ``homogeneous`` -- closed-form catalog entry (constants).
    """

    grid: Grid
    n: int
    kind: str
    g: np.ndarray | None = None        # (N, n, n) lowered components
    ginv: np.ndarray | None = None     # (N, n, n)
    det: np.ndarray | None = None      # (N,)
    vol: np.ndarray | None = None      # (N,) sqrt(det)
    mu: np.ndarray | None = None       # (N,) quadrature weights for d(mu_g)
    base: str | None = None            # conformal/homogeneous base name
    omega: object | None = None        # conformal: zonal log-factor (callable)
    params: dict = field(default_factory=dict)

    def integrate(self, f) -> float:
        return float(self.mu @ np.asarray(f, dtype=float))


@dataclass
class CurvatureBundle:
    """Per-node curvature data of a metric field."""

    metric: MetricField
    n: int
    R: np.ndarray
    J: np.ndarray
    laplJ: np.ndarray                  # Delta_g J
    A: np.ndarray                      # (N, n, n) Schouten, lowered
    Aring: np.ndarray                  # trace-free part of A
    A2: np.ndarray                     # |A|^2_g
    trA: np.ndarray
    sigma2: np.ndarray
    Q: np.ndarray
    Ric: np.ndarray                    # (N, n, n) lowered
    E: np.ndarray                      # trace-free Ricci
    Gamma: np.ndarray | None = None    # (N, n, n, n) Christoffel [k, i, j]
    Riemann: np.ndarray | None = None  # (N, n, n, n, n) lowered R_{ijkl}
    weyl2: np.ndarray | None = None    # |W|^2_g, dimension 4 only
    mu: np.ndarray | None = None       # copy of metric.mu
    extras: dict = field(default_factory=dict)

    def integrate(self, f) -> float:
        return float(self.mu @ np.asarray(f, dtype=float))


# --------------------------------------------------------------------------
# constructors
# --------------------------------------------------------------------------


def _as_field(grid: Grid, f):
    """Evaluate an expression string / callable / array on grid nodes."""
    if isinstance(f, str):
        return _eval_expr(parse_expr(f), grid.coords_env(), grid.nnodes)
    if callable(f):
        return np.asarray(f(grid.coords_env()), dtype=float)
    arr = np.asarray(f, dtype=float)
    if arr.shape == ():
        return np.full(grid.nnodes, float(arr))
    if arr.shape != (grid.nnodes,):
        raise ValueError(f"field shape {arr.shape} != ({grid.nnodes},)")
    return arr


def chart_metric(grid: Grid, g: np.ndarray, params: dict | None = None) -> MetricField:
    """Metric from explicit chart components (N, n, n)."""
    n = grid.dim
    g = np.asarray(g, dtype=float)
    if g.shape != (grid.nnodes, n, n):
        raise ValueError(f"metric shape {g.shape} != {(grid.nnodes, n, n)}")
    g = 0.5 * (g + np.swapaxes(g, 1, 2))
    ev = np.linalg.eigvalsh(g)
    if ev.min() <= _PD_TOL * max(ev.max(), 1.0):
        worst = int(np.argmin(ev.min(axis=1)))
        raise ValueError(
            f"metric is not positive definite: smallest eigenvalue "
            f"{ev.min():.3e} at node {worst}")
    det = np.linalg.det(g)
    ginv = np.linalg.inv(g)
    vol = np.sqrt(det)
    mu = grid.weights * vol / grid.base_density
    return MetricField(grid=grid, n=n, kind="chart", g=g, ginv=ginv, det=det,
                       vol=vol, mu=mu, params=params or {})


def flat_metric(grid: Grid) -> MetricField:
    """Identity chart metric (flat tori)."""
    n = grid.dim
    eye = np.broadcast_to(np.eye(n), (grid.nnodes, n, n)).copy()
    return chart_metric(grid, eye, params={"flat": True})


def round_metric_components(grid: Grid) -> np.ndarray:
    """Chart components of the round metric on a sphere3 grid."""
    th = grid.coords["theta"]
    et = grid.coords["eta"]
    N = grid.nnodes
    g = np.zeros((N, 3, 3))
    g[:, 0, 0] = 1.0
    g[:, 1, 1] = np.sin(th) ** 2
    g[:, 2, 2] = (np.sin(th) * np.sin(et)) ** 2
    return g


def round_christoffels(grid: Grid) -> np.ndarray:
    """Christoffel symbols Gamma^k_{ij} of the round S^3 chart, (N, 3, 3, 3)."""
    th = grid.coords["theta"]
    et = grid.coords["eta"]
    N = grid.nnodes
    G = np.zeros((N, 3, 3, 3))
    st, ct = np.sin(th), np.cos(th)
    se, ce = np.sin(et), np.cos(et)
    cot_t = ct / st
    cot_e = ce / se
    G[:, 0, 1, 1] = -st * ct
    G[:, 0, 2, 2] = -st * ct * se ** 2
    G[:, 1, 0, 1] = G[:, 1, 1, 0] = cot_t
    G[:, 1, 2, 2] = -se * ce
    G[:, 2, 0, 2] = G[:, 2, 2, 0] = cot_t
    G[:, 2, 1, 2] = G[:, 2, 2, 1] = cot_e
    return G


def conformal_deform(metric: MetricField, factor, convention: str = "e2w",
                     name: str | None = None) -> MetricField:
    """Conformal deformation of a metric.

    convention:
      * ``e2w``      -- ghat = e^{2 w} g        (factor w, any dimension)
      * ``rho-neg4`` -- ghat = rho^{-4} g       (dimension-3 convention)
      * ``rho-n4``   -- ghat = rho^{4/(n-4)} g  (n >= 5 convention)
    """
    grid = metric.grid
    n = metric.n
    if convention == "e2w":
        w = _as_field(grid, factor)
        rho = None
    elif convention == "rho-neg4":
        if n != 3:
            raise ValueError("rho-neg4 convention is specific to dimension 3")
        rho = _as_field(grid, factor)
        if rho.min() <= 0:
            raise ValueError("conformal factor rho must be positive")
        w = -2.0 * np.log(rho)
    elif convention == "rho-n4":
        if n == 4:
            raise ValueError("rho-n4 convention is singular in dimension 4")
        rho = _as_field(grid, factor)
        if rho.min() <= 0:
            raise ValueError("conformal factor rho must be positive")
        w = (2.0 / (n - 4)) * np.log(rho)
    else:
        raise ValueError(f"unknown conformal convention {convention!r}")

    if metric.kind == "chart":
        scale = np.exp(2.0 * w)
        gh = metric.g * scale[:, None, None]
        out = chart_metric(grid, gh, params=dict(metric.params))
        out.params["conformal"] = {
            "convention": convention, "w": w,
            "rho": rho, "base_params": dict(metric.params),
        }
        return out

    if metric.kind == "homogeneous" and metric.base == "round_sphere3":
        if abs(float(metric.params.get("r", 1.0)) - 1.0) > 1e-15:
            raise NotImplementedError(
                "zonal conformal deformation assumes the unit round sphere; "
                "fold the radius into the factor instead")
        # zonal factor over the round S^3: exact 1-D engine
        out = MetricField(
            grid=grid, n=3, kind="conformal", base="round_sphere3",
            mu=None, params={"convention": convention, "factor": factor,
                             "name": name},
        )
        eng = zonal_engine(grid)
        wz = eng.zonal_values(grid, factor, convention)
        out.omega = wz            # dict with work-grid data
        out.mu = grid.weights * eng.eval_at(wz["e_nw"], grid.coords["theta"])
        return out

    raise ValueError(
        f"conformal deformation not supported for kind={metric.kind!r}, "
        f"base={metric.base!r}")


# --------------------------------------------------------------------------
# chart pipeline
# --------------------------------------------------------------------------


def _chart_bundle(metric: MetricField, store_riemann: bool | None,
                  store_christoffel: bool) -> CurvatureBundle:
    grid = metric.grid
    if any(ax.kind in ("polar", "open") for ax in grid.axes):
        # ghost reflection at poles is scalar-parity only; tensor components
        # (metric, Christoffel) need sign flips it does not apply
        raise ValueError(
            "chart finite differences require periodic axes; sphere-like "
            "grids use the zonal/catalog engines")
    n = metric.n
    N = grid.nnodes
    g, ginv, vol = metric.g, metric.ginv, metric.vol

    if store_riemann is None:
        store_riemann = N * n ** 4 * 8 <= 200_000_000

    # dg[p, i, a, b] = partial_i g_ab
    dg = np.empty((N, n, n, n))
    for i in range(n):
        for a in range(n):
            for b in range(a, n):
                d = grid.diff(g[:, a, b], i)
                dg[:, i, a, b] = d
                dg[:, i, b, a] = d

    # Gamma^k_{ij} = 1/2 g^{kl} (d_i g_{lj} + d_j g_{il} - d_l g_{ij});
    # arrange T[p, l, i, j] = dg[p,i,l,j] + dg[p,j,i,l] - dg[p,l,i,j]
    half_br = (np.swapaxes(dg, 1, 2) + np.transpose(dg, (0, 3, 2, 1)) - dg)
    Gamma = 0.5 * np.einsum("pkl,plij->pkij", ginv, half_br)
    del half_br

    # Ricci directly: R_jk = d_i Gamma^i_jk - d_j Gamma^i_ik + ...
    Ric = np.zeros((N, n, n))
    trG = np.einsum("piik->pk", Gamma)         # Gamma^i_{ik}
    for j in range(n):
        for k in range(j, n):
            t1 = np.zeros(N)
            for i in range(n):
                t1 += grid.diff(Gamma[:, i, j, k], i)
            t2 = grid.diff(trG[:, k], j)
            Ric[:, j, k] = t1 - t2
            Ric[:, k, j] = Ric[:, j, k]
    Ric += np.einsum("pm,pmjk->pjk", trG, Gamma)
    Ric -= np.einsum("pimk,pmji->pjk", Gamma, Gamma)
    Ric = 0.5 * (Ric + np.swapaxes(Ric, 1, 2))

    R = np.einsum("pjk,pjk->p", ginv, Ric)
    J = R / (2.0 * (n - 1))
    A = (Ric - J[:, None, None] * g) / (n - 2)
    Araised = np.einsum("pik,pjl,pkl->pij", ginv, ginv, A)
    A2 = np.einsum("pij,pij->p", Araised, A)
    trA = np.einsum("pij,pij->p", ginv, A)
    sigma2 = 0.5 * (trA ** 2 - A2)
    E = Ric - (R / n)[:, None, None] * g
    Aring = A - (trA / n)[:, None, None] * g

    # Delta_g J in divergence form
    dJ = np.stack([grid.diff(J, i) for i in range(n)], axis=1)
    flux = np.einsum("pij,pj->pi", ginv, dJ) * vol[:, None]
    laplJ = np.zeros(N)
    for i in range(n):
        laplJ += grid.diff(flux[:, i], i)
    laplJ /= vol

    Q = -laplJ - 2.0 * A2 + 0.5 * n * J ** 2

    Riemann = None
    weyl2 = None
    if store_riemann or n == 4:
        # R^l_{kij} = d_i G^l_{jk} - d_j G^l_{ik} + G^l_{im} G^m_{jk} - ...
        dG = np.empty((N, n, n, n, n))   # dG[p, i, l, j, k] = d_i Gamma^l_jk
        for i in range(n):
            for l in range(n):
                for j in range(n):
                    for k in range(j, n):
                        d = grid.diff(Gamma[:, l, j, k], i)
                        dG[:, i, l, j, k] = d
                        dG[:, i, l, k, j] = d
        GG = np.einsum("plim,pmjk->plkij", Gamma, Gamma, optimize=True)
        Rup = (np.transpose(dG, (0, 2, 4, 1, 3))
               - np.transpose(dG, (0, 2, 4, 3, 1))
               + GG - np.swapaxes(GG, 3, 4))
        del dG, GG
        Riemann = np.einsum("plm,pmkij->plkij", g, Rup)
        del Rup
        if n == 4:
            # Weyl = Riem - g o A (Kulkarni-Nomizu product)
            gA = (np.einsum("pik,pjl->pijkl", g, A)
                  - np.einsum("pil,pjk->pijkl", g, A)
                  + np.einsum("pjl,pik->pijkl", g, A)
                  - np.einsum("pjk,pil->pijkl", g, A))
            Wt = Riemann - gA
            del gA
            Wu = np.einsum("pia,pjb,pkc,pld,pabcd->pijkl",
                           ginv, ginv, ginv, ginv, Wt, optimize=True)
            weyl2 = np.einsum("pijkl,pijkl->p", Wu, Wt)
            del Wu, Wt
        if not store_riemann:
            Riemann = None

    return CurvatureBundle(
        metric=metric, n=n, R=R, J=J, laplJ=laplJ, A=A, Aring=Aring, A2=A2,
        trA=trA, sigma2=sigma2, Q=Q, Ric=Ric, E=E,
        Gamma=Gamma if store_christoffel else None,
        Riemann=Riemann, weyl2=weyl2, mu=metric.mu,
        extras={"engine": "chart"})


# --------------------------------------------------------------------------
# zonal conformal engine on round S^3
# --------------------------------------------------------------------------


class _ZonalEngine:
    """Exact calculus for zonal (theta-only) fields on the round S^3.

    Fields are represented by values on a 1-D Gauss-Chebyshev work grid
    (weight sin^2 theta) fine enough that every intermediate product in the
    conformal-curvature formulas is resolved exactly; derivatives go through
    the orthonormal Gegenbauer radial basis Phi_{k,0}.
    """

    def __init__(self, work_degree: int = 96):
        from .sphharm import _gegenbauer_tables

        D = int(work_degree)
        m = D + 1
        h = math.pi / (m + 1)
        th = h * np.arange(1, m + 1)
        w = h * np.sin(th) ** 2 * 4.0 * math.pi   # zonal S^3 measure
        Phi, Phid, Phidd = _gegenbauer_tables(D, th)
        # zonal columns: Phi[k, 0] rows, orthonormal against (4 pi)^-1 w?
        # _gegenbauer_tables normalizes int Phi^2 sin^2 = 1, and the zonal
        # harmonic is Phi_k0(theta) * Y_00(S^2 part) with Y_00 = 1/sqrt(4pi).
        B = Phi[:, 0, :].T / math.sqrt(4.0 * math.pi)     # (m, D+1)
        Bd = Phid[:, 0, :].T / math.sqrt(4.0 * math.pi)
        Bdd = Phidd[:, 0, :].T / math.sqrt(4.0 * math.pi)
        self.degree = D
        self.theta = th
        self.w = w
        self.B, self.Bd, self.Bdd = B, Bd, Bdd
        self.eigs = np.array([k * (k + 2) for k in range(D + 1)], dtype=float)
        self._interp_cache: dict = {}

    # -- representation ----------------------------------------------------

    def analysis(self, vals: np.ndarray) -> np.ndarray:
        c = self.B.T @ (self.w * vals)
        # clip the coefficient noise floor: repeated second derivatives
        # amplify mode k by k^2, so stray 1e-16 tail content would otherwise
        # surface at ~1e-8 after two chained Laplacians
        top = np.abs(c).max()
        if top > 0.0:
            c[np.abs(c) < 1e-14 * top] = 0.0
        return c

    def synth(self, c: np.ndarray, deriv: int = 0) -> np.ndarray:
        return (self.B, self.Bd, self.Bdd)[deriv] @ c

    def dtheta(self, vals: np.ndarray, order: int = 1) -> np.ndarray:
        return self.synth(self.analysis(vals), order)

    def tables_at(self, theta: np.ndarray):
        from .sphharm import _gegenbauer_tables
        key = (round(float(theta[0]), 14), len(theta),
               round(float(theta[-1]), 14))
        if key not in self._interp_cache:
            Phi, Phid, Phidd = _gegenbauer_tables(self.degree, theta)
            s = math.sqrt(4.0 * math.pi)
            self._interp_cache[key] = (Phi[:, 0, :].T / s, Phid[:, 0, :].T / s,
                                       Phidd[:, 0, :].T / s)
        return self._interp_cache[key]

    def eval_at(self, vals: np.ndarray, theta: np.ndarray,
                deriv: int = 0) -> np.ndarray:
        c = self.analysis(vals)
        return self.tables_at(theta)[deriv] @ c

    # -- conformal data ----------------------------------------------------

    def zonal_values(self, grid: Grid, factor, convention: str) -> dict:
        """Work-grid samples of omega and derived conformal fields (n = 3)."""
        env = {"theta": self.theta}
        if isinstance(factor, str):
            fv = _eval_expr(parse_expr(factor), env, len(self.theta))
        elif callable(factor):
            fv = np.asarray(factor(env), dtype=float)
        else:
            raise ValueError("zonal factor must be an expression or callable "
                             "of theta")
        fv = np.broadcast_to(fv, self.theta.shape).astype(float)
        if convention == "e2w":
            om = fv.copy()
            rho = np.exp(-0.5 * fv)        # rho with ghat = rho^-4 g
        elif convention in ("rho-neg4", "rho-n4"):
            # on S^3 both rho conventions give ghat = rho^-4 g
            if fv.min() <= 0:
                raise ValueError("rho must be positive")
            om = -2.0 * np.log(fv)
            rho = fv.copy()
        else:
            raise ValueError(f"unsupported zonal convention {convention!r}")

        th = self.theta
        cot = np.cos(th) / np.sin(th)
        omp = self.dtheta(om, 1)
        ompp = self.dtheta(om, 2)
        e2w = np.exp(2.0 * om)
        e_nw = np.exp(3.0 * om)            # d(mu_hat) density, n = 3
        grad2 = omp ** 2                   # |nabla omega|^2 (round)
        lap_om = ompp + 2.0 * cot * omp    # Delta_round of a zonal field

        # J-hat = e^{-2w} (J0 - Delta w - (n-2)/2 |nabla w|^2), J0 = 3/2
        Jh = np.exp(-2.0 * om) * (1.5 - lap_om - 0.5 * grad2)
        # Delta_ghat J-hat = e^{-2w}(Delta Jh + (n-2)<nabla w, nabla Jh>)
        Jhp = self.dtheta(Jh, 1)
        Jhpp = self.dtheta(Jh, 2)
        lap_Jh = np.exp(-2.0 * om) * (Jhpp + 2.0 * cot * Jhp + omp * Jhp)

        # Schouten-hat (lowered, diagonal in the chart):
        #   A-hat = 1/2 g - hess(w) + dw x dw - 1/2 |nabla w|^2 g
        st, ct = np.sin(th), np.cos(th)
        h_tt = ompp                        # hess components (lowered, round)
        h_ee = st * ct * omp               # eta-eta / sin^2(eta) pattern
        a_tt = 0.5 - h_tt + omp ** 2 - 0.5 * grad2
        a_ee_over = (0.5 - 0.5 * grad2) * st ** 2 - h_ee   # / sin^2 eta etc.
        # |A-hat|^2 in ghat: e^{-4w} * raised-with-g norm
        A2h = np.exp(-4.0 * om) * (a_tt ** 2 + 2.0 * (a_ee_over / st ** 2) ** 2)
        trAh = np.exp(-2.0 * om) * (a_tt + 2.0 * a_ee_over / st ** 2)

        Qh = -lap_Jh - 2.0 * A2h + 1.5 * Jh ** 2
        Rh = 4.0 * Jh
        sigma2h = 0.5 * (Jh ** 2 - A2h)

        return dict(om=om, rho=rho, omp=omp, ompp=ompp, e2w=e2w, e_nw=e_nw,
                    J=Jh, laplJ=lap_Jh, A2=A2h, trA=trAh, Q=Qh, R=Rh,
                    sigma2=sigma2h, a_tt=a_tt, a_ee_over=a_ee_over)


_ZONAL_CACHE: dict = {}


def zonal_engine(grid: Grid | None = None, work_degree: int = 96) -> _ZonalEngine:
    key = work_degree
    if key not in _ZONAL_CACHE:
        _ZONAL_CACHE[key] = _ZonalEngine(work_degree)
    return _ZONAL_CACHE[key]


def _conformal_zonal_bundle(metric: MetricField) -> CurvatureBundle:
    grid = metric.grid
    eng = zonal_engine(grid)
    z = metric.omega
    th = grid.coords["theta"]
    et = grid.coords["eta"]
    N = grid.nnodes

    def at(fld, deriv=0):
        return eng.eval_at(z[fld], th, deriv)

    R = at("R")
    J = at("J")
    laplJ = at("laplJ")
    A2 = at("A2")
    trA = at("trA")
    Q = at("Q")
    sigma2 = at("sigma2")
    om = at("om")
    e2w = np.exp(2.0 * om)

    se = np.sin(et)
    a_tt = at("a_tt")
    a_ee = at("a_ee_over")
    A = np.zeros((N, 3, 3))
    A[:, 0, 0] = a_tt
    A[:, 1, 1] = a_ee
    A[:, 2, 2] = a_ee * se ** 2
    g = round_metric_components(grid) * e2w[:, None, None]
    Ric = A + J[:, None, None] * g          # n = 3: Ric = A + J ghat
    E = Ric - (R / 3.0)[:, None, None] * g
    Aring = A - (trA / 3.0)[:, None, None] * g

    if metric.mu is None:
        metric.mu = grid.weights * at("e_nw")

    return CurvatureBundle(
        metric=metric, n=3, R=R, J=J, laplJ=laplJ, A=A, Aring=Aring, A2=A2,
        trA=trA, sigma2=sigma2, Q=Q, Ric=Ric, E=E, Gamma=None, Riemann=None,
        weyl2=None, mu=metric.mu,
        extras={"engine": "zonal-conformal", "omega_work": z})


# --------------------------------------------------------------------------
# homogeneous catalog
# --------------------------------------------------------------------------


def _constant_bundle(metric: MetricField, *, R, J, A2, Q, sigma2,
                     A_diag=None, extras=None) -> CurvatureBundle:
    N = metric.grid.nnodes
    n = metric.n
    full = lambda v: np.full(N, float(v))  # noqa: E731
    A = np.zeros((N, n, n))
    Ric = np.zeros((N, n, n))
    g = metric.g
    if A_diag is not None and g is not None:
        for i in range(n):
            A[:, i, i] = A_diag[i] * g[:, i, i] if np.ndim(A_diag[i]) == 0 \
                else A_diag[i]
    if g is not None:
        Ric = (n - 2) * A + float(J) * g
    trA = full(J)
    E = Ric - (float(R) / n) * g if g is not None else np.zeros((N, n, n))
    Aring = A - (float(J) / n) * g if g is not None else A
    return CurvatureBundle(
        metric=metric, n=n, R=full(R), J=full(J), laplJ=full(0.0), A=A,
        Aring=Aring, A2=full(A2), trA=trA, sigma2=full(sigma2), Q=full(Q),
        Ric=Ric, E=E, mu=metric.mu, extras=extras or {"engine": "catalog"})


def homogeneous_catalog(name: str, grid: Grid | None = None, **params):
    """Closed-form catalog instances: (MetricField, CurvatureBundle).

    names: ``round_sphere`` (n, r, optionally a sphere3 grid),
    ``berger_sphere`` (lam), ``product_s2_s1`` (r, degree, nz),
    ``product_s2_torus`` (r, degree, tshape).
    """
    if name == "round_sphere":
        n = int(params.get("n", 3))
        r = float(params.get("r", 1.0))
        Jv = n / (2.0 * r ** 2)
        Rv = n * (n - 1) / r ** 2
        A2v = n / (4.0 * r ** 4)
        s2v = 0.5 * (Jv ** 2 - A2v)
        Qv = -2.0 * A2v + 0.5 * n * Jv ** 2
        if n == 3 and grid is not None:
            if grid.kind != "sphere3":
                raise ValueError("round_sphere n=3 wants a sphere3 grid")
            met = MetricField(grid=grid, n=3, kind="homogeneous",
                              base="round_sphere3", mu=grid.weights * r ** 3,
                              params={"r": r})
            met.g = round_metric_components(grid) * r ** 2
            met.ginv = np.linalg.inv(met.g)
            met.det = np.linalg.det(met.g)
            met.vol = np.sqrt(met.det)
            bun = _constant_bundle(
                met, R=Rv, J=Jv, A2=A2v, Q=Qv, sigma2=s2v,
                A_diag=[1.0 / (2 * r ** 2)] * 3)
            return met, bun
        vol = _sphere_volume(n) * r ** n
        met = MetricField(grid=point_grid(vol, n), n=n, kind="homogeneous",
                          base="round_sphere", mu=np.array([vol]),
                          params={"r": r, "n": n})
        met.g = np.eye(n)[None] * r ** 2
        met.ginv = np.eye(n)[None] / r ** 2
        met.det = np.full(1, r ** (2 * n))
        met.vol = np.sqrt(met.det)
        bun = _constant_bundle(met, R=Rv, J=Jv, A2=A2v, Q=Qv, sigma2=s2v,
                               A_diag=[1.0 / (2 * r ** 2)] * n)
        if n == 4:
            bun.weyl2 = np.zeros(1)        # round spheres are conformally flat
        return met, bun

    if name == "berger_sphere":
        lam = float(params.get("lam", 0.8))
        # Ricci eigenvalues (2 lam^2, 4 - 2 lam^2, 4 - 2 lam^2)
        ric = np.array([2 * lam ** 2, 4 - 2 * lam ** 2, 4 - 2 * lam ** 2])
        Rv = float(ric.sum())
        Jv = Rv / 4.0
        a_eig = ric - Jv
        A2v = float((a_eig ** 2).sum())
        s2v = 0.5 * (Jv ** 2 - A2v)
        Qv = -2.0 * A2v + 1.5 * Jv ** 2
        vol = lam * 2.0 * math.pi ** 2
        met = MetricField(grid=point_grid(vol, 3), n=3, kind="homogeneous",
                          base="berger_sphere", mu=np.array([vol]),
                          params={"lam": lam})
        met.g = np.diag([lam ** 2, 1.0, 1.0])[None]
        met.ginv = np.linalg.inv(met.g)
        met.det = np.linalg.det(met.g)
        met.vol = np.sqrt(met.det)
        bun = _constant_bundle(met, R=Rv, J=Jv, A2=A2v, Q=Qv, sigma2=s2v,
                               A_diag=list(a_eig))
        return met, bun

    if name in ("product_s2_s1", "product_s2_torus"):
        r = float(params.get("r", 1.0))
        degree = int(params.get("degree", 8))
        if name == "product_s2_s1":
            tshape = (int(params.get("nz", 2 * degree + 2)),)
        else:
            tshape = tuple(params.get("tshape", (8, 8, 8)))
        period = float(params.get("period", 2.0 * math.pi))
        g = product_s2_torus_grid(degree, tshape, period=period)
        n = 2 + len(tshape)
        N = g.nnodes
        th = g.coords["theta"]
        gm = np.zeros((N, n, n))
        gm[:, 0, 0] = r ** 2
        gm[:, 1, 1] = (r * np.sin(th)) ** 2
        for i in range(len(tshape)):
            gm[:, 2 + i, 2 + i] = 1.0
        met = MetricField(grid=g, n=n, kind="homogeneous", base=name,
                          params={"r": r, "degree": degree, "tshape": tshape,
                                  "period": period})
        met.g = gm
        met.ginv = np.linalg.inv(gm)
        met.det = np.linalg.det(gm)
        met.vol = np.sqrt(met.det)
        met.mu = g.weights * (r ** 2)
        # curvature: Ric = diag((1/r^2) g_S2, 0); R = 2/r^2
        Rv = 2.0 / r ** 2
        Jv = Rv / (2.0 * (n - 1))
        A2v, s2v, Qv, A_diag = _product_s2_flat_constants(n, r)
        bun = _constant_bundle(met, R=Rv, J=Jv, A2=A2v, Q=Qv, sigma2=s2v)
        A = np.zeros((N, n, n))
        c_s2 = A_diag[0]
        c_fl = A_diag[1]
        A[:, 0, 0] = c_s2 * gm[:, 0, 0]
        A[:, 1, 1] = c_s2 * gm[:, 1, 1]
        for i in range(len(tshape)):
            A[:, 2 + i, 2 + i] = c_fl
        bun.A = A
        bun.Ric = (n - 2) * A + Jv * gm
        bun.trA = np.einsum("pij,pij->p", met.ginv, A)
        bun.Aring = A - (bun.trA / n)[:, None, None] * gm
        bun.E = bun.Ric - (Rv / n) * gm
        if n == 4:
            bun.weyl2 = np.full(N, (4.0 / 3.0) / r ** 4)
        # sign report for the positivity-lemma hypotheses:
        # sigma_2(A) < 0 and 2 J g - A >= 0 (orthonormal A-eigenvalues
        # c_s2, c_s2, c_fl, ...)
        bun.extras["lemma_hypotheses"] = {
            "sigma2": s2v,
            "min_eig_2Jg_minus_A": 2.0 * Jv - max(c_s2, c_fl),
        }
        return met, bun

    raise ValueError(f"unknown homogeneous catalog entry {name!r}")


def _product_s2_flat_constants(n: int, r: float):
    """Schouten data for S^2(r) x T^{n-2}."""
    Rv = 2.0 / r ** 2
    Jv = Rv / (2.0 * (n - 1))
    # A = (Ric - J g)/(n-2): S2-block coefficient (1/r^2 - J)/(n-2) * g_S2,
    # flat block -J/(n-2) * delta
    c_s2 = (1.0 / r ** 2 - Jv) / (n - 2)
    c_fl = -Jv / (n - 2)
    A2v = 2.0 * c_s2 ** 2 + (n - 2) * c_fl ** 2
    s2v = 0.5 * (Jv ** 2 - A2v)
    Qv = -2.0 * A2v + 0.5 * n * Jv ** 2
    return A2v, s2v, Qv, (c_s2, c_fl)


def _sphere_volume(n: int) -> float:
    """Volume of the unit n-sphere S^n."""
    return 2.0 * math.pi ** ((n + 1) / 2.0) / math.gamma((n + 1) / 2.0)


# --------------------------------------------------------------------------
# dispatch + integral identities
# --------------------------------------------------------------------------


def curvature_from_metric(metric: MetricField, *, store_riemann: bool | None = None,
                          store_christoffel: bool = False) -> CurvatureBundle:
    if metric.kind == "chart":
        return _chart_bundle(metric, store_riemann, store_christoffel)
    if metric.kind == "conformal" and metric.base == "round_sphere3":
        return _conformal_zonal_bundle(metric)
    if metric.kind == "homogeneous":
        if metric.grid.kind == "point":
            raise ValueError(
                "homogeneous-analytic backend carries no fields; use "
                "homogeneous_catalog for its closed-form bundle")
        # grid-backed homogeneous metric: rebuild the catalog bundle
        if metric.base == "round_sphere3":
            return homogeneous_catalog("round_sphere", grid=metric.grid,
                                       n=3, **metric.params)[1]
        if metric.base in ("product_s2_s1", "product_s2_torus"):
            return homogeneous_catalog(metric.base, **metric.params)[1]
        raise ValueError(f"no rebuild rule for catalog base {metric.base!r}")
    raise ValueError(f"no curvature engine for metric kind {metric.kind!r}")


def weyl_gauss_bonnet(bundle: CurvatureBundle) -> dict:
    """4-D Gauss-Bonnet data: int Q dmu + (1/4) int |W|^2 dmu = 8 pi^2 chi."""
    if bundle.n != 4:
        raise ValueError("Weyl term: dimension 4 only (not computed otherwise)")
    q_integral = bundle.integrate(bundle.Q)
    if bundle.weyl2 is None:
        raise ValueError("bundle has no Weyl data")
    weyl_energy = bundle.integrate(bundle.weyl2)
    return {"weyl_energy": weyl_energy, "q_integral": q_integral,
            "cgb_lhs": q_integral + 0.25 * weyl_energy}
