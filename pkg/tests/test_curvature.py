"""Curvature bundle tests: catalog anchors, chart FD pipeline, zonal engine.

Oracles:
  * homogeneous anchors are exact rational values (round spheres, Berger,
    products) checked against closed forms evaluated independently here;
  * the chart pipeline is checked against a hand-derived 1-D oracle for
    conformally flat metrics e^{2 a sin(k x1)} delta (all curvature fields
    reduce to explicit single-variable expressions);
  * the zonal engine on S^3 is checked against the conformal transformation
    law: for ghat = rho^{-4} g_round with rho = 1 + eps cos(theta),
    Q_ghat = -2 rho^7 P(rho) and P(rho) is exact on low harmonics
    (P 1 = -15/16, P cos(theta) = (105/16) cos(theta)).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcurv import curvature as cv
from qcurv.grids import sphere3_nodes, torus_grid

PI = math.pi


# --------------------------------------------------------------------------
# homogeneous catalog anchors
# --------------------------------------------------------------------------


def test_round_s3_anchors_on_grid():
    grid = sphere3_nodes(8)
    met, bun = cv.homogeneous_catalog("round_sphere", grid=grid, n=3, r=1.0)
    assert np.abs(bun.R - 6.0).max() <= 1e-8
    assert np.abs(bun.J - 1.5).max() <= 1e-8
    assert np.abs(bun.A2 - 0.75).max() <= 1e-8
    assert np.abs(bun.Q - 15.0 / 8.0).max() <= 1e-8
    # A = g/2
    assert np.abs(bun.A - 0.5 * met.g).max() <= 1e-12
    assert np.abs(bun.trA - bun.J).max() <= 1e-10
    assert abs(bun.mu.sum() - 2.0 * PI ** 2) <= 1e-10
    # curvature_from_metric dispatches grid-backed homogeneous metrics
    bun2 = cv.curvature_from_metric(met)
    assert np.abs(bun2.Q - bun.Q).max() == 0.0


def test_round_sphere_scaling_and_s4():
    met4, bun4 = cv.homogeneous_catalog("round_sphere", n=4, r=1.0)
    assert abs(bun4.Q[0] - 6.0) <= 1e-12
    rep = cv.weyl_gauss_bonnet(bun4)
    assert abs(rep["q_integral"] - 16.0 * PI ** 2) <= 1e-9
    assert rep["weyl_energy"] == 0.0
    assert abs(rep["cgb_lhs"] - 8.0 * PI ** 2 * 2.0) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(r=st.floats(0.5, 2.0), n=st.integers(3, 7))
def test_round_sphere_q_scaling_law(r, n):
    _, b1 = cv.homogeneous_catalog("round_sphere", n=n, r=1.0)
    _, br = cv.homogeneous_catalog("round_sphere", n=n, r=r)
    assert br.Q[0] == pytest.approx(r ** -4 * b1.Q[0], rel=1e-12)
    assert br.R[0] == pytest.approx(r ** -2 * b1.R[0], rel=1e-12)


def test_berger_limits_and_values():
    lam = 0.8
    _, bb = cv.homogeneous_catalog("berger_sphere", lam=lam)
    assert bb.R[0] == pytest.approx(8.0 - 2.0 * lam ** 2, rel=1e-13)
    assert bb.trA[0] == pytest.approx(bb.J[0], abs=1e-12)
    # lam = 1 is the round sphere
    _, b1 = cv.homogeneous_catalog("berger_sphere", lam=1.0)
    _, br = cv.homogeneous_catalog("round_sphere", n=3, r=1.0)
    for f in ("R", "J", "A2", "sigma2", "Q"):
        assert getattr(b1, f)[0] == pytest.approx(getattr(br, f)[0], abs=1e-13)
    assert np.abs(b1.A[0] - 0.5 * np.eye(3)).max() <= 1e-13


def test_product_s2_s1_values_and_sign_report():
    met, bun = cv.homogeneous_catalog("product_s2_s1", r=1.0, degree=6)
    assert np.abs(bun.R - 2.0).max() <= 1e-13
    assert np.abs(bun.J - 0.5).max() <= 1e-13
    assert np.abs(bun.A2 - 0.75).max() <= 1e-13
    assert np.abs(bun.Q + 9.0 / 8.0).max() <= 1e-13
    assert np.abs(bun.trA - bun.J).max() <= 1e-11
    rep = bun.extras["lemma_hypotheses"]
    assert rep["sigma2"] < 0.0               # sigma_2(A) < 0
    assert rep["min_eig_2Jg_minus_A"] >= 0.0  # 2 J g >= A
    # orthonormal Schouten eigenvalues (1/2, 1/2, -1/2)
    a_orth = np.einsum("pij,pjk->pik", met.ginv, bun.A)[0]
    assert np.allclose(np.sort(np.linalg.eigvals(a_orth).real),
                       [-0.5, 0.5, 0.5], atol=1e-12)


def test_product_s2_t2_gauss_bonnet_cancels():
    # chi(S^2 x T^2) = 0: int Q dmu exactly cancels (1/4) int |W|^2 dmu
    _, bun = cv.homogeneous_catalog("product_s2_torus", r=1.3, degree=4,
                                    tshape=(4, 4))
    rep = cv.weyl_gauss_bonnet(bun)
    assert rep["weyl_energy"] > 0.0
    assert abs(rep["cgb_lhs"]) <= 1e-10 * abs(rep["weyl_energy"])


def test_point_backend_rejects_field_operations():
    met, _ = cv.homogeneous_catalog("round_sphere", n=5, r=1.0)
    with pytest.raises(ValueError, match="closed-form"):
        cv.curvature_from_metric(met)
    with pytest.raises(NotImplementedError):
        met.grid.diff(np.zeros(1), 0)


# --------------------------------------------------------------------------
# chart pipeline: flat + conformally flat with 1-D oracle
# --------------------------------------------------------------------------


def test_flat_torus_all_zero():
    grid = torus_grid(3, (10, 10, 10))
    bun = cv.curvature_from_metric(cv.flat_metric(grid))
    assert np.abs(bun.R).max() <= 1e-12
    assert np.abs(bun.A).max() <= 1e-12
    assert np.abs(bun.Q).max() <= 1e-12
    assert abs(bun.mu.sum() - (2 * PI) ** 3) <= 1e-9


def _conf_flat_oracle(x, n, a, k):
    """Exact curvature of e^{2 w} delta with w = a sin(k x): 1-D chains."""
    s, c = np.sin(k * x), np.cos(k * x)
    w = a * s
    w1 = a * k * c
    w2 = -a * k ** 2 * s
    w3 = -a * k ** 3 * c
    w4 = a * k ** 4 * s
    F = -w2 - 0.5 * (n - 2) * w1 ** 2
    F1 = -w3 - (n - 2) * w1 * w2
    F2 = -w4 - (n - 2) * (w2 ** 2 + w1 * w3)
    e2 = np.exp(-2.0 * w)
    J = e2 * F
    J2 = e2 * (F2 - 4.0 * w1 * F1 + (4.0 * w1 ** 2 - 2.0 * w2) * F)
    J1 = e2 * (F1 - 2.0 * w1 * F)
    lapJ = e2 * (J2 + (n - 2) * w1 * J1)
    a11 = -w2 + 0.5 * w1 ** 2
    ajj = -0.5 * w1 ** 2
    A2 = np.exp(-4.0 * w) * (a11 ** 2 + (n - 1) * ajj ** 2)
    Q = -lapJ - 2.0 * A2 + 0.5 * n * J ** 2
    return {"J": J, "laplJ": lapJ, "A2": A2, "Q": Q, "R": 2 * (n - 1) * J}


def _conf_flat_bundle(n, m, a, k, shape_rest=6):
    shape = (m,) + (shape_rest,) * (n - 1)
    grid = torus_grid(n, shape)
    met = cv.conformal_deform(cv.flat_metric(grid), f"{a}*sin({k}*x1)",
                              convention="e2w")
    bun = cv.curvature_from_metric(met)
    x = grid.coords["x1"]
    return bun, _conf_flat_oracle(x, n, a, k)


@pytest.mark.parametrize("n", [3, 5])
def test_chart_conformally_flat_oracle_convergence(n):
    errs = []
    for m in (16, 24):
        bun, ora = _conf_flat_bundle(n, m, a=0.15, k=1)
        err = max(np.abs(getattr(bun, f) - ora[f]).max()
                  for f in ("J", "A2", "laplJ", "Q"))
        errs.append(err)
    order = math.log(errs[0] / errs[1]) / math.log(24.0 / 16.0)
    assert order >= 3.5, (errs, order)
    assert errs[1] <= 5e-4


def test_chart_q_form_equivalences_dim3():
    bun, _ = _conf_flat_bundle(3, 16, a=0.2, k=1)
    g, ginv = bun.metric.g, bun.metric.ginv
    ric2 = np.einsum("pik,pjl,pij,pkl->p", ginv, ginv, bun.Ric, bun.Ric)
    # eq: -1/4 Delta R = -Delta J (J = R/4); three dim-3 forms
    f1 = -bun.laplJ - 2.0 * ric2 + (23.0 / 32.0) * bun.R ** 2
    f2 = -bun.laplJ - 2.0 * bun.A2 + 1.5 * bun.J ** 2
    f3 = -bun.laplJ + 4.0 * bun.sigma2 - 0.5 * bun.J ** 2
    scale = np.abs(bun.Q).max()
    assert np.abs(f1 - f2).max() <= 1e-10 * max(scale, 1.0)
    assert np.abs(f2 - f3).max() <= 1e-10 * max(scale, 1.0)
    assert np.abs(bun.Q - f2).max() <= 1e-12 * max(scale, 1.0)
    assert np.abs(bun.J - bun.R / 4.0).max() <= 1e-12


@pytest.mark.parametrize("n", [4, 5])
def test_chart_q_two_forms_dim_n(n):
    bun, _ = _conf_flat_bundle(n, 12, a=0.15, k=1, shape_rest=6)
    ginv = bun.metric.ginv
    ric2 = np.einsum("pik,pjl,pij,pkl->p", ginv, ginv, bun.Ric, bun.Ric)
    cR = (n ** 3 - 4 * n ** 2 + 16 * n - 16) / (8.0 * (n - 1) ** 2
                                                * (n - 2) ** 2)
    f1 = -bun.laplJ - (2.0 / (n - 2) ** 2) * ric2 + cR * bun.R ** 2
    scale = max(np.abs(bun.Q).max(), 1.0)
    assert np.abs(f1 - bun.Q).max() <= 1e-10 * scale


def test_dim3_pointwise_aring_identity():
    # Q - (1/3) Delta J - (1/6) J^2 = -(4/3) Delta J - 2 |Aring|^2 + (2/3) J^2
    bun, _ = _conf_flat_bundle(3, 16, a=0.2, k=2)
    ginv = bun.metric.ginv
    aring2 = np.einsum("pik,pjl,pij,pkl->p", ginv, ginv, bun.Aring, bun.Aring)
    lhs = bun.Q - bun.laplJ / 3.0 - bun.J ** 2 / 6.0
    rhs = -(4.0 / 3.0) * bun.laplJ - 2.0 * aring2 + (2.0 / 3.0) * bun.J ** 2
    assert np.abs(lhs - rhs).max() <= 1e-9


def test_chart_traces_and_sigma2():
    bun, _ = _conf_flat_bundle(3, 16, a=0.2, k=1)
    ginv = bun.metric.ginv
    assert np.abs(bun.trA - bun.J).max() <= 1e-10
    assert np.abs(np.einsum("pij,pij->p", ginv, bun.Aring)).max() <= 1e-10
    assert np.abs(np.einsum("pij,pij->p", ginv, bun.E)).max() <= 1e-10
    assert np.abs(bun.sigma2 - 0.5 * (bun.trA ** 2 - bun.A2)).max() <= 1e-12


def test_general_chart_convergence_16_32_vs_48():
    def warped(m):
        grid = torus_grid(3, (m, m, m))
        c = grid.coords
        N = grid.nnodes
        g = np.zeros((N, 3, 3))
        g[:, 0, 0] = 1.0 + 0.3 * np.sin(c["x1"]) * np.cos(c["x2"])
        g[:, 1, 1] = 1.0 + 0.3 * np.sin(c["x2"]) * np.cos(c["x3"])
        g[:, 2, 2] = 1.0 + 0.3 * np.sin(c["x3"]) * np.cos(c["x1"])
        g[:, 0, 1] = g[:, 1, 0] = 0.1 * np.sin(c["x3"])
        bun = cv.curvature_from_metric(cv.chart_metric(grid, g))
        return bun

    ref = warped(48)
    b16 = warped(16)
    b32 = warped(32)
    orders = []
    for fld in ("R", "Q"):
        r = getattr(ref, fld).reshape(48, 48, 48)[::3, ::3, ::3].ravel()
        e16 = np.abs(getattr(b16, fld) - r).max()
        e32 = np.abs(getattr(b32, fld).reshape(32, 32, 32)[::2, ::2, ::2]
                     .ravel() - r).max()
        orders.append(math.log2(e16 / e32))
    assert min(orders) >= 3.5, orders


def test_pd_failure_reports_node():
    grid = torus_grid(2, (6, 6))
    g = np.broadcast_to(np.eye(2), (grid.nnodes, 2, 2)).copy()
    g[7] = [[1.0, 2.0], [2.0, 1.0]]      # indefinite at node 7
    with pytest.raises(ValueError, match="node 7"):
        cv.chart_metric(grid, g)


def test_chart_rejects_polar_grids():
    grid = sphere3_nodes(4)
    g = cv.round_metric_components(grid)
    met = cv.MetricField(grid=grid, n=3, kind="chart", g=g,
                         ginv=np.linalg.inv(g), det=np.linalg.det(g),
                         vol=np.sqrt(np.linalg.det(g)),
                         mu=grid.weights)
    with pytest.raises(ValueError, match="periodic"):
        cv.curvature_from_metric(met)


# --------------------------------------------------------------------------
# Weyl tensor (dimension 4)
# --------------------------------------------------------------------------


def test_flat_t4_gauss_bonnet_all_zero():
    grid = torus_grid(4, (8, 8, 8, 8))
    bun = cv.curvature_from_metric(cv.flat_metric(grid))
    rep = cv.weyl_gauss_bonnet(bun)
    assert abs(rep["weyl_energy"]) <= 1e-20
    assert abs(rep["q_integral"]) <= 1e-12
    assert abs(rep["cgb_lhs"]) <= 1e-12


@pytest.mark.slow
def test_conformally_flat_t4_weyl_energy_vanishes():
    grid = torus_grid(4, (16, 16, 16, 16), fd_order=6)
    met = cv.conformal_deform(cv.flat_metric(grid),
                              "0.0003*sin(x1)*cos(x2)", convention="e2w")
    bun = cv.curvature_from_metric(met)
    rep = cv.weyl_gauss_bonnet(bun)
    assert rep["weyl_energy"] <= 1e-8
    assert abs(rep["cgb_lhs"]) <= 1e-6   # 8 pi^2 chi(T^4) = 0


def _warp4(grid):
    c = grid.coords
    N = grid.nnodes
    g = np.zeros((N, 4, 4))
    g[:, 0, 0] = 1.0 + 0.25 * np.sin(c["x2"])
    g[:, 1, 1] = 1.0 + 0.25 * np.cos(c["x3"])
    g[:, 2, 2] = 1.0 + 0.25 * np.sin(c["x4"])
    g[:, 3, 3] = 1.0 + 0.25 * np.cos(c["x1"])
    return g


@pytest.mark.slow
def test_weyl_density_conformal_invariance():
    # |W~|^2 dmu~ = |W|^2 dmu pointwise, to O(h^4)
    sups = []
    for m in (10, 15):
        grid = torus_grid(4, (m, m, m, m))
        met = cv.chart_metric(grid, _warp4(grid))
        bun = cv.curvature_from_metric(met)
        meth = cv.conformal_deform(met, "0.2*sin(x1)+0.1*cos(x4)",
                                   convention="e2w")
        bunh = cv.curvature_from_metric(meth)
        d0 = bun.weyl2 * bun.mu
        d1 = bunh.weyl2 * bunh.mu
        sups.append(np.abs(d1 - d0).max() / np.abs(d0).max())
    order = math.log(sups[0] / sups[1]) / math.log(1.5)
    assert order >= 3.0, (sups, order)


# --------------------------------------------------------------------------
# conformal deformation bookkeeping
# --------------------------------------------------------------------------


def test_conformal_identity_factor_unchanged():
    met4 = cv.flat_metric(torus_grid(4, (6, 6, 6, 6)))
    out = cv.conformal_deform(met4, "0*x1", convention="e2w")
    assert np.abs(out.g - met4.g).max() <= 1e-14
    assert np.abs(out.mu - met4.mu).max() <= 1e-14

    met5 = cv.flat_metric(torus_grid(5, (4, 4, 4, 4, 4)))
    out5 = cv.conformal_deform(met5, "1+0*x1", convention="rho-n4")
    assert np.abs(out5.g - met5.g).max() <= 1e-14
    assert np.abs(out5.mu - met5.mu).max() <= 1e-14

    gs = sphere3_nodes(6)
    mets, _ = cv.homogeneous_catalog("round_sphere", grid=gs, n=3, r=1.0)
    outs = cv.conformal_deform(mets, "1+0*theta", convention="rho-neg4")
    assert np.abs(outs.mu - mets.mu).max() <= 1e-12


def test_conformal_constant_scalings():
    grid = torus_grid(4, (6, 6, 6, 6))
    met = cv.flat_metric(grid)
    c = 0.3
    out = cv.conformal_deform(met, f"{c}+0*x1", convention="e2w")
    assert np.allclose(out.vol, np.exp(4 * c) * met.vol, rtol=1e-13)

    gs = sphere3_nodes(6)
    mets, _ = cv.homogeneous_catalog("round_sphere", grid=gs, n=3, r=1.0)
    rho_c = 1.7
    outs = cv.conformal_deform(mets, f"{rho_c}+0*theta",
                               convention="rho-neg4")
    total = outs.mu.sum()
    assert total == pytest.approx(2 * PI ** 2 * rho_c ** -6, rel=1e-12)


def test_rho_conventions_dimension_guards():
    grid = torus_grid(4, (6, 6, 6, 6))
    met = cv.flat_metric(grid)
    with pytest.raises(ValueError, match="dimension 3"):
        cv.conformal_deform(met, "1+0*x1", convention="rho-neg4")
    with pytest.raises(ValueError, match="singular in dimension 4"):
        cv.conformal_deform(met, "1+0*x1", convention="rho-n4")
    with pytest.raises(ValueError, match="positive"):
        cv.conformal_deform(cv.flat_metric(torus_grid(3, (6, 6, 6))),
                            "-1+0*x1", convention="rho-neg4")


# --------------------------------------------------------------------------
# zonal conformal engine on the round S^3
# --------------------------------------------------------------------------


def test_zonal_trivial_factor_recovers_round():
    grid = sphere3_nodes(8)
    met, _ = cv.homogeneous_catalog("round_sphere", grid=grid, n=3, r=1.0)
    mc = cv.conformal_deform(met, "1+0*theta", convention="rho-neg4")
    bc = cv.curvature_from_metric(mc)
    assert np.abs(bc.Q - 15.0 / 8.0).max() <= 1e-9
    assert np.abs(bc.R - 6.0).max() <= 1e-10
    assert np.abs(bc.A2 - 0.75).max() <= 1e-10


def test_zonal_transformation_law_oracle():
    # ghat = rho^-4 g, rho = 1 + eps cos(theta):
    # Q_ghat = -2 rho^7 (P rho) with P rho = -15/16 + (105/16) eps cos(theta)
    eps = 0.1
    grid = sphere3_nodes(12)
    met, _ = cv.homogeneous_catalog("round_sphere", grid=grid, n=3, r=1.0)
    mc = cv.conformal_deform(met, f"1+{eps}*cos(theta)",
                             convention="rho-neg4")
    bc = cv.curvature_from_metric(mc)
    th = grid.coords["theta"]
    rho = 1.0 + eps * np.cos(th)
    p_rho = -15.0 / 16.0 + (105.0 / 16.0) * eps * np.cos(th)
    q_oracle = -2.0 * rho ** 7 * p_rho
    assert np.abs(bc.Q - q_oracle).max() <= 1e-10
    # internal consistency of the hat bundle
    assert np.abs(bc.trA - bc.J).max() <= 1e-11
    assert np.abs(bc.R - 4.0 * bc.J).max() <= 1e-12
    assert np.abs(bc.sigma2 - 0.5 * (bc.J ** 2 - bc.A2)).max() <= 1e-12


def test_zonal_volume_against_quadrature():
    from scipy.integrate import quad
    eps = 0.1
    grid = sphere3_nodes(10)
    met, _ = cv.homogeneous_catalog("round_sphere", grid=grid, n=3, r=1.0)
    mc = cv.conformal_deform(met, f"1+{eps}*cos(theta)",
                             convention="rho-neg4")
    total = mc.mu.sum()
    ref, _ = quad(lambda t: (1 + eps * math.cos(t)) ** -6
                  * math.sin(t) ** 2, 0.0, math.pi)
    assert total == pytest.approx(4 * PI * ref, rel=1e-12)


def test_zonal_matches_q_scaling_under_constant_rho():
    # rho constant: ghat is round with radius rho^-2 -> Q = rho^8 * 15/8
    grid = sphere3_nodes(6)
    met, _ = cv.homogeneous_catalog("round_sphere", grid=grid, n=3, r=1.0)
    rho_c = 1.2
    mc = cv.conformal_deform(met, f"{rho_c}+0*theta", convention="rho-neg4")
    bc = cv.curvature_from_metric(mc)
    assert np.abs(bc.Q - rho_c ** 8 * 15.0 / 8.0).max() <= 1e-9


# --------------------------------------------------------------------------
# property-based: random small chart perturbations keep the identities
# --------------------------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(amp=st.floats(0.01, 0.2), k1=st.integers(1, 2), k2=st.integers(1, 2),
       phase=st.floats(0.0, 2.0 * PI))
def test_chart_bundle_invariants_random_metric(amp, k1, k2, phase):
    grid = torus_grid(3, (8, 8, 8))
    c = grid.coords
    N = grid.nnodes
    g = np.zeros((N, 3, 3))
    g[:, 0, 0] = 1.0 + amp * np.sin(k1 * c["x1"] + phase)
    g[:, 1, 1] = 1.0 + amp * np.cos(k2 * c["x2"])
    g[:, 2, 2] = 1.0 + amp * np.sin(k1 * c["x3"]) * np.cos(c["x1"])
    g[:, 1, 2] = g[:, 2, 1] = 0.3 * amp * np.sin(c["x2"])
    bun = cv.curvature_from_metric(cv.chart_metric(grid, g))
    ginv = bun.metric.ginv
    scale = max(np.abs(bun.Q).max(), 1.0)
    assert np.abs(bun.trA - bun.J).max() <= 1e-10 * scale
    assert np.abs(np.einsum("pij,pij->p", ginv, bun.Aring)).max() \
        <= 1e-10 * scale
    assert np.abs(np.einsum("pij,pij->p", ginv, bun.E)).max() \
        <= 1e-10 * scale
    # dim-3 miracle: the two Q forms stay glued
    ric2 = np.einsum("pik,pjl,pij,pkl->p", ginv, ginv, bun.Ric, bun.Ric)
    f1 = -bun.laplJ - 2.0 * ric2 + (23.0 / 32.0) * bun.R ** 2
    assert np.abs(f1 - bun.Q).max() <= 1e-10 * scale
