import math

import numpy as np
import pytest

from qcurv.grids import sphere2_nodes, sphere3_nodes
from qcurv.sphharm import ambient_coords, geodesic_angles, sphere_basis


@pytest.fixture(scope="module")
def s2():
    return sphere_basis(sphere2_nodes(8))


@pytest.fixture(scope="module")
def s3():
    return sphere_basis(sphere3_nodes(6))


class TestOrthonormality:
    def test_s2_gram_identity(self, s2):
        B = s2.matrix()
        G = B.T @ (s2.W[:, None] * B)
        np.testing.assert_allclose(G, np.eye(s2.size), atol=1e-12)

    def test_s3_gram_identity(self, s3):
        B = s3.matrix()
        G = B.T @ (s3.W[:, None] * B)
        np.testing.assert_allclose(G, np.eye(s3.size), atol=1e-12)

    def test_s3_count(self, s3):
        L = s3.degree
        assert s3.size == (L + 1) * (L + 2) * (2 * L + 3) // 6

    def test_analysis_synthesis_roundtrip(self, s3):
        rng = np.random.default_rng(0)
        c = rng.standard_normal(s3.size)
        np.testing.assert_allclose(s3.analysis(s3.synthesis(c)), c, atol=1e-11)


class TestDerivatives:
    def test_s2_ambient_coordinate_columns(self, s2):
        # l=1 columns are ambient coordinates up to normalization
        g = s2.grid
        th, ph = g.coords["theta"], g.coords["phi"]
        j = s2.labels.index((1, 0, "c"))
        col = s2.matrix()[:, j]
        scale = math.sqrt(3.0 / (4 * math.pi))
        np.testing.assert_allclose(col, scale * np.cos(th), atol=1e-12)
        dth = s2.matrix(("theta",))[:, j]
        np.testing.assert_allclose(dth, -scale * np.sin(th), atol=1e-12)
        d2 = s2.matrix(("theta", "theta"))[:, j]
        np.testing.assert_allclose(d2, -scale * np.cos(th), atol=1e-12)

    def test_s2_laplacian_eigenrelation(self, s2):
        # Delta = d_thth + cot th d_th + (1/sin^2) d_phph must give -l(l+1)
        g = s2.grid
        th = g.coords["theta"]
        B = s2.matrix()
        lap = (s2.matrix(("theta", "theta"))
               + (np.cos(th) / np.sin(th))[:, None] * s2.matrix(("theta",))
               + (1.0 / np.sin(th) ** 2)[:, None] * s2.matrix(("phi", "phi")))
        np.testing.assert_allclose(lap, -s2.eigs[None, :] * B, atol=1e-9)

    def test_s3_laplacian_eigenrelation(self, s3):
        g = s3.grid
        th, et = g.coords["theta"], g.coords["eta"]
        B = s3.matrix()
        lap = (s3.matrix(("theta", "theta"))
               + 2 * (np.cos(th) / np.sin(th))[:, None] * s3.matrix(("theta",))
               + (1 / np.sin(th) ** 2)[:, None]
               * (s3.matrix(("eta", "eta"))
                  + (np.cos(et) / np.sin(et))[:, None] * s3.matrix(("eta",))
                  + (1 / np.sin(et) ** 2)[:, None] * s3.matrix(("phi", "phi"))))
        np.testing.assert_allclose(lap, -s3.eigs[None, :] * B, atol=5e-9)

    def test_s3_mixed_derivative_consistency(self):
        # check the mixed table against one finite-difference application on
        # a single low-degree column, where FD error is well under 2 percent
        errs = []
        for L in (8, 12):
            b = sphere_basis(sphere3_nodes(L))
            j = b.labels.index((2, 1, 1, "c"))
            dth = b.matrix(("theta",))[:, j]
            mixed = b.matrix(("eta", "theta"))[:, j]
            d_fd = b.grid.diff(dth, "eta")
            errs.append(np.abs(d_fd - mixed).max() / np.abs(mixed).max())
        assert errs[0] < 2e-2
        assert errs[0] / errs[1] > 3  # ~4th-order in the GL spacing

    def test_exact_dmat_reproduces_band_limited(self, s3):
        rng = np.random.default_rng(2)
        c = rng.standard_normal(s3.size)
        f = s3.synthesis(c)
        D = s3.exact_dmat(("theta",))
        d_true = s3.matrix(("theta",)) @ c
        np.testing.assert_allclose(D @ f, d_true, atol=1e-9)


class TestAmbient:
    def test_s3_ambient_unit_norm(self):
        g = sphere3_nodes(4)
        X = ambient_coords(g)
        np.testing.assert_allclose((X**2).sum(axis=1), 1.0, atol=1e-13)

    def test_geodesic_angle_range(self):
        g = sphere2_nodes(4)
        gam = geodesic_angles(g)
        assert gam.min() >= 0 and gam.max() <= math.pi + 1e-12
        np.testing.assert_allclose(np.diag(gam), 0, atol=1e-6)

    def test_s3_degree1_are_ambient(self, s3):
        X = ambient_coords(s3.grid)
        j = s3.labels.index((1, 0, 0, "c"))
        col = s3.matrix()[:, j]
        scale = math.sqrt(2.0) / math.pi
        np.testing.assert_allclose(col, scale * X[:, 0], atol=1e-12)
