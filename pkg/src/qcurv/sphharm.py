"""Real orthonormal harmonic bases on S^2 and S^3 with exact derivatives.

Basis functions are evaluated from stable normalized recurrences; first
derivatives come from closed-form ladder relations and second derivatives
from the defining ODEs, so every returned derivative is exact to rounding
(no finite differencing).  The basis powers:

* spectral analysis/synthesis (quadrature-exact at the grid's degree),
* exact dense differentiation matrices  D = B' (B^T W),
* the hybrid completion used for operator assembly (exact on the resolved
  band, finite differences on its complement).

S^2 columns are labeled (l, m, kind), eigenvalue l(l+1); S^3 columns are
labeled (k, l, m, kind), eigenvalue k(k+2), via the factorization
Xi = Phi_kl(theta) Y_lm(eta, phi) with
Phi_kl = N sin^l(theta) C^(l+1)_{k-l}(cos theta).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .grids import Grid

# derivative keys: tuples of axis names, canonically sorted
FIRST = lambda a: (a,)  # noqa: E731


def _legendre_tables(L: int, theta: np.ndarray):
    """Normalized associated Legendre P(l, m) with d/dtheta and d2/dtheta2.

    Normalization: integral over (0, pi) of P_lm^2 sin(theta) = 1.
    Returns three arrays of shape (L+1, L+1, len(theta)) indexed [l, m].
    """
    x = np.cos(theta)
    s = np.sin(theta)
    nt = len(theta)
    P = np.zeros((L + 1, L + 1, nt))
    P[0, 0] = 1.0 / math.sqrt(2.0)
    for m in range(1, L + 1):
        P[m, m] = math.sqrt((2 * m + 1) / (2 * m)) * s * P[m - 1, m - 1]
    for m in range(L + 1):
        if m + 1 <= L:
            P[m + 1, m] = math.sqrt(2 * m + 3) * x * P[m, m]
        for l in range(m + 2, L + 1):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            P[l, m] = a * (x * P[l - 1, m] - b * P[l - 2, m])

    Pd = np.zeros_like(P)
    for m in range(L + 1):
        for l in range(m, L + 1):
            if l == 0:
                continue
            c = math.sqrt((2 * l + 1) / (2 * l - 1) * (l * l - m * m))
            low = P[l - 1, m] if l - 1 >= 0 else 0.0
            Pd[l, m] = (l * x * P[l, m] - c * low) / s

    Pdd = np.zeros_like(P)
    cot = x / s
    for m in range(L + 1):
        for l in range(m, L + 1):
            Pdd[l, m] = -cot * Pd[l, m] - (l * (l + 1) - m * m / s**2) * P[l, m]
    return P, Pd, Pdd


def _gegenbauer_rows(lam: float, nmax: int, x: np.ndarray) -> np.ndarray:
    """C^(lam)_n(x) for n = 0..nmax, shape (nmax+1, len(x))."""
    out = np.empty((nmax + 1, len(x)))
    out[0] = 1.0
    if nmax >= 1:
        out[1] = 2.0 * lam * x
    for n in range(2, nmax + 1):
        out[n] = (2 * (n + lam - 1) * x * out[n - 1]
                  - (n + 2 * lam - 2) * out[n - 2]) / n
    return out


def _gegenbauer_tables(L: int, theta: np.ndarray):
    """Phi(k, l) radial factors on S^3 with d/dtheta and d2/dtheta2.

    Normalization: integral over (0, pi) of Phi_kl^2 sin^2(theta) = 1.
    Returns arrays of shape (L+1, L+1, len(theta)) indexed [k, l] (l <= k).
    """
    x = np.cos(theta)
    s = np.sin(theta)
    nt = len(theta)
    Phi = np.zeros((L + 1, L + 1, nt))
    Phid = np.zeros_like(Phi)
    Phidd = np.zeros_like(Phi)
    cot = x / s
    for l in range(L + 1):
        lam = l + 1.0
        nmax = L - l
        C = _gegenbauer_rows(lam, nmax, x)
        Cnext = _gegenbauer_rows(lam + 1.0, max(nmax - 1, 0), x)
        sl = s**l
        for n in range(nmax + 1):
            k = l + n
            logh = (math.log(math.pi) + (1 - 2 * lam) * math.log(2.0)
                    + gammaln(n + 2 * lam) - gammaln(n + 1)
                    - math.log(n + lam) - 2 * gammaln(lam))
            N = math.exp(-0.5 * logh)
            Cp = 2.0 * lam * Cnext[n - 1] if n >= 1 else np.zeros(nt)
            f = N * sl * C[n]
            if l > 0:
                fd = N * (l * s ** (l - 1) * x * C[n] - s ** (l + 1) * Cp)
            else:
                fd = -N * s * Cp
            Phi[k, l] = f
            Phid[k, l] = fd
            Phidd[k, l] = -2 * cot * fd - (k * (k + 2) - l * (l + 1) / s**2) * f
    return Phi, Phid, Phidd


def _trig_tables(L: int, phi: np.ndarray):
    """cos(m phi), sin(m phi) and their phi-derivatives up to 2nd order."""
    mvals = np.arange(L + 1)
    C = np.cos(np.outer(mvals, phi))
    S = np.sin(np.outer(mvals, phi))
    return C, S


class SphereBasis:
    """Orthonormal harmonic basis attached to a sphere grid."""

    def __init__(self, grid: Grid, degree: int | None = None):
        if grid.kind not in ("sphere2", "sphere3"):
            raise ValueError(f"no harmonic basis for grid kind {grid.kind!r}")
        self.grid = grid
        self.degree = grid.degree if degree is None else int(degree)
        self.W = grid.weights
        self._cache: dict = {}
        if grid.kind == "sphere2":
            self._build_s2()
        else:
            self._build_s3()
        if self.degree == grid.degree or grid.spectral is None:
            grid.spectral = self

    # ---------------- construction ----------------

    def _build_s2(self):
        L = self.degree
        g = self.grid
        theta = g.axes[0].nodes
        phi = g.axes[1].nodes
        P, Pd, Pdd = _legendre_tables(L, theta)
        C, S = _trig_tables(L, phi)
        labels = []
        eigs = []
        cols_factors = []  # (l, m, kind) -> theta-factor row index + phi row
        for l in range(L + 1):
            for m in range(l + 1):
                kinds = ("c",) if m == 0 else ("c", "s")
                for kind in kinds:
                    labels.append((l, m, kind))
                    eigs.append(l * (l + 1))
                    cols_factors.append((l, m, kind))
        self.labels = labels
        self.eigs = np.array(eigs, dtype=float)
        self.size = len(labels)
        self._s2 = dict(P=P, Pd=Pd, Pdd=Pdd, C=C, S=S,
                        theta=theta, phi=phi, factors=cols_factors)

    def _build_s3(self):
        L = self.degree
        g = self.grid
        theta = g.axes[0].nodes
        eta = g.axes[1].nodes
        phi = g.axes[2].nodes
        Phi, Phid, Phidd = _gegenbauer_tables(L, theta)
        P, Pd, Pdd = _legendre_tables(L, eta)
        C, S = _trig_tables(L, phi)
        labels = []
        eigs = []
        for k in range(L + 1):
            for l in range(k + 1):
                for m in range(l + 1):
                    kinds = ("c",) if m == 0 else ("c", "s")
                    for kind in kinds:
                        labels.append((k, l, m, kind))
                        eigs.append(k * (k + 2))
        self.labels = labels
        self.eigs = np.array(eigs, dtype=float)
        self.size = len(labels)
        self._s3 = dict(Phi=Phi, Phid=Phid, Phidd=Phidd,
                        P=P, Pd=Pd, Pdd=Pdd, C=C, S=S,
                        theta=theta, eta=eta, phi=phi)

    # ---------------- factor evaluation ----------------

    def _s2_column_factors(self, l, m, kind, dth, dph):
        """theta-factor (dth-th derivative) and phi-factor (dph-th)."""
        t = self._s2
        Pt = (t["P"], t["Pd"], t["Pdd"])[dth][l, m]
        trig_c, trig_s = t["C"][m], t["S"][m]
        if kind == "c":
            seq = (trig_c, -m * trig_s, -m * m * trig_c)
        else:
            seq = (trig_s, m * trig_c, -m * m * trig_s)
        norm = 1.0 / math.sqrt(2 * math.pi) if m == 0 else 1.0 / math.sqrt(math.pi)
        return norm * Pt, seq[dph]

    def matrix(self, key: tuple = ()) -> np.ndarray:
        """Dense (nnodes, size) matrix of basis derivative ``key``.

        key is a tuple of axis names, e.g. () for values, ("theta",) for the
        first theta-derivative, ("theta", "phi") for the mixed second.
        """
        key = tuple(sorted(key))
        if key in self._cache:
            return self._cache[key]
        if self.grid.kind == "sphere2":
            M = self._matrix_s2(key)
        else:
            M = self._matrix_s3(key)
        self._cache[key] = M
        return M

    def _matrix_s2(self, key):
        dth = key.count("theta")
        dph = key.count("phi")
        if dth + dph != len(key) or dth > 2 or dph > 2:
            raise ValueError(f"bad derivative key {key}")
        g = self.grid
        nt, np_ = g.shape
        M = np.empty((g.nnodes, self.size))
        for j, (l, m, kind) in enumerate(self.labels):
            ft, fp = self._s2_column_factors(l, m, kind, dth, dph)
            M[:, j] = np.multiply.outer(ft, fp).ravel()
        return M

    def _matrix_s3(self, key):
        dth = key.count("theta")
        det = key.count("eta")
        dph = key.count("phi")
        if dth + det + dph != len(key) or max(dth, det, dph) > 2:
            raise ValueError(f"bad derivative key {key}")
        t = self._s3
        g = self.grid
        M = np.empty((g.nnodes, self.size))
        PhiT = (t["Phi"], t["Phid"], t["Phidd"])[dth]
        PT = (t["P"], t["Pd"], t["Pdd"])[det]
        for j, (k, l, m, kind) in enumerate(self.labels):
            ft = PhiT[k, l]
            fe = PT[l, m]
            trig_c, trig_s = t["C"][m], t["S"][m]
            if kind == "c":
                seq = (trig_c, -m * trig_s, -m * m * trig_c)
            else:
                seq = (trig_s, m * trig_c, -m * m * trig_s)
            fp = seq[dph]
            norm = (1.0 / math.sqrt(2 * math.pi) if m == 0
                    else 1.0 / math.sqrt(math.pi))
            M[:, j] = (norm * np.multiply.outer(ft, np.multiply.outer(fe, fp))
                       .ravel())
        return M

    # ---------------- analysis / synthesis ----------------

    def analysis(self, f: np.ndarray) -> np.ndarray:
        return self.matrix().T @ (self.W * f)

    def synthesis(self, c: np.ndarray) -> np.ndarray:
        return self.matrix() @ c

    def project(self, f: np.ndarray) -> np.ndarray:
        return self.synthesis(self.analysis(f))

    def analysis_matrix(self) -> np.ndarray:
        """A = B^T diag(W), shape (size, nnodes); A B = I by quadrature."""
        return (self.matrix() * self.W[:, None]).T

    def exact_dmat(self, key: tuple) -> np.ndarray:
        """Dense exact differentiation matrix B_key (B^T W), (nnodes, nnodes)."""
        return self.matrix(key) @ self.analysis_matrix()

    def free(self):
        """Drop cached dense matrices (memory control in column mode)."""
        self._cache.clear()


def sphere_basis(grid: Grid, degree: int | None = None) -> SphereBasis:
    if degree is not None and degree != grid.degree:
        return SphereBasis(grid, degree=degree)
    if grid.spectral is None:
        SphereBasis(grid)
    return grid.spectral


def ambient_coords(grid: Grid) -> np.ndarray:
    """Unit-sphere embedding coordinates of the grid nodes, shape (N, n+1)."""
    c = grid.coords
    if grid.kind == "sphere2" or grid.kind == "product_s2_torus":
        th, ph = c["theta"], c["phi"]
        return np.stack([np.cos(th), np.sin(th) * np.cos(ph),
                         np.sin(th) * np.sin(ph)], axis=1)
    if grid.kind == "sphere3":
        th, et, ph = c["theta"], c["eta"], c["phi"]
        st = np.sin(th)
        return np.stack([np.cos(th), st * np.cos(et),
                         st * np.sin(et) * np.cos(ph),
                         st * np.sin(et) * np.sin(ph)], axis=1)
    raise ValueError(f"grid kind {grid.kind!r} has no sphere embedding")


def geodesic_angles(grid: Grid) -> np.ndarray:
    """Pairwise great-circle angles gamma(p, q) on a sphere grid, (N, N)."""
    X = ambient_coords(grid)
    G = np.clip(X @ X.T, -1.0, 1.0)
    return np.arccos(G)
