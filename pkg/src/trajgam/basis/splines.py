"""Univariate penalized spline bases.

Each class is built from data once (knots, eigen-truncation) and can then be
evaluated at arbitrary new covariate values, which is what prediction needs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline


class BasisError(ValueError):
    pass


def _check_k(x: np.ndarray, k: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise BasisError(f"{what}: non-finite covariate values")
    ux = np.unique(x)
    if k < 2:
        raise BasisError(f"{what}: k must be at least 2")
    if len(ux) < k:
        raise BasisError(
            f"{what}: k={k} but the covariate has only {len(ux)} unique values; "
            f"there are too few measurements to support {k} knots (k can be at most {len(ux)})"
        )
    return ux


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


def _integrated_square(deriv, knots: np.ndarray) -> np.ndarray:
    """Penalty matrix int f^(m)(x)^2 dx, with ``deriv(x)`` the derivative design.

    Four Gauss-Legendre points per knot interval are exact for the piecewise
    polynomials used here.
    """
    a, b = knots[:-1], knots[1:]
    half = (b - a) / 2
    xs = ((a + b) / 2)[:, None] + half[:, None] * _GL_NODES[None, :]
    w = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    D = deriv(xs.ravel())
    S = D.T @ (w[:, None] * D)
    return (S + S.T) / 2


class CubicRegressionSpline:
    """Natural cubic spline parameterized by its values at the knots.

    Between knots the curve is the cubic interpolant whose second derivatives
    at interior knots solve the usual tridiagonal system (zero at the ends);
    outside the knot range it continues linearly.
    """

    kind = "cr"

    def __init__(self, knots, m: int = 2):
        self.knots = np.asarray(knots, dtype=float)
        if np.any(np.diff(self.knots) <= 0):
            raise BasisError("cr knots must be strictly increasing")
        self.m = m
        k = len(self.knots)
        h = np.diff(self.knots)
        D = np.zeros((k - 2, k))
        B = np.zeros((k - 2, k - 2))
        for i in range(k - 2):
            D[i, i] = 1 / h[i]
            D[i, i + 1] = -1 / h[i] - 1 / h[i + 1]
            D[i, i + 2] = 1 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3
            if i < k - 3:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6
        # second derivatives at all knots as a linear map of the knot values
        self._F = np.zeros((k, k))
        if k > 2:
            self._F[1:-1] = linalg.solve(B, D, assume_a="pos")
        if m == 2:
            self.penalty = D.T @ self._F[1:-1] if k > 2 else np.zeros((k, k))
            self.penalty = (self.penalty + self.penalty.T) / 2
        elif m == 1:
            self.penalty = _integrated_square(lambda x: self.design(x, deriv=1), self.knots)
        else:
            raise BasisError("m must be 1 or 2")

    @classmethod
    def fit(cls, x, k: int, m: int = 2, knots=None) -> "CubicRegressionSpline":
        ux = _check_k(x, k, "cr basis")
        if knots is None:
            knots = np.quantile(ux, np.linspace(0, 1, k))
            knots[0], knots[-1] = ux[0], ux[-1]
        elif len(knots) != k:
            raise BasisError(f"cr basis: {len(knots)} knots supplied for k={k}")
        return cls(knots, m)

    @property
    def k(self) -> int:
        return len(self.knots)

    @property
    def null_dim(self) -> int:
        return self.m

    def design(self, x, deriv: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        kn = self.knots
        k = len(kn)
        j = np.clip(np.searchsorted(kn, x, side="right") - 1, 0, k - 2)
        h = kn[j + 1] - kn[j]
        xc = np.clip(x, kn[0], kn[-1])
        am = (kn[j + 1] - xc) / h
        ap = (xc - kn[j]) / h
        rows = np.arange(len(x))
        out = np.zeros((len(x), k))
        if deriv == 0:
            cm = ((kn[j + 1] - xc) ** 3 / h - h * (kn[j + 1] - xc)) / 6
            cp = ((xc - kn[j]) ** 3 / h - h * (xc - kn[j])) / 6
            out[rows, j] += am
            out[rows, j + 1] += ap
        elif deriv == 1:
            cm = (-3 * (kn[j + 1] - xc) ** 2 / h + h) / 6
            cp = (3 * (xc - kn[j]) ** 2 / h - h) / 6
            out[rows, j] -= 1 / h
            out[rows, j + 1] += 1 / h
        else:
            raise ValueError("deriv must be 0 or 1")
        out += cm[:, None] * self._F[j] + cp[:, None] * self._F[j + 1]
        if deriv == 0:
            # linear continuation beyond the boundary knots
            lo, hi = x < kn[0], x > kn[-1]
            if lo.any() or hi.any():
                slope = self.design(np.array([kn[0], kn[-1]]), deriv=1)
                out[lo] += (x[lo] - kn[0])[:, None] * slope[0]
                out[hi] += (x[hi] - kn[-1])[:, None] * slope[1]
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "knots": self.knots.tolist(), "m": self.m}


class PSpline:
    """Cubic B-splines on equally spaced knots with a difference penalty."""

    kind = "ps"
    degree = 3

    def __init__(self, lo: float, hi: float, k: int, m: int = 2):
        if k < self.degree + 1:
            raise BasisError(f"ps basis needs k >= {self.degree + 1}")
        if m not in (1, 2):
            raise BasisError("m must be 1 or 2")
        self.lo, self.hi, self.m = float(lo), float(hi), m
        nseg = k - self.degree
        dx = (self.hi - self.lo) / nseg
        self.t = self.lo + dx * (np.arange(k + self.degree + 1) - self.degree)
        D = np.diff(np.eye(k), n=m, axis=0)
        self.penalty = D.T @ D

    @classmethod
    def fit(cls, x, k: int, m: int = 2) -> "PSpline":
        ux = _check_k(x, k, "ps basis")
        return cls(ux[0], ux[-1], k, m)

    @property
    def k(self) -> int:
        return len(self.t) - self.degree - 1

    @property
    def null_dim(self) -> int:
        return self.m

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return BSpline.design_matrix(x, self.t, self.degree, extrapolate=True).toarray()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi, "k": self.k, "m": self.m}


def _tps_eta(r: np.ndarray, m: int) -> np.ndarray:
    # 1-D thin-plate radial function c_m * r^(2m-1); c_m < 0 for m = 1
    c = math.gamma(0.5 - m) / (2 ** (2 * m) * math.sqrt(math.pi) * math.factorial(m - 1))
    return c * r ** (2 * m - 1)


class ThinPlateSpline1D:
    """Rank-reduced thin-plate regression spline in one dimension.

    The radial matrix over the unique covariate values is eigen-truncated to
    its ``k`` largest-magnitude components, the polynomial side constraints are
    absorbed, and the remaining coordinates are rotated so that the penalty is
    diagonal. Columns are ordered wiggly first, then the polynomial null space.
    """

    kind = "tp"
    max_knots = 2000

    def __init__(self, xu, U, m: int = 2):
        self.xu = np.asarray(xu, dtype=float)
        self.U = np.asarray(U, dtype=float)
        self.m = m
        E = _tps_eta(np.abs(self.xu[:, None] - self.xu[None, :]), m)
        S = self.U.T @ E @ self.U
        # U is built so that S is diagonal; drop round-off off the diagonal
        ev = np.clip(np.diag(S), 0, None)
        self.penalty = np.zeros((self.k, self.k))
        self.penalty[: len(ev), : len(ev)] = np.diag(ev)

    @classmethod
    def fit(cls, x, k: int, m: int = 2) -> "ThinPlateSpline1D":
        if m not in (1, 2):
            raise BasisError("m must be 1 or 2")
        ux = _check_k(x, k, "tp basis")
        if k <= m:
            raise BasisError(f"tp basis needs k > {m}")
        if len(ux) > cls.max_knots:
            ux = ux[np.round(np.linspace(0, len(ux) - 1, cls.max_knots)).astype(int)]
        E = _tps_eta(np.abs(ux[:, None] - ux[None, :]), m)
        ev, vec = linalg.eigh(E)
        idx = np.argsort(-np.abs(ev), kind="stable")[:k]
        Uk = vec[:, idx]
        T = np.vander(ux, m, increasing=True)
        Q, _ = linalg.qr(Uk.T @ T)
        Z = Q[:, m:]
        # rotate the constrained space so the penalty is diagonal, largest first
        S = Z.T @ (ev[idx][:, None] * Z)
        sv, svec = linalg.eigh((S + S.T) / 2)
        order = np.argsort(-sv, kind="stable")
        U = Uk @ Z @ svec[:, order]
        for j in range(U.shape[1]):
            if U[np.argmax(np.abs(U[:, j])), j] < 0:
                U[:, j] = -U[:, j]
        return cls(ux, U, m)

    @property
    def k(self) -> int:
        return self.U.shape[1] + self.m

    @property
    def null_dim(self) -> int:
        return self.m

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        E = _tps_eta(np.abs(x[:, None] - self.xu[None, :]), self.m)
        return np.hstack([E @ self.U, np.vander(x, self.m, increasing=True)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "xu": self.xu.tolist(), "U": self.U.tolist(), "m": self.m}


MARGINALS = {"cr": CubicRegressionSpline, "ps": PSpline, "tp": ThinPlateSpline1D}


def marginal_fit(kind: str, x, k: int, m: int = 2):
    try:
        cls = MARGINALS[kind]
    except KeyError:
        raise BasisError(f"unknown basis class {kind!r}") from None
    return cls.fit(x, k, m)


def marginal_from_dict(d: dict):
    kind = d["kind"]
    if kind == "cr":
        return CubicRegressionSpline(d["knots"], d["m"])
    if kind == "ps":
        return PSpline(d["lo"], d["hi"], d["k"], d["m"])
    if kind == "tp":
        return ThinPlateSpline1D(d["xu"], d["U"], d["m"])
    raise BasisError(f"unknown basis class {kind!r}")
