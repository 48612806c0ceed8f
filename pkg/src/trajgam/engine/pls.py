"""Penalized least squares and smoothing-parameter criteria.

Every term's penalties commute (single penalties trivially; factor-smooth and
tensor penalties by construction), so each term is rotated once to a basis in
which all of its penalties are diagonal. In those coordinates the total
penalty ``S_lambda`` is a diagonal matrix ``diag(s)``, and

* the fit solves the stacked least-squares problem ``[R; sqrt(s)]`` (with
  ``R`` from a QR of the design), which stays accurate across the whole
  lambda range;
* ``log|S_lambda|_+`` is ``sum(log s)`` over penalized coordinates;
* derivatives of GCV, ML and REML with respect to ``log lambda`` are cheap
  closed forms.

Penalized coordinates are ordered first, so the marginal-likelihood
determinant over the penalized block is a leading sub-block of the
triangular factor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

logger = logging.getLogger(__name__)

LOG_LAMBDA_BOUNDS = (-12.0, 12.0)
START_POINTS = (-4.0, 0.0, 4.0)
CRITERIA = ("GCV", "ML", "REML")


class FitError(RuntimeError):
    """Numerical failure while fitting (singular system, saturation, ...)."""


def joint_diagonalize(mats: list[np.ndarray], rtol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal ``Q`` with ``Q.T @ S @ Q`` diagonal for every commuting ``S``.

    Returns ``Q`` and the diagonals stacked as rows. Eigenvectors of the first
    matrix are refined inside each (near-)degenerate eigenspace by the next
    matrix, and so on.
    """
    p = mats[0].shape[0]
    clusters = [np.eye(p)]
    for S in mats:
        atol = rtol * max(np.abs(S).max(), 1e-300)
        refined = []
        for V in clusters:
            if V.shape[1] == 1:
                refined.append(V)
                continue
            w, U = linalg.eigh(V.T @ S @ V)
            W = V @ U
            start = 0
            for i in range(1, len(w) + 1):
                if i == len(w) or w[i] - w[i - 1] > atol:
                    refined.append(W[:, start:i])
                    start = i
        clusters = refined
    Q = np.hstack(clusters)
    diags = []
    for S in mats:
        T = Q.T @ S @ Q
        d = np.diag(T).copy()
        off = T - np.diag(d)
        if np.abs(off).max(initial=0) > 1e-6 * max(np.abs(S).max(), 1e-300):
            raise FitError("penalties of a term do not commute; cannot diagonalize jointly")
        d[d < 1e-10 * max(d.max(), 1e-300)] = 0.0
        diags.append(d)
    return Q, np.array(diags)


@dataclass
class PLSState:
    """Everything derived from one penalized fit at fixed lambda (rotated coordinates)."""

    lam: np.ndarray
    s: np.ndarray
    beta: np.ndarray
    rss: float
    penalty: float
    Ra: np.ndarray
    P: np.ndarray
    edf_coef: np.ndarray
    tau: float
    logdet_A: float
    logdet_Arr: float
    logdet_S: float


class PenalizedSystem:
    """Design, response and diagonal penalties in rotated, permuted coordinates.

    ``X`` is ``n x p``; ``D`` holds one row per smoothing parameter with the
    diagonal of that penalty. ``log_det_corr`` is ``log|C|`` of the error
    correlation matrix (0 without an AR model).
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, D: np.ndarray, log_det_corr: float = 0.0,
                 term_of_coef: np.ndarray | None = None, term_labels: list[str] | None = None):
        n, p = X.shape
        self.n, self.p = n, p
        D = np.asarray(D, dtype=float).reshape(-1, p)
        self.n_lambda = D.shape[0]
        penalized = D.sum(axis=0) > 0
        self.perm = np.argsort(~penalized, kind="stable")
        self.inv_perm = np.argsort(self.perm)
        self.r = int(penalized.sum())
        self.Mp = p - self.r
        self.D = D[:, self.perm]
        Xp = X[:, self.perm]
        self.term_of_coef = None if term_of_coef is None else np.asarray(term_of_coef)[self.perm]
        self.term_labels = term_labels
        self.log_det_corr = float(log_det_corr)

        Q, R = linalg.qr(Xp, mode="economic")
        self.R = R
        self.f = Q.T @ y
        resid0 = y - Q @ self.f
        self.rss0 = float(resid0 @ resid0)
        self._check_null_space(Xp[:, self.r:])

    def _check_null_space(self, F: np.ndarray) -> None:
        if F.shape[1] == 0:
            return
        U, sv, Vt = linalg.svd(F, full_matrices=False)
        tol = max(F.shape) * np.finfo(float).eps * max(sv.max(), 1.0) * 1e3
        bad = sv <= tol
        if not bad.any():
            return
        names = set()
        for v in Vt[bad]:
            for j in np.flatnonzero(np.abs(v) > 1e-6):
                if self.term_of_coef is not None and self.term_labels is not None:
                    names.add(self.term_labels[self.term_of_coef[self.r + j]])
        which = ", ".join(sorted(names)) if names else "unknown terms"
        raise FitError(f"model is not identifiable: unpenalized parts of {which} are confounded")

    # -- core solve ---------------------------------------------------------

    def solve(self, lam) -> PLSState:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        if lam.size != self.n_lambda:
            raise ValueError(f"expected {self.n_lambda} smoothing parameters, got {lam.size}")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("smoothing parameters must be finite and non-negative")
        p = self.p
        s = lam @ self.D if self.n_lambda else np.zeros(p)
        pos = np.flatnonzero(s > 0)
        E = np.zeros((len(pos), p))
        E[np.arange(len(pos)), pos] = np.sqrt(s[pos])
        M = np.vstack([self.R, E])
        if M.shape[0] < p:
            raise FitError("more coefficients than observations and penalties can determine")
        Qa, Ra = linalg.qr(M, mode="economic")
        dg = np.abs(np.diag(Ra))
        if dg.min() <= 1e-13 * dg.max():
            raise FitError("penalized system is singular")
        rhs = Qa[: self.R.shape[0]].T @ self.f
        beta = linalg.solve_triangular(Ra, rhs)
        P = linalg.solve_triangular(Ra, np.eye(p))
        r1 = self.f - self.R @ beta
        rss = self.rss0 + float(r1 @ r1)
        ainv_diag = np.einsum("ij,ij->i", P, P)
        edf_coef = 1.0 - s * ainv_diag
        logd = np.log(dg)
        return PLSState(
            lam=lam, s=s, beta=beta, rss=rss, penalty=float(s @ beta**2), Ra=Ra, P=P,
            edf_coef=edf_coef, tau=float(edf_coef.sum()),
            logdet_A=2 * float(logd.sum()), logdet_Arr=2 * float(logd[: self.r].sum()),
            logdet_S=float(np.log(s[pos]).sum()),
        )

    # -- criteria -------------------------------------------------------------

    def score(self, rho, which: str, grad: bool = True):
        """Criterion (lower is better) at ``log lambda = rho``, optionally with its gradient.

        ``ML``/``REML`` are negative log (restricted) likelihoods with the scale
        profiled out, the same sign convention as a printed ``-ML`` score.
        """
        st = self.solve(np.exp(rho))
        return self.score_state(st, which, grad)

    def score_state(self, st: PLSState, which: str, grad: bool = True):
        n = self.n
        lam = st.lam
        Dl = self.D * lam[:, None]  # d s / d rho_j, one row per j
        if which == "GCV":
            dof = n - st.tau
            if dof <= 0:
                raise FitError(f"model is saturated: effective degrees of freedom {st.tau:.3f} >= n = {n}")
            v = n * st.rss / dof**2
            if not grad:
                return v
            Ainv = st.P @ st.P.T
            u = Ainv @ (st.s * st.beta)
            d_rss = 2 * Dl @ (st.beta * u)
            ASA = (Ainv**2) @ st.s
            ainv_diag = np.diag(Ainv)
            d_tau = Dl @ (ASA - ainv_diag)
            g = n * (d_rss / dof**2 + 2 * st.rss * d_tau / dof**3)
            return v, g
        rss_pen = st.rss + st.penalty
        if rss_pen <= 0:
            raise FitError("zero penalized residual sum of squares; the likelihood is degenerate")
        if which == "REML":
            nn = n - self.Mp
            logdet = st.logdet_A
            diag_inv = np.einsum("ij,ij->i", st.P, st.P)
        elif which == "ML":
            nn = n
            logdet = st.logdet_Arr
            Pr = st.P[: self.r, : self.r]
            diag_inv = np.zeros(self.p)
            diag_inv[: self.r] = np.einsum("ij,ij->i", Pr, Pr)
        else:
            raise ValueError(f"unknown criterion {which!r}; expected one of {CRITERIA}")
        phi = rss_pen / nn
        v = 0.5 * (nn * (math.log(2 * math.pi * phi) + 1) + logdet - st.logdet_S + self.log_det_corr)
        if not grad:
            return v
        inv_s = np.zeros(self.p)
        pos = st.s > 0
        inv_s[pos] = 1 / st.s[pos]
        g = 0.5 * (nn / rss_pen * (Dl @ st.beta**2) + Dl @ diag_inv - Dl @ inv_s)
        return v, g

    # -- optimization -------------------------------------------------------------

    def optimize(self, which: str, starts=START_POINTS, bounds=LOG_LAMBDA_BOUNDS):
        """Minimize the criterion over log lambda from several starting points.

        Returns ``(rho, value, converged)``. Bounded quasi-Newton steps use the
        analytic gradient; the best of the starts wins.
        """
        if which not in CRITERIA:
            raise ValueError(f"unknown criterion {which!r}; expected one of {CRITERIA}")
        k = self.n_lambda
        if k == 0:
            return np.zeros(0), self.score(np.zeros(0), which, grad=False), True

        def fun(rho):
            try:
                return self.score(rho, which)
            except FitError:
                # saturated or singular corner: make the line search back off
                return 1e30, np.zeros_like(rho)

        best = None
        for s0 in starts:
            x0 = np.full(k, float(s0))
            res = optimize.minimize(
                fun, x0, jac=True, method="L-BFGS-B", bounds=[bounds] * k,
                options={"ftol": 1e-13, "gtol": 1e-9, "maxiter": 1000},
            )
            if best is None or res.fun < best.fun:
                best = res
        rho = np.clip(best.x, *bounds)
        value, g = fun(rho)
        # line-search stops on a flat plateau are fine when the projected gradient vanishes
        pg = np.where((rho <= bounds[0]) & (g > 0) | (rho >= bounds[1]) & (g < 0), 0.0, g)
        converged = bool(best.success) or float(np.abs(pg).max()) <= 1e-5 * (1 + abs(value))
        if not converged:
            logger.warning("smoothing parameter search did not converge: %s", best.message)
        return rho, value, converged

    def unpermute(self, v: np.ndarray) -> np.ndarray:
        return v[self.inv_perm]

    def covariance(self, st: PLSState) -> np.ndarray:
        """``(X'X + S)^-1`` in the caller's (unpermuted) coordinates."""
        Ainv = st.P @ st.P.T
        return Ainv[np.ix_(self.inv_perm, self.inv_perm)]
