"""Fitting API: penalized solves at fixed lambda, criterion evaluation,
smoothing-parameter selection and the persisted :class:`FittedModel`."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..basis.terms import TermBlock
from ..dataset import Dataset, SeriesIndex
from ..formula import ModelFormula, format_formula, parse_formula
from .assemble import AR1Spec, ModelMatrices, ar1_transform, ar1_whiten, assemble
from .pls import CRITERIA, FitError, PenalizedSystem, PLSState, joint_diagonalize

logger = logging.getLogger(__name__)

SCHEMA = "trajgam.model/1"
METHODS = ("GCV", "ML", "REML", "fREML")


def _criterion_name(method: str) -> str:
    m = method.upper() if method.lower() != "freml" else "REML"
    if m not in CRITERIA:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return m


class _Rotated:
    """Per-term rotations that make every penalty diagonal."""

    def __init__(self, M: ModelMatrices):
        p = M.p
        self.blocks: list[tuple[int, int, np.ndarray]] = []
        D = np.zeros((len(M.penalties), p))
        Xr = M.X.copy()
        by_term: dict[int, list[int]] = {}
        for j, pen in enumerate(M.penalties):
            by_term.setdefault(pen.term, []).append(j)
        for ti, js in by_term.items():
            a, b = M.terms[ti].coef_range
            Q, diags = joint_diagonalize([M.penalties[j].S for j in js])
            self.blocks.append((a, b, Q))
            Xr[:, a:b] = M.X[:, a:b] @ Q
            for j, dg in zip(js, diags):
                D[j, a:b] = dg
        self.D = D
        self.system = PenalizedSystem(
            Xr, M.y, D,
            log_det_corr=M.ar.log_det_corr if M.ar is not None else 0.0,
            term_of_coef=M.term_of_coef(), term_labels=M.labels,
        )

    def to_original(self, v: np.ndarray) -> np.ndarray:
        out = v.copy()
        for a, b, Q in self.blocks:
            out[a:b] = Q @ v[a:b]
        return out

    def cov_to_original(self, V: np.ndarray) -> np.ndarray:
        out = V.copy()
        for a, b, Q in self.blocks:
            out[a:b, :] = Q @ out[a:b, :]
        for a, b, Q in self.blocks:
            out[:, a:b] = out[:, a:b] @ Q.T
        return out


@dataclass
class PLSResult:
    beta: np.ndarray
    edf: dict[str, float]
    edf_coef: np.ndarray
    tau: float
    phi: float
    rss: float
    Vb: np.ndarray
    state: PLSState = field(repr=False)


def _result(M: ModelMatrices, rot: _Rotated, st: PLSState) -> PLSResult:
    sysm = rot.system
    n = sysm.n
    beta = rot.to_original(sysm.unpermute(st.beta))
    edf_coef = sysm.unpermute(st.edf_coef)
    dof = n - st.tau
    phi = st.rss / dof if dof > 0 else float("nan")
    Vb = rot.cov_to_original(sysm.covariance(st)) * phi
    Vb = (Vb + Vb.T) / 2
    edf = {}
    for t in M.terms:
        a, b = t.coef_range
        edf[t.label] = float(edf_coef[a:b].sum())
    return PLSResult(beta, edf, edf_coef, st.tau, phi, st.rss, Vb, st)


def pls_solve(M: ModelMatrices, lam) -> PLSResult:
    """Minimize ``|y - X b|^2 + sum_j lam_j b' S_j b`` at fixed smoothing parameters.

    ``lam`` applies to the normalized penalties stored in ``M.penalties``.
    """
    rot = _Rotated(M)
    return _result(M, rot, rot.system.solve(np.asarray(lam, dtype=float)))


def criterion(M: ModelMatrices, lam, which: str) -> float:
    """GCV, ML or REML score at ``lam`` (lower is better)."""
    rot = _Rotated(M)
    lam = np.asarray(lam, dtype=float)
    st = rot.system.solve(lam)
    return float(rot.system.score_state(st, _criterion_name(which), grad=False))


@dataclass
class FittedModel:
    formula_text: str
    response: str
    method: str
    terms: list[TermBlock]
    beta: np.ndarray
    lam: np.ndarray
    penalty_terms: list[int]
    penalty_scales: list[float]
    phi: float
    edf: dict[str, float]
    edf_coef: np.ndarray
    tau: float
    score: float
    Vb: np.ndarray
    loglik: float
    n: int
    rss: float
    factor_levels: dict[str, list[str]]
    covariates: dict[str, dict] = field(default_factory=dict)
    ar: AR1Spec | None = None
    series_starts: np.ndarray | None = None
    n_unpenalized: int = 0
    meta: dict = field(default_factory=dict)
    converged: bool = True
    data_signature: str = ""
    matrices: ModelMatrices | None = field(default=None, repr=False)

    @property
    def criterion(self) -> str:
        return _criterion_name(self.method)

    @property
    def score_label(self) -> str:
        return {"ML": "-ML", "REML": "-REML", "GCV": "GCV"}[self.criterion]

    @property
    def formula(self) -> ModelFormula:
        return parse_formula(self.formula_text)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def n_parametric(self) -> int:
        return sum(t.width for t in self.terms if t.is_parametric)

    @property
    def edf_count(self) -> int:
        """Parameter count used in model-comparison tables.

        Unpenalized coefficients (parametric columns plus every smooth's null
        space) plus one per smoothing parameter.
        """
        return int(self.n_unpenalized + len(self.lam))

    @property
    def has_intercept(self) -> bool:
        return bool(self.terms) and self.terms[0].label == "(Intercept)"

    def term(self, label: str) -> TermBlock:
        for t in self.terms:
            if t.label == label:
                return t
        raise KeyError(label)

    def model_matrix(self, data) -> np.ndarray:
        """Design rows for new covariate values (mapping of column name -> values)."""
        if isinstance(data, Dataset):
            n = data.n
            data = data.as_arrays()
        else:
            n = len(next(iter(data.values())))
        return np.hstack([t.evaluate(data, n) for t in self.terms])

    def predict(self, data) -> np.ndarray:
        return self.model_matrix(data) @ self.beta

    @property
    def fitted(self) -> np.ndarray:
        self._need_matrices()
        X = self.matrices.X_raw if self.matrices.X_raw is not None else self.matrices.X
        return X @ self.beta

    @property
    def y(self) -> np.ndarray:
        self._need_matrices()
        return self.matrices.y_raw if self.matrices.y_raw is not None else self.matrices.y

    @property
    def residuals(self) -> np.ndarray:
        return self.y - self.fitted

    def _need_matrices(self):
        if self.matrices is None:
            raise ValueError("model was loaded without its data; attach data with with_data()")

    def with_data(self, d: Dataset) -> "FittedModel":
        """Re-attach training data (e.g. after loading from JSON)."""
        X = self.model_matrix(d)
        y = d.numeric(self.response).astype(float)
        if _signature(y) != self.data_signature:
            raise ValueError("dataset does not match the data the model was fitted to")
        M = ModelMatrices(X, y, self.terms, [], self.response, None, self.factor_levels)
        if self.ar is not None:
            M.X_raw, M.y_raw, M.ar = X, y, self.ar
            M.X = ar1_transform(X, self.ar.rho, self.ar.start_flags)
            M.y = ar1_transform(y, self.ar.rho, self.ar.start_flags)
        self.matrices = M
        return self

    # -- persistence ---------------------------------------------------------------

    def to_dict(self) -> dict:
        terms = []
        for t in self.terms:
            d = t.to_dict()
            d["penalties"] = []
            terms.append(d)
        return {
            "schema": SCHEMA,
            "formula": self.formula_text,
            "response": self.response,
            "method": self.method,
            "columns": [f"{t.label}.{i + 1}" if t.width > 1 else t.label
                        for t in self.terms for i in range(t.width)],
            "factor_levels": self.factor_levels,
            "covariates": self.covariates,
            "terms": terms,
            "beta": self.beta.tolist(),
            "lambda": self.lam.tolist(),
            "penalty_terms": list(self.penalty_terms),
            "penalty_scales": list(self.penalty_scales),
            "phi": self.phi,
            "edf": self.edf,
            "edf_coef": self.edf_coef.tolist(),
            "tau": self.tau,
            "score": {"criterion": self.criterion, "label": self.score_label, "value": self.score},
            "loglik": self.loglik,
            "n": self.n,
            "rss": self.rss,
            "ar": None if self.ar is None else {
                "rho": self.ar.rho, "start_flags": [bool(v) for v in self.ar.start_flags]},
            "series_starts": None if self.series_starts is None else [
                int(i) for i in np.flatnonzero(self.series_starts)],
            "n_unpenalized": self.n_unpenalized,
            "meta": self.meta,
            "converged": self.converged,
            "data_signature": self.data_signature,
            "Vb": self.Vb.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported model schema {d.get('schema')!r}; expected {SCHEMA!r}")
        terms = []
        for td in d["terms"]:
            a, b = td["coef_range"]
            terms.append(TermBlock.from_dict(td, np.zeros((0, b - a))))
        p = len(d["beta"])
        ar = d["ar"]
        return cls(
            formula_text=d["formula"], response=d["response"], method=d["method"], terms=terms,
            beta=np.asarray(d["beta"], dtype=float), lam=np.asarray(d["lambda"], dtype=float),
            penalty_terms=list(d["penalty_terms"]), penalty_scales=list(d["penalty_scales"]),
            phi=d["phi"], edf=dict(d["edf"]), edf_coef=np.asarray(d["edf_coef"]), tau=d["tau"],
            score=d["score"]["value"], Vb=np.asarray(d["Vb"], dtype=float).reshape(p, p),
            loglik=d["loglik"], n=d["n"], rss=d["rss"], factor_levels=d["factor_levels"],
            covariates=d.get("covariates", {}),
            ar=None if ar is None else AR1Spec(ar["rho"], np.asarray(ar["start_flags"], dtype=bool)),
            series_starts=_flags_from_indices(d.get("series_starts"), d["n"]),
            n_unpenalized=d["n_unpenalized"], meta=d.get("meta", {}),
            converged=d["converged"], data_signature=d["data_signature"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FittedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _flags_from_indices(idx, n: int) -> np.ndarray | None:
    if idx is None:
        return None
    flags = np.zeros(n, dtype=bool)
    flags[np.asarray(idx, dtype=int)] = True
    return flags


def _signature(y: np.ndarray) -> str:
    y = np.ascontiguousarray(y, dtype=float)
    return f"{len(y)}:{hashlib.sha256(y.tobytes()).hexdigest()[:16]}"


def _finish(M: ModelMatrices, rot: _Rotated, st: PLSState, method: str, score: float,
            converged: bool) -> FittedModel:
    res = _result(M, rot, st)
    n = M.n
    log_det_corr = M.ar.log_det_corr if M.ar is not None else 0.0
    loglik = -0.5 * n * (np.log(2 * np.pi * res.rss / n) + 1) - 0.5 * log_det_corr
    y_raw = M.y_raw if M.y_raw is not None else M.y
    return FittedModel(
        formula_text=format_formula(M.formula) if M.formula is not None else "",
        response=M.response,
        method=method,
        terms=M.terms,
        beta=res.beta,
        lam=np.asarray(st.lam, dtype=float),
        penalty_terms=[pen.term for pen in M.penalties],
        penalty_scales=[pen.scale for pen in M.penalties],
        phi=res.phi,
        edf=res.edf,
        edf_coef=res.edf_coef,
        tau=res.tau,
        score=float(score),
        Vb=res.Vb,
        loglik=float(loglik),
        n=n,
        rss=res.rss,
        factor_levels=M.factor_levels,
        covariates=M.covariates,
        ar=M.ar,
        n_unpenalized=rot.system.Mp,
        converged=converged,
        data_signature=_signature(y_raw),
        matrices=M,
    )


def optimize_lambda(M: ModelMatrices, which: str = "REML") -> FittedModel:
    """Select smoothing parameters by minimizing the criterion over log lambda."""
    crit = _criterion_name(which)
    rot = _Rotated(M)
    rho, value, converged = rot.system.optimize(crit)
    st = rot.system.solve(np.exp(rho))
    return _finish(M, rot, st, which, value, converged)


def fit_at(M: ModelMatrices, lam, method: str = "REML") -> FittedModel:
    """A FittedModel at fixed smoothing parameters (no selection)."""
    rot = _Rotated(M)
    st = rot.system.solve(np.asarray(lam, dtype=float))
    value = rot.system.score_state(st, _criterion_name(method), grad=False)
    return _finish(M, rot, st, method, value, True)


def fit(
    formula: ModelFormula | str,
    data: Dataset,
    method: str = "REML",
    rho: float | None = None,
    starts: SeriesIndex | np.ndarray | None = None,
) -> FittedModel:
    """assemble -> optional AR1 whitening -> smoothing-parameter selection.

    ``fREML`` is accepted and treated exactly like ``REML``. An AR1 error
    model needs ``rho`` and the series start flags; flags given without
    ``rho`` are only recorded (for residual diagnostics).
    """
    _criterion_name(method)
    M = assemble(formula, data)
    if rho is not None:
        if starts is None:
            raise ValueError("an AR1 error model needs series start flags")
        M = ar1_whiten(M, rho, starts)
    out = optimize_lambda(M, method)
    if starts is not None:
        flags = starts.start_flags if isinstance(starts, SeriesIndex) else np.asarray(starts, dtype=bool)
        if len(flags) != out.n:
            raise ValueError("series start flags do not match the number of rows")
        out.series_starts = flags
    return out
