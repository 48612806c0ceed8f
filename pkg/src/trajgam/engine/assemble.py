"""Turn a parsed formula plus a dataset into global model matrices."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..basis import terms as T
from ..basis.splines import BasisError
from ..dataset import Dataset, SeriesIndex, treatment_dummies
from ..formula import (
    FactorSmooth,
    ModelFormula,
    Parametric,
    RandomEffect,
    Smooth,
    TensorInteraction,
    parse_formula,
)


class ModelSpecError(ValueError):
    """The formula cannot be realized on this dataset."""


@dataclass(frozen=True)
class Penalty:
    """One smoothing parameter's penalty, local to a term's coefficient range."""

    term: int
    S: np.ndarray
    scale: float


@dataclass(frozen=True)
class AR1Spec:
    rho: float
    start_flags: np.ndarray

    def __post_init__(self):
        if not -1 < self.rho < 1:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        flags = np.asarray(self.start_flags, dtype=bool)
        if len(flags) and not flags[0]:
            raise ValueError("the first row must be flagged as a series start")
        object.__setattr__(self, "start_flags", flags)

    @property
    def log_det_corr(self) -> float:
        """log-determinant of the AR1 correlation matrix of all series."""
        n_cont = int((~self.start_flags).sum())
        return n_cont * float(np.log1p(-self.rho**2))


@dataclass
class ModelMatrices:
    X: np.ndarray
    y: np.ndarray
    terms: list[T.TermBlock]
    penalties: list[Penalty]
    response: str
    formula: ModelFormula | None = None
    factor_levels: dict[str, list[str]] = field(default_factory=dict)
    covariates: dict[str, dict] = field(default_factory=dict)
    ar: AR1Spec | None = None
    X_raw: np.ndarray | None = None
    y_raw: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    def term_of_coef(self) -> np.ndarray:
        out = np.empty(self.p, dtype=int)
        for i, t in enumerate(self.terms):
            a, b = t.coef_range
            out[a:b] = i
        return out

    @property
    def n_parametric(self) -> int:
        return sum(t.width for t in self.terms if t.is_parametric)


def _normalize(block: T.TermBlock) -> list[Penalty]:
    """Rescale each penalty to the size of the block's cross-product matrix.

    Keeps the useful log-lambda range similar for covariates on any scale.
    """
    XtX = block.columns.T @ block.columns
    nx = np.linalg.norm(XtX)
    out = []
    for S in block.penalties:
        ns = np.linalg.norm(S)
        scale = nx / ns if ns > 0 and nx > 0 else 1.0
        out.append((S * scale, scale))
    return out


def _smooth_terms(term: Smooth, d: Dataset) -> list[T.TermBlock]:
    x = d.numeric(term.var)
    spec = T.BasisSpec(term.bs, term.k, term.m)
    if term.by is None:
        return [T.smooth_block(spec, x, term.var)]
    by = d[term.by]
    if not by.is_factor:
        raise ModelSpecError(f"{term.label}: by= variable must be a factor")
    if by.ordered:
        return T.by_ordered_difference_smooth(spec, x, by, term.var)
    return T.by_factor_smooth(spec, x, by, term.var)


def _check_difference_smooths(f: ModelFormula, d: Dataset) -> None:
    parametric = {t.name for t in f.terms if isinstance(t, Parametric)}
    plain = {(t.var) for t in f.terms if isinstance(t, Smooth) and t.by is None}
    plain_ti = {(t.var1, t.var2) for t in f.terms if isinstance(t, TensorInteraction) and t.by is None}
    for t in f.terms:
        by = getattr(t, "by", None)
        if by is None or by not in d or not d[by].is_factor or not d[by].ordered:
            continue
        missing = []
        if isinstance(t, Smooth) and t.var not in plain:
            missing.append(f"the reference smooth s({t.var})")
        if isinstance(t, TensorInteraction) and (t.var1, t.var2) not in plain_ti:
            missing.append(f"the reference interaction ti({t.var1},{t.var2})")
        if by not in parametric:
            missing.append(f"the parametric term {by}")
        if missing:
            raise ModelSpecError(
                f"{t.label} is a difference smooth over ordered factor {by!r}; the model must also "
                f"contain {' and '.join(missing)}"
            )


def assemble(formula: ModelFormula | str, d: Dataset) -> ModelMatrices:
    """Build the global design: intercept first, then terms in formula order."""
    f = parse_formula(formula) if isinstance(formula, str) else formula
    for v in f.variables:
        if v not in d:
            raise ModelSpecError(f"unknown column {v!r}")
    y = d.numeric(f.response).astype(float)
    _check_difference_smooths(f, d)

    intercept = T.ParametricDesign("intercept")
    blocks = [T.TermBlock("(Intercept)", np.ones((d.n, 1)), intercept)]
    try:
        for term in f.terms:
            if isinstance(term, Parametric):
                col = d[term.name]
                if col.is_factor:
                    labels, mat = treatment_dummies(col)
                    for j, lab in enumerate(labels):
                        design = T.ParametricDesign("dummy", col.name, col.levels[j + 1])
                        blocks.append(T.TermBlock(lab, mat[:, j:j + 1], design))
                else:
                    design = T.ParametricDesign("numeric", col.name)
                    blocks.append(T.TermBlock(col.name, col.data[:, None].astype(float), design))
            elif isinstance(term, Smooth):
                blocks.extend(_smooth_terms(term, d))
            elif isinstance(term, RandomEffect):
                g = d[term.group]
                if not g.is_factor:
                    raise ModelSpecError(
                        f"{term.label}: bs=\"re\" expects the grouping factor first, then the "
                        f"continuous variable; {term.group!r} is numeric"
                    )
                slope = d.numeric(term.slope) if term.slope else None
                blocks.append(T.re_basis(g, slope, term.slope))
            elif isinstance(term, FactorSmooth):
                g = d[term.group]
                if not g.is_factor:
                    raise ModelSpecError(
                        f"{term.label}: bs=\"fs\" expects the continuous variable first, then the "
                        f"grouping factor; {term.group!r} is numeric"
                    )
                blocks.append(T.fs_basis(d.numeric(term.var), g, term.k, term.m, term.xt, term.var))
            elif isinstance(term, TensorInteraction):
                by = d[term.by] if term.by else None
                if by is not None and not by.is_factor:
                    raise ModelSpecError(f"{term.label}: by= variable must be a factor")
                res = T.ti_block(d.numeric(term.var1), d.numeric(term.var2), term.k1, term.k2, by,
                                 (term.var1, term.var2), term.bs)
                blocks.extend(res if isinstance(res, list) else [res])
    except BasisError as e:
        raise ModelSpecError(str(e)) from None

    penalties = []
    start = 0
    for i, b in enumerate(blocks):
        b.coef_range = (start, start + b.width)
        start += b.width
        for S, scale in _normalize(b):
            penalties.append(Penalty(i, S, scale))
    X = np.hstack([b.columns for b in blocks])
    levels = {name: list(c.levels) for name, c in d.columns.items() if c.is_factor and name in f.variables}
    return ModelMatrices(X, y, blocks, penalties, f.response, f, levels, covariate_summary(f, d))


def covariate_summary(f: ModelFormula, d: Dataset) -> dict[str, dict]:
    """What prediction needs to know about each covariate: sorted values or factor levels."""
    out = {}
    for v in f.variables[1:]:
        c = d[v]
        if c.is_factor:
            out[v] = {"kind": "factor", "levels": list(c.levels), "ordered": c.ordered}
        else:
            out[v] = {"kind": "numeric", "values": np.sort(c.data).tolist()}
    return out


def ar1_transform(A: np.ndarray, rho: float, start_flags) -> np.ndarray:
    """Apply the AR1 whitening transform to the rows of ``A`` (vector or matrix)."""
    if not -1 < rho < 1:
        raise ValueError(f"rho must lie in (-1, 1), got {rho}")
    A = np.asarray(A, dtype=float)
    flags = np.asarray(start_flags, dtype=bool)
    if len(flags) != A.shape[0]:
        raise ValueError("start flags do not match the number of rows")
    if len(flags) and not flags[0]:
        raise ValueError("the first row must be flagged as a series start")
    out = A.copy()
    idx = np.flatnonzero(~flags)
    out[idx] = (A[idx] - rho * A[idx - 1]) / np.sqrt(1 - rho**2)
    return out


def ar1_whiten(M: ModelMatrices, rho: float, starts: SeriesIndex | np.ndarray) -> ModelMatrices:
    """Whiten design and response for AR1 errors within each series.

    Start rows are left unchanged; each later row r becomes
    ``(row_r - rho * row_{r-1}) / sqrt(1 - rho^2)``.
    """
    flags = starts.start_flags if isinstance(starts, SeriesIndex) else np.asarray(starts, dtype=bool)
    if M.ar is not None:
        raise ValueError("model matrices are already whitened")
    ar = AR1Spec(float(rho), flags)
    return replace(
        M,
        X=ar1_transform(M.X, rho, flags),
        y=ar1_transform(M.y, rho, flags),
        ar=ar,
        X_raw=M.X,
        y_raw=M.y,
    )
