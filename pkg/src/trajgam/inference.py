"""Significance tests, model comparison and prediction grids for fitted models."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .engine.model import FittedModel

logger = logging.getLogger(__name__)

SIGNIF_LEGEND = "Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1"


class InferenceError(ValueError):
    pass


def stars(p: float | None) -> str:
    if p is None or not np.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


def format_pvalue(p: float) -> str:
    if p < 2e-16:
        return "< 2e-16"
    if p < 1e-3:
        return f"{p:.3e}"
    return f"{p:.3f}"


def ci_multiplier(level: float = 0.95) -> float:
    """Normal quantile for a two-sided interval, rounded to two decimals (1.96 at 95%)."""
    if not 0 < level < 1:
        raise InferenceError(f"confidence level must lie in (0, 1), got {level}")
    return round(float(stats.norm.ppf(0.5 + level / 2)), 2)


def _table(header: list[str], rows: list[list[str]], left: int = 1) -> str:
    """Right-aligned text table; the first ``left`` columns are left-aligned."""
    cols = list(zip(header, *rows)) if rows else [(h,) for h in header]
    widths = [max(len(c) for c in col) for col in cols]
    lines = []
    for r in [header] + rows:
        cells = [c.ljust(w) if i < left else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        lines.append(" ".join(cells).rstrip())
    return "\n".join(lines)


# -- summary ---------------------------------------------------------------------


@dataclass(frozen=True)
class ParametricRow:
    label: str
    estimate: float
    std_error: float
    t_value: float
    p_value: float


@dataclass(frozen=True)
class SmoothRow:
    label: str
    edf: float
    ref_df: int
    F: float
    p_value: float


@dataclass
class SummaryTables:
    formula: str
    parametric: list[ParametricRow]
    smooth: list[SmoothRow]
    score_label: str
    score: float
    phi: float
    n: int
    rho: float | None = None

    def to_text(self) -> str:
        out = ["Formula:", self.formula, "", "Parametric coefficients:"]
        rows = [[r.label, f"{r.estimate:.3f}", f"{r.std_error:.3f}", f"{r.t_value:.3f}",
                 format_pvalue(r.p_value), stars(r.p_value)] for r in self.parametric]
        out.append(_table(["", "Estimate", "Std. Error", "t value", "Pr(>|t|)", ""], rows))
        out += ["---", SIGNIF_LEGEND, ""]
        if self.smooth:
            out.append("Approximate significance of smooth terms:")
            rows = [[r.label, f"{r.edf:.3f}", f"{r.ref_df:d}", f"{r.F:.3f}", format_pvalue(r.p_value),
                     stars(r.p_value)] for r in self.smooth]
            out.append(_table(["", "edf", "Ref.df", "F", "p-value", ""], rows))
            out += ["---", SIGNIF_LEGEND, ""]
        footer = f"{self.score_label} = {self.score:.5g}  Scale est. = {self.phi:.5g}    n = {self.n}"
        if self.rho is not None:
            footer += f"    rho = {self.rho:g}"
        out.append(footer)
        return "\n".join(out)

    __str__ = to_text


def wald_test(beta: np.ndarray, V: np.ndarray, rank: int) -> float:
    """``beta' V^- beta`` with the pseudo-inverse truncated to the leading ``rank`` eigenvalues."""
    w, U = linalg.eigh((V + V.T) / 2)
    order = np.argsort(w)[::-1][:rank]
    w, U = w[order], U[:, order]
    keep = w > w.max(initial=0) * 1e-12
    z = U[:, keep].T @ beta
    return float(np.sum(z**2 / w[keep]))


def summarize(m: FittedModel) -> SummaryTables:
    dof = m.n - m.tau
    se = np.sqrt(np.clip(np.diag(m.Vb), 0, None))
    par, smo = [], []
    for t in m.terms:
        a, b = t.coef_range
        if t.is_parametric:
            est, s = float(m.beta[a]), float(se[a])
            tv = est / s if s > 0 else np.inf * np.sign(est)
            p = float(2 * stats.t.sf(abs(tv), dof)) if np.isfinite(tv) else 0.0
            par.append(ParametricRow(t.label, est, s, float(tv), p))
        else:
            edf = m.edf[t.label]
            r = min(max(1, int(round(edf))), b - a)
            stat = wald_test(m.beta[a:b], m.Vb[a:b, a:b], r)
            F = stat / r
            p = float(stats.f.sf(F, r, dof))
            smo.append(SmoothRow(t.label, edf, r, F, min(max(p, 0.0), 1.0)))
    return SummaryTables(m.formula_text, par, smo, m.score_label, m.score, m.phi, m.n,
                         None if m.ar is None else m.ar.rho)


# -- model comparison ----------------------------------------------------------------


def compare_scores(chisq: float, df: float) -> float:
    """p-value of a score difference: upper chi-square tail at ``2 * chisq`` with ``df``."""
    if df < 1:
        raise InferenceError(f"a p-value needs at least 1 degree of freedom, got {df}")
    if chisq < 0:
        raise InferenceError("chisq must be non-negative")
    return float(stats.chi2.sf(2 * chisq, df))


@dataclass
class ComparisonResult:
    names: tuple[str, str]
    scores: tuple[float, float]
    edf_counts: tuple[int, int]
    chisq: float
    df: int
    p_value: float | None
    message: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def sig(self) -> str:
        return stars(self.p_value) if self.p_value is not None and self.p_value < 0.05 else ""

    def to_text(self) -> str:
        """Reduced model first, then the full model with the test columns."""
        header = ["", "Model", "Score", "Edf", "Chisq", "Df", "p.value", "Sig."]
        if self.p_value is not None:
            p = format_pvalue(self.p_value)
            second = [f"{self.chisq:.3f}", f"{self.df:.3f}", p, self.sig]
        else:
            second = ["", "", "", ""]
        rows = [
            ["1", self.names[1], f"{self.scores[1]:.3f}", str(self.edf_counts[1]), "", "", "", ""],
            ["2", self.names[0], f"{self.scores[0]:.3f}", str(self.edf_counts[0])] + second,
        ]
        cols = list(zip(header, *rows))
        widths = [max(len(c) for c in col) for col in cols]
        lines = [" ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
        text = "\n".join(lines)
        if self.message:
            text += "\n" + self.message
        return text

    __str__ = to_text


def _check_same_data(models: list[FittedModel]) -> None:
    ref = models[0]
    for m in models[1:]:
        if m.n != ref.n:
            raise InferenceError(f"models were fitted to different datasets ({ref.n} vs {m.n} rows)")
        if m.response != ref.response or (ref.data_signature and m.data_signature != ref.data_signature):
            raise InferenceError("models were fitted to different datasets or responses")


def compare_ml(full: FittedModel, reduced: FittedModel,
               names: tuple[str, str] = ("full", "reduced")) -> ComparisonResult:
    """Likelihood-score comparison of nested models fitted by ML."""
    _check_same_data([full, reduced])
    notes = []
    for nm, m in zip(names, (full, reduced)):
        if m.criterion != "ML":
            notes.append(f"model {nm} was fitted with {m.method}; comparisons of fixed effects "
                         "need ML fits and may be unreliable otherwise")
    if full.method != reduced.method:
        notes.append("models were fitted with different methods")
    missing = set(reduced.labels) - set(full.labels)
    if missing:
        notes.append(f"models may not be nested: reduced model has terms {sorted(missing)} not in the full model")
    for msg in notes:
        warnings.warn(msg, stacklevel=2)

    ef, er = full.edf_count, reduced.edf_count
    chisq = reduced.score - full.score
    df = ef - er
    p, message = None, ""
    if abs(chisq) <= 1e-9 * max(1.0, abs(full.score)) and df == 0:
        chisq, message = 0.0, "no difference between the models"
    elif chisq < 0:
        message = f"reduced preferred: model {names[1]} has the lower score"
    elif df < 1:
        message = "no p-value: the models do not differ in degrees of freedom"
    else:
        p = compare_scores(chisq, df)
    return ComparisonResult(names, (full.score, reduced.score), (ef, er), chisq, df, p, message, notes)


@dataclass
class AicRow:
    label: str
    df: float
    aic: float


def aic(models: list[FittedModel], labels: list[str] | None = None) -> list[AicRow]:
    if not models:
        return []
    _check_same_data(models)
    labels = labels or [f"model{i + 1}" for i in range(len(models))]
    return [AicRow(lab, m.tau, -2 * m.loglik + 2 * m.tau) for lab, m in zip(labels, models)]


def format_aic(rows: list[AicRow]) -> str:
    return _table(["", "df", "AIC"], [[r.label, f"{r.df:.5f}", f"{r.aic:.3f}"] for r in rows])


# -- prediction grids ------------------------------------------------------------------


@dataclass
class PredictionGrid:
    view: str
    grid: dict[str, np.ndarray]
    fit: np.ndarray
    se: np.ndarray
    multiplier: float = 1.96
    difference: bool = False

    @property
    def lower(self) -> np.ndarray:
        return self.fit - self.multiplier * self.se

    @property
    def upper(self) -> np.ndarray:
        return self.fit + self.multiplier * self.se

    @property
    def sig(self) -> np.ndarray:
        """Points whose interval excludes zero."""
        return (self.lower > 0) | (self.upper < 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.grid)
        w.writerow(names + ["fit", "se", "lower", "upper", "sig"])
        lo, up, sg = self.lower, self.upper, self.sig
        for i in range(len(self.fit)):
            vals = [self.grid[k][i] for k in names]
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in vals]
                       + [repr(float(self.fit[i])), repr(float(self.se[i])), repr(float(lo[i])),
                          repr(float(up[i])), "TRUE" if sg[i] else "FALSE"])
        return buf.getvalue()


def _covariate(m: FittedModel, name: str) -> dict:
    try:
        return m.covariates[name]
    except KeyError:
        raise InferenceError(f"{name!r} is not a covariate of the model") from None


def _default_value(info: dict):
    if info["kind"] == "factor":
        return info["levels"][0]
    return float(np.median(info["values"]))


def _conditions(m: FittedModel, cond: dict | None, skip: set[str]) -> dict:
    cond = dict(cond or {})
    for k in cond:
        _covariate(m, k)
    out = {}
    for name, info in m.covariates.items():
        if name in skip:
            continue
        v = cond.get(name, _default_value(info))
        if info["kind"] == "factor":
            if str(v) not in info["levels"]:
                raise InferenceError(f"{v!r} is not a level of {name!r}; levels are {info['levels']}")
            v = str(v)
        else:
            v = float(v)
        out[name] = v
    return out


def _numeric_view(m: FittedModel, view: str) -> np.ndarray:
    info = _covariate(m, view)
    if info["kind"] != "numeric":
        raise InferenceError(f"view variable {view!r} must be numeric")
    return np.asarray(info["values"], dtype=float)


def _design(m: FittedModel, columns: dict, n: int, exclude_random: bool) -> np.ndarray:
    data = {}
    for k, v in columns.items():
        data[k] = np.asarray(v) if np.ndim(v) else np.full(n, v, dtype=object if isinstance(v, str) else float)
    X = m.model_matrix(data)
    if exclude_random:
        for t in m.terms:
            if t.is_random:
                a, b = t.coef_range
                X[:, a:b] = 0.0
    return X


def _row_se(X: np.ndarray, Vb: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(np.einsum("ij,jk,ik->i", X, Vb, X), 0, None))


def _grid(values: np.ndarray, n: int) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if n < 2 or not hi > lo:
        raise InferenceError("the view variable needs at least two distinct values and grid_n >= 2")
    g = np.linspace(lo, hi, n)
    g[0], g[-1] = lo, hi
    return g


def predict_smooth(m: FittedModel, view: str, cond: dict | None = None, exclude_random: bool = False,
                   grid_n: int = 100, level: float = 0.95) -> PredictionGrid:
    """Fitted curve over ``view`` with the other covariates held at ``cond`` (or defaults)."""
    g = _grid(_numeric_view(m, view), grid_n)
    fixed = _conditions(m, cond, {view})
    cols = {view: g, **fixed}
    X = _design(m, cols, len(g), exclude_random)
    grid = {view: g, **{k: np.full(len(g), v, dtype=object) for k, v in fixed.items()}}
    return PredictionGrid(view, grid, X @ m.beta, _row_se(X, m.Vb), ci_multiplier(level))


def predict_diff(m: FittedModel, view: str, comp: dict, cond: dict | None = None,
                 exclude_random: bool = False, grid_n: int = 100, level: float = 0.95) -> PredictionGrid:
    """Difference between two levels of a factor along ``view``: rows(high) - rows(low)."""
    if len(comp) != 1:
        raise InferenceError("comp must name exactly one factor")
    (factor, (high, low)), = comp.items()
    info = _covariate(m, factor)
    if info["kind"] != "factor":
        raise InferenceError(f"{factor!r} is not a factor")
    for lev in (high, low):
        if lev not in info["levels"]:
            raise InferenceError(f"{lev!r} is not a level of {factor!r}; levels are {info['levels']}")
    g = _grid(_numeric_view(m, view), grid_n)
    fixed = _conditions(m, {k: v for k, v in (cond or {}).items() if k != factor}, {view, factor})
    Xh = _design(m, {view: g, factor: high, **fixed}, len(g), exclude_random)
    Xl = _design(m, {view: g, factor: low, **fixed}, len(g), exclude_random)
    X = Xh - Xl
    grid = {view: g, **{k: np.full(len(g), v, dtype=object) for k, v in fixed.items()}}
    return PredictionGrid(view, grid, X @ m.beta, _row_se(X, m.Vb), ci_multiplier(level), difference=True)


@dataclass
class Surface:
    var1: str
    var2: str
    x1: np.ndarray
    x2: np.ndarray
    fit: np.ndarray  # rows follow x2, columns follow x1
    se: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.var1, self.var2, "fit", "se"])
        for i, b in enumerate(self.x2):
            for j, a in enumerate(self.x1):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(self.fit[i, j])), repr(float(self.se[i, j]))])
        return buf.getvalue()


def predict_surface(m: FittedModel, view: tuple[str, str], cond: dict | None = None,
                    grid: tuple[int, int] = (30, 30), ylim: tuple[float, float] | None = None,
                    exclude_random: bool = False) -> Surface:
    """Fitted values over a grid of two numeric covariates.

    ``ylim`` gives lower/upper quantiles (e.g. ``(0.1, 0.9)``) of the second
    variable's data; its grid then spans exactly those quantiles.
    """
    v1, v2 = view
    if v1 == v2:
        raise InferenceError("the two view variables must differ")
    x1 = _grid(_numeric_view(m, v1), grid[0])
    vals2 = _numeric_view(m, v2)
    if ylim is None:
        x2 = _grid(vals2, grid[1])
    else:
        qlo, qhi = ylim
        if not 0 <= qlo < qhi <= 1:
            raise InferenceError("ylim quantiles must satisfy 0 <= low < high <= 1")
        lo, hi = np.quantile(vals2, [qlo, qhi])
        x2 = np.linspace(lo, hi, grid[1])
        x2[0], x2[-1] = lo, hi
    fixed = _conditions(m, cond, {v1, v2})
    A, B = np.meshgrid(x1, x2)
    n = A.size
    X = _design(m, {v1: A.ravel(), v2: B.ravel(), **fixed}, n, exclude_random)
    shape = A.shape
    return Surface(v1, v2, x1, x2, (X @ m.beta).reshape(shape), _row_se(X, m.Vb).reshape(shape))
