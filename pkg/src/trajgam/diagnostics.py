"""Residuals and per-series autocorrelation diagnostics."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import SeriesIndex
from .engine.assemble import ar1_transform
from .engine.model import FittedModel, fit


class DiagnosticsError(ValueError):
    pass


def residuals(m: FittedModel, kind: str = "raw") -> np.ndarray:
    """Raw residuals ``y - X beta``, or AR1-whitened ("normalized") residuals."""
    raw = m.residuals
    if kind == "raw":
        return raw
    if kind == "normalized":
        if m.ar is None:
            raise DiagnosticsError(
                "normalized residuals need an AR1 error model; refit with rho and series starts")
        return ar1_transform(raw, m.ar.rho, m.ar.start_flags)
    raise DiagnosticsError(f"unknown residual kind {kind!r}; expected 'raw' or 'normalized'")


@dataclass
class AcfTable:
    lags: np.ndarray
    per_series: np.ndarray  # series x lags
    ci_limit: float

    @property
    def mean(self) -> np.ndarray:
        return self.per_series.mean(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lag", "mean_acf", "ci_limit"])
        for lag, v in zip(self.lags, self.mean):
            w.writerow([int(lag), repr(float(v)), repr(float(self.ci_limit))])
        return buf.getvalue()

    def sketch(self, width: int = 30) -> str:
        """Plain-text bar chart; ``|`` marks the confidence limits."""
        lim = int(round(self.ci_limit * width))
        lines = []
        for lag, v in zip(self.lags, self.mean):
            cells = [" "] * (2 * width + 1)
            bar = int(round(abs(v) * width))
            for i in range(1, bar + 1):
                cells[width + (i if v > 0 else -i)] = "#"
            cells[width] = "+"
            for pos in (width - lim, width + lim):
                if 0 <= pos < len(cells) and cells[pos] == " ":
                    cells[pos] = "|"
            lines.append(f"{int(lag):3d} {float(v):+.3f} {''.join(cells).rstrip()}")
        return "\n".join(lines)


def _flags(series) -> np.ndarray:
    if isinstance(series, SeriesIndex):
        return series.start_flags
    return np.asarray(series, dtype=bool)


def acf_split(values, series, max_lag: int | None = None) -> AcfTable:
    """Autocorrelation computed within each series, then averaged with equal weights.

    Each series uses its own mean and its lag-0 sum of squares as denominator.
    """
    e = np.asarray(values, dtype=float)
    flags = _flags(series)
    if len(flags) != len(e):
        raise DiagnosticsError("series flags do not match the number of values")
    if len(e) == 0:
        raise DiagnosticsError("no values")
    if not flags[0]:
        raise DiagnosticsError("the first value must start a series")
    starts = np.flatnonzero(flags)
    bounds = np.append(starts, len(e))
    lengths = np.diff(bounds)
    shortest = int(lengths.min())
    if max_lag is None:
        max_lag = min(10, shortest - 1)
    if max_lag < 0 or max_lag >= shortest:
        raise DiagnosticsError(
            f"max_lag={max_lag} is too large: the shortest series has {shortest} values")
    out = np.zeros((len(starts), max_lag + 1))
    flat = 0
    for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        x = e[a:b] - e[a:b].mean()
        den = float(x @ x)
        if den <= 1e-300:
            flat += 1
            out[i, 0] = 1.0
            continue
        out[i, 0] = 1.0
        for k in range(1, max_lag + 1):
            out[i, k] = float(x[:-k] @ x[k:]) / den
    if flat:
        warnings.warn(f"{flat} series have zero variance; their autocorrelations are set to 0", stacklevel=2)
    return AcfTable(np.arange(max_lag + 1), out, float(1.96 / np.sqrt(lengths.mean())))


def start_value_rho(m: FittedModel, series=None) -> float:
    """Lag-1 mean autocorrelation of the raw residuals: a rough starting value for rho."""
    if series is None:
        if m.series_starts is not None:
            series = m.series_starts
        elif m.ar is not None:
            series = m.ar.start_flags
        else:
            raise DiagnosticsError("the model has no series index; pass the series start flags")
    flags = _flags(series)
    if np.diff(np.append(np.flatnonzero(flags), len(flags))).min() < 2:
        raise DiagnosticsError("every series needs at least two values to estimate rho")
    return float(acf_split(m.residuals, flags, 1).mean[1])


RHO_GRID = tuple(round(0.05 * i, 2) for i in range(20))


def profile_rho(formula, data, starts, method: str = "ML", grid=RHO_GRID) -> tuple[float, FittedModel]:
    """Pick rho from ``grid`` by the lowest ML/REML score of the AR1 fit.

    Scores at different rho are comparable because they include the
    log-determinant of the error correlation matrix.
    """
    best = None
    for r in grid:
        m = fit(formula, data, method, rho=float(r) if r else None, starts=starts)
        if best is None or m.score < best[1].score:
            best = (float(r), m)
    return best
