"""Model terms: design-matrix blocks plus their penalties.

A :class:`TermBlock` carries the columns evaluated on the training data and a
small serializable *design* object that rebuilds the same columns for new
covariate values, so fitted models can predict without the training data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from ..dataset import Column
from .splines import BasisError, marginal_fit, marginal_from_dict

Data = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class BasisSpec:
    cls: str = "tp"
    k: int = 10
    m: int = 2
    xt: str = "cr"
    by: str | None = None
    knots: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.m not in (1, 2):
            raise BasisError("m must be 1 or 2")
        if self.cls in ("cr", "ps", "tp") and self.k < 2:
            raise BasisError("k must be at least 2")


def _labels(data: Data, name: str) -> np.ndarray:
    try:
        return np.asarray(data[name], dtype=object).astype(str)
    except KeyError:
        raise BasisError(f"missing variable {name!r}") from None


def _numeric(data: Data, name: str) -> np.ndarray:
    try:
        return np.asarray(data[name], dtype=float)
    except KeyError:
        raise BasisError(f"missing variable {name!r}") from None


# -- designs: rebuild raw (pre-constraint) columns for arbitrary data ---------


@dataclass(frozen=True)
class ParametricDesign:
    kind: str  # "intercept" | "numeric" | "dummy"
    var: str | None = None
    level: str | None = None

    def __call__(self, data: Data, n: int | None = None) -> np.ndarray:
        if self.kind == "intercept":
            if n is None:
                n = len(next(iter(data.values())))
            return np.ones((n, 1))
        if self.kind == "numeric":
            return _numeric(data, self.var)[:, None]
        return (_labels(data, self.var) == self.level).astype(float)[:, None]

    def to_dict(self):
        return {"type": "parametric", "kind": self.kind, "var": self.var, "level": self.level}


@dataclass(frozen=True)
class SmoothDesign:
    var: str
    marginal: object
    by: str | None = None
    level: str | None = None

    def __call__(self, data: Data, n: int | None = None) -> np.ndarray:
        X = self.marginal.design(_numeric(data, self.var))
        if self.by is not None:
            X = X * (_labels(data, self.by) == self.level)[:, None]
        return X

    def to_dict(self):
        return {"type": "smooth", "var": self.var, "marginal": self.marginal.to_dict(),
                "by": self.by, "level": self.level}


@dataclass(frozen=True)
class RandomDesign:
    group: str
    levels: tuple[str, ...]
    slope: str | None = None

    def __call__(self, data: Data, n: int | None = None) -> np.ndarray:
        g = _labels(data, self.group)
        X = (g[:, None] == np.asarray(self.levels, dtype=str)[None, :]).astype(float)
        if self.slope is not None:
            X *= _numeric(data, self.slope)[:, None]
        return X

    def to_dict(self):
        return {"type": "random", "group": self.group, "levels": list(self.levels), "slope": self.slope}


@dataclass(frozen=True)
class FactorSmoothDesign:
    var: str
    group: str
    levels: tuple[str, ...]
    marginal: object

    def __call__(self, data: Data, n: int | None = None) -> np.ndarray:
        B = self.marginal.design(_numeric(data, self.var))
        g = _labels(data, self.group)
        ind = (g[:, None] == np.asarray(self.levels, dtype=str)[None, :]).astype(float)
        # level-major column order: all k columns of level 0, then level 1, ...
        return (ind[:, :, None] * B[:, None, :]).reshape(len(g), -1)

    def to_dict(self):
        return {"type": "fs", "var": self.var, "group": self.group, "levels": list(self.levels),
                "marginal": self.marginal.to_dict()}


@dataclass(frozen=True)
class TensorDesign:
    var1: str
    var2: str
    marginal1: object
    marginal2: object
    Z1: np.ndarray
    Z2: np.ndarray
    by: str | None = None
    level: str | None = None

    def __call__(self, data: Data, n: int | None = None) -> np.ndarray:
        A = self.marginal1.design(_numeric(data, self.var1)) @ self.Z1
        B = self.marginal2.design(_numeric(data, self.var2)) @ self.Z2
        X = (A[:, :, None] * B[:, None, :]).reshape(len(A), -1)
        if self.by is not None:
            X = X * (_labels(data, self.by) == self.level)[:, None]
        return X

    def to_dict(self):
        return {"type": "ti", "var1": self.var1, "var2": self.var2,
                "marginal1": self.marginal1.to_dict(), "marginal2": self.marginal2.to_dict(),
                "Z1": self.Z1.tolist(), "Z2": self.Z2.tolist(), "by": self.by, "level": self.level}


def design_from_dict(d: dict):
    t = d["type"]
    if t == "parametric":
        return ParametricDesign(d["kind"], d["var"], d["level"])
    if t == "smooth":
        return SmoothDesign(d["var"], marginal_from_dict(d["marginal"]), d["by"], d["level"])
    if t == "random":
        return RandomDesign(d["group"], tuple(d["levels"]), d["slope"])
    if t == "fs":
        return FactorSmoothDesign(d["var"], d["group"], tuple(d["levels"]), marginal_from_dict(d["marginal"]))
    if t == "ti":
        return TensorDesign(d["var1"], d["var2"], marginal_from_dict(d["marginal1"]),
                            marginal_from_dict(d["marginal2"]), np.asarray(d["Z1"]),
                            np.asarray(d["Z2"]), d["by"], d["level"])
    raise BasisError(f"unknown design type {t!r}")


# -- term blocks --------------------------------------------------------------


@dataclass
class TermBlock:
    label: str
    columns: np.ndarray
    design: object
    penalties: list[np.ndarray] = field(default_factory=list)
    transform: np.ndarray | None = None
    is_random: bool = False
    constraint: str | None = None
    coef_range: tuple[int, int] | None = None

    @property
    def width(self) -> int:
        return self.columns.shape[1]

    @property
    def is_parametric(self) -> bool:
        return isinstance(self.design, ParametricDesign)

    def evaluate(self, data: Data, n: int | None = None) -> np.ndarray:
        """Columns of this term for new covariate values."""
        X = self.design(data, n)
        if self.transform is not None:
            X = X @ self.transform
        return X

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "design": self.design.to_dict(),
            "transform": None if self.transform is None else self.transform.tolist(),
            "penalties": [S.tolist() for S in self.penalties],
            "is_random": self.is_random,
            "constraint": self.constraint,
            "coef_range": list(self.coef_range) if self.coef_range else None,
        }

    @classmethod
    def from_dict(cls, d: dict, columns: np.ndarray | None = None) -> "TermBlock":
        transform = None if d["transform"] is None else np.asarray(d["transform"], dtype=float)
        pens = [np.asarray(S, dtype=float) for S in d["penalties"]]
        width = transform.shape[1] if transform is not None else (pens[0].shape[0] if pens else 1)
        return cls(
            label=d["label"],
            columns=np.zeros((0, width)) if columns is None else columns,
            design=design_from_dict(d["design"]),
            penalties=pens,
            transform=transform,
            is_random=d["is_random"],
            constraint=d["constraint"],
            coef_range=tuple(d["coef_range"]) if d["coef_range"] else None,
        )


def _smooth_block(kind: str, x, k: int, m: int, name: str, knots=None) -> TermBlock:
    if kind == "cr" and knots is not None:
        from .splines import CubicRegressionSpline

        marg = CubicRegressionSpline.fit(x, k, m, knots=np.asarray(knots, dtype=float))
    else:
        marg = marginal_fit(kind, x, k, m)
    design = SmoothDesign(name, marg)
    return TermBlock(f"s({name})", design({name: x}), design, [marg.penalty.copy()])


def cr_basis(x, k: int = 10, knots=None, m: int = 2, name: str = "x") -> TermBlock:
    """Unconstrained cubic regression spline block (k columns, one penalty)."""
    return _smooth_block("cr", x, k, m, name, knots)


def ps_basis(x, k: int = 10, degree: int = 3, diff_order: int = 2, name: str = "x") -> TermBlock:
    """Unconstrained cubic P-spline block with a ``diff_order`` difference penalty."""
    if degree != 3:
        raise BasisError("only cubic P-splines are supported")
    return _smooth_block("ps", x, k, diff_order, name)


def tp_basis(x, k: int = 10, m: int = 2, name: str = "x") -> TermBlock:
    """Unconstrained 1-D thin-plate regression spline block."""
    return _smooth_block("tp", x, k, m, name)


def apply_centering_constraint(block: TermBlock) -> TermBlock:
    """Absorb sum-to-zero over the observed rows by an orthogonal reparameterization.

    With ``C`` the column sums, ``Z`` spans the orthogonal complement of ``C``
    (from a full QR of ``C^T``); columns become ``X Z`` and penalties ``Z^T S Z``.
    """
    if block.is_random:
        raise BasisError(f"{block.label}: random-effect blocks are not centered")
    C = block.columns.sum(axis=0)
    if not np.any(C):
        raise BasisError(f"{block.label}: all columns sum to zero already; nothing to absorb")
    Q, _ = linalg.qr(C[:, None])
    Z = Q[:, 1:]
    T = Z if block.transform is None else block.transform @ Z
    return replace(
        block,
        columns=block.columns @ Z,
        penalties=[Z.T @ S @ Z for S in block.penalties],
        transform=T,
        constraint="sum-to-zero",
    )


def smooth_block(spec: BasisSpec, x, name: str) -> TermBlock:
    """Centered plain smooth ``s(name)`` for the cr/ps/tp classes."""
    if spec.cls not in ("cr", "ps", "tp"):
        raise BasisError(f"bs={spec.cls!r} is not a univariate smooth class")
    block = _smooth_block(spec.cls, x, spec.k, spec.m, name, spec.knots)
    return apply_centering_constraint(block)


def re_basis(group: Column, slope=None, slope_name: str | None = None) -> TermBlock:
    """Random intercepts (or slopes) as a ridge-penalized smooth."""
    if not group.is_factor:
        raise BasisError(f"s({group.name}, bs=\"re\"): {group.name!r} must be a factor (grouping factor first)")
    if len(group.levels) < 2:
        raise BasisError(f"s({group.name}, bs=\"re\"): grouping factor needs at least 2 levels")
    design = RandomDesign(group.name, group.levels, slope_name)
    data = {group.name: group.labels()}
    if slope_name is not None:
        data[slope_name] = np.asarray(slope, dtype=float)
    X = design(data)
    label = f"s({group.name})" if slope_name is None else f"s({group.name},{slope_name})"
    return TermBlock(label, X, design, [np.eye(X.shape[1])], is_random=True)


def fs_basis(x, group: Column, k: int = 10, m: int = 2, xt: str = "cr", name: str = "x") -> TermBlock:
    """Factor-smooth interaction: one uncentered copy of the inner basis per level.

    Two penalties are shared by all levels: the inner wiggliness penalty
    repeated block-diagonally, and a ridge on every column.
    """
    if not group.is_factor:
        raise BasisError(f"s({name}, {group.name}, bs=\"fs\"): {group.name!r} must be a factor "
                         "(continuous variable first, grouping factor second)")
    x = np.asarray(x, dtype=float)
    for j, lev in enumerate(group.levels):
        if len(np.unique(x[group.data == j])) < 2:
            raise BasisError(f"s({name}, {group.name}, bs=\"fs\"): level {lev!r} has fewer than "
                             "2 distinct covariate values")
    marg = marginal_fit(xt, x, k, m)
    design = FactorSmoothDesign(name, group.name, group.levels, marg)
    X = design({name: x, group.name: group.labels()})
    L = len(group.levels)
    wiggle = np.kron(np.eye(L), marg.penalty)
    return TermBlock(f"s({name},{group.name})", X, design, [wiggle, np.eye(X.shape[1])], is_random=True)


def by_factor_smooth(base: BasisSpec, x, by: Column, name: str = "x") -> list[TermBlock]:
    """One centered smooth per level of an unordered factor, zero outside that level."""
    if by.ordered:
        raise BasisError(f"{by.name!r} is ordered; use by_ordered_difference_smooth")
    if len(by.levels) == 1:
        return [smooth_block(base, x, name)]
    return _masked_smooths(base, x, by, name, by.levels)


def by_ordered_difference_smooth(base: BasisSpec, x, by: Column, name: str = "x") -> list[TermBlock]:
    """Difference smooths: one centered block per non-reference level of an ordered factor."""
    if not by.ordered:
        raise BasisError(f"{by.name!r} is not an ordered factor")
    return _masked_smooths(base, x, by, name, by.levels[1:])


def _masked_smooths(base, x, by: Column, name, levels) -> list[TermBlock]:
    x = np.asarray(x, dtype=float)
    if base.cls == "cr" and base.knots is not None:
        from .splines import CubicRegressionSpline

        marg = CubicRegressionSpline.fit(x, base.k, base.m, knots=np.asarray(base.knots))
    else:
        marg = marginal_fit(base.cls, x, base.k, base.m)
    labels = by.labels()
    out = []
    for lev in levels:
        design = SmoothDesign(name, marg, by.name, lev)
        X = design({name: x, by.name: labels})
        block = TermBlock(f"s({name}):{by.name}{lev}", X, design, [marg.penalty.copy()])
        out.append(apply_centering_constraint(block))
    return out


def _centered_margin(kind: str, x, k: int):
    marg = marginal_fit(kind, x, k, 2)
    C = marg.design(x).sum(axis=0)
    Q, _ = linalg.qr(C[:, None])
    Z = Q[:, 1:]
    S = Z.T @ marg.penalty @ Z
    return marg, Z, (S + S.T) / 2


def _null_projector(S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    ev, vec = linalg.eigh(S)
    N = vec[:, ev < tol * max(ev.max(), 1e-300)]
    return N @ N.T


def ti_block(x1, x2, k1: int = 5, k2: int = 5, by: Column | None = None,
             names: tuple[str, str] = ("x1", "x2"), kind: str = "cr") -> TermBlock | list[TermBlock]:
    """Pure tensor-product interaction of two centered marginal bases.

    Penalties are ``S1 (x) I`` and ``I (x) S2`` plus a third on the product of
    the two marginal null spaces, so the whole block can shrink to zero when
    the data are additive. With ``by`` one block per level (unordered) or per
    non-reference level (ordered).
    """
    n1, n2 = names
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    m1, Z1, S1 = _centered_margin(kind, x1, k1)
    m2, Z2, S2 = _centered_margin(kind, x2, k2)
    I1, I2 = np.eye(S1.shape[0]), np.eye(S2.shape[0])
    pens = [np.kron(S1, I2), np.kron(I1, S2), np.kron(_null_projector(S1), _null_projector(S2))]
    pens = [P for P in pens if np.any(np.abs(P) > 1e-12)]
    label = f"ti({n1},{n2})"
    data = {n1: x1, n2: x2}
    if by is None:
        design = TensorDesign(n1, n2, m1, m2, Z1, Z2)
        return TermBlock(label, design(data), design, pens, constraint="centered margins")
    levels = by.levels[1:] if by.ordered else by.levels
    data[by.name] = by.labels()
    out = []
    for lev in levels:
        design = TensorDesign(n1, n2, m1, m2, Z1, Z2, by.name, lev)
        out.append(TermBlock(f"{label}:{by.name}{lev}", design(data), design,
                             [P.copy() for P in pens], constraint="centered margins"))
    return out
