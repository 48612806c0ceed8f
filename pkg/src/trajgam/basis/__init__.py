from .splines import BasisError, CubicRegressionSpline, PSpline, ThinPlateSpline1D
from .terms import (
    BasisSpec,
    TermBlock,
    apply_centering_constraint,
    by_factor_smooth,
    by_ordered_difference_smooth,
    cr_basis,
    fs_basis,
    ps_basis,
    re_basis,
    smooth_block,
    ti_block,
    tp_basis,
)

__all__ = [
    "BasisError", "BasisSpec", "CubicRegressionSpline", "PSpline", "TermBlock", "ThinPlateSpline1D",
    "apply_centering_constraint", "by_factor_smooth", "by_ordered_difference_smooth", "cr_basis",
    "fs_basis", "ps_basis", "re_basis", "smooth_block", "ti_block", "tp_basis",
]
