"""Nested uniform grids on the unit cube, injection restriction and grid norms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class HierarchyError(ValueError):
    """Raised for resolutions that do not form an exactly nested hierarchy."""


@dataclass(frozen=True)
class ResolutionLevel:
    """One rung of the hierarchy. ``index`` is 1 for the coarsest level."""

    index: int
    points_per_side: int

    @property
    def spacing(self) -> float:
        return 1.0 / (self.points_per_side - 1)

    def coordinates(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.points_per_side)


@dataclass(frozen=True, eq=False)
class GridField:
    """Node values of a scalar field on a uniform grid (``d`` = values.ndim)."""

    level: ResolutionLevel
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        R = self.level.points_per_side
        if values.ndim not in (1, 2) or any(n != R for n in values.shape):
            raise ValueError(
                f"field of shape {values.shape} does not match R={R} per side"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.ndim

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return (
            self.level.points_per_side == other.level.points_per_side
            and np.array_equal(self.values, other.values)
        )

    def __add__(self, other: GridField) -> GridField:
        return GridField(self.level, self.values + other.values)

    def __sub__(self, other: GridField) -> GridField:
        return GridField(self.level, self.values - other.values)

    def __mul__(self, scalar: float) -> GridField:
        return GridField(self.level, self.values * scalar)

    __rmul__ = __mul__


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def build_hierarchy(fine_points_per_side: int, m: int) -> list[ResolutionLevel]:
    """Return ``m`` nested levels, coarsest first, ending at ``fine_points_per_side``.

    Resolutions follow ``R_i = (R_m - 1) / 2**(m - i) + 1``.
    """
    if m < 1:
        raise HierarchyError(f"need at least one level, got m={m}")
    if fine_points_per_side < 3 or not _is_pow2(fine_points_per_side - 1):
        raise HierarchyError(
            f"fine resolution must be 2**p + 1, got {fine_points_per_side}"
        )
    cells = fine_points_per_side - 1
    coarsest_cells = cells >> (m - 1)
    if coarsest_cells << (m - 1) != cells or coarsest_cells < 2:
        raise HierarchyError(
            f"{m} levels below R={fine_points_per_side} leave fewer than 3 points"
        )
    return [
        ResolutionLevel(i + 1, (cells >> (m - 1 - i)) + 1) for i in range(m)
    ]


def restriction_stride(source: int, target: int) -> int:
    """Stride mapping a grid of ``source`` points per side onto ``target`` points."""
    if target > source:
        raise HierarchyError(f"cannot restrict R={source} to finer R={target}")
    if target < 2 or (source - 1) % (target - 1):
        raise HierarchyError(f"R={target} is not nested in R={source}")
    stride = (source - 1) // (target - 1)
    if not _is_pow2(stride):
        raise HierarchyError(f"R={target} is not a dyadic coarsening of R={source}")
    return stride


def restrict_array(values: np.ndarray, target_points: int, dim: int | None = None) -> np.ndarray:
    """Injection onto a coarser nested grid along the trailing ``dim`` axes.

    Leading axes (e.g. a sample axis) are left untouched.
    """
    values = np.asarray(values)
    dim = values.ndim if dim is None else dim
    stride = restriction_stride(values.shape[-1], target_points)
    index = (Ellipsis,) + (slice(None, None, stride),) * dim
    return np.ascontiguousarray(values[index])


def restrict(field: GridField, target: ResolutionLevel) -> GridField:
    """Keep every ``2**(i_source - i_target)``-th node in each axis."""
    if target.points_per_side == field.level.points_per_side:
        return field
    values = restrict_array(field.values, target.points_per_side)
    return GridField(target, values)


def grid_norm_sq(field: GridField) -> float:
    """``h**d * sum(values**2)``, a discrete squared L2 norm on the unit cube."""
    h = field.level.spacing
    return float(h**field.dim * np.sum(field.values**2))
