"""Checks on the estimator: gradient quality, variance decay across levels,
telescoping exactness and finite-difference gradient verification."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mlmc import level_difference_variance, mlmc_grad, mlmc_loss

ABS_SWITCH = 1e-12


@dataclass(frozen=True)
class GradientComparison:
    fine_norm: float
    coarse_norm: float
    mlmc_norm: float
    mlmc_error: float
    coarse_error: float


def gradient_comparison(model, theta, dataset, batch, schedule=None) -> GradientComparison:
    """Compare the MLMC gradient with single-level gradients over the batch's samples.

    The fine and coarse gradients use the level-1 index set (which must contain
    every deeper set) at the finest and coarsest levels of the batch.
    """
    base = np.asarray(batch[0])
    for s in batch[1:]:
        if not np.all(np.isin(s, base)):
            raise ValueError("deeper index sets must be contained in the level-1 set")
    m = len(batch)
    if schedule is not None:
        fine_pos = dataset.level_position(schedule.resolutions[-1])
        coarse_pos = dataset.level_position(schedule.resolutions[0])
    else:
        fine_pos, coarse_pos = dataset.m - 1, dataset.m - m
    g_fine = model.grad(theta, dataset.inputs[fine_pos][base], dataset.outputs[fine_pos][base])
    g_coarse = model.grad(theta, dataset.inputs[coarse_pos][base], dataset.outputs[coarse_pos][base])
    g_mlmc = mlmc_grad(model, theta, dataset, batch, schedule)
    norm = np.linalg.norm
    return GradientComparison(
        float(norm(g_fine)), float(norm(g_coarse)), float(norm(g_mlmc)),
        float(norm(g_mlmc - g_fine)), float(norm(g_coarse - g_fine)),
    )


@dataclass(frozen=True)
class VarianceProfile:
    points: list  # (level, variance)
    slope: float | None


def log2_slope(levels, values) -> float | None:
    if len(levels) < 2:
        return None
    return float(np.polyfit(np.asarray(levels, float), np.log2(values), 1)[0])


def variance_decay_profile(model, theta, dataset, n_probe: int, indices=None) -> VarianceProfile:
    """Var_i of the per-sample gradient-difference norm for levels 2..m and the
    least-squares slope of log2(Var_i) against i (``None`` with a single point)."""
    if n_probe < 2:
        raise ValueError("need at least two probes per level")
    points = [
        (i, level_difference_variance(model, theta, dataset, i, n_probe, indices))
        for i in range(2, dataset.m + 1)
    ]
    return VarianceProfile(points, log2_slope([p[0] for p in points], [p[1] for p in points]))


def telescoping_audit(model, theta, dataset, indices, m: int | None = None) -> float:
    """Relative gap between the MLMC total with ``indices`` at every level and
    the plain finest-level loss over the same samples."""
    m = dataset.m if m is None else m
    indices = np.asarray(indices)
    report = mlmc_loss(model, theta, dataset, [indices] * m)
    fine = model.sample_losses(theta, dataset.inputs[-1][indices], dataset.outputs[-1][indices])
    fine_loss = float(np.sum(fine) / len(indices))
    gap = abs(report.total - fine_loss)
    return gap / abs(fine_loss) if abs(fine_loss) >= ABS_SWITCH else gap


def relative_errors(approx, exact) -> np.ndarray:
    """Componentwise ``|approx - exact| / |exact|``, absolute where ``|exact| < 1e-12``."""
    approx, exact = np.asarray(approx), np.asarray(exact)
    denom = np.abs(exact)
    err = np.abs(approx - exact)
    return np.where(denom < ABS_SWITCH, err, err / np.where(denom < ABS_SWITCH, 1.0, denom))


def fd_gradient(model, theta, dataset, batch, epsilon: float, schedule=None) -> np.ndarray:
    """Central differences of the telescoping loss, evaluated in long double."""
    theta = np.asarray(theta, dtype=np.float64)
    fd = np.empty_like(theta)
    for n in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[n] += epsilon
        minus[n] -= epsilon
        f_plus = mlmc_loss(model, plus, dataset, batch, schedule, extended=True).total
        f_minus = mlmc_loss(model, minus, dataset, batch, schedule, extended=True).total
        step = np.longdouble(plus[n]) - np.longdouble(minus[n])
        fd[n] = float((f_plus - f_minus) / step)
    return fd


def fd_gradient_check(model, theta, dataset, batch, epsilon: float = 1e-5, schedule=None) -> float:
    """Max componentwise error between ``mlmc_grad`` and central differences."""
    if model.n_params > 5000:
        raise ValueError("finite-difference check is meant for small models")
    analytic = mlmc_grad(model, theta, dataset, batch, schedule)
    return float(np.max(relative_errors(fd_gradient(model, theta, dataset, batch, epsilon, schedule), analytic)))


def write_variance_csv(profile: VarianceProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "variance", "slope"])
        slope = "" if profile.slope is None else repr(profile.slope)
        for level, var in profile.points:
            w.writerow([level, repr(var), slope])


def write_grad_compare_csv(rows: list[GradientComparison], path) -> None:
    fields = ["batch", "fine_norm", "coarse_norm", "mlmc_norm", "mlmc_error", "coarse_error"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for k, r in enumerate(rows):
            w.writerow([k, repr(r.fine_norm), repr(r.coarse_norm), repr(r.mlmc_norm),
                        repr(r.mlmc_error), repr(r.coarse_error)])
