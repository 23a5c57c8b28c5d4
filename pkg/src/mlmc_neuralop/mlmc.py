"""Sample/batch allocation across levels and the telescoping MLMC estimator.

For a batch ``[S_1, ..., S_m]`` the estimated loss is::

    mean_{j in S_1} X^1_j + sum_{i=2..m} mean_{j in S_i} (X^i_j - X^{i-1}_j)

where ``X^i_j`` is the model loss on the level-i copy of sample j. Its gradient
is an unbiased estimate of the finest-level gradient.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .batcher import level_segments
from .multires import ResolutionLevel

ALLOCATIONS = ("geometric", "prescribed", "optimal")
SAMPLINGS = ("random", "nested")


class ScheduleError(ValueError):
    pass


def _split_counts(n_total: int, m: int, ratio: float) -> list[int]:
    weights = [ratio ** (m - 1 - i) for i in range(m)]
    n_m = math.floor(n_total / sum(weights))
    counts = [math.floor(w * n_m) for w in weights]
    counts[0] += n_total - sum(counts)
    return counts


def allocate_samples(strategy: str, n_total: int, m: int, delta: float = 2.0,
                     k: float = 1.0, d: int = 2, prescribed=None) -> list[int]:
    """Per-level sample counts N_1 >= ... >= N_m, coarsest first.

    ``geometric`` uses ratio ``delta`` between adjacent levels, ``optimal`` the
    ratio ``2**((2k + d) / 2)``. Both floor every level and add the remainder to
    N_1 so the counts sum to ``n_total``.
    """
    if m < 1:
        raise ScheduleError("need at least one level")
    if strategy == "prescribed":
        counts = [int(n) for n in prescribed]
        if len(counts) != m:
            raise ScheduleError(f"prescribed {len(counts)} counts for {m} levels")
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise ScheduleError("prescribed counts must be non-increasing")
        if sum(counts) != n_total:
            raise ScheduleError(f"prescribed counts sum to {sum(counts)}, not {n_total}")
        return counts
    if n_total < m:
        raise ScheduleError(f"n_total={n_total} smaller than m={m}")
    if strategy == "geometric":
        if delta < 1:
            raise ScheduleError(f"delta must be >= 1, got {delta}")
        ratio = delta
    elif strategy == "optimal":
        if k < 1 or d < 1:
            raise ScheduleError("optimal allocation needs k >= 1 and d >= 1")
        ratio = 2.0 ** ((2 * k + d) / 2)
    else:
        raise ScheduleError(f"unknown allocation strategy {strategy!r}")
    counts = _split_counts(n_total, m, ratio)
    if counts[-1] < 1:
        raise ScheduleError(f"{n_total} samples leave the finest level empty")
    return counts


def batch_sizes(b_m: int, delta: float, m: int) -> list[int]:
    """``B_i = round(delta**(m - i) * b_m)`` (round half to even), coarsest first."""
    if b_m < 1 or delta < 1:
        raise ScheduleError("need b_m >= 1 and delta >= 1")
    return [int(round(delta ** (m - 1 - i) * b_m)) for i in range(m)]


@dataclass(frozen=True)
class LevelSchedule:
    levels: list[ResolutionLevel]
    sample_counts: list[int]
    batch_sizes: list[int]
    n_total: int
    allocation: str = "geometric"
    sampling: str = "random"
    delta: float = 2.0
    k: float = 1.0
    d: int = 2

    def __post_init__(self):
        m = len(self.levels)
        N, B = list(self.sample_counts), list(self.batch_sizes)
        if len(N) != m or len(B) != m:
            raise ScheduleError("one sample count and batch size per level")
        if self.allocation not in ALLOCATIONS:
            raise ScheduleError(f"unknown allocation {self.allocation!r}")
        if self.sampling not in SAMPLINGS:
            raise ScheduleError(f"unknown sampling strategy {self.sampling!r}")
        if self.delta < 1:
            raise ScheduleError("delta must be >= 1")
        if any(a < b for a, b in zip(N, N[1:])) or any(a < b for a, b in zip(B, B[1:])):
            raise ScheduleError("sample counts and batch sizes must be non-increasing")
        if any(b > n for b, n in zip(B, N)) or min(B) < 1:
            raise ScheduleError(f"batch sizes {B} incompatible with sample counts {N}")
        if sum(N) > self.n_total + m:
            raise ScheduleError(f"sample counts {N} exceed n_total={self.n_total}")
        if max(N) > self.n_total:
            raise ScheduleError("a level uses more samples than exist")

    @property
    def m(self) -> int:
        return len(self.levels)

    @property
    def resolutions(self) -> list[int]:
        return [lvl.points_per_side for lvl in self.levels]

    def to_dict(self) -> dict:
        return {
            "resolutions": self.resolutions,
            "sample_counts": list(self.sample_counts),
            "batch_sizes": list(self.batch_sizes),
            "n_total": self.n_total,
            "allocation": self.allocation,
            "sampling": self.sampling,
            "delta": self.delta,
            "k": self.k,
            "d": self.d,
        }


def make_schedule(levels, n_total: int, delta: float, b_m: int, allocation="geometric",
                  sampling="random", k=1.0, d=2, prescribed=None) -> LevelSchedule:
    m = len(levels)
    N = allocate_samples(allocation, n_total, m, delta, k, d, prescribed)
    B = [min(b, n) for b, n in zip(batch_sizes(b_m, delta, m), N)]
    return LevelSchedule(list(levels), N, B, n_total, allocation, sampling, delta, k, d)


@dataclass(frozen=True)
class MlmcLossReport:
    total: float
    coarse_term: float
    pair_terms: list = field(default_factory=list)

    def reconstruct(self) -> float:
        return self.coarse_term + sum(self.pair_terms)


def _dataset_positions(dataset, m: int, schedule: LevelSchedule | None) -> list[int]:
    if schedule is not None:
        if schedule.m != m:
            raise ValueError(f"batch has {m} levels, schedule {schedule.m}")
        return [dataset.level_position(R) for R in schedule.resolutions]
    if m > dataset.m:
        raise ValueError(f"batch has {m} levels, dataset only {dataset.m}")
    return list(range(dataset.m - m, dataset.m))


def _check_batch(batch, dataset):
    for s in batch:
        s = np.asarray(s)
        if s.size == 0:
            raise ValueError("empty index set in batch")
        if s.min() < 0 or s.max() >= dataset.n_samples:
            raise IndexError(f"index out of range for {dataset.n_samples} samples")


def _evaluate(model, theta, dataset, batch, schedule, need_grad, extended=False, workers=1):
    m = len(batch)
    _check_batch(batch, dataset)
    positions = _dataset_positions(dataset, m, schedule)
    sizes = [len(s) for s in batch]
    segments = level_segments(batch)

    def run(seg):
        pos = positions[seg.level - 1]
        a = dataset.inputs[pos][seg.indices]
        u = dataset.outputs[pos][seg.indices]
        i = seg.level - 1
        w = seg.plus / sizes[i]
        if i + 1 < m:
            w = w - seg.minus / sizes[i + 1]
        if need_grad:
            losses, g = model.weighted_loss_grad(theta, a, u, w)
        else:
            losses, g = model.sample_losses(theta, a, u, extended=extended), None
        # seg.indices is sorted, so positions follow from a search
        own = losses[np.searchsorted(seg.indices, batch[i])]
        nxt = losses[np.searchsorted(seg.indices, batch[i + 1])] if i + 1 < m else None
        return own, nxt, g

    if workers > 1 and m > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, segments))
    else:
        results = [run(seg) for seg in segments]

    # fixed reduction order: coarse term, then pairs by level, samples by batch order
    scalar = (lambda x: x) if extended else float
    coarse = scalar(np.sum(results[0][0]) / sizes[0])
    pairs = []
    for i in range(1, m):
        fine_mean = np.sum(results[i][0]) / sizes[i]
        coarse_mean = np.sum(results[i - 1][1]) / sizes[i]
        pairs.append(scalar(fine_mean - coarse_mean))
    total = coarse
    for p in pairs:
        total += p
    report = MlmcLossReport(total, coarse, pairs)
    if not need_grad:
        return report, None
    grad = results[0][2].copy()
    for r in results[1:]:
        grad += r[2]
    return report, grad


def mlmc_loss(model, theta, dataset, batch, schedule=None, extended=False) -> MlmcLossReport:
    """Telescoping loss of one batch (list of per-level index sets, coarsest first).

    Levels map to the dataset through ``schedule``; without one, the finest
    ``len(batch)`` dataset levels are used.
    """
    return _evaluate(model, theta, dataset, batch, schedule, False, extended)[0]


def mlmc_loss_and_grad(model, theta, dataset, batch, schedule=None, workers=1):
    return _evaluate(model, theta, dataset, batch, schedule, True, workers=workers)


def mlmc_grad(model, theta, dataset, batch, schedule=None, workers=1) -> np.ndarray:
    return _evaluate(model, theta, dataset, batch, schedule, True, workers=workers)[1]


def per_sample_grad_differences(model, theta, dataset, i: int, indices) -> np.ndarray:
    """Rows ``grad X^i(a_j) - grad X^{i-1}(a_j)`` for each j; ``i`` is 1-based."""
    rows = []
    for j in indices:
        g_fine = model.grad(theta, dataset.inputs[i - 1][j : j + 1], dataset.outputs[i - 1][j : j + 1])
        g_coarse = model.grad(theta, dataset.inputs[i - 2][j : j + 1], dataset.outputs[i - 2][j : j + 1])
        rows.append(g_fine - g_coarse)
    return np.array(rows)


def level_difference_variance(model, theta, dataset, i: int, n_probe: int, indices=None) -> float:
    """Unbiased variance over probe samples of ``||grad X^i - grad X^{i-1}||_2``.

    ``i`` is the 1-based dataset level (2 <= i <= m).
    """
    if not 2 <= i <= dataset.m:
        raise ValueError(f"level {i} outside 2..{dataset.m}")
    if n_probe < 2:
        raise ValueError("need at least two probe samples for a variance")
    if indices is None:
        if n_probe > dataset.n_samples:
            raise ValueError(f"only {dataset.n_samples} samples available")
        indices = np.arange(n_probe)
    indices = np.asarray(indices)[:n_probe]
    if len(indices) < n_probe:
        raise ValueError("not enough probe indices")
    norms = np.linalg.norm(per_sample_grad_differences(model, theta, dataset, i, indices), axis=1)
    return float(np.var(norms, ddof=1))
