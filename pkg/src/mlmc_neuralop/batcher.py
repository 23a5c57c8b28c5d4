"""Epoch planning: per-level sample pools and batches of per-level index sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class BatchPlan:
    """One epoch of batches. ``batches[k][i]`` holds the indices used at level i+1."""

    batches: list
    epoch_seed: int

    def __len__(self) -> int:
        return len(self.batches)

    def dump(self) -> str:
        """One line per batch, ``k: [i ...] | [i ...] | ...`` (golden-file friendly)."""
        lines = []
        for k, batch in enumerate(self.batches):
            sets = " | ".join("[" + " ".join(str(int(j)) for j in s) + "]" for s in batch)
            lines.append(f"{k}: {sets}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Segment:
    """All reads at one level for one batch.

    ``plus`` marks indices of the level's own term, ``minus`` those read as the
    coarse copy for the next level's correction pair.
    """

    level: int
    indices: np.ndarray
    plus: np.ndarray
    minus: np.ndarray


def pool_assignment(n_total: int, sample_counts, epoch_seed: int) -> list[np.ndarray]:
    """Nested per-level pools: pool i is the first N_i entries of one permutation."""
    counts = [int(n) for n in sample_counts]
    if any(n > n_total for n in counts):
        raise PlanError(f"sample counts {counts} exceed the {n_total} available samples")
    if any(n < 1 for n in counts):
        raise PlanError("every level needs at least one sample")
    perm = np.random.default_rng([epoch_seed, 0]).permutation(n_total)
    return [perm[:n] for n in counts]


def plan_epoch(schedule, epoch_seed: int) -> BatchPlan:
    """Draw one epoch of batches for ``schedule``.

    K = floor(N_1 / B_1) batches partition a fresh permutation of the level-1
    pool. Deeper sets are drawn without replacement within a batch, either from
    the level's own pool (``random``) or from the set one level up (``nested``).
    """
    N = list(schedule.sample_counts)
    B = list(schedule.batch_sizes)
    for i, (n, b) in enumerate(zip(N, B)):
        if b > n:
            raise PlanError(f"batch size {b} exceeds pool size {n} at level {i + 1}")
    nested = schedule.sampling == "nested"
    if nested and any(B[i] > B[i - 1] for i in range(1, len(B))):
        raise PlanError("nested sub-sampling needs non-increasing batch sizes")
    pools = pool_assignment(schedule.n_total, N, epoch_seed)
    rng = np.random.default_rng([epoch_seed, 1])
    K = N[0] // B[0]
    first = rng.permutation(pools[0])
    batches = []
    for k in range(K):
        sets = [first[k * B[0] : (k + 1) * B[0]]]
        for i in range(1, len(B)):
            source = sets[-1] if nested else pools[i]
            sets.append(rng.choice(source, size=B[i], replace=False))
        batches.append(sets)
    return BatchPlan(batches, int(epoch_seed))


def level_segments(batch) -> list[Segment]:
    """Group a batch's reads by level, coarsest first.

    Level i reads its own set plus the set of level i+1 (the coarse copies of
    the next correction pair); shared indices are read once.
    """
    m = len(batch)
    out = []
    for i in range(m):
        own = np.asarray(batch[i])
        nxt = np.asarray(batch[i + 1]) if i + 1 < m else np.empty(0, dtype=own.dtype)
        idx = np.unique(np.concatenate([own, nxt]))
        out.append(Segment(i + 1, idx, np.isin(idx, own), np.isin(idx, nxt)))
    return out


def prefetch_layout(plan: BatchPlan, dataset=None) -> list[list[tuple[int, int]]]:
    """Per batch, the ordered ``(level, index)`` reads, each level contiguous.

    When a dataset is given, levels are checked against it.
    """
    layouts = []
    for batch in plan.batches:
        if dataset is not None and len(batch) > dataset.m:
            raise PlanError("plan has more levels than the dataset")
        reads = []
        for seg in level_segments(batch):
            reads.extend((seg.level, int(j)) for j in seg.indices)
        layouts.append(reads)
    return layouts


def resident_high_water(batch, resolutions, dim: int) -> int:
    """Peak number of field values held when levels are loaded one at a time.

    Each read loads an input and an output field; both are counted as one
    field-pair slot of ``R**dim`` values, so the bound compares against
    ``sum_i B_i R_i**dim``.
    """
    return max(len(seg.indices) * resolutions[seg.level - 1] ** dim for seg in level_segments(batch))
