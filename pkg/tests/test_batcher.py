from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlmc_neuralop.batcher import (
    PlanError,
    level_segments,
    plan_epoch,
    pool_assignment,
    prefetch_layout,
    resident_high_water,
)


def sched(N, B, n_total=None, sampling="random"):
    return SimpleNamespace(sample_counts=N, batch_sizes=B, n_total=n_total or N[0], sampling=sampling)


def test_nested_example():
    plan = plan_epoch(sched([8, 4, 2], [4, 2, 1], sampling="nested"), 3)
    assert len(plan) == 2
    for s1, s2, s3 in plan.batches:
        assert len(s1) == 4 and len(s2) == 2 and len(s3) == 1
        assert set(s3) <= set(s2) <= set(s1)


def test_full_size_nesting_is_identity():
    plan = plan_epoch(sched([8, 8], [4, 4], sampling="nested"), 0)
    for s1, s2 in plan.batches:
        assert set(s1) == set(s2)


def test_determinism_and_seed_sensitivity():
    s = sched([12, 6, 3], [4, 2, 1], n_total=12)
    assert plan_epoch(s, 5).dump() == plan_epoch(s, 5).dump()
    firsts = {tuple(np.concatenate([b[0] for b in plan_epoch(s, seed).batches])) for seed in range(100)}
    assert len(firsts) == 100


def test_plan_errors():
    with pytest.raises(PlanError):
        plan_epoch(sched([4, 2], [2, 3]), 0)
    with pytest.raises(PlanError):
        plan_epoch(sched([8, 8], [2, 4], sampling="nested"), 0)
    with pytest.raises(PlanError):
        pool_assignment(4, [5], 0)


@given(
    n_total=st.integers(2, 40),
    data=st.data(),
    nested=st.booleans(),
    seed=st.integers(0, 2**63 - 1),
)
def test_plan_invariants(n_total, data, nested, seed):
    m = data.draw(st.integers(1, 4))
    N = sorted(data.draw(st.lists(st.integers(1, n_total), min_size=m, max_size=m)), reverse=True)
    B = [data.draw(st.integers(1, n)) for n in N]
    if nested:
        B = sorted(B, reverse=True)
        B = [min(b, n) for b, n in zip(B, N)]
    plan = plan_epoch(sched(N, B, n_total, "nested" if nested else "random"), seed)
    pools = pool_assignment(n_total, N, seed)
    assert len(plan) == N[0] // B[0]
    level1 = np.concatenate([b[0] for b in plan.batches]) if len(plan) else np.array([], int)
    assert len(set(level1.tolist())) == len(level1) == len(plan) * B[0]
    assert set(level1.tolist()) <= set(pools[0].tolist())
    for batch in plan.batches:
        for i, s in enumerate(batch):
            assert len(s) == B[i] == len(set(s.tolist()))
            if not nested:
                assert set(s.tolist()) <= set(pools[i].tolist())
            elif i:
                assert set(s.tolist()) <= set(batch[i - 1].tolist())


@given(st.integers(1, 50), st.data(), st.integers(0, 2**32))
def test_pools_are_nested_prefixes(n_total, data, seed):
    N = sorted(data.draw(st.lists(st.integers(1, n_total), min_size=1, max_size=4)), reverse=True)
    pools = pool_assignment(n_total, N, seed)
    for i, pool in enumerate(pools):
        assert len(pool) == N[i] == len(set(pool.tolist()))
        if i:
            assert np.array_equal(pool, pools[i - 1][: N[i]])


def test_full_pools():
    pools = pool_assignment(6, [6, 6], 1)
    assert all(sorted(p.tolist()) == list(range(6)) for p in pools)


def test_level_m_pool_frequency():
    n_total, N_m, epochs = 10, 3, 10_000
    counts = np.zeros(n_total)
    for e in range(epochs):
        counts[pool_assignment(n_total, [10, 6, N_m], e)[-1]] += 1
    p = N_m / n_total
    se = np.sqrt(p * (1 - p) / epochs)
    assert np.all(np.abs(counts / epochs - p) < 3 * se)


def test_dump_format():
    plan = plan_epoch(sched([4, 2], [2, 1], n_total=4), 0)
    lines = plan.dump().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("0: [") and " | [" in lines[0]


def test_segments_cover_reads():
    batch = [np.array([5, 1, 3, 7]), np.array([3, 9]), np.array([2])]
    segs = level_segments(batch)
    assert [s.level for s in segs] == [1, 2, 3]
    assert segs[0].indices.tolist() == [1, 3, 5, 7, 9]
    assert segs[0].plus.tolist() == [True, True, True, True, False]
    assert segs[0].minus.tolist() == [False, True, False, False, True]
    assert segs[2].indices.tolist() == [2] and not segs[2].minus.any()


def test_prefetch_single_level():
    plan = plan_epoch(sched([6], [3]), 2)
    layout = prefetch_layout(plan)
    for batch, reads in zip(plan.batches, layout):
        assert [j for _, j in reads] == sorted(batch[0].tolist())
        assert all(level == 1 for level, _ in reads)


def test_prefetch_read_count_by_enumeration():
    plan = plan_epoch(sched([16, 8, 4], [8, 4, 2], n_total=16, sampling="nested"), 4)
    for batch, reads in zip(plan.batches, prefetch_layout(plan)):
        expected = 0
        for i in range(3):
            wanted = set(batch[i].tolist()) | (set(batch[i + 1].tolist()) if i < 2 else set())
            expected += len(wanted)
        # nested: level i reads its own set (which contains the next) once
        assert expected == 8 + 4 + 2
        assert len(reads) == expected
        levels = [lvl for lvl, _ in reads]
        assert levels == sorted(levels)


def test_memory_bound_random_plans():
    R = [17, 33, 65]
    rng = np.random.default_rng(0)
    for k in range(50):
        B = [int(rng.integers(4, 9)), int(rng.integers(2, 5)), int(rng.integers(1, 3))]
        plan = plan_epoch(sched([40, 20, 10], B, n_total=40, sampling="random" if k % 2 else "nested"), k)
        bound = sum(b * r**2 for b, r in zip(B, R))
        for batch in plan.batches:
            assert resident_high_water(batch, R, 2) <= bound
