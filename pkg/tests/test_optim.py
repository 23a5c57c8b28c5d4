import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlmc_neuralop.batcher import plan_epoch
from mlmc_neuralop.mlmc import make_schedule
from mlmc_neuralop.optim import (
    NonFiniteError,
    OptimizerConfig,
    OptimizerState,
    epoch_seed,
    evaluate,
    optimizer_step,
    train,
    train_test_split,
)


def test_sgd_example():
    state = OptimizerState.fresh(OptimizerConfig("sgd", lr=0.1), 2)
    new, st2 = optimizer_step(np.array([1.0, 1.0]), np.array([1.0, -1.0]), state)
    np.testing.assert_allclose(new, [0.9, 1.1], rtol=1e-15)
    assert st2.step_count == 1 and state.step_count == 0


@given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=8), st.floats(1e-4, 1e-1))
def test_adam_first_step_magnitude(g, lr):
    g = np.array(g)
    state = OptimizerState.fresh(OptimizerConfig(lr=lr), g.size)
    theta = np.zeros(g.size)
    new, _ = optimizer_step(theta, g, state)
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new, -lr * np.sign(g), rtol=1e-5)


def test_zero_gradient():
    theta = np.array([0.3, -2.0])
    for kind in ("sgd", "adam"):
        new, _ = optimizer_step(theta, np.zeros(2), OptimizerState.fresh(OptimizerConfig(kind), 2))
        assert np.array_equal(new, theta)


def test_step_errors():
    state = OptimizerState.fresh(OptimizerConfig(), 2)
    with pytest.raises(ValueError):
        optimizer_step(np.zeros(2), np.zeros(3), state)
    with pytest.raises(NonFiniteError):
        optimizer_step(np.zeros(2), np.array([np.nan, 0.0]), state)
    with pytest.raises(ValueError):
        OptimizerConfig(kind="lbfgs")


def test_adam_matches_reference_recursion(rng):
    cfg = OptimizerConfig(lr=0.01)
    theta = rng.standard_normal(4)
    state = OptimizerState.fresh(cfg, 4)
    m = v = np.zeros(4)
    ref = theta.copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        theta, state = optimizer_step(theta, g, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g**2
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(theta, ref, rtol=1e-13)
    assert state.step_count == 5


@pytest.mark.parametrize("n, n_test", [(1, 0), (2, 1), (10, 2), (1024, 205)])
def test_split(n, n_test):
    tr, te = train_test_split(n)
    assert te.size == n_test and tr.size + te.size == n
    assert np.intersect1d(tr, te).size == 0
    if n_test:
        assert te[-1] == n - 1 and tr.max() < te.min()


def test_evaluate_examples(darcy_small, tiny2d, rng):
    theta = tiny2d.init_params(0)
    idx = np.array([3, 1, 8, 5])
    mean = evaluate(tiny2d, theta, darcy_small, idx)
    permuted = evaluate(tiny2d, theta, darcy_small, rng.permutation(idx), chunk=3)
    assert abs(mean - permuted) < 1e-12 * mean
    single = evaluate(tiny2d, theta, darcy_small, [5], level=1)
    assert single == tiny2d.loss(theta, darcy_small.inputs[1][5], darcy_small.outputs[1][5])
    with pytest.raises(ValueError):
        evaluate(tiny2d, theta, darcy_small, [])


def test_evaluate_exact_fit_is_zero(tiny1d, line_data):
    from mlmc_neuralop.datagen import MultiResDataset

    theta = tiny1d.init_params(0)
    fitted = MultiResDataset(line_data.hierarchy, list(line_data.inputs),
                             [tiny1d.forward(theta, x) for x in line_data.inputs])
    assert evaluate(tiny1d, theta, fitted, np.arange(5)) == 0.0


def sched_for(ds, m, n_total, delta=2.0, b_m=1, sampling="random"):
    return make_schedule(ds.hierarchy[ds.m - m :], n_total, delta, b_m, sampling=sampling)


def test_zero_epochs(darcy_small, tiny2d):
    rep = train(tiny2d, darcy_small, sched_for(darcy_small, 2, 8), OptimizerConfig(), 0, seed=1)
    assert rep.epochs == [] and math.isfinite(rep.initial_test_loss)
    assert rep.final_test_loss == rep.initial_test_loss
    np.testing.assert_array_equal(rep.params, tiny2d.init_params(1))


def test_one_step_per_batch(darcy_small, tiny2d):
    s = sched_for(darcy_small, 3, 9, b_m=1)
    rep = train(tiny2d, darcy_small, s, OptimizerConfig(), 2, seed=0)
    K = [len(plan_epoch(s, epoch_seed(0, e))) for e in (1, 2)]
    assert [e.steps for e in rep.epochs] == K
    assert rep.state.step_count == sum(K)
    assert all(len(e.pair_terms) == 2 for e in rep.epochs)


def test_training_reproducible(darcy_small, tiny2d):
    s = sched_for(darcy_small, 2, 9)
    a = train(tiny2d, darcy_small, s, OptimizerConfig(), 2, seed=4)
    b = train(tiny2d, darcy_small, s, OptimizerConfig(), 2, seed=4)
    assert [e.mlmc_total for e in a.epochs] == [e.mlmc_total for e in b.epochs]
    assert [e.test_loss for e in a.epochs] == [e.test_loss for e in b.epochs]
    assert np.array_equal(a.params, b.params)


def test_resume_continues_steps(darcy_small, tiny2d):
    s = sched_for(darcy_small, 2, 9)
    full = train(tiny2d, darcy_small, s, OptimizerConfig(), 3, seed=2)
    head = train(tiny2d, darcy_small, s, OptimizerConfig(), 2, seed=2)
    tail = train(tiny2d, darcy_small, s, OptimizerConfig(), 1, seed=2, params=head.params,
                 state=head.state, start_epoch=2)
    assert tail.state.step_count > head.state.step_count
    assert tail.epochs[0].epoch == 3
    np.testing.assert_array_equal(tail.params, full.params)


def test_train_split_guards(darcy_small, tiny2d):
    with pytest.raises(ValueError):
        train(tiny2d, darcy_small, sched_for(darcy_small, 2, 12), OptimizerConfig(), 1, 0)
    with pytest.raises(ValueError):
        train(tiny2d, darcy_small, sched_for(darcy_small, 2, 6), OptimizerConfig(), 1, 0,
              train_indices=np.arange(8), test_indices=np.arange(7, 12))


def test_nonfinite_aborts(darcy_small, tiny2d):
    theta = tiny2d.init_params(0) * 1e200
    with pytest.raises(FloatingPointError):
        with np.errstate(all="ignore"):
            train(tiny2d, darcy_small, sched_for(darcy_small, 2, 9), OptimizerConfig(), 1, 0, params=theta)


def test_descent_on_smooth_1d(line_data, tiny1d):
    s = sched_for(line_data, 2, 19, delta=2.0, b_m=2)
    rep = train(tiny1d, line_data, s, OptimizerConfig(lr=3e-3), 50, seed=0)
    assert rep.epochs[-1].mlmc_total < rep.epochs[0].mlmc_total
    assert rep.final_test_loss < rep.initial_test_loss


def test_report_csv(tmp_path, darcy_small, tiny2d):
    rep = train(tiny2d, darcy_small, sched_for(darcy_small, 3, 9), OptimizerConfig(), 2, seed=0)
    path = tmp_path / "train.csv"
    rep.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,wall_s,mlmc_total,coarse_term,pair_term_2,pair_term_3,test_loss"
    assert len(lines) == 3
    row = [float(x) for x in lines[1].split(",")]
    assert row[2] == pytest.approx(row[3] + row[4] + row[5], abs=1e-12)
    assert rep.epoch_time() == rep.epochs[1].wall_s


def test_epoch_seed_distinct():
    seeds = {epoch_seed(0, e) for e in range(1000)} | {epoch_seed(1, e) for e in range(1000)}
    assert len(seeds) == 2000
