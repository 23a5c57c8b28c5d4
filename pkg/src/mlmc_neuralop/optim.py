"""Training loop: per-epoch batch plans, MLMC gradients and optimizer updates."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .batcher import plan_epoch
from .mlmc import LevelSchedule, mlmc_loss_and_grad

log = logging.getLogger(__name__)

TEST_FRACTION = 0.2


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class OptimizerState:
    config: OptimizerConfig
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def fresh(cls, config: OptimizerConfig, n_params: int) -> OptimizerState:
        if config.kind == "adam":
            return cls(config, 0, np.zeros(n_params), np.zeros(n_params))
        return cls(config, 0)


def optimizer_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState):
    """Return ``(new_params, new_state)``; inputs are left untouched."""
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    cfg = state.config
    t = state.step_count + 1
    if cfg.kind == "sgd":
        return params - cfg.lr * grad, replace(state, step_count=t)
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, replace(state, step_count=t, m=m, v=v)


def train_test_split(n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """The last 20% of indices (at least one when n >= 2) form the test split."""
    n_test = 0 if n_samples < 2 else max(1, int(round(TEST_FRACTION * n_samples)))
    n_train = n_samples - n_test
    return np.arange(n_train), np.arange(n_train, n_samples)


def evaluate(model, theta, dataset, indices, level: int | None = None, chunk: int = 64) -> float:
    """Mean loss over ``indices`` at dataset level position ``level`` (default finest)."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("cannot evaluate on an empty split")
    pos = dataset.m - 1 if level is None else level
    total = 0.0
    for start in range(0, indices.size, chunk):
        idx = indices[start : start + chunk]
        total += float(np.sum(model.sample_losses(theta, dataset.inputs[pos][idx], dataset.outputs[pos][idx])))
    return total / indices.size


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1, np.uint64)[0])


@dataclass
class EpochRecord:
    epoch: int
    wall_s: float
    mlmc_total: float
    coarse_term: float
    pair_terms: list
    test_loss: float
    steps: int


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    initial_test_loss: float = math.nan
    params: np.ndarray | None = None
    state: OptimizerState | None = None
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None

    @property
    def final_test_loss(self) -> float:
        return self.epochs[-1].test_loss if self.epochs else self.initial_test_loss

    def epoch_time(self) -> float:
        """Median epoch wall time, dropping the first (warm-up) epoch when possible."""
        times = [e.wall_s for e in self.epochs]
        if not times:
            return math.nan
        return float(np.median(times[1:] if len(times) > 1 else times))

    def to_csv(self, path) -> None:
        n_pairs = max((len(e.pair_terms) for e in self.epochs), default=0)
        header = ["epoch", "wall_s", "mlmc_total", "coarse_term"]
        header += [f"pair_term_{i + 2}" for i in range(n_pairs)] + ["test_loss"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.wall_s), repr(e.mlmc_total), repr(e.coarse_term),
                            *map(repr, e.pair_terms), repr(e.test_loss)])


def train(model, dataset, schedule: LevelSchedule, optimizer: OptimizerConfig,
          n_epochs: int, seed: int, params=None, state: OptimizerState | None = None,
          train_indices=None, test_indices=None, workers: int = 1,
          start_epoch: int = 0) -> TrainReport:
    """Mini-batch MLMC training, one optimizer step per batch.

    Pool indices ``0..schedule.n_total-1`` are mapped onto ``train_indices``
    (default: the train split). The test split is evaluated at the finest
    dataset level after every epoch.
    """
    default_train, default_test = train_test_split(dataset.n_samples)
    train_idx = default_train if train_indices is None else np.asarray(train_indices)
    test_idx = default_test if test_indices is None else np.asarray(test_indices)
    if np.intersect1d(train_idx, test_idx).size:
        raise ValueError("train and test splits overlap")
    if schedule.n_total > train_idx.size:
        raise ValueError(f"schedule expects {schedule.n_total} samples, train split has {train_idx.size}")
    theta = model.init_params(seed) if params is None else np.array(params, dtype=np.float64)
    state = OptimizerState.fresh(optimizer, model.n_params) if state is None else state
    has_test = test_idx.size > 0
    report = TrainReport(
        initial_test_loss=evaluate(model, theta, dataset, test_idx) if has_test else math.nan,
        config={"schedule": schedule.to_dict(), "optimizer": asdict(optimizer), "seed": seed},
    )
    for epoch in range(start_epoch + 1, start_epoch + n_epochs + 1):
        t0 = time.perf_counter()
        plan = plan_epoch(schedule, epoch_seed(seed, epoch))
        totals, coarse, pairs = [], [], []
        for batch in plan.batches:
            mapped = [train_idx[np.asarray(s)] for s in batch]
            rep, g = mlmc_loss_and_grad(model, theta, dataset, mapped, schedule, workers=workers)
            if not math.isfinite(rep.total):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
            theta, state = optimizer_step(theta, g, state)
            totals.append(rep.total)
            coarse.append(rep.coarse_term)
            pairs.append(rep.pair_terms)
        wall = time.perf_counter() - t0
        test_loss = evaluate(model, theta, dataset, test_idx) if has_test else math.nan
        if has_test and not math.isfinite(test_loss):
            raise NonFiniteError(f"non-finite test loss at epoch {epoch}")
        pair_means = np.mean(np.array(pairs), axis=0).tolist() if pairs and pairs[0] else []
        report.epochs.append(EpochRecord(
            epoch, wall, float(np.mean(totals)), float(np.mean(coarse)), pair_means, test_loss, len(plan),
        ))
        log.debug("epoch %d: mlmc %.4e test %.4e (%.2fs)", epoch, report.epochs[-1].mlmc_total, test_loss, wall)
    report.params = theta
    report.state = state
    return report
