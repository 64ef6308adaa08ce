"""Adam with linear warm-up, epoch loop and validation-AUROC model selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import AdjacencyGraph, Bag
from .metrics import evaluate
from .model import MILModel
from .objective import LambdaPolicy, accumulate_batch, imbalance_weight, lambda_at

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    warmup_start_factor: float = 0.1
    warmup_total_iters: int = 10
    batch_size: int = 8
    S_predict: int = 16
    train_samples: int = 1
    eval_seed: int = 12345
    threshold: float = 0.5
    pos_weight: float | str | None = "auto"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.warmup_start_factor <= 1.0:
            raise ValueError("warmup start factor must lie in (0, 1]")
        if self.warmup_total_iters < 0:
            raise ValueError("warmup_total_iters must be >= 0")
        if self.batch_size < 1 or self.S_predict < 1 or self.train_samples < 1:
            raise ValueError("batch_size, S_predict and train_samples must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear warm-up from ``start_factor * base_lr`` to ``base_lr`` over ``total_iters`` epochs."""
    if not 0 <= epoch < config.epochs:
        raise IndexError(f"epoch {epoch} outside [0, {config.epochs})")
    T = config.warmup_total_iters
    sf = config.warmup_start_factor
    if T == 0:
        return config.base_lr
    return config.base_lr * (sf + (1.0 - sf) * min(epoch, T) / T)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        with np.errstate(over="ignore", invalid="ignore"):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
            raise ad.NumericError(f"non-finite Adam update for {name}")
        p.data = new


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_auroc: float
    val_f1: float
    selected: bool = False


@dataclass
class FitResult:
    best_epoch: int
    best_state: dict[str, np.ndarray]
    history: list[EpochRecord]
    steps: list[tuple[int, float, float, float, float]]

    @property
    def best_val_auroc(self) -> float:
        return self.history[self.best_epoch].val_auroc


def select_best(aurocs: Sequence[float]) -> int:
    """Index of the highest value; the earliest wins ties."""
    return int(np.argmax(np.asarray(aurocs)))


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def _train_epoch(train, train_graphs, model, config, policy, rng, adam, lr, step, pos_weight, steps):
    order = rng.permutation(len(train))
    epoch_loss = 0.0
    k = config.train_samples
    for lo in range(0, len(order), config.batch_size):
        idx = order[lo:lo + config.batch_size]
        lam = lambda_at(policy, step)
        model.zero_grad()
        batch = [train[i] for i in idx]
        graphs = [train_graphs[i] for i in idx]
        parts = None
        for _ in range(k):
            noises = [rng.standard_normal(b.n) if model.variant.gaussian else None for b in batch]
            part = accumulate_batch(batch, graphs, model, lam, noises, pos_weight)
            parts = part if parts is None else parts + part
        grads = {name: p.grad / k for name, p in model.params.items()}
        adam_step(model.params, grads, adam, lr)
        steps.append((step, lam, parts.ll_term / k, parts.kl_term / k, parts.total / k))
        epoch_loss += parts.total / k
        step += 1
    return epoch_loss, step


def fit(train: Sequence[Bag], train_graphs: Sequence[AdjacencyGraph], val: Sequence[Bag],
        model: MILModel, config: TrainConfig, policy: LambdaPolicy, seed: int = 0) -> FitResult:
    """Train ``model`` in place and return the checkpoint with the best validation AUROC.

    ``policy.total_steps`` is replaced by the actual number of optimizer steps.
    """
    if not train or not val:
        raise ValueError("train and validation splits must be non-empty")
    if len(train_graphs) != len(train):
        raise ValueError("one graph per training bag is required")
    rng = np.random.default_rng(seed)
    spe = steps_per_epoch(len(train), config.batch_size)
    policy = policy.with_total_steps(config.epochs * spe)
    if config.pos_weight == "auto":
        pos_weight = imbalance_weight(train)
    else:
        pos_weight = 1.0 if config.pos_weight is None else float(config.pos_weight)
    adam = AdamState()
    history: list[EpochRecord] = []
    steps = []
    best_state, best_auroc = None, -np.inf
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        try:
            epoch_loss, step = _train_epoch(train, train_graphs, model, config, policy, rng,
                                            adam, lr, step, pos_weight, steps)
            report = evaluate(model, val, config.S_predict, config.eval_seed, config.threshold)
        except (ad.NumericError, OSError) as exc:
            raise type(exc)(f"epoch {epoch}: {exc}") from exc
        history.append(EpochRecord(epoch, lr, epoch_loss / len(train), report.auroc, report.f1))
        if report.auroc > best_auroc:
            best_auroc = report.auroc
            best_state = model.state()
        log.debug("epoch %d lr=%.2e loss=%.4f val_auroc=%.4f", epoch, lr,
                  epoch_loss / len(train), report.auroc)
    best = select_best([h.val_auroc for h in history])
    history[best].selected = True
    return FitResult(best, best_state, history, steps)


HISTORY_FIELDS = ["epoch", "lr", "train_loss", "val_auroc", "val_f1", "selected"]
STEP_FIELDS = ["step", "lambda", "ll", "kl", "total"]


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for h in history:
            w.writerow([h.epoch, repr(h.lr), repr(h.train_loss), repr(h.val_auroc),
                        repr(h.val_f1), int(h.selected)])


def write_steps(path, steps) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_FIELDS)
        for s, lam, ll, kl, total in steps:
            w.writerow([s, repr(lam), repr(ll), repr(kl), repr(total)])
