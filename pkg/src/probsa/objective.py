"""Training loss ``L = L_LL + lambda * L_KL`` and the lambda schedules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import AdjacencyGraph, Bag
from .graph_prior import dirichlet_energy, kl_gaussian_prior
from .model import MILModel, sample_attention


@dataclass(frozen=True)
class LambdaPolicy:
    kind: str = "cyclical"  # "constant" or "cyclical"
    value: float = 1.0
    cycles: int = 5
    ramp: float = 0.8
    total_steps: int | None = None  # resolved by the trainer when left unset

    def __post_init__(self):
        if self.kind == "constant":
            if not 0.0 <= self.value <= 1.0:
                raise ValueError("constant lambda must lie in [0, 1]")
        elif self.kind == "cyclical":
            if self.cycles < 1 or not 0.0 < self.ramp <= 1.0:
                raise ValueError("cyclical schedule needs cycles >= 1 and 0 < ramp <= 1")
            if self.total_steps is not None and self.total_steps // self.cycles < 1:
                raise ValueError("cycle length floor(total_steps / cycles) must be >= 1")
        else:
            raise ValueError(f"unknown lambda policy {self.kind!r}")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @classmethod
    def constant(cls, value: float, total_steps: int | None = None) -> LambdaPolicy:
        return cls("constant", value=value, total_steps=total_steps)

    @classmethod
    def cyclical(cls, total_steps: int | None = None, cycles: int = 5,
                 ramp: float = 0.8) -> LambdaPolicy:
        return cls("cyclical", cycles=cycles, ramp=ramp, total_steps=total_steps)

    @property
    def label(self) -> str:
        return "cyclical" if self.kind == "cyclical" else f"{self.value:g}"

    def with_total_steps(self, total_steps: int) -> LambdaPolicy:
        return LambdaPolicy(self.kind, self.value, self.cycles, self.ramp, total_steps)


def lambda_at(policy: LambdaPolicy, step: int) -> float:
    """Weight of the KL term at optimizer step ``step``.

    The cyclical policy splits training into ``cycles`` windows of
    ``floor(total/cycles)`` steps; within each, lambda ramps linearly from 0 to
    1 over ``floor(ramp * window)`` steps, then holds at 1. Steps past the last
    full window keep following the same modulo pattern.
    """
    if policy.total_steps is None:
        raise ValueError("lambda policy has no total_steps")
    if not 0 <= step < policy.total_steps:
        raise IndexError(f"step {step} outside [0, {policy.total_steps})")
    if policy.kind == "constant":
        return float(policy.value)
    window = policy.total_steps // policy.cycles
    ramp_len = int(np.floor(policy.ramp * window))
    if ramp_len == 0:
        return 1.0
    return min(1.0, (step % window) / ramp_len)


@dataclass
class LossBreakdown:
    total: float
    ll_term: float
    kl_term: float
    lambda_used: float

    def __add__(self, other: LossBreakdown) -> LossBreakdown:
        return LossBreakdown(self.total + other.total, self.ll_term + other.ll_term,
                             self.kl_term + other.kl_term, self.lambda_used)


def neg_log_bernoulli(logit: ad.Tensor, label: int) -> ad.Tensor:
    # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    return ad.softplus(-logit) if label == 1 else ad.softplus(logit)


def bag_loss_tensor(bag: Bag, graph: AdjacencyGraph, model: MILModel, lam: float,
                    noise: np.ndarray | None = None, pos_weight: float = 1.0):
    """Build the differentiable per-bag loss; returns (total tensor, breakdown)."""
    if graph.n != bag.n:
        raise ValueError(f"graph has {graph.n} nodes, bag {bag.id} has {bag.n} instances")
    H, post = model.posterior(bag)
    if post.sigma2 is not None:
        if noise is None:
            raise ValueError("the Gaussian posterior needs a noise vector")
        f = sample_attention(post, noise)
        kl = kl_gaussian_prior(post.mu, post.sigma2, graph)
    else:
        f = post.mu
        kl = dirichlet_energy(post.mu, graph)
    ll = neg_log_bernoulli(model.logit(H, f), bag.label)
    if bag.label == 1 and pos_weight != 1.0:
        ll = ll * pos_weight
    total = ll + kl * lam
    breakdown = LossBreakdown(float(ll.data) + lam * float(kl.data), float(ll.data),
                              float(kl.data), lam)
    return total, breakdown


def bag_loss(bag: Bag, graph: AdjacencyGraph, model: MILModel, lam: float,
             noise: np.ndarray | None = None, pos_weight: float = 1.0) -> LossBreakdown:
    _, breakdown = bag_loss_tensor(bag, graph, model, lam, noise, pos_weight)
    return breakdown


def accumulate_batch(bags: Sequence[Bag], graphs: Sequence[AdjacencyGraph], model: MILModel,
                     lam: float, noises: Sequence[np.ndarray | None] | None = None,
                     pos_weight: float = 1.0) -> LossBreakdown:
    """Sum per-bag losses and accumulate their gradients into the model parameters.

    Bags differ in size, so each is forwarded and backpropagated on its own;
    gradients add up in the parameters' ``grad`` buffers (call
    ``model.zero_grad()`` first).
    """
    if not bags:
        raise ValueError("empty batch")
    if noises is None:
        noises = [None] * len(bags)
    total = None
    for bag, graph, noise in zip(bags, graphs, noises):
        loss, part = bag_loss_tensor(bag, graph, model, lam, noise, pos_weight)
        ad.backward(loss)
        total = part if total is None else total + part
    return total


def imbalance_weight(bags: Sequence[Bag]) -> float:
    """#negative / #positive training bags (1.0 if either class is absent)."""
    pos = sum(b.label for b in bags)
    neg = len(bags) - pos
    if pos == 0 or neg == 0:
        return 1.0
    return neg / pos
