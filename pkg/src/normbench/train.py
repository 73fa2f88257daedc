"""Optimization: Adam, the inverse-square-root schedule, train_step and evaluate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .norm import RegularizerConfig, rbn_penalty
from .tasks import IGNORE, batches


def inverse_sqrt_lr(step: int, base: float, warmup: int) -> float:
    """``base * min(t / warmup, sqrt(warmup / t))`` for step ``t >= 1``."""
    t = max(int(step), 1)
    if warmup <= 0:
        return base / math.sqrt(t)
    return base * min(t / warmup, math.sqrt(warmup / t))


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.98), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainState:
    model: object
    optimizer: Adam
    base_lr: float = 1e-3
    warmup: int = 100
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    step: int = 0

    @classmethod
    def create(cls, model, base_lr=1e-3, warmup=100, reg=None, betas=(0.9, 0.98), weight_decay=0.0):
        return cls(model, Adam(model.parameters(), betas=betas, weight_decay=weight_decay),
                   base_lr, warmup, reg or RegularizerConfig())

    def lr(self, step: int | None = None) -> float:
        return inverse_sqrt_lr(self.step + 1 if step is None else step, self.base_lr, self.warmup)


@dataclass
class StepLosses:
    ce: float
    penalty: float
    total: float
    lr: float


def compute_losses(model, batch, reg: RegularizerConfig):
    """(ce, penalty, total) tensors for one train-mode forward."""
    ce = model.loss(batch)
    states = model.penalized_states()
    if reg.active and states:
        penalty = rbn_penalty(states, reg)
        return ce, penalty, ce + penalty
    return ce, None, ce


def train_step(state: TrainState, batch) -> tuple:
    """One Adam update on CE + penalty. Raises NonFiniteError on divergence."""
    model = state.model
    model.set_mode("train")
    for p in state.optimizer.params.values():
        p.grad = None
    ce, penalty, total = compute_losses(model, batch, state.reg)
    lr = state.lr()
    T.backward(total)
    for st in model.penalized_states():
        st.clear_graph()
    state.optimizer.step(lr)
    state.step += 1
    for name, p in state.optimizer.params.items():
        if not np.isfinite(p.data).all():
            raise T.NonFiniteError(f"parameter {name} became non-finite at step {state.step}")
    pen = 0.0 if penalty is None else penalty.item()
    return state, StepLosses(ce.item(), pen, total.item(), lr)


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    num_targets: int


def evaluate(model, examples, mode: str = "population", batch_size: int = 64) -> EvalResult:
    """Token-weighted CE and accuracy.

    ``population``: normalize with stored population statistics.
    ``batch-stats``: each evaluation batch of ``batch_size`` examples (the
    effective batch size) is normalized with its own statistics.
    """
    if mode not in ("population", "batch-stats"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    prev = model.mode
    model.set_mode("eval" if mode == "population" else "measure")
    nll = 0.0
    correct = 0
    n = 0
    try:
        with T.no_grad():
            for batch in batches(examples, batch_size):
                logits = model(batch).data.astype(np.float64)
                valid = batch.targets != IGNORE
                z = logits - logits.max(axis=-1, keepdims=True)
                logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
                tgt = np.where(valid, batch.targets, 0)
                picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
                nll -= float(picked[valid].sum())
                correct += int((logits.argmax(axis=-1) == batch.targets)[valid].sum())
                n += int(valid.sum())
    finally:
        model.set_mode(prev)
    if n == 0:
        raise ValueError("no evaluation targets")
    return EvalResult(nll / n, correct / n, n)
