"""Batch normalization, layer normalization, batch renormalization and the
regularized-BN penalty.

All statistics are biased (divide by the number of valid positions). BN-type
layers normalize each feature over every valid token of the batch, pooling
the batch and time axes; padded positions are excluded from the statistics
and produce zero output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_EPS = 1e-5
DEFAULT_ALPHA = 0.1


@dataclass
class MaskedBatch:
    """Token features ``(B, T, d)`` plus a ``(B, T)`` validity mask."""

    features: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = T.as_tensor(self.features)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.ndim != 3 or self.mask.shape != self.features.shape[:2]:
            raise ValueError(f"features {self.features.shape} and mask {self.mask.shape} disagree")
        if not self.mask.any(axis=1).all():
            raise ValueError("every sequence needs at least one valid position")

    @classmethod
    def dense(cls, x, dtype=None) -> "MaskedBatch":
        """Wrap a ``(N, d)`` or ``(B, T, d)`` array with every position valid."""
        x = T.as_tensor(x, dtype=dtype)
        if x.ndim == 2:
            x = x.reshape(x.shape[0], 1, x.shape[1])
        return cls(x, np.ones(x.shape[:2], dtype=bool))


@dataclass
class NormState:
    """Running (population) and last-batch statistics of one BN-type layer."""

    num_features: int
    alpha: float = DEFAULT_ALPHA
    eps: float = DEFAULT_EPS
    dtype: type = np.float32
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    update_count: int = 0
    loaded: bool = False
    last_batch_mean: np.ndarray | None = None
    last_batch_var: np.ndarray | None = None
    # graph-attached batch statistics of the latest train-mode forward
    batch_mean: Tensor | None = field(default=None, repr=False)
    batch_var: Tensor | None = field(default=None, repr=False)
    # running statistics the latest train-mode batch was compared against
    ref_mean: np.ndarray | Tensor | None = field(default=None, repr=False)
    ref_var: np.ndarray | Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"EMA factor must lie in (0, 1], got {self.alpha}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features, dtype=self.dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features, dtype=self.dtype)

    @property
    def initialized(self) -> bool:
        return self.update_count >= 1 or self.loaded

    def load(self, mean, var) -> None:
        """Install population statistics explicitly (e.g. from an exact-average pass)."""
        self.running_mean = np.asarray(mean, dtype=self.dtype).copy()
        self.running_var = np.asarray(var, dtype=self.dtype).copy()
        self.loaded = True

    def clear_graph(self) -> None:
        self.batch_mean = self.batch_var = None


@dataclass(frozen=True)
class RegularizerConfig:
    """Penalty weights on the mean and standard-deviation discrepancy.

    Both distances are squared Euclidean.
    """

    lam: float = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or self.nu < 0:
            raise ValueError("penalty weights must be non-negative")

    @property
    def active(self) -> bool:
        return self.lam != 0 or self.nu != 0


def ema_update(state: NormState, batch_mean, batch_var) -> NormState:
    a = state.alpha
    bm = np.asarray(batch_mean, dtype=state.dtype)
    bv = np.asarray(batch_var, dtype=state.dtype)
    if a == 1:
        state.running_mean = bm.copy()
        state.running_var = bv.copy()
    else:
        state.running_mean = ((1 - a) * state.running_mean + a * bm).astype(state.dtype)
        state.running_var = ((1 - a) * state.running_var + a * bv).astype(state.dtype)
    state.update_count += 1
    return state


def _batch_moments(x: Tensor, mask: np.ndarray):
    if int(mask.sum()) < 2:
        raise ValueError("batch statistics need at least 2 valid positions")
    return T.reduce_moments(x, (0, 1), mask=mask)


def _record(state: NormState, mean: Tensor, var: Tensor) -> None:
    state.last_batch_mean = mean.data.copy()
    state.last_batch_var = var.data.copy()
    state.batch_mean = mean
    state.batch_var = var


def bn_forward_train(batch: MaskedBatch, state: NormState, gamma=None, beta=None, update: bool = True) -> Tensor:
    """Normalize with the batch's own statistics and (optionally) update the EMA."""
    x, mask = batch.features, batch.mask
    mean, var = _batch_moments(x, mask)
    y = T.normalize(x, mean, var, state.eps, gamma, beta, mask)
    _record(state, mean, var)
    if update:
        state.ref_mean = state.running_mean.copy()
        state.ref_var = state.running_var.copy()
        ema_update(state, mean.data, var.data)
    return y


def bn_forward_inf(batch: MaskedBatch, state: NormState, gamma=None, beta=None) -> Tensor:
    """Normalize with the stored population statistics; no state change."""
    if not state.initialized:
        raise RuntimeError("population statistics are uninitialized")
    x, mask = batch.features, batch.mask
    dt = x.dtype
    return T.normalize(x, state.running_mean.astype(dt), state.running_var.astype(dt), state.eps,
                       gamma, beta, mask)


def ln_forward(batch: MaskedBatch, eps: float = DEFAULT_EPS, gamma=None, beta=None) -> Tensor:
    """Standardize each token over its features. Identical in train and inference."""
    x, mask = batch.features, batch.mask
    if x.shape[-1] < 2:
        raise ValueError("layer normalization needs d >= 2")
    mean, var = T.reduce_moments(x, (-1,), keepdims=True)
    return T.normalize(x, mean, var, eps, gamma, beta, mask)


def brn_factors(batch_mean, batch_var, state: NormState, r_max: float, d_max: float):
    """Clipped correction factors ``(r, delta)`` as plain arrays (no gradient)."""
    sigma_b = np.sqrt(np.asarray(batch_var, dtype=np.float64) + state.eps)
    sigma = np.sqrt(state.running_var.astype(np.float64) + state.eps)
    r = np.clip(sigma_b / sigma, 1.0 / r_max, r_max)
    delta = np.clip((np.asarray(batch_mean, dtype=np.float64) - state.running_mean) / sigma, -d_max, d_max)
    return r, delta


def brn_forward_train(batch: MaskedBatch, state: NormState, r_max: float, d_max: float,
                      gamma=None, beta=None, update: bool = True) -> Tensor:
    """Batch renormalization: batch-normalize, then ``* r + delta`` with r, delta constant."""
    if r_max < 1 or d_max < 0:
        raise ValueError("need r_max >= 1 and d_max >= 0")
    if not state.initialized and (r_max > 1 or d_max > 0):
        raise RuntimeError("batch renormalization needs initialized population statistics")
    x, mask = batch.features, batch.mask
    mean, var = _batch_moments(x, mask)
    if r_max > 1 or d_max > 0:
        # gamma * (xhat * r + delta) + beta == xhat * (gamma * r) + (gamma * delta + beta)
        r, delta = brn_factors(mean.data, var.data, state, r_max, d_max)
        r, delta = r.astype(x.dtype), delta.astype(x.dtype)
        scale = r if gamma is None else gamma * r
        shift = delta if gamma is None else gamma * delta
        if beta is not None:
            shift = shift + beta
        y = T.normalize(x, mean, var, state.eps, scale, shift, mask)
    else:
        y = T.normalize(x, mean, var, state.eps, gamma, beta, mask)
    _record(state, mean, var)
    if update:
        state.ref_mean = state.running_mean.copy()
        state.ref_var = state.running_var.copy()
        ema_update(state, mean.data, var.data)
    return y


@dataclass(frozen=True)
class BRNSchedule:
    """Pure-BN warmup, then linear ramps ``r_max: 1 -> r_final`` and ``d_max: 0 -> d_final``."""

    warmup_steps: int = 0
    ramp_steps: int = 1
    r_final: float = 3.0
    d_final: float = 5.0

    def at(self, step: int) -> tuple:
        if step < self.warmup_steps:
            return 1.0, 0.0
        frac = min(1.0, (step - self.warmup_steps) / max(self.ramp_steps, 1))
        return 1.0 + (self.r_final - 1.0) * frac, self.d_final * frac


def rbn_penalty(states, cfg: RegularizerConfig) -> Tensor:
    """Sum over layers of ``lam*|mu_B - mu|^2 + nu*|sigma_B - sigma|^2``.

    ``sigma`` are standard deviations ``sqrt(var + eps)``. The running
    statistics pass through a stop-gradient, so only the batch statistics
    (and hence the layer inputs) receive gradient.
    """
    states = list(states)
    if not cfg.active:
        dt = states[0].dtype if states else np.float32
        return Tensor(np.zeros((), dtype=dt))
    total = None
    for i, st in enumerate(states):
        if st.batch_mean is None or st.ref_mean is None:
            raise RuntimeError(f"layer {i}: missing batch or running statistics for the penalty")
        ref_mean = T.stop_gradient(st.ref_mean) if isinstance(st.ref_mean, Tensor) else Tensor(np.asarray(st.ref_mean, dtype=st.batch_mean.dtype))
        ref_var = T.stop_gradient(st.ref_var) if isinstance(st.ref_var, Tensor) else Tensor(np.asarray(st.ref_var, dtype=st.batch_mean.dtype))
        term = None
        if cfg.lam:
            dm = st.batch_mean - ref_mean
            term = (dm * dm).sum() * cfg.lam
        if cfg.nu:
            ds = T.sqrt(st.batch_var + st.eps) - T.sqrt(ref_var + st.eps)
            v = (ds * ds).sum() * cfg.nu
            term = v if term is None else term + v
        total = term if total is None else total + term
    return total


def decomposition_check(x, mu_b, sigma_b, mu, sigma) -> float:
    """Largest |lhs - rhs| of (x-mu_B)/sigma_B = ((x-mu)/sigma + (mu-mu_B)/sigma) * sigma/sigma_B."""
    x, mu_b, sigma_b, mu, sigma = (np.asarray(v, dtype=np.float64) for v in (x, mu_b, sigma_b, mu, sigma))
    if np.any(sigma_b == 0) or np.any(sigma == 0):
        raise ZeroDivisionError("standard deviations must be non-zero")
    lhs = (x - mu_b) / sigma_b
    rhs = ((x - mu) / sigma + (mu - mu_b) / sigma) * (sigma / sigma_b)
    return float(np.max(np.abs(lhs - rhs)))


# -- layer objects ----------------------------------------------------------

class _Affine:
    def __init__(self, d: int, dtype, affine: bool):
        self.num_features = d
        self.dtype = dtype
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=affine)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=affine)

    def parameters(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}


class LayerNorm(_Affine):
    kind = "ln"
    state = None

    def __init__(self, d: int, eps: float = DEFAULT_EPS, dtype=np.float32, affine: bool = True):
        super().__init__(d, dtype, affine)
        self.eps = eps
        self.mode = "train"

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return ln_forward(MaskedBatch(x, mask), self.eps, self.gamma, self.beta)


class BatchNorm(_Affine):
    """BN layer; ``kind`` is "bn" or "rbn" (the penalty lives in the loss).

    ``mode``: "train" (batch stats + EMA update), "measure" (batch stats, no
    update) or "eval" (population stats).
    """

    def __init__(self, d: int, alpha: float = DEFAULT_ALPHA, eps: float = DEFAULT_EPS,
                 dtype=np.float32, affine: bool = True, kind: str = "bn"):
        super().__init__(d, dtype, affine)
        self.state = NormState(d, alpha=alpha, eps=eps, dtype=dtype)
        self.kind = kind
        self.mode = "train"

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        batch = MaskedBatch(x, mask)
        if self.mode == "eval":
            return bn_forward_inf(batch, self.state, self.gamma, self.beta)
        return bn_forward_train(batch, self.state, self.gamma, self.beta, update=self.mode == "train")


class BatchRenorm(BatchNorm):
    kind = "brn"

    def __init__(self, d: int, schedule: BRNSchedule | None = None, **kw):
        kw.pop("kind", None)
        super().__init__(d, kind="brn", **kw)
        self.schedule = schedule or BRNSchedule()

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        batch = MaskedBatch(x, mask)
        if self.mode == "eval":
            return bn_forward_inf(batch, self.state, self.gamma, self.beta)
        if self.mode == "measure":
            return bn_forward_train(batch, self.state, self.gamma, self.beta, update=False)
        r_max, d_max = self.schedule.at(self.state.update_count)
        return brn_forward_train(batch, self.state, r_max, d_max, self.gamma, self.beta)


def make_norm(kind: str, d: int, *, alpha=DEFAULT_ALPHA, eps=DEFAULT_EPS, dtype=np.float32,
              brn_schedule: BRNSchedule | None = None):
    if kind == "ln":
        return LayerNorm(d, eps=eps, dtype=dtype)
    if kind in ("bn", "rbn"):
        return BatchNorm(d, alpha=alpha, eps=eps, dtype=dtype, kind=kind)
    if kind == "brn":
        return BatchRenorm(d, schedule=brn_schedule, alpha=alpha, eps=eps, dtype=dtype)
    raise ValueError(f"unknown norm kind {kind!r}")
