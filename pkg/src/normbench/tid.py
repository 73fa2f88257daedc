"""Training-inference discrepancy (TID) of batch-statistics layers.

Measurement takes two passes over a dataset. The first estimates population
statistics by exact averaging of per-batch statistics. The second averages,
over batches, the normalized distances between each batch's statistics and
those population statistics.

A model is anything exposing ``stat_layers()`` (BN-type layers in depth order,
each with a ``.state``), ``set_mode(mode)`` / ``mode`` and ``observe(batch)``
(one gradient-free forward pass).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .norm import BatchNorm, MaskedBatch

DENOM_GUARD = 1e-8


@dataclass
class PopulationSnapshot:
    """Per-layer population mean and standard deviation."""

    means: list
    stds: list
    provenance: str = "exact-average"

    def __post_init__(self):
        if self.provenance not in ("ema", "exact-average", "reestimated"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds disagree in layer count")

    @property
    def num_layers(self) -> int:
        return len(self.means)

    @classmethod
    def from_model(cls, model, provenance: str = "ema") -> "PopulationSnapshot":
        layers = _stat_layers(model)
        return cls([l.state.running_mean.astype(np.float64) for l in layers],
                   [np.sqrt(l.state.running_var.astype(np.float64)) for l in layers], provenance)


@dataclass
class TIDReport:
    epoch: int
    per_layer: list = field(default_factory=list)  # (layer_index, mean_tid, var_tid)
    avg_mean_tid: float = 0.0
    avg_var_tid: float = 0.0
    last_layer_total_tid: float = 0.0

    @classmethod
    def from_layers(cls, epoch: int, mean_tid, var_tid) -> "TIDReport":
        per = [(i, float(m), float(v)) for i, (m, v) in enumerate(zip(mean_tid, var_tid))]
        return cls(epoch, per, float(np.mean(mean_tid)), float(np.mean(var_tid)),
                   float(mean_tid[-1] + var_tid[-1]))

    def total(self, layer_index: int) -> float:
        _, m, v = self.per_layer[layer_index]
        return m + v


def _stat_layers(model) -> list:
    layers = list(model.stat_layers())
    if not layers:
        raise ValueError("no batch-statistics layers")
    return layers


@contextlib.contextmanager
def measuring(model):
    """Run ``model`` with batch statistics and no EMA updates; restore its mode."""
    prev = model.mode
    model.set_mode("measure")
    try:
        with T.no_grad():
            yield
    finally:
        model.set_mode(prev)


def _batch_stats(model, dataset):
    layers = _stat_layers(model)
    for batch in dataset:
        model.observe(batch)
        yield [(l.state.last_batch_mean.astype(np.float64), l.state.last_batch_var.astype(np.float64))
               for l in layers]


def estimate_population(model, dataset) -> PopulationSnapshot:
    """Exact average of batch means and batch variances over one pass."""
    sums_m = sums_v = None
    n = 0
    with measuring(model):
        for stats in _batch_stats(model, dataset):
            if sums_m is None:
                sums_m = [np.zeros_like(m) for m, _ in stats]
                sums_v = [np.zeros_like(v) for _, v in stats]
            for i, (m, v) in enumerate(stats):
                sums_m[i] += m
                sums_v[i] += v
            n += 1
    if n == 0:
        raise ValueError("empty dataset")
    return PopulationSnapshot([s / n for s in sums_m], [np.sqrt(s / n) for s in sums_v], "exact-average")


def apply_snapshot(model, snapshot: PopulationSnapshot) -> None:
    """Install the snapshot as the layers' population statistics."""
    layers = _stat_layers(model)
    if len(layers) != snapshot.num_layers:
        raise ValueError(f"snapshot has {snapshot.num_layers} layers, model has {len(layers)}")
    for layer, m, s in zip(layers, snapshot.means, snapshot.stds):
        layer.state.load(m, np.asarray(s) ** 2)


def tid_terms(batch_mean, batch_var, mean, std, guard: float = DENOM_GUARD) -> tuple:
    """(mean term, variance term) of one batch for one layer."""
    std = np.asarray(std, dtype=np.float64)
    denom = np.linalg.norm(std) + guard
    sigma_b = np.sqrt(np.maximum(np.asarray(batch_var, dtype=np.float64), 0))
    return (float(np.linalg.norm(np.asarray(batch_mean, dtype=np.float64) - mean) / denom),
            float(np.linalg.norm(sigma_b - std) / denom))


def compute_tid(model, dataset, snapshot: PopulationSnapshot, epoch: int = 0) -> TIDReport:
    """Average the per-batch mean/variance TID terms over one pass."""
    layers = _stat_layers(model)
    if len(layers) != snapshot.num_layers:
        raise ValueError(f"snapshot has {snapshot.num_layers} layers, model has {len(layers)}")
    acc_m = np.zeros(len(layers))
    acc_v = np.zeros(len(layers))
    n = 0
    with measuring(model):
        for stats in _batch_stats(model, dataset):
            for i, (bm, bv) in enumerate(stats):
                tm, tv = tid_terms(bm, bv, snapshot.means[i], snapshot.stds[i])
                acc_m[i] += tm
                acc_v[i] += tv
            n += 1
    if n == 0:
        raise ValueError("empty dataset")
    return TIDReport.from_layers(epoch, acc_m / n, acc_v / n)


def measure_tid(model, dataset, epoch: int = 0) -> TIDReport:
    """Estimation pass followed by the TID pass."""
    dataset = list(dataset)
    return compute_tid(model, dataset, estimate_population(model, dataset), epoch)


@dataclass
class DeviationCurves:
    """Per-layer average relative deviations (plot data, not TID).

    ``mean_dev[i]``: mean over batches and features of ``|mu_B - mu| / sigma``.
    ``var_dev[i]``: mean over batches and features of ``|var_B - var| / var``.
    """

    mean_dev: np.ndarray
    var_dev: np.ndarray


def deviation_curves(model, dataset, snapshot: PopulationSnapshot, guard: float = DENOM_GUARD) -> DeviationCurves:
    layers = _stat_layers(model)
    if len(layers) != snapshot.num_layers:
        raise ValueError(f"snapshot has {snapshot.num_layers} layers, model has {len(layers)}")
    acc_m = np.zeros(len(layers))
    acc_v = np.zeros(len(layers))
    n = 0
    with measuring(model):
        for stats in _batch_stats(model, dataset):
            for i, (bm, bv) in enumerate(stats):
                std = np.asarray(snapshot.stds[i], dtype=np.float64)
                var = std ** 2
                acc_m[i] += np.mean(np.abs(bm - snapshot.means[i]) / (std + guard))
                acc_v[i] += np.mean(np.abs(bv - var) / (var + guard))
            n += 1
    if n == 0:
        raise ValueError("empty dataset")
    return DeviationCurves(acc_m / n, acc_v / n)


class FeatureProbe:
    """BN taps on fixed linear projections of raw feature batches.

    Tap ``i`` normalizes ``x @ W_i`` (identity for ``W_i = None``). Because
    every tap sees a linear function of the raw input, rescaling the input
    rescales every tap's statistics alike. Useful for exercising the TID
    machinery without a transformer.
    """

    def __init__(self, d: int, projections=None, alpha: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.projections = list(projections) if projections is not None else [None]
        self.layers = [BatchNorm(d if w is None else np.asarray(w).shape[1], alpha=alpha, eps=eps,
                                 dtype=dtype, affine=False) for w in self.projections]
        self.dtype = dtype
        self.mode = "train"

    def stat_layers(self):
        return self.layers

    def set_mode(self, mode: str) -> None:
        self.mode = mode
        for l in self.layers:
            l.mode = mode

    def __call__(self, batch: MaskedBatch):
        outs = []
        for w, layer in zip(self.projections, self.layers):
            x = batch.features if w is None else batch.features @ T.Tensor(np.asarray(w, dtype=self.dtype))
            outs.append(layer(x, batch.mask))
        return outs

    def observe(self, batch) -> None:
        if not isinstance(batch, MaskedBatch):
            batch = MaskedBatch.dense(batch, dtype=self.dtype)
        self(batch)
