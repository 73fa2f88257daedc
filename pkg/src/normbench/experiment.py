"""Run orchestration: training runs, (lambda, nu) sweeps, statistic re-estimation, reports."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as cfgmod
from . import tensor as T
from .conditioning import condition_report
from .config import ExperimentConfig
from .model import TransformerEncoder
from .tasks import batches, make_task
from .tid import PopulationSnapshot, measure_tid
from .train import TrainState, evaluate, train_step

TRAIN_LOG = "train_log.csv"
TID_CSV = "tid.csv"
COND_CSV = "conditioning.csv"
SUMMARY = "summary.json"
CONFIG_TXT = "config.txt"
FINAL_CKPT = "final.nbck"

TRAIN_FIELDS = ("step", "epoch", "lr", "ce_loss", "penalty", "total_loss", "valid_loss", "valid_metric")
TID_FIELDS = ("epoch", "layer_index", "mean_tid", "var_tid", "avg")
COND_FIELDS = ("step", "layer_index", "c_50", "c_80", "c_max")


def fmt(x) -> str:
    """Positional decimal with at most 9 significant digits; ``inf`` for infinities."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return np.format_float_positional(x, precision=9, unique=True, fractional=False, trim="-")


class _CsvLog:
    """Append-only CSV with a fixed header; every row is flushed immediately."""

    def __init__(self, path: Path, fields):
        self.fields = fields
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(fields)
        self._fh.flush()

    def write(self, *values):
        if len(values) != len(self.fields):
            raise ValueError("row does not match the CSV schema")
        self._w.writerow([fmt(v) for v in values])
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class RunSummary:
    status: str  # "ok" or "diverged"
    seed: int
    config_hash: str
    steps: int
    final_train_loss: float | None
    final_valid_loss: float | None
    best_valid_loss: float | None
    best_valid_metric: float | None
    final_tid: dict | None
    wall_clock_s: float
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        return cls(**json.loads(text))


class RunDiverged(RuntimeError):
    def __init__(self, summary: RunSummary):
        super().__init__(summary.message)
        self.summary = summary


def _tid_dict(report) -> dict:
    return {"epoch": report.epoch, "avg_mean_tid": report.avg_mean_tid, "avg_var_tid": report.avg_var_tid,
            "last_layer_total_tid": report.last_layer_total_tid,
            "per_layer": [{"layer_index": i, "mean_tid": m, "var_tid": v} for i, m, v in report.per_layer]}


def build(cfg: ExperimentConfig):
    """(model, train examples, valid examples) for a config."""
    train, valid = make_task(cfg.task_spec(), cfg.seed)
    model = TransformerEncoder(cfg.model_config(), seed=cfg.seed, brn_schedule=cfg.brn_schedule())
    return model, train, valid


def _meta(cfg: ExperimentConfig, provenance: str, step: int) -> dict:
    return {"config": cfgmod.to_text(cfg), "config_hash": cfgmod.config_hash(cfg),
            "provenance": provenance, "step": step}


def run(cfg: ExperimentConfig, out=None) -> RunSummary:
    """Train one model, writing logs, TID and conditioning CSVs, a summary and a checkpoint.

    Raises :class:`RunDiverged` (after writing everything gathered so far) when a
    non-finite value appears.
    """
    cfg.validate()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    (out / CONFIG_TXT).write_text(cfgmod.to_text(cfg))
    chash = cfgmod.config_hash(cfg)

    model, train, valid = build(cfg)
    state = TrainState.create(model, base_lr=cfg.optim.lr, warmup=cfg.optim.warmup, reg=cfg.regularizer(),
                              betas=(cfg.optim.beta1, cfg.optim.beta2), weight_decay=cfg.optim.weight_decay)
    bs = cfg.optim.batch_size
    spe = cfg.steps_per_epoch()
    total = cfg.total_steps()
    tid_data = batches(train, bs)
    if cfg.measure.tid_max_batches:
        tid_data = tid_data[:cfg.measure.tid_max_batches]
    has_stats = bool(model.stat_layers())
    shuffle = np.random.default_rng(cfg.seed)

    logs = {"train": _CsvLog(out / TRAIN_LOG, TRAIN_FIELDS), "tid": _CsvLog(out / TID_CSV, TID_FIELDS),
            "cond": _CsvLog(out / COND_CSV, COND_FIELDS)}
    last_tid = None
    ce = valid_loss = None
    best_loss = best_metric = None
    status, message = "ok", ""

    def log_tid(step):
        nonlocal last_tid
        if not has_stats:
            return
        rep = measure_tid(model, tid_data, epoch=step / spe)
        for i, m, v in rep.per_layer:
            logs["tid"].write(step / spe, i, m, v, 0)
        logs["tid"].write(step / spe, -1, rep.avg_mean_tid, rep.avg_var_tid, 1)
        last_tid = rep

    try:
        if cfg.measure.tid_every_epoch:
            log_tid(0)
        step = 0
        while step < total:
            for batch in batches(train, bs, shuffle):
                state, losses = train_step(state, batch)
                step = state.step
                ce = losses.ce
                if not math.isfinite(losses.total):
                    raise T.NonFiniteError(f"non-finite loss at step {step}")
                if cfg.measure.cond_every and step % cfg.measure.cond_every == 0:
                    for i, x in enumerate(model.block_inputs):
                        try:
                            rep = condition_report(x, batch.mask, i, step)
                        except ValueError:
                            continue  # fewer tokens than features in this batch
                        logs["cond"].write(step, i, rep.c_50, rep.c_80, rep.c_max)
                if step % cfg.optim.log_every == 0 or step == total:
                    ev = evaluate(model, valid, "population", cfg.optim.eval_batch_size)
                    valid_loss = ev.loss
                    best_loss = ev.loss if best_loss is None else min(best_loss, ev.loss)
                    best_metric = ev.accuracy if best_metric is None else max(best_metric, ev.accuracy)
                    logs["train"].write(step, -(-step // spe), losses.lr, losses.ce, losses.penalty,
                                        losses.total, ev.loss, ev.accuracy)
                epoch_end = step % spe == 0
                if step == total or (epoch_end and cfg.measure.tid_every_epoch):
                    log_tid(step)
                if step >= total:
                    break
        ckpt_io.save(out / FINAL_CKPT, ckpt_io.from_model(model, _meta(cfg, "ema", state.step)))
    except T.NonFiniteError as exc:
        status, message = "diverged", str(exc)
    finally:
        for log in logs.values():
            log.close()

    summary = RunSummary(status, cfg.seed, chash, state.step, ce, valid_loss, best_loss, best_metric,
                         None if last_tid is None else _tid_dict(last_tid),
                         round(time.perf_counter() - t0, 3), message)
    (out / SUMMARY).write_text(summary.to_json())
    if status != "ok":
        raise RunDiverged(summary)
    return summary


# -- sweep ------------------------------------------------------------------

@dataclass
class SweepPoint:
    lam: float
    nu: float
    seed: int
    out: str
    summary: RunSummary | None = None
    error: str = ""


def _grid_dir(lam, nu, seed) -> str:
    return f"lam{fmt(lam)}_nu{fmt(nu)}_seed{seed}"


def _run_point(args):
    text, out = args
    cfg = cfgmod.parse_text(text)
    try:
        return run(cfg, out), ""
    except RunDiverged as exc:
        return exc.summary, exc.summary.message
    except Exception as exc:  # a failing grid point must not abort the sweep
        return None, f"{type(exc).__name__}: {exc}"


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("NORMBENCH_THREADS", "1")))
    except ValueError:
        return 1


def select_best(points) -> tuple:
    """Pick (lam, nu) with the lowest seed-averaged final validation loss.

    Returns ``(best or None, {(lam, nu, seed): reason})`` for the excluded runs.
    Ties resolve to the smallest (lam, nu), so the result is independent of the
    order in which runs finished.
    """
    excluded = {}
    by_pair = {}
    for p in sorted(points, key=lambda p: (p.lam, p.nu, p.seed)):
        s = p.summary
        if s is None:
            excluded[(p.lam, p.nu, p.seed)] = f"failed: {p.error}"
        elif s.status != "ok" or s.final_valid_loss is None or not math.isfinite(s.final_valid_loss):
            excluded[(p.lam, p.nu, p.seed)] = f"diverged: {s.message or 'non-finite validation loss'}"
        else:
            by_pair.setdefault((p.lam, p.nu), []).append(s.final_valid_loss)
    if not by_pair:
        return None, excluded
    scored = sorted((float(np.mean(v)), k) for k, v in by_pair.items())
    return scored[0][1], excluded


def sweep(base: ExperimentConfig, lambdas, nus, seeds, out=None, threads: int | None = None) -> dict:
    """Run every (lambda, nu, seed) point and select the best pair by validation loss."""
    lambdas, nus, seeds = sorted(set(map(float, lambdas))), sorted(set(map(float, nus))), sorted(set(map(int, seeds)))
    if not (lambdas and nus and seeds):
        raise cfgmod.ConfigError("sweep grids must be non-empty")
    out = Path(out or base.out)
    out.mkdir(parents=True, exist_ok=True)
    points, jobs = [], []
    for lam, nu, seed in itertools.product(lambdas, nus, seeds):
        cfg = cfgmod.parse_text(cfgmod.to_text(base))
        cfg.norm.kind = "rbn"
        cfg.norm.lam, cfg.norm.nu, cfg.seed = lam, nu, seed
        cfg.out = str(out / _grid_dir(lam, nu, seed))
        cfg.validate()
        points.append(SweepPoint(lam, nu, seed, cfg.out))
        jobs.append((cfgmod.to_text(cfg), cfg.out))
    workers = min(threads or thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    for p, (summary, err) in zip(points, results):
        p.summary, p.error = summary, err

    best, excluded = select_best(points)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("lambda", "nu", "seed", "status", "final_valid_loss", "best_valid_metric",
                    "last_layer_total_tid", "best", "note"))
        for p in points:
            s = p.summary
            tid = s.final_tid["last_layer_total_tid"] if s and s.final_tid else None
            w.writerow((fmt(p.lam), fmt(p.nu), p.seed, s.status if s else "failed",
                        "" if not s or s.final_valid_loss is None else fmt(s.final_valid_loss),
                        "" if not s or s.best_valid_metric is None else fmt(s.best_valid_metric),
                        "" if tid is None else fmt(tid), int(best == (p.lam, p.nu)),
                        excluded.get((p.lam, p.nu, p.seed), "")))
    result = {
        "best": None if best is None else {"lambda": best[0], "nu": best[1]},
        "criterion": "lowest seed-averaged final validation loss",
        "excluded": [{"lambda": k[0], "nu": k[1], "seed": k[2], "reason": r} for k, r in sorted(excluded.items())],
        "runs": [{"lambda": p.lam, "nu": p.nu, "seed": p.seed, "out": p.out,
                  "summary": None if p.summary is None else dataclasses.asdict(p.summary)} for p in points],
    }
    (out / "sweep.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


# -- re-estimation ----------------------------------------------------------

def model_from_checkpoint(ck: ckpt_io.Checkpoint):
    cfg = cfgmod.parse_text(ck.meta["config"])
    model, train, valid = build(cfg)
    ckpt_io.into_model(model, ck)
    return cfg, model, train


def reestimate(ck: ckpt_io.Checkpoint, dataset=None, epochs: int = 2) -> ckpt_io.Checkpoint:
    """Refresh running statistics by forwarding ``dataset`` for ``epochs`` passes.

    Parameters are never touched: this is training at zero learning rate. With
    ``dataset=None`` the run's own training set is used, reshuffled per epoch.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    cfg, model, train = model_from_checkpoint(ck)
    if not model.stat_layers():
        raise ValueError("no batch-statistics layers")
    if epochs == 0:
        return ck
    rng = np.random.default_rng([cfg.seed, 3])
    model.set_mode("train")
    with T.no_grad():
        for _ in range(epochs):
            data = dataset if dataset is not None else batches(train, cfg.optim.batch_size, rng)
            for batch in data:
                model(batch)
    meta = dict(ck.meta, provenance="reestimated")
    return ckpt_io.from_model(model, meta)


def reestimate_file(src, dst, epochs: int = 2) -> ckpt_io.Checkpoint:
    new = reestimate(ckpt_io.load(src), epochs=epochs)
    ckpt_io.save(dst, new)
    return new


def snapshot_from_checkpoint(ck: ckpt_io.Checkpoint) -> PopulationSnapshot:
    _, model, _ = model_from_checkpoint(ck)
    return PopulationSnapshot.from_model(model, provenance=ck.meta.get("provenance", "ema"))


# -- report -----------------------------------------------------------------

def _read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(out) -> dict:
    """Re-derive the run summary from the CSVs (and config) in a run directory."""
    out = Path(out)
    train_rows = _read_csv(out / TRAIN_LOG)
    tid_rows = _read_csv(out / TID_CSV)
    cond_rows = _read_csv(out / COND_CSV)
    res = {"steps": 0, "final_train_loss": None, "final_valid_loss": None,
           "best_valid_loss": None, "best_valid_metric": None, "final_tid": None}
    if train_rows:
        last = train_rows[-1]
        res.update(steps=int(last["step"]), final_train_loss=float(last["ce_loss"]),
                   final_valid_loss=float(last["valid_loss"]),
                   best_valid_loss=min(float(r["valid_loss"]) for r in train_rows),
                   best_valid_metric=max(float(r["valid_metric"]) for r in train_rows))
    if tid_rows:
        final_epoch = tid_rows[-1]["epoch"]
        rows = [r for r in tid_rows if r["epoch"] == final_epoch]
        layers = [r for r in rows if r["avg"] == "0"]
        avg = [r for r in rows if r["avg"] == "1"][0]
        res["final_tid"] = {
            "epoch": float(final_epoch), "avg_mean_tid": float(avg["mean_tid"]), "avg_var_tid": float(avg["var_tid"]),
            "last_layer_total_tid": float(layers[-1]["mean_tid"]) + float(layers[-1]["var_tid"]),
            "per_layer": [{"layer_index": int(r["layer_index"]), "mean_tid": float(r["mean_tid"]),
                           "var_tid": float(r["var_tid"])} for r in layers]}
    res["conditioning_rows"] = len(cond_rows)
    if (out / CONFIG_TXT).exists():
        res["config_hash"] = cfgmod.config_hash(cfgmod.parse_text((out / CONFIG_TXT).read_text()))
    return res
