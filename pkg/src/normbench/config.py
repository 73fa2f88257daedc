"""Experiment configuration: a strict ``section.key = value`` text format.

Example::

    # comments and blank lines are ignored
    seed = 1
    model.num_layers = 4
    norm.kind = rbn
    norm.lambda = 0.1

Every key has a default (see ``describe()``); unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .norm import BRNSchedule, RegularizerConfig
from .tasks import TaskSpec


class ConfigError(ValueError):
    pass


def _f(default, doc):
    return field(default=default, metadata={"doc": doc})


@dataclass
class ModelSection:
    num_layers: int = _f(2, "encoder blocks")
    d_model: int = _f(32, "embedding width")
    num_heads: int = _f(2, "attention heads (must divide d_model)")
    ffn_dim: int = _f(64, "feed-forward hidden width")
    placement: str = _f("pre", "normalization placement: pre or post")
    mixed_norm_count: int = _f(-1, "bottom blocks using norm.kind, the rest use LN; -1 means all")
    dropout: float = _f(0.0, "dropout probability on residual branches")
    dtype: str = _f("float32", "float32 or float64")


@dataclass
class TaskSection:
    kind: str = _f("copy", "copy, parity or char-lm")
    vocab_size: int = _f(16, "token vocabulary size")
    min_len: int = _f(4, "shortest sequence (copy: payload length)")
    max_len: int = _f(8, "longest sequence (copy: payload length)")
    n_train: int = _f(2048, "training examples")
    n_valid: int = _f(256, "validation examples")
    markov_concentration: float = _f(0.5, "Dirichlet concentration of char-lm transition rows")


@dataclass
class OptimSection:
    lr: float = _f(3e-3, "peak learning rate of the inverse-sqrt schedule")
    warmup: int = _f(200, "linear warmup steps")
    max_steps: int = _f(2000, "step budget; 0 means bounded by max_epochs only")
    max_epochs: int = _f(0, "epoch budget; 0 means bounded by max_steps only")
    batch_size: int = _f(32, "examples per training batch")
    beta1: float = _f(0.9, "Adam beta1")
    beta2: float = _f(0.98, "Adam beta2")
    weight_decay: float = _f(0.0, "L2 coefficient added to gradients")
    eval_batch_size: int = _f(64, "examples per validation batch")
    log_every: int = _f(50, "training-log (and validation) cadence in steps")


@dataclass
class NormSection:
    kind: str = _f("bn", "bn, ln, rbn or brn")
    alpha: float = _f(0.1, "EMA factor of the running statistics")
    eps: float = _f(1e-5, "variance stabilizer")
    lam: float = _f(0.0, "mean penalty weight (key: norm.lambda); needs kind rbn when nonzero")
    nu: float = _f(0.0, "std penalty weight; needs kind rbn when nonzero")
    brn_warmup_steps: int = _f(-1, "pure-BN steps before the BRN ramp; -1 means one epoch")
    brn_ramp_steps: int = _f(-1, "steps of the linear r_max/d_max ramp; -1 means one epoch")
    brn_r_max: float = _f(3.0, "final BRN r clip")
    brn_d_max: float = _f(5.0, "final BRN d clip")


@dataclass
class MeasureSection:
    tid_every_epoch: bool = _f(True, "TID before training and after every epoch (always at the end)")
    tid_max_batches: int = _f(0, "cap on batches per TID pass; 0 means the whole training set")
    cond_every: int = _f(50, "conditioning report cadence in steps; 0 disables")


@dataclass
class ExperimentConfig:
    seed: int = _f(0, "seed for data, init and shuffling")
    out: str = _f("runs/default", "output directory")
    model: ModelSection = field(default_factory=ModelSection)
    task: TaskSection = field(default_factory=TaskSection)
    optim: OptimSection = field(default_factory=OptimSection)
    norm: NormSection = field(default_factory=NormSection)
    measure: MeasureSection = field(default_factory=MeasureSection)

    # -- derived objects ----------------------------------------------------
    def task_spec(self) -> TaskSpec:
        t = self.task
        return TaskSpec(t.kind, t.vocab_size, t.min_len, t.max_len, t.n_train, t.n_valid, t.markov_concentration)

    def model_config(self) -> ModelConfig:
        m, spec = self.model, self.task_spec()
        return ModelConfig(num_layers=m.num_layers, d_model=m.d_model, num_heads=m.num_heads, ffn_dim=m.ffn_dim,
                           norm_kind=self.norm.kind, norm_placement=m.placement,
                           mixed_norm_count=m.mixed_norm_count, vocab_size=spec.vocab_size,
                           num_classes=spec.num_classes, max_seq_len=spec.seq_len, dropout=m.dropout,
                           alpha=self.norm.alpha, eps=self.norm.eps, dtype=m.dtype)

    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(self.norm.lam, self.norm.nu)

    def steps_per_epoch(self) -> int:
        return -(-self.task.n_train // self.optim.batch_size)

    def total_steps(self) -> int:
        spe = self.steps_per_epoch()
        caps = [c for c in (self.optim.max_steps, self.optim.max_epochs * spe) if c > 0]
        return min(caps)

    def brn_schedule(self) -> BRNSchedule:
        n = self.norm
        spe = self.steps_per_epoch()
        return BRNSchedule(spe if n.brn_warmup_steps < 0 else n.brn_warmup_steps,
                           spe if n.brn_ramp_steps < 0 else n.brn_ramp_steps, n.brn_r_max, n.brn_d_max)

    def validate(self) -> "ExperimentConfig":
        try:
            self.model_config()
            self.regularizer()
            self.brn_schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if (self.norm.lam or self.norm.nu) and self.norm.kind != "rbn":
            raise ConfigError("norm.lambda / norm.nu are nonzero but norm.kind is not rbn")
        o = self.optim
        if o.batch_size < 1 or o.eval_batch_size < 1 or o.log_every < 1:
            raise ConfigError("batch sizes and optim.log_every must be positive")
        if o.max_steps < 0 or o.max_epochs < 0 or (o.max_steps == 0 and o.max_epochs == 0):
            raise ConfigError("set a positive optim.max_steps or optim.max_epochs")
        if o.lr < 0 or o.warmup < 0:
            raise ConfigError("optim.lr and optim.warmup must be non-negative")
        if self.measure.tid_max_batches < 0 or self.measure.cond_every < 0:
            raise ConfigError("measurement cadences must be non-negative")
        return self


_ALIASES = {"norm.lambda": "norm.lam"}
_SECTIONS = ("model", "task", "optim", "norm", "measure")


def _public(key: str) -> str:
    return "norm.lambda" if key == "norm.lam" else key


def _fields():
    """Yield (public dotted key, section name or None, dataclass field)."""
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(f.default_factory):
                yield _public(f"{f.name}.{sub.name}"), f.name, sub
        else:
            yield f.name, None, f


def describe() -> list:
    """(key, default, doc) for every accepted key."""
    out = []
    for key, _, f in _fields():
        out.append((key, f.default, f.metadata.get("doc", "")))
    return out


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def set_value(cfg: ExperimentConfig, key: str, raw) -> None:
    """Assign one dotted key; ``raw`` may be a string or an already typed value."""
    internal = _ALIASES.get(key, key)
    for public, section, f in _fields():
        if public == key:
            break
    else:
        raise ConfigError(f"unknown config key {key!r}")
    target = cfg if section is None else getattr(cfg, section)
    name = internal.split(".")[-1]
    value = _coerce(key, raw, f.type) if isinstance(raw, str) else raw
    setattr(target, name, value)


def get_value(cfg: ExperimentConfig, key: str):
    internal = _ALIASES.get(key, key)
    parts = internal.split(".")
    obj = cfg
    for p in parts:
        obj = getattr(obj, p)
    return obj


def parse_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base else ExperimentConfig()
    if base is not None:
        for s in _SECTIONS:
            setattr(cfg, s, dataclasses.replace(getattr(base, s)))
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        set_value(cfg, key, raw)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def flatten(cfg: ExperimentConfig) -> dict:
    return {key: get_value(cfg, key) for key, _, _ in _fields()}


def to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(flatten(cfg).items()))


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical sorted ``key=value`` lines (the output path excluded)."""
    items = sorted((k, _fmt(v)) for k, v in flatten(cfg).items() if k != "out")
    return hashlib.sha256("".join(f"{k}={v}\n" for k, v in items).encode()).hexdigest()


# -- presets ----------------------------------------------------------------

PRESET_NOTE = ("Optimal (lambda, nu) reported for full-scale training on the named dataset; "
               "they were tuned at full scale and are not expected to be optimal for toy tasks.")

_OPTIMAL = {
    "post": {"iwslt14": (10, 0), "wmt16": (100, 0), "ptb": (0.1, 0.01), "wt103": (0.1, 0.01),
             "resume": (0.01, 0), "conll": (0.01, 0), "imdb": (0.1, 0), "sogou": (0.1, 0.01),
             "dbpedia": (0.1, 0.01), "yelp": (0, 0.1)},
    "pre": {"iwslt14": (0.1, 0.01), "wmt16": (0.1, 0), "ptb": (0.01, 0), "wt103": (0.1, 0),
            "resume": (0.01, 0), "conll": (0.01, 0), "imdb": (0, 0.01), "sogou": (0.1, 0.01),
            "dbpedia": (0.1, 0.01), "yelp": (0.1, 0.01)},
}
_SHORT = {"nmt": "iwslt14", "lm": "ptb", "ner": "conll", "textcls": "imdb"}

# The (lambda, nu) search grid used to pick the presets.
SWEEP_GRID = (0.0, 0.01, 0.1, 1.0)


def _build_presets() -> dict:
    out = {}
    for placement, table in _OPTIMAL.items():
        for dataset, (lam, nu) in table.items():
            out[f"paper-{placement}norm-{dataset}"] = {
                "norm.kind": "rbn", "model.placement": placement,
                "norm.lambda": float(lam), "norm.nu": float(nu)}
        for short, dataset in _SHORT.items():
            out[f"paper-{placement}norm-{short}"] = out[f"paper-{placement}norm-{dataset}"]
    return out


PRESETS = _build_presets()


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    for key, value in PRESETS[name].items():
        set_value(cfg, key, value)
    return cfg


def resolve(path=None, preset=None, overrides=None) -> ExperimentConfig:
    """Defaults, then the file, then the preset, then explicit overrides; validated."""
    cfg = load(path) if path else ExperimentConfig()
    if preset:
        apply_preset(cfg, preset)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_value(cfg, key, value)
    return cfg.validate()
