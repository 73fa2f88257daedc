"""A small transformer encoder with pluggable normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .norm import DEFAULT_ALPHA, DEFAULT_EPS, BRNSchedule, make_norm
from .tasks import Batch
from .tensor import Tensor

NORM_KINDS = ("bn", "ln", "rbn", "brn")
MASK_FILL = -1e9


@dataclass
class ModelConfig:
    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    norm_kind: str = "bn"
    norm_placement: str = "pre"
    mixed_norm_count: int = -1  # bottom layers using norm_kind; -1 means all
    vocab_size: int = 16
    num_classes: int = 16
    max_seq_len: int = 32
    dropout: float = 0.0
    alpha: float = DEFAULT_ALPHA
    eps: float = DEFAULT_EPS
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if self.norm_placement not in ("pre", "post"):
            raise ValueError("norm_placement must be 'pre' or 'post'")
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        if not -1 <= self.mixed_norm_count <= self.num_layers:
            raise ValueError("mixed_norm_count must lie in [0, num_layers] (or -1 for all)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def replaced_layers(self) -> int:
        return self.num_layers if self.mixed_norm_count < 0 else self.mixed_norm_count

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in, d_out, dtype):
        self.w = _uniform(rng, d_in, (d_in, d_out), dtype)
        self.b = _zeros(d_out, dtype)

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    def parameters(self):
        return {"w": self.w, "b": self.b}


class SelfAttention:
    """Multi-head self-attention with a fused query/key/value projection."""

    def __init__(self, rng, d, heads, dtype):
        self.heads = heads
        self.qkv = Linear(rng, d, 3 * d, dtype)
        self.o = Linear(rng, d, d, dtype)

    def __call__(self, x: Tensor, key_bias: np.ndarray) -> Tensor:
        return self.o(T.attention(self.qkv(x), key_bias, self.heads))

    def parameters(self):
        out = {f"qkv.{k}": p for k, p in self.qkv.parameters().items()}
        out.update({f"o.{k}": p for k, p in self.o.parameters().items()})
        return out


class FeedForward:
    def __init__(self, rng, d, ffn, dtype):
        self.fc1 = Linear(rng, d, ffn, dtype)
        self.fc2 = Linear(rng, ffn, d, dtype)

    def __call__(self, x, drop):
        return self.fc2(drop(T.relu(self.fc1(x))))

    def parameters(self):
        out = {f"fc1.{k}": p for k, p in self.fc1.parameters().items()}
        out.update({f"fc2.{k}": p for k, p in self.fc2.parameters().items()})
        return out


class EncoderBlock:
    """Pre-norm: ``x + Attn(N1(x))`` then ``x + FFN(N2(x))``.
    Post-norm: ``N1(x + Attn(x))`` then ``N2(x + FFN(x))``.
    """

    def __init__(self, rng, cfg: ModelConfig, norm_kind: str, brn_schedule, dtype):
        self.placement = cfg.norm_placement
        self.attn = SelfAttention(rng, cfg.d_model, cfg.num_heads, dtype)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_dim, dtype)
        kw = dict(alpha=cfg.alpha, eps=cfg.eps, dtype=dtype, brn_schedule=brn_schedule)
        self.norm1 = make_norm(norm_kind, cfg.d_model, **kw)
        self.norm2 = make_norm(norm_kind, cfg.d_model, **kw)

    def __call__(self, x: Tensor, mask: np.ndarray, key_bias: np.ndarray, drop) -> Tensor:
        if self.placement == "pre":
            x = x + drop(self.attn(self.norm1(x, mask), key_bias))
            return x + drop(self.ffn(self.norm2(x, mask), drop))
        x = self.norm1(x + drop(self.attn(x, key_bias)), mask)
        return self.norm2(x + drop(self.ffn(x, drop)), mask)

    def norms(self):
        return [self.norm1, self.norm2]

    def parameters(self):
        out = {f"attn.{k}": p for k, p in self.attn.parameters().items()}
        out.update({f"ffn.{k}": p for k, p in self.ffn.parameters().items()})
        for name in ("norm1", "norm2"):
            out.update({f"{name}.{k}": p for k, p in getattr(self, name).parameters().items()})
        return out


class TransformerEncoder:
    """Token + learned position embeddings, encoder blocks, per-position linear head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, brn_schedule: BRNSchedule | None = None):
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng([seed, 11])
        d = cfg.d_model
        self.embed = Tensor((rng.standard_normal((cfg.vocab_size, d)) / np.sqrt(d)).astype(dtype), requires_grad=True)
        self.pos = Tensor((rng.standard_normal((cfg.max_seq_len, d)) / np.sqrt(d)).astype(dtype), requires_grad=True)
        self.blocks = []
        for i in range(cfg.num_layers):
            kind = cfg.norm_kind if i < cfg.replaced_layers else "ln"
            self.blocks.append(EncoderBlock(rng, cfg, kind, brn_schedule, dtype))
        self.final_norm = None
        if cfg.norm_placement == "pre":
            kind = cfg.norm_kind if cfg.replaced_layers == cfg.num_layers else "ln"
            self.final_norm = make_norm(kind, d, alpha=cfg.alpha, eps=cfg.eps, dtype=dtype, brn_schedule=brn_schedule)
        self.head = Linear(rng, d, cfg.num_classes, dtype)
        self.mode = "train"
        self.drop_rng = np.random.default_rng([seed, 13])
        self.block_inputs = []

    # -- structure ----------------------------------------------------------
    def norms(self) -> list:
        out = [n for blk in self.blocks for n in blk.norms()]
        if self.final_norm is not None:
            out.append(self.final_norm)
        return out

    def stat_layers(self) -> list:
        """BN-type layers (bn, rbn, brn) in depth order."""
        return [n for n in self.norms() if n.state is not None]

    def penalized_states(self) -> list:
        return [n.state for n in self.norms() if n.kind == "rbn"]

    def parameters(self) -> dict:
        out = {"embed": self.embed, "pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": p for k, p in blk.parameters().items()})
        if self.final_norm is not None:
            out.update({f"final_norm.{k}": p for k, p in self.final_norm.parameters().items()})
        out.update({f"head.{k}": p for k, p in self.head.parameters().items()})
        return out

    def norm_states(self) -> dict:
        """Name -> NormState for every BN-type layer (checkpoint naming)."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for name in ("norm1", "norm2"):
                n = getattr(blk, name)
                if n.state is not None:
                    out[f"blocks.{i}.{name}"] = n.state
        if self.final_norm is not None and self.final_norm.state is not None:
            out["final_norm"] = self.final_norm.state
        return out

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval", "measure"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        for n in self.norms():
            n.mode = mode

    # -- forward ------------------------------------------------------------
    def _drop(self, x):
        if self.mode != "train" or self.cfg.dropout <= 0:
            return x
        return T.dropout(x, self.cfg.dropout, self.drop_rng)

    def __call__(self, batch: Batch) -> Tensor:
        tokens, mask = batch.tokens, batch.mask
        b, t = tokens.shape
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        dtype = self.cfg.np_dtype
        x = T.embedding(self.embed, tokens) + T.embedding(self.pos, np.arange(t))
        key_bias = np.where(mask, 0.0, MASK_FILL).astype(dtype)[:, None, None, :]
        self.block_inputs = []
        for blk in self.blocks:
            self.block_inputs.append(x.data)
            x = blk(x, mask, key_bias, self._drop)
        if self.final_norm is not None:
            x = self.final_norm(x, mask)
        return self.head(x)

    def observe(self, batch: Batch) -> None:
        with T.no_grad():
            self(batch)

    def loss(self, batch: Batch) -> Tensor:
        return T.cross_entropy(self(batch), batch.targets)
