"""Synthetic sequence tasks: copy, prefix parity and a Markov-chain character LM.

Token 0 is padding everywhere. Targets use -1 for positions that carry no
loss. Train and validation splits draw from separate seeded streams.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD = 0
IGNORE = -1

# copy task layout: [x_1 .. x_n, SEP, Q .. Q] with targets x_i at the Q slots
COPY_SEP = 1
COPY_QUERY = 2
COPY_FIRST = 3

PARITY_ZERO = 1
PARITY_ONE = 2


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 4
    max_len: int = 8
    n_train: int = 2048
    n_valid: int = 256
    markov_concentration: float = 0.5

    def __post_init__(self):
        if self.kind not in ("copy", "parity", "char-lm"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.kind == "copy" and self.vocab_size <= COPY_FIRST:
            raise ValueError("copy task needs vocab_size > 3")
        if self.kind == "char-lm" and self.vocab_size < 3:
            raise ValueError("char-lm needs vocab_size >= 3")
        if self.n_train < 1 or self.n_valid < 1:
            raise ValueError("dataset sizes must be positive")

    @property
    def seq_len(self) -> int:
        """Longest input sequence the task can produce."""
        return 2 * self.max_len + 1 if self.kind == "copy" else self.max_len

    @property
    def num_classes(self) -> int:
        return 2 if self.kind == "parity" else self.vocab_size


@dataclass
class Example:
    tokens: np.ndarray
    targets: np.ndarray


@dataclass
class Batch:
    tokens: np.ndarray   # (B, T) int
    mask: np.ndarray     # (B, T) bool, True at non-padding positions
    targets: np.ndarray  # (B, T) int, IGNORE where no loss

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def num_targets(self) -> int:
        return int((self.targets != IGNORE).sum())


def parity_labels(bits) -> np.ndarray:
    """Parity of every prefix: label_t = bits_1 xor ... xor bits_t."""
    return np.cumsum(np.asarray(bits, dtype=np.int64)) % 2


def _copy_example(rng, spec: TaskSpec) -> Example:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    src = rng.integers(COPY_FIRST, spec.vocab_size, size=n)
    tokens = np.concatenate([src, [COPY_SEP], np.full(n, COPY_QUERY)])
    targets = np.concatenate([np.full(n + 1, IGNORE), src])
    return Example(tokens.astype(np.int64), targets.astype(np.int64))


def _parity_example(rng, spec: TaskSpec) -> Example:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    bits = rng.integers(0, 2, size=n)
    return Example(np.where(bits == 1, PARITY_ONE, PARITY_ZERO).astype(np.int64), parity_labels(bits))


def markov_chain(spec: TaskSpec, seed: int) -> np.ndarray:
    """Row-stochastic transition matrix over tokens 1..V-1 (index 0 unused)."""
    rng = np.random.default_rng([seed, 7])
    k = spec.vocab_size - 1
    return rng.dirichlet(np.full(k, spec.markov_concentration), size=k)


def stationary_distribution(p: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(p.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    return pi / pi.sum()


def markov_corpus(p: np.ndarray, n_tokens: int, rng) -> np.ndarray:
    """Sample ``n_tokens`` states (values 1..V-1) from the chain started at stationarity."""
    k = p.shape[0]
    cdf = np.cumsum(p, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(n_tokens)
    out = np.empty(n_tokens, dtype=np.int64)
    state = int(np.searchsorted(np.cumsum(stationary_distribution(p)), rng.random()))
    state = min(state, k - 1)
    for i in range(n_tokens):
        state = int(np.searchsorted(cdf[state], u[i], side="right"))
        out[i] = state
    return out + 1


def _lm_examples(p, spec: TaskSpec, n: int, rng) -> list:
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    corpus = markov_corpus(p, int(lengths.sum() + n), rng)
    out, pos = [], 0
    for length in lengths:
        chunk = corpus[pos:pos + length + 1]
        pos += length + 1
        out.append(Example(chunk[:-1].copy(), chunk[1:].copy()))
    return out


def make_task(spec: TaskSpec, seed: int = 0) -> tuple:
    """Reproducible ``(train, valid)`` lists of :class:`Example`."""
    train_rng = np.random.default_rng([seed, 0])
    valid_rng = np.random.default_rng([seed, 1])
    if spec.kind == "char-lm":
        p = markov_chain(spec, seed)
        return _lm_examples(p, spec, spec.n_train, train_rng), _lm_examples(p, spec, spec.n_valid, valid_rng)
    gen = _copy_example if spec.kind == "copy" else _parity_example
    train = [gen(train_rng, spec) for _ in range(spec.n_train)]
    seen = {ex.tokens.tobytes() for ex in train}
    valid = []
    attempts = 0
    while len(valid) < spec.n_valid:
        ex = gen(valid_rng, spec)
        attempts += 1
        if ex.tokens.tobytes() in seen and attempts < 100 * spec.n_valid:
            continue
        valid.append(ex)
    return train, valid


def collate(examples) -> Batch:
    t = max(len(ex.tokens) for ex in examples)
    b = len(examples)
    tokens = np.full((b, t), PAD, dtype=np.int64)
    targets = np.full((b, t), IGNORE, dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i, ex in enumerate(examples):
        n = len(ex.tokens)
        tokens[i, :n] = ex.tokens
        targets[i, :n] = ex.targets
        mask[i, :n] = True
    return Batch(tokens, mask, targets)


def batches(examples, batch_size: int, rng=None, drop_last: bool = False) -> list:
    """Split into padded batches, shuffling first when ``rng`` is given."""
    order = np.arange(len(examples))
    if rng is not None:
        rng.shuffle(order)
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        out.append(collate([examples[i] for i in idx]))
    return out
