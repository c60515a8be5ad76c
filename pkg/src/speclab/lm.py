"""Order-k tabular language models with exact next-token distributions.

Token ids ``0 .. vocab_size - 1`` are output tokens; ``eos`` (default 0) is
one of them. ``bos == vocab_size`` only ever appears as left padding inside
context keys. A context key is the last ``order`` tokens of ``prompt +
prefix`` read as a base-``(vocab_size + 1)`` number, so every model stores a
dense ``((vocab_size + 1) ** order, vocab_size)`` table.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import InvalidWeights, MissingContext, VocabMismatch
from .prob import Q_FLOOR, sample_token, softmax_with_temperature, temper

MAX_ORDER = 2
MAX_VOCAB = 32
FILE_FORMAT = "speclab-lm/1"


class Context(NamedTuple):
    """Prompt plus generated prefix; ``tokens`` is what the model conditions on."""

    prompt: tuple
    prefix: tuple = ()

    @property
    def tokens(self) -> tuple:
        return tuple(self.prompt) + tuple(self.prefix)


def _tokens(context) -> Sequence[int]:
    return context.tokens if isinstance(context, Context) else context


class _KeyedModel:
    vocab_size: int
    order: int
    eos: int

    @property
    def bos(self) -> int:
        return self.vocab_size

    @property
    def base(self) -> int:
        return self.vocab_size + 1

    @property
    def n_keys(self) -> int:
        return self.base ** self.order

    def key(self, context: Sequence[int]) -> int:
        """Dense row index for the last ``order`` tokens of ``context``."""
        k = 0
        tail = list(_tokens(context))[-self.order:] if self.order else []
        for tok in [self.bos] * (self.order - len(tail)) + tail:
            k = k * self.base + int(tok)
        return k

    def advance(self, key: int, token: int) -> int:
        return (key * self.base + int(token)) % self.n_keys

    def key_tokens(self, key: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.order):
            key, r = divmod(key, self.base)
            out.append(r)
        return tuple(reversed(out))

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        raise NotImplementedError

    def next_dist(self, context: Sequence[int], temperature: float = 1.0) -> np.ndarray:
        row = self.key(context)
        return self._row(row, temperature)

    def _row(self, row: int, temperature: float) -> np.ndarray:
        raise NotImplementedError


class TabularLM(_KeyedModel):
    """Frozen model whose rows are explicit probability vectors."""

    def __init__(self, table, order: int, eos: int = 0):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2:
            raise InvalidWeights("table must be 2-D (contexts x vocab)")
        self.vocab_size = table.shape[1]
        self.order = int(order)
        self.eos = int(eos)
        _check_shape(self.vocab_size, self.order, self.eos)
        if table.shape[0] != self.n_keys:
            raise VocabMismatch(f"expected {self.n_keys} rows, got {table.shape[0]}")
        ok = ~np.isnan(table).any(axis=1)
        if np.any(table[ok] < 0) or np.any(np.abs(table[ok].sum(axis=1) - 1) > 1e-9):
            raise InvalidWeights("every row must be a probability vector")
        table.setflags(write=False)
        self.table = table
        self._tempered: dict[float, np.ndarray] = {}

    def __repr__(self):
        return f"TabularLM(vocab_size={self.vocab_size}, order={self.order}, eos={self.eos})"

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        t = float(temperature)
        if t not in self._tempered:
            tab = temper(np.nan_to_num(self.table, nan=1.0 / self.vocab_size), t)
            tab[np.isnan(self.table).any(axis=1)] = np.nan
            tab.setflags(write=False)
            self._tempered[t] = tab
        return self._tempered[t]

    def _row(self, row, temperature):
        if np.isnan(self.table[row]).any():
            raise MissingContext(f"no row for context {self.key_tokens(row)}")
        return self.probs(temperature)[row].copy()


class SoftmaxLM(_KeyedModel):
    """Trainable draft: each context row stores logits, probabilities are their
    softmax at temperature 1."""

    def __init__(self, logits, order: int, eos: int = 0):
        logits = np.array(logits, dtype=np.float64)
        if logits.ndim != 2:
            raise InvalidWeights("logits must be 2-D (contexts x vocab)")
        self.vocab_size = logits.shape[1]
        self.order = int(order)
        self.eos = int(eos)
        _check_shape(self.vocab_size, self.order, self.eos)
        if logits.shape[0] != self.n_keys:
            raise VocabMismatch(f"expected {self.n_keys} rows, got {logits.shape[0]}")
        if not np.all(np.isfinite(logits)):
            raise InvalidWeights("logits must be finite")
        self.logits = logits

    def __repr__(self):
        return f"SoftmaxLM(vocab_size={self.vocab_size}, order={self.order}, eos={self.eos})"

    @classmethod
    def from_tabular(cls, model: TabularLM) -> "SoftmaxLM":
        return cls(np.log(np.maximum(model.table, Q_FLOOR)), model.order, model.eos)

    @classmethod
    def zeros(cls, vocab_size: int, order: int, eos: int = 0) -> "SoftmaxLM":
        return cls(np.zeros(((vocab_size + 1) ** order, vocab_size)), order, eos)

    def copy(self) -> "SoftmaxLM":
        return SoftmaxLM(self.logits.copy(), self.order, self.eos)

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        return softmax_with_temperature(self.logits, temperature)

    def _row(self, row, temperature):
        return softmax_with_temperature(self.logits[row], temperature)

    def to_tabular(self) -> TabularLM:
        return TabularLM(self.probs(1.0), self.order, self.eos)


def _check_shape(vocab_size: int, order: int, eos: int) -> None:
    if vocab_size < 2:
        raise InvalidWeights("vocab_size must be >= 2")
    if vocab_size > MAX_VOCAB or not 0 <= order <= MAX_ORDER:
        raise InvalidWeights(f"only vocab <= {MAX_VOCAB} and order <= {MAX_ORDER} are supported")
    if not 0 <= eos < vocab_size:
        raise InvalidWeights("eos must be an output token id")


def same_shape(a: _KeyedModel, b: _KeyedModel) -> None:
    if a.vocab_size != b.vocab_size or a.eos != b.eos:
        raise VocabMismatch(f"{a!r} and {b!r} have different vocabularies")


def next_dist(model: _KeyedModel, context: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    return model.next_dist(context, temperature)


def generate(model: _KeyedModel, x: Sequence[int], t_max: int, temperature: float, rng) -> list[int]:
    """Sample one continuation of prompt ``x``; stops at EOS or ``t_max`` tokens."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    y: list[int] = []
    key = model.key(x)
    while len(y) < t_max:
        tok = sample_token(model._row(key, temperature), rng)
        y.append(tok)
        if tok == model.eos:
            break
        key = model.advance(key, tok)
    return y


def generate_batch(model: _KeyedModel, prompts: Sequence[Sequence[int]], t_max: int,
                   temperature: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`generate` over many prompts.

    Returns ``(tokens, lengths)`` with ``tokens`` padded by -1. Draws one
    ``(len(prompts), t_max)`` block of uniforms from ``rng``.
    """
    tab = model.probs(temperature)
    if np.isnan(tab).any():
        raise MissingContext("model has missing rows; use generate() for partial tables")
    keys = np.array([model.key(x) for x in prompts], dtype=np.int64)
    u = rng.random((len(keys), t_max))
    return _kernels.generate(_kernels.cdf_table(tab), _kernels.last_positive(tab), keys,
                             model.base, model.n_keys, model.eos, t_max, u)


def seq_logprob(model: _KeyedModel, x: Sequence[int], y: Sequence[int], temperature: float = 1.0) -> float:
    """log p(y | x); ``-inf`` if any step has probability zero."""
    key = model.key(x)
    total = 0.0
    for tok in y:
        pr = model._row(key, temperature)[tok]
        if pr <= 0:
            return -math.inf
        total += math.log(pr)
        key = model.advance(key, tok)
    return total


def random_tabular_lm(vocab_size: int, order: int, concentration: float, eos_bias: float,
                      rng, eos: int = 0) -> TabularLM:
    """Rows drawn from a symmetric Dirichlet, EOS mass scaled by ``exp(eos_bias)``."""
    if concentration <= 0:
        raise ValueError("concentration must be > 0")
    _check_shape(vocab_size, order, eos)
    n_keys = (vocab_size + 1) ** order
    rows = rng.dirichlet(np.full(vocab_size, float(concentration)), size=n_keys)
    rows[:, eos] *= math.exp(eos_bias)
    rows /= rows.sum(axis=1, keepdims=True)
    return TabularLM(rows, order, eos)


def blend_lm(target: TabularLM, noise: TabularLM, lam: float) -> TabularLM:
    """Row-wise mixture ``lam * target + (1 - lam) * noise``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must be in [0, 1]")
    same_shape(target, noise)
    if target.order != noise.order:
        raise VocabMismatch("models have different orders")
    return TabularLM(lam * target.table + (1.0 - lam) * noise.table, target.order, target.eos)


# -- serialization ------------------------------------------------------------

def _key_label(model: _KeyedModel, row: int) -> str:
    return ",".join(str(t) for t in model.key_tokens(row))


def model_to_dict(model: _KeyedModel) -> dict:
    kind = "softmax" if isinstance(model, SoftmaxLM) else "tabular"
    values = model.logits if kind == "softmax" else model.table
    rows = {}
    for r in range(model.n_keys):
        if not np.isnan(values[r]).any():
            rows[_key_label(model, r)] = [float(v) for v in values[r]]
    return {"format": FILE_FORMAT, "kind": kind, "vocab_size": model.vocab_size,
            "order": model.order, "eos": model.eos, "rows": rows}


def model_from_dict(data: dict) -> _KeyedModel:
    if data.get("format") != FILE_FORMAT:
        raise ValueError(f"not a {FILE_FORMAT} document")
    v, k, eos = int(data["vocab_size"]), int(data["order"]), int(data["eos"])
    n_keys = (v + 1) ** k
    values = np.full((n_keys, v), np.nan)
    for label, row in data["rows"].items():
        toks = [int(t) for t in label.split(",")] if label else []
        if len(toks) != k:
            raise ValueError(f"context {label!r} does not have {k} tokens")
        idx = 0
        for t in toks:
            idx = idx * (v + 1) + t
        values[idx] = row
    if data["kind"] == "softmax":
        if np.isnan(values).any():
            raise MissingContext("softmax models must store every row")
        return SoftmaxLM(values, k, eos)
    return TabularLM(values, k, eos)


def save_model(model: _KeyedModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> _KeyedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
