"""Probability vectors, temperature scaling, sampling and divergences.

Distributions are plain 1-D float64 numpy arrays. Functions that take a
``Distribution`` accept anything array-like and validate it with
:func:`as_distribution`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import InvalidTemperature, InvalidWeights, VocabMismatch

PROB_ATOL = 1e-9
Q_FLOOR = 1e-12


def as_distribution(probs, atol: float = PROB_ATOL) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidWeights("distribution must be a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidWeights("distribution entries must be finite and >= 0")
    if abs(p.sum() - 1.0) > atol:
        raise InvalidWeights(f"distribution sums to {p.sum()!r}, not 1")
    return p


def normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidWeights("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidWeights("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise InvalidWeights("at least one weight must be positive")
    return w / total


def softmax_with_temperature(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / temperature`` along the last axis.

    ``temperature == 0`` gives the greedy one-hot at the argmax (lowest id on
    ties). Works row-wise on 2-D input.
    """
    z = np.asarray(logits, dtype=np.float64)
    if temperature < 0:
        raise InvalidTemperature(f"temperature must be >= 0, got {temperature}")
    if not np.all(np.isfinite(z)):
        raise InvalidWeights("logits must be finite")
    if temperature == 0:
        out = np.zeros_like(z)
        idx = np.argmax(z, axis=-1)
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
        return out
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def temper(probs, temperature: float) -> np.ndarray:
    """Apply temperature to probabilities, i.e. ``softmax(log p / T)``.

    Zero-probability entries stay at zero. Row-wise on 2-D input.
    """
    p = np.asarray(probs, dtype=np.float64)
    if temperature < 0:
        raise InvalidTemperature(f"temperature must be >= 0, got {temperature}")
    if temperature == 1:
        return p.copy()
    if temperature == 0:
        out = np.zeros_like(p)
        idx = np.argmax(p, axis=-1)
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
        return out
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    s = logp / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def inverse_cdf(probs: np.ndarray, u: float) -> int:
    """Smallest token id whose cumulative mass exceeds ``u``."""
    cdf = np.cumsum(probs)
    tok = int(np.searchsorted(cdf, u, side="right"))
    if tok >= len(probs):
        # u landed past a cdf that rounds below 1
        tok = int(np.flatnonzero(probs > 0)[-1])
    return tok


def sample_token(dist, rng) -> int:
    """Draw one token by inverse-CDF over ascending ids.

    ``rng`` is anything with a ``random()`` method returning a float in
    [0, 1); exactly one draw is consumed.
    """
    return inverse_cdf(np.asarray(dist, dtype=np.float64), rng.random())


class UniformStream:
    """Replays a fixed array of uniforms through a ``random()`` method.

    Lets the scalar reference paths consume exactly the draws a batched
    kernel was handed.
    """

    def __init__(self, uniforms):
        self._u = np.asarray(uniforms, dtype=np.float64)
        self.pos = 0

    def random(self) -> float:
        v = float(self._u[self.pos])
        self.pos += 1
        return v


# -- divergences --------------------------------------------------------------

_TAGS = ("FKL", "RKL", "JSD", "TVD")


@dataclass(frozen=True)
class DivergenceKind:
    tag: str
    beta: float | None = None

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise ValueError(f"unknown divergence {self.tag!r}")
        if self.tag == "JSD":
            if self.beta is None or not (0.0 < self.beta < 1.0):
                raise ValueError("JSD needs beta strictly inside (0, 1)")
        elif self.beta is not None:
            raise ValueError(f"{self.tag} takes no beta")

    def __str__(self):
        return f"JSD({self.beta:g})" if self.tag == "JSD" else self.tag

    @classmethod
    def parse(cls, text: str) -> "DivergenceKind":
        """Parse ``"FKL"``, ``"RKL"``, ``"TVD"``, ``"JSD"`` or ``"JSD(0.3)"``."""
        if isinstance(text, DivergenceKind):
            return text
        m = re.fullmatch(r"\s*(FKL|RKL|TVD|JSD)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*", str(text).upper())
        if not m:
            raise ValueError(f"cannot parse divergence {text!r}")
        tag, beta = m.group(1), m.group(2)
        if tag == "JSD":
            return cls("JSD", float(beta) if beta else 0.5)
        if beta:
            raise ValueError(f"{tag} takes no beta")
        return cls(tag)


FKL = DivergenceKind("FKL")
RKL = DivergenceKind("RKL")
TVD = DivergenceKind("TVD")


def JSD(beta: float = 0.5) -> DivergenceKind:
    return DivergenceKind("JSD", beta)


def _kl_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise KL(a || b) with 0 log 0 = 0 and +inf where b = 0 < a."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0)
    return terms.sum(axis=-1)


def divergence_rows(kind: DivergenceKind, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``divergence`` over the last axis of equal-shape arrays, no validation."""
    if kind.tag == "TVD":
        return 0.5 * np.abs(p - q).sum(axis=-1)
    if kind.tag == "FKL":
        return _kl_rows(p, q)
    if kind.tag == "RKL":
        return _kl_rows(q, p)
    b = kind.beta
    m = b * p + (1.0 - b) * q
    return b * _kl_rows(p, m) + (1.0 - b) * _kl_rows(q, m)


def divergence(kind: DivergenceKind, p, q) -> float:
    """D(p || q) in nats; FKL/RKL return ``inf`` when the reference has a zero
    where the argument has mass."""
    kind = DivergenceKind.parse(kind)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise VocabMismatch(f"vocab sizes differ: {p.shape} vs {q.shape}")
    return float(divergence_rows(kind, p, q))


def divergence_grad_q(kind: DivergenceKind, p, q) -> np.ndarray:
    """Partial derivatives of D(p || q) with respect to each ``q_c``.

    ``q`` is floored at 1e-12 first. Works row-wise on 2-D input. The TVD
    subgradient is 0 at exact ties.
    """
    kind = DivergenceKind.parse(kind)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise VocabMismatch(f"vocab sizes differ: {p.shape} vs {q.shape}")
    q = np.maximum(q, Q_FLOOR)
    if kind.tag == "FKL":
        return -p / q
    if kind.tag == "RKL":
        with np.errstate(divide="ignore"):
            return np.log(q) - np.log(p) + 1.0
    if kind.tag == "TVD":
        return 0.5 * np.sign(q - p)
    b = kind.beta
    m = b * p + (1.0 - b) * q
    return (1.0 - b) * (np.log(q) - np.log(m))


def chain_rule_logit_grad(dD_dq, q) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    g = np.asarray(dD_dq, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if g.shape != q.shape:
        raise VocabMismatch(f"shapes differ: {g.shape} vs {q.shape}")
    return q * (g - (q * g).sum(axis=-1, keepdims=True))


def overlap(p, q) -> float:
    """Sum of componentwise minima, i.e. 1 - TVD(p, q)."""
    return float(np.minimum(np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)).sum())
