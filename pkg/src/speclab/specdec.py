"""Speculative decoding: one block at a time, full decodes, and batched runs.

The scalar path (:func:`spec_step`, :func:`spec_decode`) is the readable
reference. :func:`spec_decode_batch` runs many decodes through the compiled
kernel and consumes uniforms in exactly the same order, so feeding a kernel
row to the scalar path through :class:`~speclab.prob.UniformStream`
reproduces that row.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .lm import Context, same_shape
from .prob import normalize, sample_token

LENIENCE_KINDS = ("NONE", "LIN", "SQ", "EXP")
_KIND_CODE = {"NONE": _kernels.LEN_NONE, "LIN": _kernels.LEN_LIN,
              "SQ": _kernels.LEN_SQ, "EXP": _kernels.LEN_EXP}
CORRECTION_NAMES = ("NONE", "RESIDUAL", "BONUS")
TRACE_COLUMNS = ("example_id", "block_index", "proposed_len", "n_accepted", "correction_kind")


@dataclass(frozen=True)
class LenienceSpec:
    kind: str = "NONE"
    eps: float = 1.0

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in LENIENCE_KINDS:
            raise ValueError(f"unknown lenience kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "NONE":
            object.__setattr__(self, "eps", 1.0)
        elif not 0.0 < self.eps <= 1.0:
            raise ValueError(f"lenience eps must be in (0, 1], got {self.eps}")

    @property
    def lossless(self) -> bool:
        return self.kind == "NONE" or self.eps == 1.0

    @property
    def code(self) -> int:
        return _KIND_CODE[self.kind]


LOSSLESS = LenienceSpec()


@dataclass(frozen=True)
class SpecConfig:
    gamma: int = 3
    t_max: int = 16
    temperature: float = 1.0
    lenience: LenienceSpec = LOSSLESS

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class BlockRecord:
    proposed: tuple
    n_accepted: int
    correction: int | None
    correction_kind: str

    @property
    def emitted(self) -> int:
        return self.n_accepted + (self.correction is not None)


@dataclass
class DecodeTrace:
    blocks: list = field(default_factory=list)
    output: tuple = ()
    draft_calls: int = 0
    target_calls: int = 0

    @property
    def accepted(self) -> int:
        return sum(b.n_accepted for b in self.blocks)


def lenience_value(spec: LenienceSpec, p_val):
    """f(p, eps): LIN p/eps, SQ p/eps^2, EXP p^eps, NONE p."""
    if spec.kind == "LIN":
        return p_val / spec.eps
    if spec.kind == "SQ":
        return p_val / spec.eps ** 2
    if spec.kind == "EXP":
        return p_val ** spec.eps
    return p_val


def acceptance_prob(spec: LenienceSpec, p_val, q_val):
    """Probability a drafted token with probabilities (p, q) is kept."""
    return np.minimum(1.0, lenience_value(spec, p_val) / q_val)


def residual_dist(p, q) -> np.ndarray:
    """normalize(max(0, p - q)), or ``p`` itself when that mass is below 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    r = np.maximum(p - np.asarray(q, dtype=np.float64), 0.0)
    if r.sum() < _kernels.RESIDUAL_MIN_MASS:
        return p.copy()
    return normalize(r)


def spec_step(target, draft, context: Context, config: SpecConfig, rng):
    """One draft-then-verify block.

    Returns ``(emitted_tokens, BlockRecord)``. Draws from ``rng``: one per
    drafted token, then ``gamma`` acceptance uniforms, then one for the
    residual or bonus token when there is one.
    """
    temp = config.temperature
    eos = target.eos
    tokens = list(context.tokens)
    budget = config.t_max - len(context.prefix)
    if budget < 1:
        raise ValueError("no length budget left")
    g = min(config.gamma, budget)

    proposed, q_dists = [], []
    for _ in range(g):
        q = draft.next_dist(tokens + proposed, temp)
        y = sample_token(q, rng)
        proposed.append(y)
        q_dists.append(q)
        if y == eos:
            break

    # verification pass: one target distribution per drafted position, plus the
    # bonus position when the block did not end in EOS
    n_pos = len(proposed) + (proposed[-1] != eos)
    p_dists = [target.next_dist(tokens + proposed[:i], temp) for i in range(n_pos)]

    thresholds = [lenience_value(config.lenience, p_dists[i][y]) / q_dists[i][y]
                  for i, y in enumerate(proposed)]
    uniforms = [rng.random() for _ in range(config.gamma)]
    n = next((i for i, r in enumerate(thresholds) if uniforms[i] > r), len(proposed))

    emitted = proposed[:n]
    if n < len(proposed):
        corr = sample_token(residual_dist(p_dists[n], q_dists[n]), rng)
        kind = "RESIDUAL"
    elif len(proposed) == config.gamma and proposed[-1] != eos and budget > config.gamma:
        corr = sample_token(p_dists[n], rng)
        kind = "BONUS"
    else:
        corr, kind = None, "NONE"
    if corr is not None:
        emitted = emitted + [corr]
    return emitted, BlockRecord(tuple(proposed), n, corr, kind)


def spec_decode(target, draft, x: Sequence[int], config: SpecConfig, rng):
    """Decode one sequence; returns ``(output_tokens, DecodeTrace)``."""
    same_shape(target, draft)
    trace = DecodeTrace()
    y: list[int] = []
    while len(y) < config.t_max and not (y and y[-1] == target.eos):
        emitted, rec = spec_step(target, draft, Context(tuple(x), tuple(y)), config, rng)
        y.extend(emitted)
        trace.blocks.append(rec)
        trace.target_calls += 1
        trace.draft_calls += len(rec.proposed)
    trace.output = tuple(y)
    return trace.output, trace


# -- batched decoding ---------------------------------------------------------

@dataclass
class TraceBatch:
    """Array form of many :class:`DecodeTrace` records.

    Per-block arrays are ``[sequence, block]`` and valid where ``block <
    n_blocks[sequence]``. ``block_kind`` uses 0 NONE, 1 RESIDUAL, 2 BONUS.
    """

    gamma: int
    tokens: np.ndarray
    lengths: np.ndarray
    n_blocks: np.ndarray
    draft_calls: np.ndarray
    block_proposed: np.ndarray
    block_accepted: np.ndarray
    block_kind: np.ndarray

    def __len__(self):
        return len(self.lengths)

    @property
    def target_calls(self) -> np.ndarray:
        return self.n_blocks

    def block_mask(self) -> np.ndarray:
        return np.arange(self.block_accepted.shape[1])[None, :] < self.n_blocks[:, None]

    @property
    def accepted(self) -> np.ndarray:
        return np.where(self.block_mask(), self.block_accepted, 0).sum(axis=1)

    def output(self, i: int) -> tuple:
        return tuple(int(t) for t in self.tokens[i, :self.lengths[i]])

    def outputs(self) -> list[tuple]:
        return [self.output(i) for i in range(len(self))]

    def to_traces(self) -> list[DecodeTrace]:
        out = []
        for i in range(len(self)):
            seq = self.output(i)
            pos, blocks = 0, []
            for b in range(self.n_blocks[i]):
                n = int(self.block_accepted[i, b])
                kind = CORRECTION_NAMES[self.block_kind[i, b]]
                corr = seq[pos + n] if kind != "NONE" else None
                # proposals past the first rejection are not kept by the kernel
                prop = seq[pos:pos + n] + (-1,) * (int(self.block_proposed[i, b]) - n)
                blocks.append(BlockRecord(prop, n, corr, kind))
                pos += n + (corr is not None)
            out.append(DecodeTrace(blocks, seq, int(self.draft_calls[i]), int(self.n_blocks[i])))
        return out

    @classmethod
    def from_traces(cls, traces: Sequence[DecodeTrace], gamma: int) -> "TraceBatch":
        n = len(traces)
        width = max([len(t.output) for t in traces] + [len(t.blocks) for t in traces] + [1])
        tokens = np.full((n, width), -1, dtype=np.int64)
        prop = np.zeros((n, width), dtype=np.int64)
        acc = np.zeros((n, width), dtype=np.int64)
        kind = np.zeros((n, width), dtype=np.int64)
        for i, tr in enumerate(traces):
            tokens[i, :len(tr.output)] = tr.output
            for b, rec in enumerate(tr.blocks):
                prop[i, b] = len(rec.proposed)
                acc[i, b] = rec.n_accepted
                kind[i, b] = CORRECTION_NAMES.index(rec.correction_kind)
        return cls(gamma, tokens,
                   np.array([len(t.output) for t in traces], dtype=np.int64),
                   np.array([len(t.blocks) for t in traces], dtype=np.int64),
                   np.array([t.draft_calls for t in traces], dtype=np.int64),
                   prop, acc, kind)


def spec_decode_batch(target, draft, prompts: Sequence[Sequence[int]], config: SpecConfig,
                      rng) -> TraceBatch:
    """Decode once per prompt (repeat prompts for more samples)."""
    same_shape(target, draft)
    p_tab = target.probs(config.temperature)
    q_tab = draft.probs(config.temperature)
    p_keys = np.array([target.key(x) for x in prompts], dtype=np.int64)
    q_keys = np.array([draft.key(x) for x in prompts], dtype=np.int64)
    u = rng.random((len(p_keys), _kernels.uniforms_per_decode(config.gamma, config.t_max)))
    res = _kernels.spec_decode(p_tab, q_tab, p_keys, q_keys,
                               target.base, target.n_keys, draft.base, draft.n_keys,
                               target.eos, config.gamma, config.t_max,
                               config.lenience.code, config.lenience.eps, u)
    return TraceBatch(config.gamma, *res)


def as_batch(traces, gamma: int | None = None) -> TraceBatch:
    if isinstance(traces, TraceBatch):
        return traces
    if isinstance(traces, DecodeTrace):
        traces = [traces]
    traces = list(traces)
    if gamma is None:
        gamma = max((len(b.proposed) for t in traces for b in t.blocks), default=1)
    return TraceBatch.from_traces(traces, gamma)


def simulated_cost(trace, c: float) -> float:
    """Target calls cost 1 each, draft calls cost ``c`` each."""
    if c <= 0:
        raise ValueError("c must be > 0")
    if isinstance(trace, DecodeTrace):
        return trace.target_calls + c * trace.draft_calls
    batch = as_batch(trace)
    return float(batch.n_blocks.sum() + c * batch.draft_calls.sum())


def relative_latency(trace, c: float) -> float:
    """Simulated cost per emitted token (plain target decoding costs 1 per token)."""
    if isinstance(trace, DecodeTrace):
        return simulated_cost(trace, c) / len(trace.output)
    batch = as_batch(trace)
    return simulated_cost(batch, c) / float(batch.lengths.sum())


def write_trace_csv(path, traces: Iterable[DecodeTrace] | TraceBatch) -> None:
    batch = traces if isinstance(traces, TraceBatch) else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        if batch is not None:
            for i in range(len(batch)):
                for b in range(batch.n_blocks[i]):
                    w.writerow([i, b, int(batch.block_proposed[i, b]), int(batch.block_accepted[i, b]),
                                CORRECTION_NAMES[batch.block_kind[i, b]]])
            return
        for i, tr in enumerate(traces):
            for b, rec in enumerate(tr.blocks):
                w.writerow([i, b, len(rec.proposed), rec.n_accepted, rec.correction_kind])
