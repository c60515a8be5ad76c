"""Acceptance rate, block efficiency and speedup, measured and closed-form."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import oracle
from .errors import EmptyTraces, TooLarge
from .lm import generate_batch
from .prob import TVD, divergence_rows
from .specdec import as_batch


@dataclass
class MetricsReport:
    alpha_empirical: float
    alpha_tvd: float
    tau_empirical: float
    tau_theoretical: float
    speedup: float
    c: float
    gamma: int
    L_p: float

    @classmethod
    def columns(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.columns())
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in astuple(self)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in zip(self.columns(), astuple(self))})


def expected_beta(target, draft, context, temperature: float = 1.0) -> float:
    """Token-level acceptance rate: sum of componentwise minima."""
    p = target.next_dist(context, temperature)
    q = draft.next_dist(context, temperature)
    return float(np.minimum(p, q).sum())


def empirical_alpha(traces, per_example: bool = False):
    """Accepted draft tokens over emitted tokens, pooled across traces.

    With ``per_example=True`` returns ``(pooled, mean_of_per_trace_ratios)``.
    """
    batch = _nonempty(traces)
    acc = batch.accepted.astype(np.float64)
    lens = batch.lengths.astype(np.float64)
    pooled = float(acc.sum() / lens.sum())
    if per_example:
        return pooled, float(np.mean(acc / lens))
    return pooled


def empirical_tau(traces, gamma: int | None = None) -> float:
    """Mean tokens emitted per block (accepted plus any residual/bonus token)."""
    batch = _nonempty(traces, gamma)
    if gamma is not None and batch.gamma != gamma:
        raise ValueError(f"traces were decoded with gamma={batch.gamma}, not {gamma}")
    return float(batch.lengths.sum() / batch.n_blocks.sum())


def theoretical_tau(alpha: float, gamma: int) -> float:
    """(1 - alpha^(gamma+1)) / (1 - alpha), with the alpha = 1 limit gamma + 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if alpha == 1.0:
        return float(gamma + 1)
    return (1.0 - alpha ** (gamma + 1)) / (1.0 - alpha)


def speedup(tau: float, c: float, gamma: int) -> float:
    if c <= 0:
        raise ValueError("c must be > 0")
    return tau / (c * gamma + 1.0)


def alpha_from_tvd(target, draft, x, t_max: int, temperature: float = 1.0,
                   mc_samples: int | None = None, rng=None) -> float:
    """Acceptance rate as one minus the expected summed token TVD over target
    outputs, divided by the expected target length.

    Exact by enumeration when the instance is small; otherwise needs
    ``mc_samples`` (and ``rng``) and estimates both expectations from target
    samples.
    """
    try:
        return oracle.alpha_from_sequences(target, draft, x, t_max, temperature)
    except TooLarge:
        if not mc_samples:
            raise
    rng = rng if rng is not None else np.random.default_rng(0)
    tokens, lengths = generate_batch(target, [x] * mc_samples, t_max, temperature, rng)
    p_tab, q_tab = target.probs(temperature), draft.probs(temperature)
    kp = np.full(mc_samples, target.key(x))
    kq = np.full(mc_samples, draft.key(x))
    total = 0.0
    for t in range(t_max):
        alive = lengths > t
        if not alive.any():
            break
        total += divergence_rows(TVD, p_tab[kp[alive]], q_tab[kq[alive]]).sum()
        tok = np.maximum(tokens[:, t], 0)
        kp = (kp * target.base + tok) % target.n_keys
        kq = (kq * draft.base + tok) % draft.n_keys
    return 1.0 - total / lengths.sum()


def metrics_report(traces, target, draft, prompts, c: float, t_max: int,
                   temperature: float = 1.0) -> MetricsReport:
    """Summarize decodes of ``prompts`` against exact alpha and L_p."""
    batch = _nonempty(traces)
    alphas, lps = zip(*[oracle.markov_alpha(target, draft, x, t_max, temperature)[:2] for x in prompts])
    a_tvd = float(np.mean(alphas))
    tau = empirical_tau(batch)
    return MetricsReport(
        alpha_empirical=empirical_alpha(batch),
        alpha_tvd=a_tvd,
        tau_empirical=tau,
        tau_theoretical=theoretical_tau(min(max(a_tvd, 0.0), 1.0), batch.gamma),
        speedup=speedup(tau, c, batch.gamma),
        c=float(c),
        gamma=int(batch.gamma),
        L_p=float(np.mean(lps)),
    )


def _nonempty(traces, gamma=None):
    if traces is None:
        raise EmptyTraces("no traces")
    batch = as_batch(traces, gamma)
    if len(batch) == 0:
        raise EmptyTraces("no traces")
    return batch
