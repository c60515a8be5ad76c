"""Exact computations on small instances.

Two families live here:

* brute-force enumeration of sequence distributions (hard size guards, no
  silent truncation), used to verify losslessness, the acceptance-rate
  decomposition and the on-policy bound;
* forward dynamic programs over context keys, exact for any tabular model
  regardless of ``vocab ** T_max``; these are what training and sweeps use
  at vocab 16, and the enumeration results cross-check them.

A ``SeqDist`` is a ``dict`` mapping output-token tuples to probabilities.
Sequences of different lengths are distinct atoms.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels, specdec
from .errors import BoundViolation, TooLarge
from .lm import generate_batch, random_tabular_lm, same_shape
from .prob import TVD, divergence_rows

ENUM_MAX_VOCAB = 5
ENUM_MAX_T = 5
SPEC_MAX_VOCAB = 4
SPEC_MAX_GAMMA = 3
SPEC_MAX_T = 4
BOUND_TOL = 1e-10


def _guard_enum(model, t_max):
    if model.vocab_size > ENUM_MAX_VOCAB or t_max > ENUM_MAX_T:
        raise TooLarge(f"enumeration limited to vocab <= {ENUM_MAX_VOCAB}, T_max <= {ENUM_MAX_T}")


def _tvd(p, q) -> float:
    return float(0.5 * np.abs(p - q).sum())


def seqdist_tv(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


def seqdist_mass(d: dict) -> float:
    return math.fsum(d.values())


# -- enumeration --------------------------------------------------------------

def mixed_pattern_dist(x, pattern: str, target, draft, temperature: float = 1.0) -> dict:
    """Roll out ``len(pattern)`` steps, sampling step ``t`` from the target when
    ``pattern[t] == 'P'`` and from the draft when it is ``'Q'``; EOS stops."""
    pattern = pattern.upper()
    if set(pattern) - {"P", "Q"}:
        raise ValueError("pattern must only contain P and Q")
    _guard_enum(target, len(pattern))
    same_shape(target, draft)
    models = {"P": target, "Q": draft}
    out: dict = {}

    def expand(prefix, prob):
        t = len(prefix)
        if t == len(pattern) or (prefix and prefix[-1] == target.eos):
            out[prefix] = out.get(prefix, 0.0) + prob
            return
        dist = models[pattern[t]].next_dist(tuple(x) + prefix, temperature)
        for tok in np.flatnonzero(dist > 0):
            expand(prefix + (int(tok),), prob * dist[tok])

    expand((), 1.0)
    return out


def enumerate_seq_dist(model, x, t_max: int, temperature: float = 1.0) -> dict:
    """Exact p_{<=T}(y | x) by depth-first expansion."""
    return mixed_pattern_dist(x, "P" * t_max, model, model, temperature)


def _per_position_tvd(target, draft, x, y, temperature):
    return [_tvd(target.next_dist(tuple(x) + y[:t], temperature),
                 draft.next_dist(tuple(x) + y[:t], temperature)) for t in range(len(y))]


def exact_alpha(target, draft, x, t_max: int, temperature: float = 1.0):
    """``(alpha, L_p, A)`` with ``A[t-1] = E_{y~p}[1{t <= |y|} TVD(p_t, q_t)]``."""
    seqs = enumerate_seq_dist(target, x, t_max, temperature)
    A = np.zeros(t_max)
    L = 0.0
    for y, pr in seqs.items():
        L += pr * len(y)
        for t, d in enumerate(_per_position_tvd(target, draft, x, y, temperature)):
            A[t] += pr * d
    return 1.0 - A.sum() / L, L, A


def exact_epsilon(target, draft, x, t_max: int, temperature: float = 1.0):
    """``(epsilon, E)``: on-policy per-token-averaged TVD loss and its
    per-position decomposition over the draft's sequence distribution."""
    seqs = enumerate_seq_dist(draft, x, t_max, temperature)
    E = np.zeros(t_max)
    eps = 0.0
    for y, pr in seqs.items():
        d = _per_position_tvd(target, draft, x, y, temperature)
        eps += pr * sum(d) / len(y)
        for t, v in enumerate(d):
            E[t] += pr * v
    return eps, E


def alpha_from_sequences(target, draft, x, t_max: int, temperature: float = 1.0):
    """1 - E_{y~p}[sum_t TVD(p_t, q_t)] / L_p, summed per whole sequence."""
    seqs = enumerate_seq_dist(target, x, t_max, temperature)
    num = math.fsum(pr * sum(_per_position_tvd(target, draft, x, y, temperature)) for y, pr in seqs.items())
    L = math.fsum(pr * len(y) for y, pr in seqs.items())
    return 1.0 - num / L


def exact_specdec_dist(target, draft, x, config: specdec.SpecConfig) -> dict:
    """Exact output distribution of speculative decoding.

    Per block, every draft proposal tuple is enumerated with its probability,
    then every accept-prefix length, then every residual or bonus token.
    Continuations are memoized on the emitted prefix.
    """
    if (target.vocab_size > SPEC_MAX_VOCAB or config.gamma > SPEC_MAX_GAMMA
            or config.t_max > SPEC_MAX_T):
        raise TooLarge(f"exact SD limited to vocab <= {SPEC_MAX_VOCAB}, gamma <= {SPEC_MAX_GAMMA}, "
                       f"T_max <= {SPEC_MAX_T}")
    same_shape(target, draft)
    eos, gamma, t_max, temp = target.eos, config.gamma, config.t_max, config.temperature
    x = tuple(x)

    def proposals(prefix, g):
        out = []

        def rec(props, pr, q_dists):
            if len(props) == g or (props and props[-1] == eos):
                out.append((props, pr, q_dists))
                return
            q = draft.next_dist(x + prefix + props, temp)
            for tok in np.flatnonzero(q > 0):
                rec(props + (int(tok),), pr * q[tok], q_dists + (q,))

        rec((), 1.0, ())
        return out

    def block_outcomes(prefix):
        budget = t_max - len(prefix)
        g = min(gamma, budget)
        chunks = defaultdict(float)
        for props, pr_q, q_dists in proposals(prefix, g):
            p_dists = [target.next_dist(x + prefix + props[:i], temp) for i in range(len(props))]
            acc = [min(1.0, specdec.lenience_value(config.lenience, p_dists[i][y]) / q_dists[i][y])
                   for i, y in enumerate(props)]
            run = pr_q
            for n, y in enumerate(props):
                if acc[n] < 1.0:
                    res = specdec.residual_dist(p_dists[n], q_dists[n])
                    for z in np.flatnonzero(res > 0):
                        chunks[props[:n] + (int(z),)] += run * (1.0 - acc[n]) * res[z]
                run *= acc[n]
            if run == 0.0:
                continue
            if len(props) == gamma and props[-1] != eos and budget > gamma:
                p_next = target.next_dist(x + prefix + props, temp)
                for z in np.flatnonzero(p_next > 0):
                    chunks[props + (int(z),)] += run * p_next[z]
            else:
                chunks[props] += run
        return chunks

    @lru_cache(maxsize=None)
    def continuations(prefix):
        if len(prefix) >= t_max or (prefix and prefix[-1] == eos):
            return {(): 1.0}
        out = defaultdict(float)
        for chunk, pr in block_outcomes(prefix).items():
            for suffix, pr2 in continuations(prefix + chunk).items():
                out[chunk + suffix] += pr * pr2
        return dict(out)

    return continuations(())


# -- bound audit --------------------------------------------------------------

@dataclass
class OracleReport:
    alpha_exact: float
    L_p: float
    epsilon: float
    A: list
    E: list
    bound_value: float
    bound_value_main: float
    lemma_residuals: dict = field(default_factory=dict)

    @property
    def bound_slack(self) -> float:
        return self.alpha_exact - self.bound_value

    @property
    def bound_slack_main(self) -> float:
        return self.alpha_exact - self.bound_value_main

    def to_record(self) -> dict:
        d = asdict(self)
        d["bound_slack"] = self.bound_slack
        d["bound_slack_main"] = self.bound_slack_main
        return d


def oracle_report(target, draft, x, t_max: int, temperature: float = 1.0) -> OracleReport:
    """Everything :func:`check_bounds` needs for one instance.

    ``lemma_residuals`` also holds the acceptance rate computed the other way
    (accepted / emitted tokens of speculative decoding with ``gamma = T_max``)
    and the variational identities for ``A_t`` and ``E_t`` as pattern TVDs.
    """
    alpha, L, A = exact_alpha(target, draft, x, t_max, temperature)
    eps, E = exact_epsilon(target, draft, x, t_max, temperature)
    stats = exact_block_stats(target, draft, x, specdec.SpecConfig(gamma=t_max, t_max=t_max,
                                                                   temperature=temperature))
    var_a = max(abs(A[t - 1] - seqdist_tv(mixed_pattern_dist(x, "P" * t, target, draft, temperature),
                                          mixed_pattern_dist(x, "P" * (t - 1) + "Q", target, draft, temperature)))
                for t in range(1, t_max + 1))
    var_e = max(abs(E[t - 1] - seqdist_tv(mixed_pattern_dist(x, "Q" * (t - 1) + "P", target, draft, temperature),
                                          mixed_pattern_dist(x, "Q" * t, target, draft, temperature)))
                for t in range(1, t_max + 1))
    residuals = {
        "alpha_identity": abs(stats["accepted"] / stats["tokens"] - (1.0 - A.sum() / L)),
        "variational_A": var_a,
        "variational_E": var_e,
    }
    return OracleReport(alpha, L, eps, A.tolist(), E.tolist(),
                        1.0 - 2.0 * t_max ** 2 * eps / L,
                        1.0 - t_max * (t_max / L) * eps,
                        residuals)


def check_bounds(report: OracleReport, t_max: int, tol: float = BOUND_TOL) -> dict:
    """Check the decomposition, the per-position bound and the final bound.

    Returns the residuals (positive means satisfied with room to spare for
    inequalities, absolute error for equalities). Raises
    :class:`BoundViolation` when any check fails.
    """
    A = np.asarray(report.A)
    E = np.asarray(report.E)
    res = dict(report.lemma_residuals)
    res["epsilon_lower"] = report.epsilon - E.sum() / t_max
    prev = np.concatenate([[0.0], np.cumsum(E)[:-1]])
    res["A_bound"] = float(np.min(2.0 * prev + E - A))
    res["alpha_bound"] = report.bound_slack
    failures = []
    for name in ("alpha_identity", "variational_A", "variational_E"):
        if name in res and res[name] > tol:
            failures.append(name)
    for name in ("epsilon_lower", "A_bound", "alpha_bound"):
        if res[name] < -tol:
            failures.append(name)
    if failures:
        raise BoundViolation(f"violated: {', '.join(failures)}", {"report": report.to_record(), "residuals": res})
    return res


def max_lemma_residual(residuals: dict) -> float:
    """Largest equality error among the audited identities."""
    return max(residuals.get(k, 0.0) for k in ("alpha_identity", "variational_A", "variational_E"))


AUDIT_COLUMNS = ("seed", "vocab", "T_max", "alpha", "epsilon", "bound_slack", "max_lemma_residual")


def audit_instance(seed: int, vocab: int = 3, t_max: int = 3, order: int = 1,
                   concentration: float = 1.0, eos_bias: float = 0.0) -> tuple[dict, OracleReport]:
    """Random (target, draft) pair from ``seed``: bound audit plus a lossless
    speculative-decoding check. Raises :class:`BoundViolation` on failure."""
    rng = np.random.default_rng(seed)
    target = random_tabular_lm(vocab, order, concentration, eos_bias, rng)
    draft = random_tabular_lm(vocab, order, concentration, eos_bias, rng)
    x = (int(rng.integers(1, vocab)),) if vocab > 1 else ()
    gamma = int(rng.integers(1, SPEC_MAX_GAMMA + 1))
    instance = {"seed": seed, "vocab": vocab, "T_max": t_max, "order": order, "gamma": gamma,
                "prompt": list(x)}
    report = oracle_report(target, draft, x, t_max)
    row = {"seed": seed, "vocab": vocab, "T_max": t_max, "alpha": report.alpha_exact,
           "epsilon": report.epsilon, "bound_slack": report.bound_slack,
           "max_lemma_residual": max_lemma_residual(report.lemma_residuals)}
    try:
        residuals = check_bounds(report, t_max)
        if vocab <= SPEC_MAX_VOCAB and t_max <= SPEC_MAX_T:
            sd = exact_specdec_dist(target, draft, x, specdec.SpecConfig(gamma=gamma, t_max=t_max))
            tv = seqdist_tv(sd, enumerate_seq_dist(target, x, t_max))
            residuals["lossless_tv"] = tv
            row["max_lemma_residual"] = max(max_lemma_residual(residuals), tv)
            if tv > 1e-9:
                raise BoundViolation(f"speculative decoding output differs from target (TV {tv:.3g})",
                                     {"report": report.to_record(), "lossless_tv": tv})
    except BoundViolation as exc:
        exc.instance.update(instance)
        exc.instance["row"] = row
        raise
    return row, report


# -- exact dynamic programs over context keys ---------------------------------

class _StateSpace:
    """Joint context state covering both models: the last ``max(order)`` tokens."""

    def __init__(self, target, draft, x, temperature):
        same_shape(target, draft)
        self.V = target.vocab_size
        self.base = target.base
        self.order = max(target.order, draft.order)
        self.n = self.base ** self.order
        states = np.arange(self.n)
        self.p_rows = target.probs(temperature)[states % target.n_keys]
        self.q_rows = draft.probs(temperature)[states % draft.n_keys]
        self.next_state = (states[:, None] * self.base + np.arange(self.V)[None, :]) % self.n
        self.eos = target.eos
        k = 0
        tail = list(x)[-self.order:] if self.order else []
        for tok in [target.bos] * (self.order - len(tail)) + tail:
            k = k * self.base + int(tok)
        self.start = k

    def step(self, mass_by_token: np.ndarray) -> np.ndarray:
        """Push ``mass_by_token[s, y]`` to the successor states, dropping EOS."""
        m = mass_by_token.copy()
        m[:, self.eos] = 0.0
        out = np.zeros(self.n)
        np.add.at(out, self.next_state.ravel(), m.ravel())
        return out


def markov_alpha(target, draft, x, t_max: int, temperature: float = 1.0):
    """``(alpha, L_p, A)`` by propagating the target's alive-prefix mass over
    context states. Exact, and cheap at vocab 16."""
    S = _StateSpace(target, draft, x, temperature)
    tvd = divergence_rows(TVD, S.p_rows, S.q_rows)
    pi = np.zeros(S.n)
    pi[S.start] = 1.0
    A = np.zeros(t_max)
    L = 0.0
    for t in range(t_max):
        A[t] = pi @ tvd
        L += pi.sum()
        pi = S.step(pi[:, None] * S.p_rows)
    return 1.0 - A.sum() / L, L, A


def exact_block_stats(target, draft, x, config: specdec.SpecConfig) -> dict:
    """Expected per-decode totals of speculative decoding, exactly.

    Keys: ``tokens``, ``blocks`` (= target calls), ``draft_calls``,
    ``accepted`` (accepted draft tokens), ``loglik`` (target log-probability
    of the output), plus ``tau`` and ``alpha`` as ratios of expectations.
    Handles lenience and the length budget exactly as the decoder does.
    """
    S = _StateSpace(target, draft, x, config.temperature)
    gamma, t_max, eos = config.gamma, config.t_max, S.eos
    P, Q = S.p_rows, S.q_rows
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(Q > 0, np.minimum(1.0, specdec.lenience_value(config.lenience, P) / Q), 0.0)
    acc = Q * a
    rej = (Q * (1.0 - a)).sum(axis=1)
    resid = np.maximum(P - Q, 0.0)
    rmass = resid.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        resid = np.where(rmass < 1e-12, P, resid / rmass)
        logP = np.log(P)

    def loglik(mass):
        hit = mass > 0
        return float(np.sum(mass[hit] * logP[hit]))

    mu = np.zeros((t_max + 1, S.n))
    mu[0, S.start] = 1.0
    tot = dict(tokens=0.0, blocks=0.0, draft_calls=0.0, accepted=0.0, loglik=0.0)
    for t in range(t_max):
        m = mu[t]
        if not m.any():
            continue
        tot["blocks"] += m.sum()
        budget = t_max - t
        g = min(gamma, budget)
        w = m.copy()
        for i in range(g):
            tot["draft_calls"] += w.sum()
            w = S.step(w[:, None] * Q)
        w = m.copy()
        for i in range(g):
            r = w * rej
            tot["tokens"] += r.sum() * (i + 1)
            tot["accepted"] += r.sum() * i
            r_emit = r[:, None] * resid
            tot["loglik"] += loglik(r_emit)
            if t + i + 1 < t_max:
                mu[t + i + 1] += S.step(r_emit)
            acc_w = w[:, None] * acc
            tot["loglik"] += loglik(acc_w)
            stop = acc_w[:, eos].sum()
            tot["tokens"] += stop * (i + 1)
            tot["accepted"] += stop * (i + 1)
            w = S.step(acc_w)
        full = w.sum()
        tot["accepted"] += full * g
        if g == gamma and budget > gamma:
            tot["tokens"] += full * (g + 1)
            b_emit = w[:, None] * P
            tot["loglik"] += loglik(b_emit)
            if t + g + 1 < t_max:
                mu[t + g + 1] += S.step(b_emit)
        else:
            tot["tokens"] += full * g
    tot["tau"] = tot["tokens"] / tot["blocks"]
    tot["alpha"] = tot["accepted"] / tot["tokens"]
    return tot


def pooled_block_stats(target, draft, prompts, config: specdec.SpecConfig) -> dict:
    """:func:`exact_block_stats` summed over prompts (each prompt weighted once)."""
    keys = ("tokens", "blocks", "draft_calls", "accepted", "loglik")
    tot = dict.fromkeys(keys, 0.0)
    for x in prompts:
        s = exact_block_stats(target, draft, x, config)
        for k in keys:
            tot[k] += s[k]
    tot["tau"] = tot["tokens"] / tot["blocks"]
    tot["alpha"] = tot["accepted"] / tot["tokens"]
    return tot


def mean_alpha(target, draft, prompts, t_max: int, temperature: float = 1.0) -> float:
    """Average exact acceptance rate over prompts."""
    return float(np.mean([markov_alpha(target, draft, x, t_max, temperature)[0] for x in prompts]))


def specdec_seq_prob(target, draft, prompts, tokens: np.ndarray, lengths: np.ndarray,
                     config: specdec.SpecConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact probabilities of given complete outputs under speculative decoding
    and under the target, as ``(sd_prob, target_prob)``.

    Row ``i`` of ``tokens`` (padded with -1) continues ``prompts[i]``. A forward pass over block
    boundaries: from each emitted prefix of ``y`` it sums every way one block
    can emit the next chunk of ``y`` (accepted drafts then a residual token,
    accepted drafts ending in EOS or the budget, or a full block plus bonus).
    Rejected proposals are marginalized out, so this stays linear in
    ``len(y) * gamma`` at any vocabulary size.
    """
    same_shape(target, draft)
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    n, t_max, gamma, eos = len(lengths), config.t_max, config.gamma, target.eos
    width = t_max + 1
    P_tab, Q_tab = target.probs(config.temperature), draft.probs(config.temperature)
    y = np.zeros((n, width), dtype=np.int64)
    w = min(tokens.shape[1], t_max)
    y[:, :w] = np.maximum(tokens[:, :w], 0)
    kp = np.array([target.key(x) for x in prompts], dtype=np.int64)
    kq = np.array([draft.key(x) for x in prompts], dtype=np.int64)
    rows = np.arange(n)
    p_tok = np.zeros((n, width))
    acc_tok = np.zeros((n, width))
    rej = np.zeros((n, width))
    res_tok = np.zeros((n, width))
    for t in range(width):
        P, Q = P_tab[kp], Q_tab[kq]
        yt = y[:, t]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(Q > 0, np.minimum(1.0, specdec.lenience_value(config.lenience, P) / Q), 0.0)
        r = np.maximum(P - Q, 0.0)
        rm = r.sum(axis=1)
        resid_y = np.where(rm < _kernels.RESIDUAL_MIN_MASS, P[rows, yt], r[rows, yt] / np.where(rm > 0, rm, 1.0))
        p_tok[:, t] = P[rows, yt]
        acc_tok[:, t] = Q[rows, yt] * a[rows, yt]
        rej[:, t] = (Q * (1.0 - a)).sum(axis=1)
        res_tok[:, t] = resid_y
        kp = (kp * target.base + yt) % target.n_keys
        kq = (kq * draft.base + yt) % draft.n_keys

    s = np.zeros((n, width + 1))
    s[:, 0] = 1.0
    for i in range(t_max):
        start = s[:, i] * (lengths > i)
        if not start.any():
            continue
        budget = t_max - i
        g = min(gamma, budget)
        run = start.copy()
        for k in range(g):
            j = i + k
            live = lengths > j
            run = run * live
            s[:, j + 1] += run * rej[:, j] * res_tok[:, j]
            run = run * acc_tok[:, j]
            ends = y[:, j] == eos
            s[:, j + 1] += np.where(ends, run, 0.0)
            run = np.where(ends, 0.0, run)
        if g == gamma and budget > gamma:
            j = i + g
            s[:, j + 1] += run * (lengths > j) * p_tok[:, j]
        else:
            s[:, i + g] += run
    sd = s[rows, lengths]
    live = np.arange(width)[None, :] < lengths[:, None]
    tgt = np.prod(np.where(live, p_tok, 1.0), axis=1)
    return sd, tgt


def sampled_specdec_tv(target, draft, prompts, config: specdec.SpecConfig, n_samples: int, rng) -> float:
    """Monte Carlo TV between speculative-decoding outputs and target outputs,
    averaged over prompts.

    Uses ``TV = E_{y ~ target}[max(0, 1 - s(y) / p(y))]`` with ``s`` and ``p``
    from :func:`specdec_seq_prob`, so only the outer expectation is sampled;
    a lossless configuration gives zero up to rounding.
    """
    xs = [tuple(x) for x in prompts for _ in range(n_samples)]
    tokens, lengths = generate_batch(target, xs, config.t_max, config.temperature, rng)
    sd, tgt = specdec_seq_prob(target, draft, xs, tokens, lengths, config)
    gap = np.maximum(0.0, 1.0 - sd / tgt)
    return float(gap.mean())
