"""Hot loops: batched sampling, batched speculative decoding, row scatter-add.

Every kernel has two implementations with identical semantics and identical
uniform consumption:

* ``*_numba``: explicit loops compiled with ``numba.njit``;
* ``*_numpy``: vectorized numpy, used when numba is missing or when
  ``SPECLAB_NO_NUMBA=1`` is set in the environment.

Randomness is never drawn inside a kernel. Callers pass a pre-drawn matrix
of uniforms, one row per sequence, consumed left to right. Per speculative
block the order is: one draw per drafted token, then ``gamma`` acceptance
draws, then one draw for the residual/bonus token if there is one.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
_DISABLED = os.environ.get("SPECLAB_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")
_BACKEND = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"

LEN_NONE, LEN_LIN, LEN_SQ, LEN_EXP = 0, 1, 2, 3
CORR_NONE, CORR_RESIDUAL, CORR_BONUS = 0, 1, 2
RESIDUAL_MIN_MASS = 1e-12


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Switch backend at runtime; returns the previous one."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _BACKEND = _BACKEND, name
    return prev


def _njit(fn):
    if numba is None:
        return None
    return numba.njit(cache=True, nogil=True)(fn)


def cdf_table(probs: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.cumsum(probs, axis=-1))


def last_positive(probs: np.ndarray) -> np.ndarray:
    """Index of the last token with positive mass, per row (0 for empty rows)."""
    pos = probs > 0
    idx = probs.shape[-1] - 1 - np.argmax(pos[..., ::-1], axis=-1)
    return np.where(pos.any(axis=-1), idx, 0).astype(np.int64)


# -- sampling primitives ------------------------------------------------------

def _draw_nb(cdf_row, last_pos, u):
    for j in range(cdf_row.shape[0]):
        if u < cdf_row[j]:
            return j
    return last_pos


def _draw_rows_np(cdf_rows, last_pos, u):
    tok = (cdf_rows <= u[:, None]).sum(axis=1)
    over = tok >= cdf_rows.shape[1]
    if over.any():
        tok[over] = last_pos[over]
    return tok.astype(np.int64)


def _lenience_nb(kind, eps, p):
    if kind == 1:
        return p / eps
    if kind == 2:
        return p / (eps * eps)
    if kind == 3:
        return p ** eps
    return p


def _lenience_np(kind, eps, p):
    if kind == LEN_LIN:
        return p / eps
    if kind == LEN_SQ:
        return p / (eps * eps)
    if kind == LEN_EXP:
        return p ** eps
    return p


_draw = _njit(_draw_nb)
_lenience = _njit(_lenience_nb)


# -- autoregressive generation ------------------------------------------------

def _generate_loop(cdf, last_pos, start_keys, base, mod, eos, t_max, u):
    n = start_keys.shape[0]
    tokens = np.full((n, t_max), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for s in range(n):
        key = start_keys[s]
        for t in range(t_max):
            tok = _draw(cdf[key], last_pos[key], u[s, t])
            tokens[s, t] = tok
            lengths[s] = t + 1
            if tok == eos:
                break
            key = (key * base + tok) % mod
    return tokens, lengths


def generate_numpy(cdf, last_pos, start_keys, base, mod, eos, t_max, u):
    n = start_keys.shape[0]
    tokens = np.full((n, t_max), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    keys = start_keys.astype(np.int64).copy()
    alive = np.arange(n)
    for t in range(t_max):
        if alive.size == 0:
            break
        k = keys[alive]
        tok = _draw_rows_np(cdf[k], last_pos[k], u[alive, t])
        tokens[alive, t] = tok
        lengths[alive] = t + 1
        keys[alive] = (k * base + tok) % mod
        alive = alive[tok != eos]
    return tokens, lengths


generate_numba = _njit(_generate_loop)


def generate(cdf, last_pos, start_keys, base, mod, eos, t_max, u):
    """Sample ``len(start_keys)`` sequences of at most ``t_max`` tokens.

    Returns ``(tokens, lengths)``; ``tokens`` is padded with -1. Row ``s``
    consumes ``u[s, :lengths[s]]``.
    """
    args = (np.ascontiguousarray(cdf), np.ascontiguousarray(last_pos),
            np.ascontiguousarray(start_keys, dtype=np.int64), int(base), int(mod),
            int(eos), int(t_max), np.ascontiguousarray(u))
    if _BACKEND == "numba":
        return generate_numba(*args)
    return generate_numpy(*args)


# -- speculative decoding -----------------------------------------------------

def _spec_loop(p_tab, p_cdf, p_last, q_tab, q_cdf, q_last,
               p_keys0, q_keys0, p_base, p_mod, q_base, q_mod,
               eos, gamma, t_max, len_kind, len_eps, u):
    n = p_keys0.shape[0]
    vocab = p_tab.shape[1]
    tokens = np.full((n, t_max), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    n_blocks = np.zeros(n, dtype=np.int64)
    draft_calls = np.zeros(n, dtype=np.int64)
    blk_prop = np.zeros((n, t_max), dtype=np.int64)
    blk_acc = np.zeros((n, t_max), dtype=np.int64)
    blk_kind = np.zeros((n, t_max), dtype=np.int64)
    props = np.empty(gamma, dtype=np.int64)
    q_pos = np.empty(gamma, dtype=np.int64)
    resid = np.empty(vocab, dtype=np.float64)
    rcdf = np.empty(vocab, dtype=np.float64)
    for s in range(n):
        ptr = 0
        kp = p_keys0[s]
        kq = q_keys0[s]
        length = 0
        done = False
        while not done:
            budget = t_max - length
            g = gamma if gamma < budget else budget
            d = 0
            for i in range(g):
                q_pos[i] = kq
                tok = _draw(q_cdf[kq], q_last[kq], u[s, ptr])
                ptr += 1
                props[i] = tok
                d += 1
                kq = (kq * q_base + tok) % q_mod
                if tok == eos:
                    break
            acc_u = ptr
            ptr += gamma
            n_acc = d
            for i in range(d):
                y = props[i]
                ratio = _lenience(len_kind, len_eps, p_tab[kp, y]) / q_tab[q_pos[i], y]
                if u[s, acc_u + i] > ratio:
                    n_acc = i
                    break
                kp = (kp * p_base + y) % p_mod
            for i in range(n_acc):
                tokens[s, length + i] = props[i]
            length += n_acc
            b = n_blocks[s]
            blk_prop[s, b] = d
            blk_acc[s, b] = n_acc
            n_blocks[s] = b + 1
            draft_calls[s] += d
            corr = -1
            if n_acc < d:
                kq = q_pos[n_acc]
                mass = 0.0
                for j in range(vocab):
                    r = p_tab[kp, j] - q_tab[kq, j]
                    resid[j] = r if r > 0.0 else 0.0
                    mass += resid[j]
                if mass < RESIDUAL_MIN_MASS:
                    corr = _draw(p_cdf[kp], p_last[kp], u[s, ptr])
                else:
                    c = 0.0
                    lastj = 0
                    for j in range(vocab):
                        c += resid[j] / mass
                        rcdf[j] = c
                        if resid[j] > 0.0:
                            lastj = j
                    corr = _draw(rcdf, lastj, u[s, ptr])
                ptr += 1
                blk_kind[s, b] = 1
            elif d == gamma and props[d - 1] != eos and budget > gamma:
                corr = _draw(p_cdf[kp], p_last[kp], u[s, ptr])
                ptr += 1
                blk_kind[s, b] = 2
            if corr >= 0:
                tokens[s, length] = corr
                length += 1
                kp = (kp * p_base + corr) % p_mod
                kq = (kq * q_base + corr) % q_mod
            if length >= t_max or tokens[s, length - 1] == eos:
                done = True
        lengths[s] = length
    return tokens, lengths, n_blocks, draft_calls, blk_prop, blk_acc, blk_kind


spec_decode_numba = _njit(_spec_loop)


def spec_decode_numpy(p_tab, p_cdf, p_last, q_tab, q_cdf, q_last,
                      p_keys0, q_keys0, p_base, p_mod, q_base, q_mod,
                      eos, gamma, t_max, len_kind, len_eps, u):
    n = p_keys0.shape[0]
    tokens = np.full((n, t_max), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    n_blocks = np.zeros(n, dtype=np.int64)
    draft_calls = np.zeros(n, dtype=np.int64)
    blk_prop = np.zeros((n, t_max), dtype=np.int64)
    blk_acc = np.zeros((n, t_max), dtype=np.int64)
    blk_kind = np.zeros((n, t_max), dtype=np.int64)
    ptr = np.zeros(n, dtype=np.int64)
    kp_all = p_keys0.astype(np.int64).copy()
    kq_all = q_keys0.astype(np.int64).copy()
    active = np.arange(n)
    while active.size:
        m = active.size
        budget = t_max - lengths[active]
        g = np.minimum(gamma, budget)
        kq = kq_all[active].copy()
        props = np.full((m, gamma), -1, dtype=np.int64)
        q_pos = np.zeros((m, gamma), dtype=np.int64)
        d = np.zeros(m, dtype=np.int64)
        drafting = np.ones(m, dtype=bool)
        for i in range(gamma):
            drafting &= i < g
            rows = np.flatnonzero(drafting)
            if rows.size == 0:
                break
            srows = active[rows]
            q_pos[rows, i] = kq[rows]
            tok = _draw_rows_np(q_cdf[kq[rows]], q_last[kq[rows]], u[srows, ptr[srows]])
            ptr[srows] += 1
            props[rows, i] = tok
            d[rows] += 1
            kq[rows] = (kq[rows] * q_base + tok) % q_mod
            drafting[rows] = tok != eos
        acc_u = u[active[:, None], ptr[active][:, None] + np.arange(gamma)[None, :]]
        ptr[active] += gamma

        kp = kp_all[active].copy()
        n_acc = d.copy()
        verifying = np.ones(m, dtype=bool)
        for i in range(gamma):
            rows = np.flatnonzero(verifying & (i < d))
            if rows.size == 0:
                break
            y = props[rows, i]
            ratio = _lenience_np(len_kind, len_eps, p_tab[kp[rows], y]) / q_tab[q_pos[rows, i], y]
            rej = acc_u[rows, i] > ratio
            n_acc[rows[rej]] = i
            verifying[rows[rej]] = False
            ok = rows[~rej]
            kp[ok] = (kp[ok] * p_base + y[~rej]) % p_mod

        lens = lengths[active]
        for i in range(gamma):
            rows = np.flatnonzero(i < n_acc)
            tokens[active[rows], lens[rows] + i] = props[rows, i]
        lens = lens + n_acc
        b = n_blocks[active]
        blk_prop[active, b] = d
        blk_acc[active, b] = n_acc
        n_blocks[active] = b + 1
        draft_calls[active] += d

        corr = np.full(m, -1, dtype=np.int64)
        rej_rows = np.flatnonzero(n_acc < d)
        if rej_rows.size:
            sr = active[rej_rows]
            kq[rej_rows] = q_pos[rej_rows, n_acc[rej_rows]]
            pr = p_tab[kp[rej_rows]]
            resid = np.maximum(pr - q_tab[kq[rej_rows]], 0.0)
            mass = np.cumsum(resid, axis=1)[:, -1]
            uu = u[sr, ptr[sr]]
            ptr[sr] += 1
            small = mass < RESIDUAL_MIN_MASS
            out = np.empty(rej_rows.size, dtype=np.int64)
            if small.any():
                kk = kp[rej_rows[small]]
                out[small] = _draw_rows_np(p_cdf[kk], p_last[kk], uu[small])
            big = ~small
            if big.any():
                rn = resid[big] / mass[big][:, None]
                out[big] = _draw_rows_np(np.cumsum(rn, axis=1), last_positive(resid[big]), uu[big])
            corr[rej_rows] = out
            blk_kind[sr, b[rej_rows]] = CORR_RESIDUAL
        last_prop = props[np.arange(m), np.maximum(d - 1, 0)]
        bonus_rows = np.flatnonzero((n_acc == d) & (d == gamma) & (last_prop != eos) & (budget > gamma))
        if bonus_rows.size:
            sr = active[bonus_rows]
            kk = kp[bonus_rows]
            corr[bonus_rows] = _draw_rows_np(p_cdf[kk], p_last[kk], u[sr, ptr[sr]])
            ptr[sr] += 1
            blk_kind[sr, b[bonus_rows]] = CORR_BONUS
        has = np.flatnonzero(corr >= 0)
        if has.size:
            c = corr[has]
            tokens[active[has], lens[has]] = c
            lens[has] += 1
            kp[has] = (kp[has] * p_base + c) % p_mod
            kq[has] = (kq[has] * q_base + c) % q_mod
        lengths[active] = lens
        kp_all[active] = kp
        kq_all[active] = kq
        last_tok = tokens[active, np.maximum(lens - 1, 0)]
        active = active[(lens < t_max) & (last_tok != eos)]
    return tokens, lengths, n_blocks, draft_calls, blk_prop, blk_acc, blk_kind


def uniforms_per_decode(gamma: int, t_max: int) -> int:
    """Upper bound on draws one decode can consume (every block emits >= 1 token)."""
    return t_max * (2 * gamma + 1)


def spec_decode(p_tab, q_tab, p_keys0, q_keys0, p_base, p_mod, q_base, q_mod,
                eos, gamma, t_max, len_kind, len_eps, u):
    """Run ``len(p_keys0)`` speculative decodes over dense tempered tables.

    Returns ``(tokens, lengths, n_blocks, draft_calls, block_proposed,
    block_accepted, block_kind)``; per-block arrays are indexed
    ``[sequence, block]`` and valid for ``block < n_blocks``.
    """
    p_tab = np.ascontiguousarray(p_tab, dtype=np.float64)
    q_tab = np.ascontiguousarray(q_tab, dtype=np.float64)
    args = (p_tab, cdf_table(p_tab), last_positive(p_tab),
            q_tab, cdf_table(q_tab), last_positive(q_tab),
            np.ascontiguousarray(p_keys0, dtype=np.int64),
            np.ascontiguousarray(q_keys0, dtype=np.int64),
            int(p_base), int(p_mod), int(q_base), int(q_mod),
            int(eos), int(gamma), int(t_max), int(len_kind), float(len_eps),
            np.ascontiguousarray(u, dtype=np.float64))
    if _BACKEND == "numba":
        return spec_decode_numba(*args)
    return spec_decode_numpy(*args)


# -- gradient accumulation ----------------------------------------------------

def _scatter_rows_loop(out, idx, vals):
    for r in range(idx.shape[0]):
        k = idx[r]
        for j in range(vals.shape[1]):
            out[k, j] += vals[r, j]
    return out


scatter_rows_numba = _njit(_scatter_rows_loop)


def scatter_rows_numpy(out, idx, vals):
    np.add.at(out, idx, vals)
    return out


def scatter_rows(out, idx, vals):
    """``out[idx[r]] += vals[r]`` for every row, in row order."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    if _BACKEND == "numba":
        return scatter_rows_numba(out, idx, vals)
    return scatter_rows_numpy(out, idx, vals)
