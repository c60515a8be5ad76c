import numpy as np
import pytest
from scipy import stats

from speclab import lm


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_pair(seed, vocab=3, order=1, concentration=1.0, eos_bias=0.0):
    r = np.random.default_rng(seed)
    return (lm.random_tabular_lm(vocab, order, concentration, eos_bias, r),
            lm.random_tabular_lm(vocab, order, concentration, eos_bias, r))


def chi_square_pvalue(samples, exact: dict) -> float:
    """Goodness of fit of sampled sequences to an exact SeqDist.

    Atoms with expected count below 5 are pooled into one cell.
    """
    n = len(samples)
    counts = {}
    for s in samples:
        counts[s] = counts.get(s, 0) + 1
    assert set(counts) <= set(exact), "sampled a sequence with zero exact probability"
    obs, exp, pool_o, pool_e = [], [], 0, 0.0
    for seq, pr in exact.items():
        if n * pr < 5:
            pool_o += counts.get(seq, 0)
            pool_e += n * pr
        else:
            obs.append(counts.get(seq, 0))
            exp.append(n * pr)
    if pool_e > 0:
        obs.append(pool_o)
        exp.append(pool_e)
    exp = np.asarray(exp)
    exp *= n / exp.sum()
    return float(stats.chisquare(obs, exp).pvalue)


ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
