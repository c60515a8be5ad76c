import csv
import io
import json

import numpy as np
import pytest

from conftest import tiny_pair
from speclab import metrics, oracle, specdec
from speclab.errors import EmptyTraces, TooLarge
from speclab.lm import TabularLM, random_tabular_lm
from speclab.prob import TVD, divergence
from speclab.specdec import SpecConfig


def iid(probs):
    return TabularLM([probs], 0)


def test_expected_beta_examples():
    t = iid([0.6, 0.4])
    assert metrics.expected_beta(t, t, ()) == pytest.approx(1.0)
    assert metrics.expected_beta(t, iid([0.9, 0.1]), ()) == pytest.approx(0.7)
    assert metrics.expected_beta(iid([1.0, 0.0, 0.0]), iid([0.0, 0.5, 0.5]), ()) == 0.0


def test_beta_identity_over_contexts():
    t, d = tiny_pair(0, vocab=5, order=2)
    for ctx in ([], [1], [2, 3], [4, 4]):
        p, q = t.next_dist(ctx), d.next_dist(ctx)
        assert abs(metrics.expected_beta(t, d, ctx) - (1 - divergence(TVD, p, q))) <= 1e-12


def test_empirical_alpha_identical_models():
    t = iid([0.0, 0.5, 0.5])
    batch = specdec.spec_decode_batch(t, t, [()] * 50, SpecConfig(gamma=3, t_max=12), np.random.default_rng(0))
    assert metrics.empirical_alpha(batch) == pytest.approx(3 / 4)
    assert metrics.empirical_tau(batch, 3) == 4.0


def test_disjoint_support_accepts_nothing():
    t, d = iid([0.0, 1.0, 0.0]), iid([0.0, 0.0, 1.0])
    batch = specdec.spec_decode_batch(t, d, [()] * 20, SpecConfig(gamma=3, t_max=6), np.random.default_rng(0))
    assert metrics.empirical_alpha(batch) == 0.0
    assert metrics.empirical_tau(batch) == 1.0


def test_empirical_alpha_per_example_and_traces():
    t, d = tiny_pair(3, vocab=3)
    batch = specdec.spec_decode_batch(t, d, [(1,)] * 200, SpecConfig(gamma=2, t_max=5), np.random.default_rng(1))
    pooled, per = metrics.empirical_alpha(batch, per_example=True)
    assert pooled == pytest.approx(metrics.empirical_alpha(batch.to_traces()))
    assert 0 <= per <= 1


def test_empty_traces():
    with pytest.raises(EmptyTraces):
        metrics.empirical_alpha([])
    with pytest.raises(EmptyTraces):
        metrics.empirical_tau(None)


def test_empirical_alpha_matches_exact():
    t, d = tiny_pair(12, vocab=3)
    n = 40_000
    batch = specdec.spec_decode_batch(t, d, [(1,)] * n, SpecConfig(gamma=4, t_max=4), np.random.default_rng(2))
    assert int(batch.lengths.sum()) >= 100_000
    assert metrics.empirical_alpha(batch) == pytest.approx(oracle.exact_alpha(t, d, (1,), 4)[0], abs=0.01)


def test_theoretical_tau():
    assert metrics.theoretical_tau(0.0, 4) == 1.0
    assert metrics.theoretical_tau(1.0, 4) == 5.0
    assert metrics.theoretical_tau(0.5, 3) == 1.875
    grid = np.linspace(0.01, 0.99, 99)
    for g in (1, 3, 7):
        assert np.all(np.diff([metrics.theoretical_tau(a, g) for a in grid]) > 0)
    with pytest.raises(ValueError):
        metrics.theoretical_tau(1.2, 3)


def test_speedup_examples():
    assert metrics.speedup(1.0, 1e-12, 3) == pytest.approx(1.0)
    assert metrics.speedup(1.875, 0.1, 3) == pytest.approx(1.4423, abs=1e-4)
    assert metrics.speedup(4.0, 1e-12, 3) == pytest.approx(4.0)


def test_empirical_tau_order0_matches_closed_form():
    t = iid([0.0, 0.5, 0.3, 0.2])
    d = iid([0.0, 0.2, 0.3, 0.5])
    gamma = 3
    batch = specdec.spec_decode_batch(t, d, [()] * 40, SpecConfig(gamma=gamma, t_max=10_000),
                                      np.random.default_rng(6))
    assert batch.n_blocks.sum() >= 100_000
    beta = metrics.expected_beta(t, d, ())
    assert abs(metrics.empirical_tau(batch, gamma) - metrics.theoretical_tau(beta, gamma)) <= 0.05


def test_alpha_from_tvd():
    t, d = tiny_pair(5, vocab=3)
    assert metrics.alpha_from_tvd(t, t, (1,), 4) == 1.0
    assert metrics.alpha_from_tvd(t, d, (1,), 4) == pytest.approx(oracle.exact_alpha(t, d, (1,), 4)[0], abs=1e-9)
    big_t = random_tabular_lm(8, 1, 1.0, 0.0, np.random.default_rng(0))
    big_d = random_tabular_lm(8, 1, 1.0, 0.0, np.random.default_rng(1))
    with pytest.raises(TooLarge):
        metrics.alpha_from_tvd(big_t, big_d, (1,), 6)
    mc = metrics.alpha_from_tvd(big_t, big_d, (1,), 6, mc_samples=20_000, rng=np.random.default_rng(0))
    assert mc == pytest.approx(oracle.markov_alpha(big_t, big_d, (1,), 6)[0], abs=0.01)


def test_alpha_from_tvd_matches_large_gamma_decodes():
    t, d = tiny_pair(8, vocab=3)
    batch = specdec.spec_decode_batch(t, d, [(2,)] * 40_000, SpecConfig(gamma=4, t_max=4), np.random.default_rng(9))
    assert metrics.empirical_alpha(batch) == pytest.approx(metrics.alpha_from_tvd(t, d, (2,), 4), abs=0.01)


def test_metrics_report_serialization():
    t, d = tiny_pair(1, vocab=3)
    batch = specdec.spec_decode_batch(t, d, [(1,)] * 500, SpecConfig(gamma=2, t_max=4), np.random.default_rng(0))
    rep = metrics.metrics_report(batch, t, d, [(1,)], c=0.1, t_max=4)
    assert metrics.MetricsReport.columns() == ("alpha_empirical", "alpha_tvd", "tau_empirical", "tau_theoretical",
                                               "speedup", "c", "gamma", "L_p")
    rows = list(csv.reader(io.StringIO(rep.to_csv_row(header=True))))
    assert rows[0] == list(rep.columns()) and len(rows) == 2
    assert list(json.loads(rep.to_json())) == list(rep.columns())
    assert 1 <= rep.tau_empirical <= 3 and 0 <= rep.alpha_empirical <= 1
