import numpy as np
import pytest

from conftest import chi_square_pvalue, tiny_pair
from speclab import _kernels, metrics, oracle, specdec
from speclab.lm import Context, TabularLM
from speclab.prob import UniformStream
from speclab.specdec import LenienceSpec, SpecConfig


def iid(probs, eos=0):
    return TabularLM([probs], 0, eos)


# -- lenience -----------------------------------------------------------------

def test_lenience_values():
    assert specdec.lenience_value(LenienceSpec("LIN", 1.0), 0.37) == 0.37
    assert specdec.lenience_value(LenienceSpec("SQ", 0.1), 0.004) == pytest.approx(0.4)
    assert specdec.lenience_value(LenienceSpec("EXP", 1e-12), 0.3) == pytest.approx(1.0, abs=1e-11)
    assert specdec.lenience_value(LenienceSpec("NONE", 0.2), 0.3) == 0.3


def test_lenience_spec_validation():
    assert LenienceSpec("none", 0.3).eps == 1.0
    assert LenienceSpec("NONE").lossless and LenienceSpec("EXP", 1.0).lossless
    for bad in (("LIN", 0.0), ("SQ", 1.5), ("CUBIC", 0.5)):
        with pytest.raises(ValueError):
            LenienceSpec(*bad)


@pytest.mark.parametrize("kind", ["LIN", "SQ", "EXP"])
def test_acceptance_monotone_in_eps(kind):
    grid = np.linspace(0.0, 1.0, 101)
    P, Q = np.meshgrid(grid, grid[1:])
    epsilons = [1.0, 0.8, 0.5, 0.3, 0.1, 0.03, 1e-3, 1e-5]
    prev = specdec.acceptance_prob(LenienceSpec(kind, epsilons[0]), P, Q)
    for eps in epsilons[1:]:
        cur = specdec.acceptance_prob(LenienceSpec(kind, eps), P, Q)
        assert np.all(cur >= prev - 1e-15)
        prev = cur


# -- residual -----------------------------------------------------------------

def test_residual_examples():
    np.testing.assert_allclose(specdec.residual_dist([0.6, 0.4], [0.9, 0.1]), [0, 1], atol=1e-15)
    p = np.array([0.3, 0.7])
    np.testing.assert_array_equal(specdec.residual_dist(p, p), p)
    np.testing.assert_allclose(specdec.residual_dist([0.5, 0.3, 0.2], [0.2, 0.5, 0.3]), [1, 0, 0], atol=1e-15)


# -- single block -------------------------------------------------------------

def test_identical_models_accept_everything(rng):
    t, _ = tiny_pair(1, vocab=4)
    cfg = SpecConfig(gamma=3, t_max=20)
    for _ in range(200):
        _, tr = specdec.spec_decode(t, t, (1,), cfg, rng)
        for b in tr.blocks:
            assert b.n_accepted == len(b.proposed)


def test_greedy_accepts_iff_target_argmax():
    t, d = tiny_pair(4, vocab=4)
    cfg = SpecConfig(gamma=3, t_max=12, temperature=0.0)
    for seed in range(50):
        x = (1 + seed % 3,)
        _, tr = specdec.spec_decode(t, d, x, cfg, np.random.default_rng(seed))
        prefix = []
        for b in tr.blocks:
            ctx = list(x) + prefix
            for i in range(b.n_accepted):
                assert b.proposed[i] == t.next_dist(ctx + list(b.proposed[:i]), 0).argmax()
            if b.correction_kind == "RESIDUAL":
                ctx_n = ctx + list(b.proposed[:b.n_accepted])
                assert b.proposed[b.n_accepted] != t.next_dist(ctx_n, 0).argmax()
                assert b.correction == t.next_dist(ctx_n, 0).argmax()
            prefix += list(b.proposed[:b.n_accepted]) + ([b.correction] if b.correction is not None else [])


def _single_block_exact(target, draft, x):
    """Exact distribution of the first emitted token of one block by
    enumerating proposals and integrating the acceptance uniform analytically."""
    q = draft.next_dist(x)
    p = target.next_dist(x)
    out = np.zeros(target.vocab_size)
    for y in range(target.vocab_size):
        a = min(1.0, p[y] / q[y]) if q[y] > 0 else 0.0
        out[y] += q[y] * a
        out += q[y] * (1 - a) * specdec.residual_dist(p, q)
    return out


def test_single_step_first_token_is_target_exactly():
    for seed in range(20):
        t, d = tiny_pair(seed, vocab=3)
        np.testing.assert_allclose(_single_block_exact(t, d, (1,)), t.next_dist((1,)), atol=1e-15)


def test_single_step_matches_exact_sd_with_gamma_one():
    t, d = tiny_pair(7, vocab=3)
    sd = oracle.exact_specdec_dist(t, d, (2,), SpecConfig(gamma=1, t_max=1))
    np.testing.assert_allclose([sd.get((k,), 0.0) for k in range(3)], t.next_dist((2,)), atol=1e-15)


def test_bonus_only_on_full_block_within_budget():
    t, d = tiny_pair(3, vocab=4, concentration=5.0, eos_bias=-4.0)
    for seed in range(300):
        cfg = SpecConfig(gamma=3, t_max=int(np.random.default_rng(seed).integers(1, 9)))
        out, tr = specdec.spec_decode(t, d, (1,), cfg, np.random.default_rng(seed))
        assert len(out) <= cfg.t_max
        assert len(out) == sum(b.emitted for b in tr.blocks)
        pos = 0
        for b in tr.blocks:
            budget = cfg.t_max - pos
            assert b.n_accepted <= len(b.proposed) <= min(cfg.gamma, budget)
            full = b.n_accepted == len(b.proposed) == cfg.gamma
            if b.correction_kind == "BONUS":
                assert full and budget > cfg.gamma and b.proposed[-1] != t.eos
            elif full and budget > cfg.gamma and b.proposed[-1] != t.eos:
                pytest.fail("full block within budget must carry a bonus token")
            pos += b.emitted


def test_draw_count_is_fixed_per_block():
    t, d = tiny_pair(5, vocab=3)

    class Counting:
        def __init__(self):
            self.r = np.random.default_rng(0)
            self.n = 0

        def random(self):
            self.n += 1
            return self.r.random()

    for _ in range(50):
        c = Counting()
        _, rec = specdec.spec_step(t, d, Context((1,), ()), SpecConfig(gamma=3, t_max=8), c)
        assert c.n == len(rec.proposed) + 3 + (rec.correction is not None)


# -- full decodes -------------------------------------------------------------

def test_identical_models_block_count():
    t = iid([0.0, 0.5, 0.5])
    for gamma, t_max in [(1, 8), (3, 12), (2, 9)]:
        _, tr = specdec.spec_decode(t, t, (1,), SpecConfig(gamma=gamma, t_max=t_max), np.random.default_rng(1))
        assert len(tr.blocks) == t_max // (gamma + 1)
        assert tr.target_calls == len(tr.blocks) and tr.draft_calls == gamma * len(tr.blocks)


def test_lossless_matches_target_chi_square():
    t, d = tiny_pair(21, vocab=3)
    cfg = SpecConfig(gamma=2, t_max=4)
    batch = specdec.spec_decode_batch(t, d, [(1,)] * 100_000, cfg, np.random.default_rng(8))
    p = chi_square_pvalue(batch.outputs(), oracle.enumerate_seq_dist(t, (1,), 4))
    assert p > 0.01


@pytest.mark.parametrize("kind, eps, temp", [("NONE", 1.0, 1.0), ("SQ", 0.3, 1.0), ("EXP", 0.2, 0.7),
                                             ("LIN", 0.5, 0.0)])
def test_kernel_rows_replay_through_scalar_path(kind, eps, temp):
    t, d = tiny_pair(9, vocab=4, order=1)
    cfg = SpecConfig(gamma=3, t_max=9, temperature=temp, lenience=LenienceSpec(kind, eps))
    prompts = [(1,), (2,), (3,)] * 20
    batch = specdec.spec_decode_batch(t, d, prompts, cfg, np.random.default_rng(4))
    u = np.random.default_rng(4).random((len(prompts), _kernels.uniforms_per_decode(3, 9)))
    traces = batch.to_traces()
    for i, x in enumerate(prompts):
        out, tr = specdec.spec_decode(t, d, x, cfg, UniformStream(u[i]))
        assert out == batch.output(i)
        assert [(b.n_accepted, b.correction_kind, len(b.proposed)) for b in tr.blocks] == \
               [(b.n_accepted, b.correction_kind, len(b.proposed)) for b in traces[i].blocks]
        assert tr.draft_calls == batch.draft_calls[i] and tr.target_calls == batch.n_blocks[i]


def test_trace_batch_round_trip():
    t, d = tiny_pair(2, vocab=4)
    batch = specdec.spec_decode_batch(t, d, [(1,)] * 30, SpecConfig(gamma=2, t_max=7), np.random.default_rng(0))
    again = specdec.TraceBatch.from_traces(batch.to_traces(), 2)
    assert again.outputs() == batch.outputs()
    np.testing.assert_array_equal(again.accepted, batch.accepted)
    np.testing.assert_array_equal(again.n_blocks, batch.n_blocks)


def test_spec_decode_is_deterministic():
    t, d = tiny_pair(2, vocab=4)
    cfg = SpecConfig(gamma=3, t_max=10)
    a = specdec.spec_decode(t, d, (1,), cfg, np.random.default_rng(77))
    b = specdec.spec_decode(t, d, (1,), cfg, np.random.default_rng(77))
    assert a[0] == b[0] and a[1].blocks == b[1].blocks


# -- cost ---------------------------------------------------------------------

def test_simulated_cost_example():
    tr = specdec.DecodeTrace([specdec.BlockRecord((1, 2, 1), 3, 2, "BONUS")], (1, 2, 1, 2), 3, 1)
    assert specdec.simulated_cost(tr, 0.1) == pytest.approx(1.3)
    assert specdec.relative_latency(tr, 0.1) == pytest.approx(1.3 / 4)


def test_no_speedup_when_draft_costs_as_much():
    t, d = tiny_pair(2, vocab=4)
    batch = specdec.spec_decode_batch(t, d, [(1,)] * 500, SpecConfig(gamma=3, t_max=10), np.random.default_rng(0))
    assert specdec.relative_latency(batch, 1.0) >= 1.0


def test_measured_speedup_matches_closed_form():
    t = iid([0.0, 0.5, 0.3, 0.2])
    d = iid([0.0, 0.2, 0.3, 0.5])
    gamma, c = 3, 0.1
    cfg = SpecConfig(gamma=gamma, t_max=4000)
    batch = specdec.spec_decode_batch(t, d, [()] * 25, cfg, np.random.default_rng(3))
    alpha = metrics.expected_beta(t, d, ())
    predicted = metrics.speedup(metrics.theoretical_tau(alpha, gamma), c, gamma)
    measured = 1.0 / specdec.relative_latency(batch, c)
    assert measured == pytest.approx(predicted, rel=0.05)


def test_write_trace_csv(tmp_path):
    t, d = tiny_pair(2, vocab=4)
    batch = specdec.spec_decode_batch(t, d, [(1,)] * 3, SpecConfig(gamma=2, t_max=5), np.random.default_rng(0))
    specdec.write_trace_csv(tmp_path / "a.csv", batch)
    specdec.write_trace_csv(tmp_path / "b.csv", batch.to_traces())
    text = (tmp_path / "a.csv").read_text()
    assert text.splitlines()[0] == "example_id,block_index,proposed_len,n_accepted,correction_kind"
    assert text == (tmp_path / "b.csv").read_text()
    assert len(text.splitlines()) == 1 + int(batch.n_blocks.sum())
