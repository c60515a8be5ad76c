import math

import numpy as np
import pytest

from conftest import chi_square_pvalue
from speclab import lm, oracle
from speclab.errors import InvalidWeights, MissingContext, VocabMismatch
from speclab.lm import Context, SoftmaxLM, TabularLM
from speclab.prob import UniformStream


def iid(probs, order=0, eos=0):
    v = len(probs)
    return TabularLM(np.tile(probs, ((v + 1) ** order, 1)), order, eos)


def test_zero_logits_give_uniform():
    m = SoftmaxLM.zeros(4, 1)
    np.testing.assert_allclose(m.next_dist([2]), 0.25)


def test_greedy_is_one_hot():
    m = lm.random_tabular_lm(5, 1, 1.0, 0.0, np.random.default_rng(0))
    for ctx in ([], [1], [3, 4]):
        d = m.next_dist(ctx, 0)
        assert d.sum() == 1 and np.count_nonzero(d) == 1
        assert d.argmax() == m.next_dist(ctx, 1).argmax()


def test_tabular_row_returned_verbatim():
    m = iid([0.2, 0.8])
    np.testing.assert_array_equal(m.next_dist([1]), [0.2, 0.8])


def test_context_keys_pad_with_bos():
    m = SoftmaxLM.zeros(3, 2)
    assert m.bos == 3
    assert m.key([]) == m.key(Context((), ())) == 3 * 4 + 3
    assert m.key([1]) == 3 * 4 + 1
    assert m.key(Context((0, 2), (1,))) == 2 * 4 + 1
    assert m.key_tokens(m.key([2, 1])) == (2, 1)


def test_missing_context_row():
    table = np.full((4, 3), np.nan)
    table[3] = [0.2, 0.3, 0.5]
    m = TabularLM(table, 1)
    np.testing.assert_allclose(m.next_dist([]), [0.2, 0.3, 0.5])
    with pytest.raises(MissingContext):
        m.next_dist([1])


def test_tabular_validation():
    with pytest.raises(InvalidWeights):
        TabularLM([[0.5, 0.6]], 0)
    with pytest.raises(VocabMismatch):
        TabularLM(np.full((2, 2), 0.5), 1)
    with pytest.raises(InvalidWeights):
        TabularLM([[1.0]], 0)


def test_tabular_table_is_frozen():
    m = iid([0.5, 0.5])
    with pytest.raises(ValueError):
        m.table[0, 0] = 1.0


def test_generate_absorbing_eos(rng):
    m = iid([1.0, 0.0, 0.0])
    assert lm.generate(m, [1], 5, 1.0, rng) == [0]


def test_generate_length_one(rng):
    m = iid([0.0, 0.5, 0.5])
    for _ in range(20):
        assert len(lm.generate(m, [1], 1, 1.0, rng)) == 1


def test_generate_contract(rng):
    m = lm.random_tabular_lm(4, 2, 0.7, 0.0, rng)
    tokens, lengths = lm.generate_batch(m, [(1,), (2, 3), ()] * 200, 6, 1.0, rng)
    for row, n in zip(tokens, lengths):
        y = list(row[:n])
        assert 1 <= n <= 6
        assert y[-1] == m.eos or n == 6
        assert m.eos not in y[:-1]
        assert np.all(row[n:] == -1)
        assert m.bos not in y


def test_generate_batch_matches_scalar_generate():
    m = lm.random_tabular_lm(4, 1, 0.7, 0.0, np.random.default_rng(3))
    prompts = [(1,), (2,), (3,)] * 5
    u = np.random.default_rng(9).random((len(prompts), 7))
    tokens, lengths = lm.generate_batch(m, prompts, 7, 1.0, np.random.default_rng(9))
    for i, x in enumerate(prompts):
        y = lm.generate(m, x, 7, 1.0, UniformStream(u[i]))
        assert tuple(tokens[i, :lengths[i]]) == tuple(y)


def test_generate_matches_enumeration_chi_square():
    m = lm.random_tabular_lm(3, 1, 1.0, 0.0, np.random.default_rng(11))
    exact = oracle.enumerate_seq_dist(m, (1,), 4)
    tokens, lengths = lm.generate_batch(m, [(1,)] * 100_000, 4, 1.0, np.random.default_rng(5))
    samples = [tuple(r[:n]) for r, n in zip(tokens.tolist(), lengths.tolist())]
    assert chi_square_pvalue(samples, exact) > 0.01


def test_seq_logprob_examples():
    det = iid([0.0, 1.0, 0.0])
    y = lm.generate(det, [1], 4, 0.0, np.random.default_rng(0))
    assert lm.seq_logprob(det, [1], y) == 0.0
    half = iid([0.0, 0.5, 0.5])
    assert lm.seq_logprob(half, [1], [2, 1]) == pytest.approx(math.log(0.25))
    assert lm.seq_logprob(half, [1], [0]) == -math.inf


def test_seq_logprob_normalizes_over_enumeration():
    m = lm.random_tabular_lm(3, 1, 1.0, 0.0, np.random.default_rng(2))
    seqs = oracle.enumerate_seq_dist(m, (2,), 4)
    assert math.fsum(math.exp(lm.seq_logprob(m, (2,), y)) for y in seqs) == pytest.approx(1.0, abs=1e-12)


def test_random_tabular_lm_properties():
    a = lm.random_tabular_lm(5, 1, 1.0, 0.0, np.random.default_rng(4))
    b = lm.random_tabular_lm(5, 1, 1.0, 0.0, np.random.default_rng(4))
    np.testing.assert_array_equal(a.table, b.table)
    flat = lm.random_tabular_lm(5, 1, 1e6, 0.0, np.random.default_rng(4))
    assert np.max(np.abs(flat.table - 0.2)) < 0.01


def test_random_tabular_lm_symmetric_in_aggregate():
    rows = np.concatenate([lm.random_tabular_lm(4, 0, 1.0, 0.0, np.random.default_rng(s)).table
                           for s in range(1000)])
    np.testing.assert_allclose(rows.mean(axis=0), 0.25, atol=0.02)


def test_eos_bias_scales_eos_mass():
    lo = lm.random_tabular_lm(4, 1, 1.0, -3.0, np.random.default_rng(1))
    base = lm.random_tabular_lm(4, 1, 1.0, 0.0, np.random.default_rng(1))
    assert np.all(lo.table[:, 0] < base.table[:, 0])


def test_blend_lm():
    r = np.random.default_rng(6)
    t, n = (lm.random_tabular_lm(3, 1, 1.0, 0.0, r) for _ in range(2))
    np.testing.assert_array_equal(lm.blend_lm(t, n, 1.0).table, t.table)
    np.testing.assert_array_equal(lm.blend_lm(t, n, 0.0).table, n.table)
    np.testing.assert_allclose(lm.blend_lm(t, n, 0.5).table, (t.table + n.table) / 2, atol=1e-15)
    assert oracle.markov_alpha(t, lm.blend_lm(t, n, 1.0), (1,), 5)[0] == 1.0
    with pytest.raises(VocabMismatch):
        lm.blend_lm(t, lm.random_tabular_lm(4, 1, 1.0, 0.0, r), 0.5)


def test_softmax_from_tabular_reproduces_probs():
    t = lm.random_tabular_lm(6, 2, 0.5, 0.0, np.random.default_rng(8))
    s = SoftmaxLM.from_tabular(t)
    np.testing.assert_allclose(s.probs(), t.table, atol=1e-9)


@pytest.mark.parametrize("make", [
    lambda r: lm.random_tabular_lm(5, 2, 0.5, -1.0, r),
    lambda r: SoftmaxLM(r.normal(size=(6, 5)), 1),
])
def test_serialization_round_trip(tmp_path, make):
    m = make(np.random.default_rng(0))
    lm.save_model(m, tmp_path / "m.json")
    back = lm.load_model(tmp_path / "m.json")
    assert type(back) is type(m) and back.order == m.order and back.eos == m.eos
    values = m.logits if isinstance(m, SoftmaxLM) else m.table
    np.testing.assert_array_equal(back.logits if isinstance(m, SoftmaxLM) else back.table, values)
    lm.save_model(back, tmp_path / "again.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "again.json").read_bytes()


def test_serialization_keeps_missing_rows(tmp_path):
    table = np.full((4, 3), np.nan)
    table[3] = [0.2, 0.3, 0.5]
    lm.save_model(TabularLM(table, 1), tmp_path / "p.json")
    back = lm.load_model(tmp_path / "p.json")
    with pytest.raises(MissingContext):
        back.next_dist([0])
