import os
import subprocess
import sys

import numpy as np
import pytest

from speclab import _kernels, distill, lm, specdec
from speclab.prob import FKL, TVD

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def both_backends():
    prev = _kernels.backend()

    def run(fn):
        out = {}
        for name in ("numba", "numpy"):
            _kernels.set_backend(name)
            out[name] = fn()
        return out["numba"], out["numpy"]

    yield run
    _kernels.set_backend(prev)


def _models(seed, vocab=6, order=1):
    r = np.random.default_rng(seed)
    return (lm.random_tabular_lm(vocab, order, 0.5, -1.0, r),
            lm.random_tabular_lm(vocab, order, 0.5, -1.0, r),
            [tuple(int(t) for t in r.integers(1, vocab, size=order + 1)) for _ in range(300)])


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_generate_backends_agree(both_backends, seed):
    target, _, prompts = _models(seed)
    a, b = both_backends(lambda: lm.generate_batch(target, prompts, 9, 0.7, np.random.default_rng(seed)))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@needs_numba
@pytest.mark.parametrize("lenience", [specdec.LenienceSpec("NONE", 1.0), specdec.LenienceSpec("LIN", 0.2),
                                      specdec.LenienceSpec("SQ", 0.5), specdec.LenienceSpec("EXP", 0.01)],
                         ids=lambda s: s.kind)
@pytest.mark.parametrize("gamma", [1, 4])
def test_spec_decode_backends_agree(both_backends, lenience, gamma):
    target, draft, prompts = _models(gamma)
    cfg = specdec.SpecConfig(gamma=gamma, t_max=10, lenience=lenience, temperature=0.8)
    a, b = both_backends(lambda: specdec.spec_decode_batch(target, draft, prompts, cfg, np.random.default_rng(1)))
    for field in ("tokens", "lengths", "n_blocks", "draft_calls", "block_proposed", "block_accepted",
                  "block_kind"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field


@needs_numba
@pytest.mark.parametrize("kind", [FKL, TVD], ids=str)
def test_kd_grad_backends_agree(both_backends, kind):
    target, draft, prompts = _models(9)
    batch = distill.Batch(prompts, *lm.generate_batch(target, prompts, 8, 1.0, np.random.default_rng(0)))
    student = lm.SoftmaxLM.from_tabular(draft)
    a, b = both_backends(lambda: distill.kd_grad(target, student, batch, kind))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_set_backend_validates():
    prev = _kernels.backend()
    try:
        with pytest.raises(ValueError):
            _kernels.set_backend("cuda")
        assert _kernels.set_backend("numpy") == prev
        assert _kernels.backend() == "numpy"
    finally:
        _kernels.set_backend(prev)


def test_env_flag_selects_numpy():
    env = dict(os.environ, SPECLAB_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import speclab; print(speclab.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_uniform_budget():
    assert _kernels.uniforms_per_decode(3, 5) == 5 * 7
