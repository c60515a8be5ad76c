"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sequences 4096] [--repeats 5]

Each workload runs once per backend to warm up (numba compiles on first
call, or loads from its cache), then ``--repeats`` times; the best time is
reported. Outputs of the two backends are compared for equality first.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from speclab import _kernels, lm, specdec
from speclab.distill import Batch, kd_grad
from speclab.prob import FKL


def _best(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(n: int, vocab: int, t_max: int, gamma: int):
    rng = np.random.default_rng(0)
    target = lm.random_tabular_lm(vocab, 1, 0.5, -1.5, rng)
    draft = lm.random_tabular_lm(vocab, 1, 0.5, -1.5, rng)
    prompts = [(int(t),) for t in rng.integers(1, vocab, size=n)]
    tokens, lengths = lm.generate_batch(target, prompts, t_max, 1.0, np.random.default_rng(1))
    batch = Batch(prompts, tokens, lengths)
    student = lm.SoftmaxLM.from_tabular(draft)
    cfg = specdec.SpecConfig(gamma=gamma, t_max=t_max)
    lossy = specdec.SpecConfig(gamma=gamma, t_max=t_max, lenience=specdec.LenienceSpec("EXP", 0.3))
    return {
        "generate": lambda: lm.generate_batch(target, prompts, t_max, 1.0, np.random.default_rng(2)),
        "spec_decode": lambda: specdec.spec_decode_batch(target, draft, prompts, cfg, np.random.default_rng(3)),
        "spec_decode_lossy": lambda: specdec.spec_decode_batch(target, draft, prompts, lossy,
                                                               np.random.default_rng(3)),
        "kd_grad": lambda: kd_grad(target, student, batch, FKL),
    }


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    if isinstance(a, (tuple, list)):
        return all(_same(x, y) for x, y in zip(a, b))
    if hasattr(a, "__dataclass_fields__"):
        return all(_same(getattr(a, f), getattr(b, f)) for f in a.__dataclass_fields__)
    return a == b


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--sequences", type=int, default=4096)
    ap.add_argument("--vocab", type=int, default=16)
    ap.add_argument("--t-max", type=int, default=12)
    ap.add_argument("--gamma", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return

    jobs = workloads(args.sequences, args.vocab, args.t_max, args.gamma)
    print(f"{args.sequences} sequences, vocab {args.vocab}, T_max {args.t_max}, gamma {args.gamma}")
    print(f"{'workload':<20}{'numba ms':>12}{'numpy ms':>12}{'ratio':>9}  same")
    previous = _kernels.backend()
    try:
        for name, fn in jobs.items():
            _kernels.set_backend("numba")
            out_nb = fn()
            t_nb = _best(fn, args.repeats)
            _kernels.set_backend("numpy")
            out_np = fn()
            t_np = _best(fn, args.repeats)
            print(f"{name:<20}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>8.1f}x  {_same(out_nb, out_np)}")
    finally:
        _kernels.set_backend(previous)


if __name__ == "__main__":
    main()
