"""Knowledge distillation of a softmax-tabular draft toward a tabular target.

Each step draws one batch from the fixed dataset, from the student, or from
the teacher (one pair of uniforms decides the source for the whole batch),
then takes a plain gradient step on the per-token-averaged divergence
between teacher and student next-token distributions.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels, oracle
from .errors import MissingData, UnknownPreset
from .lm import SoftmaxLM, generate_batch
from .prob import FKL, Q_FLOOR, TVD, DivergenceKind, chain_rule_logit_grad, divergence_grad_q, divergence_rows
from .specdec import SpecConfig

HISTORY_COLUMNS = ("step", "loss", "alpha", "tau")


@dataclass(frozen=True)
class KDConfig:
    lambda1: float = 0.0
    lambda2: float = 1.0
    divergence: DivergenceKind = FKL
    eta: float = 0.5
    steps: int = 2000
    batch_size: int = 32
    gen_temperature: float = 1.0
    t_max: int = 12
    eval_every: int = 100
    black_box: bool = False
    eval_gamma: int = 7

    def __post_init__(self):
        object.__setattr__(self, "divergence", DivergenceKind.parse(self.divergence))
        if not (0.0 <= self.lambda1 <= 1.0 and 0.0 <= self.lambda2 <= 1.0):
            raise ValueError("lambda1 and lambda2 must be in [0, 1]")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.steps < 0 or self.batch_size < 1 or self.t_max < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1, t_max >= 1, eval_every >= 1 required")

    def replace(self, **kw) -> "KDConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "SupervisedKD": dict(lambda1=1.0, lambda2=0.0, divergence=FKL, black_box=False),
    "SeqKD": dict(lambda1=0.0, lambda2=0.0, divergence=FKL, black_box=True),
    "ImitKD": dict(lambda1=0.5, lambda2=1.0, divergence=FKL, black_box=False),
    "f-Distill": dict(lambda1=0.0, lambda2=0.5, divergence=TVD, black_box=False),
    "GKD": dict(lambda1=0.0, lambda2=1.0, divergence=FKL, black_box=False),
}


def preset(name: str) -> dict:
    """Data-mix and divergence settings for a named recipe.

    GKD defaults to FKL; pass ``divergence="JSD(0.5)"`` to
    :meth:`KDConfig.replace` for the JSD variant.
    """
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class FixedDataset:
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


@dataclass
class Batch:
    """Prompts plus their continuations, padded with -1."""

    prompts: list
    tokens: np.ndarray
    lengths: np.ndarray
    source: str = "given"

    def __len__(self):
        return len(self.prompts)

    def pairs(self) -> list:
        return [(tuple(x), tuple(int(t) for t in self.tokens[i, :self.lengths[i]]))
                for i, x in enumerate(self.prompts)]

    @classmethod
    def from_pairs(cls, pairs, source: str = "given") -> "Batch":
        pairs = list(pairs)
        width = max([len(y) for _, y in pairs] + [1])
        tokens = np.full((len(pairs), width), -1, dtype=np.int64)
        for i, (_, y) in enumerate(pairs):
            tokens[i, :len(y)] = y
        return cls([tuple(x) for x, _ in pairs], tokens,
                   np.array([len(y) for _, y in pairs], dtype=np.int64), source)


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else Batch.from_pairs(batch)


@dataclass
class HistoryRecord:
    step: int
    loss: float
    alpha: float
    tau: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([r.step, repr(float(r.loss)), repr(float(r.alpha)), repr(float(r.tau))])


def build_batch(config: KDConfig, fixed: FixedDataset, student, teacher,
                prompts: Sequence[Sequence[int]], rng) -> Batch:
    if config.lambda1 > 0 and not fixed:
        raise MissingData("lambda1 > 0 needs a non-empty fixed dataset")
    u1, u2 = rng.random(), rng.random()
    B = config.batch_size
    if u1 <= config.lambda1:
        idx = rng.integers(len(fixed), size=B)
        batch = Batch.from_pairs([fixed.pairs[i] for i in idx], "fixed")
        return batch
    xs = [tuple(prompts[i]) for i in rng.integers(len(prompts), size=B)]
    model, source = (student, "student") if u2 <= config.lambda2 else (teacher, "teacher")
    tokens, lengths = generate_batch(model, xs, config.t_max, config.gen_temperature, rng)
    return Batch(xs, tokens, lengths, source)


def _positions(batch: Batch, teacher, student):
    """Flatten every scored position: teacher key, student key, token, weight."""
    kp = np.array([teacher.key(x) for x in batch.prompts], dtype=np.int64)
    kq = np.array([student.key(x) for x in batch.prompts], dtype=np.int64)
    inv_len = 1.0 / (len(batch) * np.maximum(batch.lengths, 1))
    out_p, out_q, out_t, out_w = [], [], [], []
    for t in range(batch.tokens.shape[1]):
        alive = np.flatnonzero(batch.lengths > t)
        if alive.size == 0:
            break
        tok = batch.tokens[alive, t]
        out_p.append(kp[alive])
        out_q.append(kq[alive])
        out_t.append(tok)
        out_w.append(inv_len[alive])
        kp[alive] = (kp[alive] * teacher.base + tok) % teacher.n_keys
        kq[alive] = (kq[alive] * student.base + tok) % student.n_keys
    cat = np.concatenate
    return cat(out_p), cat(out_q), cat(out_t), cat(out_w)


def _targets_and_student(teacher, student, batch, black_box):
    kp, kq, tok, w = _positions(batch, teacher, student)
    if black_box:
        P = np.zeros((len(tok), teacher.vocab_size))
        P[np.arange(len(tok)), tok] = 1.0
    else:
        P = teacher.probs(1.0)[kp]
    Q = student.probs(1.0)[kq]
    return P, Q, kq, w


def kd_loss(teacher, student, batch, divergence, black_box: bool = False) -> float:
    """Batch mean of (1/|y|) * sum_t D(p_t || q_t), both models at temperature 1.

    ``black_box`` replaces each teacher distribution by the one-hot of the
    token that was actually generated.
    """
    batch = _as_batch(batch)
    if len(batch) == 0:
        raise MissingData("empty batch")
    P, Q, _, w = _targets_and_student(teacher, student, batch, black_box)
    d = divergence_rows(DivergenceKind.parse(divergence), P, np.maximum(Q, Q_FLOOR))
    return float(w @ d)


def kd_grad(teacher, student: SoftmaxLM, batch, divergence, black_box: bool = False) -> np.ndarray:
    """Gradient of :func:`kd_loss` with respect to ``student.logits``."""
    batch = _as_batch(batch)
    P, Q, kq, w = _targets_and_student(teacher, student, batch, black_box)
    g = chain_rule_logit_grad(divergence_grad_q(DivergenceKind.parse(divergence), P, Q), Q)
    grad = np.zeros_like(student.logits)
    return _kernels.scatter_rows(grad, kq, g * w[:, None])


def sgd_step(student: SoftmaxLM, grad: np.ndarray, eta: float) -> SoftmaxLM:
    """Return a new model with ``logits - eta * grad``; the input is untouched."""
    if grad.shape != student.logits.shape:
        raise ValueError(f"gradient shape {grad.shape} != logits shape {student.logits.shape}")
    return SoftmaxLM(student.logits - eta * grad, student.order, student.eos)


def evaluate(teacher, student, probe: Batch, prompts, config: KDConfig) -> tuple[float, float, float]:
    """``(probe loss, mean exact alpha, exact tau at eval_gamma)`` at temperature 1."""
    loss = kd_loss(teacher, student, probe, config.divergence)
    alpha = oracle.mean_alpha(teacher, student, prompts, config.t_max)
    tau = oracle.pooled_block_stats(teacher, student, prompts,
                                    SpecConfig(gamma=config.eval_gamma, t_max=config.t_max))["tau"]
    return loss, alpha, tau


def train(config: KDConfig, teacher, student_init: SoftmaxLM, fixed: FixedDataset,
          prompts: Sequence[Sequence[int]], rng, eval_prompts=None, probe: Batch | None = None):
    """Run ``config.steps`` distillation steps; returns ``(student, history)``.

    The probe batch (teacher samples on ``eval_prompts``) is drawn from
    ``rng`` once, before training, unless supplied.
    """
    eval_prompts = list(eval_prompts if eval_prompts is not None else prompts)
    if probe is None:
        tokens, lengths = generate_batch(teacher, eval_prompts, config.t_max, 1.0, rng)
        probe = Batch([tuple(x) for x in eval_prompts], tokens, lengths, "teacher")
    student = student_init.copy()
    history = TrainHistory()
    history.records.append(HistoryRecord(0, *evaluate(teacher, student, probe, eval_prompts, config)))
    for step in range(1, config.steps + 1):
        batch = build_batch(config, fixed, student, teacher, prompts, rng)
        grad = kd_grad(teacher, student, batch, config.divergence, config.black_box)
        student = sgd_step(student, grad, config.eta)
        if step % config.eval_every == 0 or step == config.steps:
            history.records.append(HistoryRecord(step, *evaluate(teacher, student, probe, eval_prompts, config)))
    return student, history


def sample_fixed_dataset(teacher, prompts, n: int, t_max: int, rng, temperature: float = 1.0) -> FixedDataset:
    xs = [tuple(prompts[i]) for i in rng.integers(len(prompts), size=n)]
    tokens, lengths = generate_batch(teacher, xs, t_max, temperature, rng)
    return FixedDataset(Batch(xs, tokens, lengths).pairs())
