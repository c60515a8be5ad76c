"""Speculative decoding and draft-model distillation on tabular language models.

Small, exactly analysable models stand in for real LMs so that every claim
about losslessness, acceptance rates and distillation can be checked either
by brute-force enumeration or by an exact dynamic program.
"""
from ._kernels import backend, set_backend
from .errors import SpeclabError
from .lm import Context, SoftmaxLM, TabularLM
from .prob import DivergenceKind
from .specdec import LenienceSpec, SpecConfig

__version__ = "0.1.0"

__all__ = [
    "Context", "DivergenceKind", "LenienceSpec", "SoftmaxLM", "SpecConfig", "SpeclabError",
    "TabularLM", "backend", "set_backend", "__version__",
]
