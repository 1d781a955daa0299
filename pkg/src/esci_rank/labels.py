"""ESCI label taxonomy, probability vectors over it and the default gain vector."""

from __future__ import annotations

from enum import Enum
from typing import Iterable, Union

import numpy as np

NUM_CLASSES = 4
SUM_TOL = 1e-9

# NDCG gains for (E, S, C, I); also the weights that turn class probabilities into a ranking score.
DEFAULT_GAINS = (1.0, 0.1, 0.01, 0.0)

# Label shares of the competition training data, in (E, S, C, I) order.
ESCI_PRIORS = (0.6278, 0.2328, 0.0316, 0.1078)


class EsciLabel(Enum):
    EXACT = "E"
    SUBSTITUTE = "S"
    COMPLEMENT = "C"
    IRRELEVANT = "I"

    @property
    def index(self) -> int:
        return _INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "EsciLabel":
        return _ORDER[i]

    @classmethod
    def parse(cls, text: str) -> "EsciLabel":
        """Accept the one-letter code or the full class name, case-insensitively."""
        key = text.strip().lower()
        for label in cls:
            if key in (label.value.lower(), label.name.lower()):
                return label
        raise ValueError(f"unknown ESCI label {text!r}")


_ORDER = (EsciLabel.EXACT, EsciLabel.SUBSTITUTE, EsciLabel.COMPLEMENT, EsciLabel.IRRELEVANT)
_INDEX = {label: i for i, label in enumerate(_ORDER)}

LabelLike = Union[EsciLabel, Iterable[float], np.ndarray]


def one_hot(label: EsciLabel) -> np.ndarray:
    v = np.zeros(NUM_CLASSES)
    v[label.index] = 1.0
    return v


def as_label_vector(value: LabelLike) -> np.ndarray:
    """Return a validated float64 copy of a label distribution (hard labels become one-hot)."""
    if isinstance(value, EsciLabel):
        return one_hot(value)
    p = np.array(value, dtype=np.float64)
    check_label_vector(p)
    return p


def check_label_vector(p: np.ndarray, tol: float = SUM_TOL) -> None:
    if p.shape != (NUM_CLASSES,):
        raise ValueError(f"label vector must have {NUM_CLASSES} components, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"label vector has non-finite components: {p}")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError(f"label vector components must lie in [0, 1]: {p}")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"label vector must sum to 1 (got {p.sum()!r})")


def check_gains(gains: Iterable[float]) -> np.ndarray:
    g = np.array(gains, dtype=np.float64)
    if g.shape != (NUM_CLASSES,):
        raise ValueError(f"gain vector must have {NUM_CLASSES} components")
    if np.any(np.diff(g) > 0):
        raise ValueError(f"gains must be non-increasing in E, S, C, I order: {tuple(g)}")
    return g
