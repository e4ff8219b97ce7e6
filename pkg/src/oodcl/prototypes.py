"""Class prototypes, nearest-prototype classification and OOD scores.

All scores follow one sign convention: higher means more in-distribution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from oodcl.autodiff import logsumexp, normalize_rows
from oodcl.errors import DimensionMismatch, NonPositiveScale


class ScoreFunction(str, enum.Enum):
    MAX_LOGIT = "maxlogit"
    MSP = "msp"
    SUM_ENERGY = "energy"


@dataclass(frozen=True)
class Score:
    value: float
    function: ScoreFunction


@dataclass
class PrototypeSet:
    """``K`` unit-norm class prototypes stored as rows of ``vectors``."""

    vectors: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionMismatch("prototype vectors must form a 2-D matrix")
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if len(self.class_ids) != self.vectors.shape[0]:
            raise ValueError("one class id is required per prototype")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be distinct")
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.allclose(norms, 1.0, rtol=0, atol=1e-9):
            raise ValueError("prototypes must be unit-norm")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.vectors.copy(), self.class_ids)

    @classmethod
    def from_raw(cls, vectors, class_ids) -> "PrototypeSet":
        """Build a set after projecting every row back onto the unit sphere."""
        return cls(normalize_rows(np.asarray(vectors, dtype=np.float64)), class_ids)


def init_prototypes(k: int, d: int, seed: int) -> PrototypeSet:
    if k < 1 or d < 2:
        raise ValueError("need K >= 1 prototypes of dimension >= 2")
    rng = np.random.default_rng(seed)
    return PrototypeSet.from_raw(rng.standard_normal((k, d)), range(k))


def _weights(protos) -> np.ndarray:
    return np.asarray(getattr(protos, "vectors", protos), dtype=np.float64)


def _class_ids(protos) -> tuple[int, ...]:
    ids = getattr(protos, "class_ids", None)
    return tuple(range(_weights(protos).shape[0])) if ids is None else ids


def logits(f, protos) -> np.ndarray:
    """Dot products of a feature (or a batch of rows) with every prototype.

    ``protos`` may be a :class:`PrototypeSet` or a raw weight matrix, such as
    the output of :func:`scale_prototypes` or a linear classifier.
    """
    f = np.asarray(f, dtype=np.float64)
    w = _weights(protos)
    if f.shape[-1] != w.shape[1]:
        raise DimensionMismatch(f"feature dim {f.shape[-1]} vs prototype dim {w.shape[1]}")
    return f @ w.T


def classify(f, protos):
    """Class id of the most similar prototype; lowest index wins ties."""
    idx = np.argmax(logits(f, protos), axis=-1)
    ids = np.asarray(_class_ids(protos))
    return int(ids[idx]) if np.ndim(idx) == 0 else ids[idx]


def scores_from_logits(lg, function: ScoreFunction | str, temperature: float = 1.0) -> np.ndarray:
    lg = np.asarray(lg, dtype=np.float64)
    function = ScoreFunction(function)
    if function is ScoreFunction.MAX_LOGIT:
        return lg.max(axis=-1)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    lse = logsumexp(lg / temperature, axis=-1)
    if function is ScoreFunction.MSP:
        # max softmax = exp(max/T - lse), computed without forming the full softmax
        return np.exp(lg.max(axis=-1) / temperature - lse)
    return temperature * lse


def score(f, protos, function: ScoreFunction | str = ScoreFunction.MAX_LOGIT, temperature: float = 1.0) -> Score:
    function = ScoreFunction(function)
    return Score(float(scores_from_logits(logits(f, protos), function, temperature)), function)


def scale_prototypes(protos, s: float) -> np.ndarray:
    if not s > 0:
        raise NonPositiveScale(f"prototype scale must be positive, got {s}")
    return _weights(protos) * s
