"""Pseudo-OOD encoder features from cross-class feature mixup."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from oodcl.autodiff import concat, normalize_rows, value
from oodcl.errors import MissingInput, SingleClassBatch


class OODMode(str, enum.Enum):
    REAL_ONLY = "real"
    PSEUDO_ONLY = "pseudo"
    MIXED = "mixed"
    NONE = "none"


@dataclass(frozen=True)
class MixupConfig:
    lambda_mean: float = 0.5
    lambda_std: float = 0.3
    clamp_range: tuple[float, float] = (0.05, 0.95)

    def __post_init__(self):
        lo, hi = self.clamp_range
        if not self.lambda_std > 0:
            raise ValueError("lambda_std must be positive")
        if not lo < hi:
            raise ValueError("clamp_range must satisfy lo < hi")


def nearest_other_class(f, labels) -> np.ndarray:
    """Index of the most similar feature carrying a different label, per row."""
    f = np.asarray(f, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise SingleClassBatch("mixup needs at least two classes in the batch")
    sims = f @ f.T
    sims[labels[:, None] == labels[None, :]] = -np.inf
    return np.argmax(sims, axis=1)


def sample_lambdas(n: int, cfg: MixupConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.clamp_range
    return np.clip(rng.normal(cfg.lambda_mean, cfg.lambda_std, size=n), lo, hi)


def mix_features(f, partners, lambdas) -> np.ndarray:
    """``lambda_i f_i + (1 - lambda_i) f_partner(i)``, renormalized to unit length."""
    f = np.asarray(f, dtype=np.float64)
    lam = np.asarray(lambdas, dtype=np.float64)[:, None]
    return normalize_rows(lam * f + (1.0 - lam) * f[partners])


def mixup_pseudo_ood(f, labels, cfg: MixupConfig, rng: np.random.Generator) -> np.ndarray:
    """One pseudo-OOD feature per input row, in input order."""
    partners = nearest_other_class(f, labels)
    lambdas = sample_lambdas(len(partners), cfg, rng)
    return mix_features(f, partners, lambdas)


def assemble_ood_batch(real, pseudo, mode: OODMode | str):
    """Select or concatenate (real first) the OOD features for ``mode``.

    Works on arrays and Tensors alike so real features keep their gradient.
    """
    mode = OODMode(mode)

    def need(x, what):
        if x is None or value(x).size == 0:
            raise MissingInput(f"mode {mode.value!r} requires {what} OOD features")
        return x

    if mode is OODMode.REAL_ONLY:
        return need(real, "real")
    if mode is OODMode.PSEUDO_ONLY:
        return need(pseudo, "pseudo")
    if mode is OODMode.MIXED:
        return concat([need(real, "real"), need(pseudo, "pseudo")])
    raise MissingInput("mode 'none' produces no OOD batch")
