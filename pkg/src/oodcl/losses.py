"""Training objectives.

Every loss accepts plain arrays or :class:`~oodcl.autodiff.Tensor` inputs.
Array inputs give a Python float; if any input is a Tensor the result is a
scalar Tensor that can be backpropagated. Embedding lists are 2-D arrays with
one embedding per row, prototypes are a ``(K, d)`` matrix.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from oodcl.autodiff import Tensor, is_tensor, logsumexp, relu, value
from oodcl.errors import (
    DimensionMismatch,
    EmptyInput,
    MissingOOD,
    NoPositivePairs,
    UnknownClass,
)

DEFAULT_TAU = 0.1


class Variant(str, enum.Enum):
    PSUPCON = "psupcon"
    OPSUPCON_R = "opsupcon-r"
    OPSUPCON_P = "opsupcon-p"
    OPSUPCON_M = "opsupcon-m"

    @property
    def uses_ood(self) -> bool:
        return self is not Variant.PSUPCON

    @property
    def uses_encoder_contrast(self) -> bool:
        return self in (Variant.OPSUPCON_R, Variant.OPSUPCON_M)


@dataclass(frozen=True)
class LossWeights:
    tau: float = DEFAULT_TAU
    alpha: float = 0.1
    gamma: float = 1.0
    variant: Variant = Variant.PSUPCON

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be non-negative")
        object.__setattr__(self, "variant", Variant(self.variant))


@dataclass(frozen=True)
class EnergyBaselineConfig:
    m_in: float
    m_out: float
    temperature: float = 1.0
    prototype_scale: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.prototype_scale > 0:
            raise ValueError("prototype_scale must be positive")


def _out(x, *inputs):
    return x if is_tensor(*inputs) else float(x)


def _arr(x):
    """Tensors pass through; prototype sets unwrap; everything else becomes float64."""
    if isinstance(x, Tensor) or x is None:
        return x
    return np.asarray(getattr(x, "vectors", x), dtype=np.float64)


def _labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionMismatch(f"{labels.size} labels for {n} embeddings")
    return labels.astype(np.int64)


def _check_rows(*mats) -> None:
    shapes = [m.shape for m in mats]
    if any(len(s) != 2 for s in shapes) or len({s[1] for s in shapes}) > 1:
        raise DimensionMismatch("embedding lists must be 2-D with matching widths")


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise UnknownClass(f"label {bad} has no prototype (K={k})")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


@functools.lru_cache(maxsize=64)
def _pair_weights(label_bytes: bytes):
    """Self mask, per-pair positive weights and per-anchor weights for one label vector."""
    labels = np.frombuffer(label_bytes, dtype=np.int64)
    n = labels.size
    not_self = ~np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & not_self
    n_pos = positives.sum(axis=1)
    contributing = n_pos > 0
    if not contributing.any():
        raise NoPositivePairs("no anchor has a same-label partner in the batch")
    # anchors without positives get weight 0 and are left out of the mean
    weights = contributing / contributing.sum()
    pos_weights = positives / np.maximum(n_pos, 1)[:, None]
    for arr in (not_self, pos_weights, weights):
        arr.flags.writeable = False  # shared through the cache
    return not_self, pos_weights, weights


def _supcon_parts(z, labels, tau: float):
    z = _arr(z)
    _check_rows(z)
    n = value(z).shape[0]
    labels = _labels(labels, n)
    if n < 2:
        raise NoPositivePairs("a contrastive batch needs at least two embeddings")
    not_self, pos_weights, weights = _pair_weights(labels.tobytes())

    sims = (z @ z.T) * (1.0 / tau)
    tightness = -((sims * pos_weights).sum(axis=1) * weights).sum()
    contrast = (logsumexp(sims, axis=1, mask=not_self) * weights).sum()
    return tightness, contrast


def supcon_loss(z, labels, tau: float = DEFAULT_TAU):
    """Supervised contrastive loss averaged over anchors that have positives."""
    tightness, contrast = _supcon_parts(z, labels, tau)
    return _out(tightness + contrast, z)


def supcon_loss_decomposed(z, labels, tau: float = DEFAULT_TAU):
    """``(tightness, contrast)`` whose sum is :func:`supcon_loss`."""
    tightness, contrast = _supcon_parts(z, labels, tau)
    return _out(tightness, z), _out(contrast, z)


def tightness_loss(f, labels, protos):
    """Mean negative similarity between each feature and its class prototype."""
    f, protos = _arr(f), _arr(protos)
    _check_rows(f, protos)
    n = value(f).shape[0]
    if n == 0:
        raise EmptyInput("tightness loss of an empty batch")
    labels = _labels(labels, n)
    onehot = _one_hot(labels, value(protos).shape[0])
    return _out(-((f @ protos.T) * onehot).sum() * (1.0 / n), f, protos)


def ood_head_contrast(z_ood, z_id, tau: float = DEFAULT_TAU):
    """Mean over OOD embeddings of LSE of their similarities to the ID embeddings."""
    z_ood, z_id = _arr(z_ood), _arr(z_id)
    _check_rows(z_ood, z_id)
    if value(z_ood).shape[0] == 0 or value(z_id).shape[0] == 0:
        raise EmptyInput("OOD head contrast needs nonempty OOD and ID batches")
    sims = (z_ood @ z_id.T) * (1.0 / tau)
    return _out(logsumexp(sims, axis=1).mean(), z_ood, z_id)


def ood_encoder_contrast(f_ood, protos, tau: float = DEFAULT_TAU):
    """Mean over OOD features of ``(1/K) * LSE_k(f . theta_k / tau)``."""
    f_ood, protos = _arr(f_ood), _arr(protos)
    _check_rows(f_ood, protos)
    k = value(protos).shape[0]
    if value(f_ood).shape[0] == 0 or k == 0:
        raise EmptyInput("OOD encoder contrast needs OOD features and prototypes")
    sims = (f_ood @ protos.T) * (1.0 / tau)
    return _out(logsumexp(sims, axis=1).mean() * (1.0 / k), f_ood, protos)


def total_loss(z_id, labels, f_id, f_ood, z_ood, protos, weights: LossWeights):
    """Weighted combination of the ID and OOD terms for the configured variant.

    ``f_ood`` and ``z_ood`` may be ``None`` for :attr:`Variant.PSUPCON`.
    ``f_ood`` is unused for :attr:`Variant.OPSUPCON_P`.
    """
    w = weights
    tightness, contrast = _supcon_parts(z_id, labels, w.tau)
    loss = tightness + contrast
    if w.alpha != 0:
        loss = loss + w.alpha * tightness_loss(f_id, labels, protos)
    if w.variant.uses_ood:
        if z_ood is None or value(z_ood).shape[0] == 0:
            raise MissingOOD(f"variant {w.variant.value} needs OOD samples")
        if w.gamma != 0:
            loss = loss + w.gamma * ood_head_contrast(z_ood, z_id, w.tau)
        if w.variant.uses_encoder_contrast and w.alpha != 0:
            if f_ood is None or value(f_ood).shape[0] == 0:
                raise MissingOOD(f"variant {w.variant.value} needs OOD encoder features")
            loss = loss + w.alpha * ood_encoder_contrast(f_ood, protos, w.tau)
    return _out(loss, z_id, f_id, f_ood, z_ood, _arr(protos))


def ce_loss(logits, labels):
    """Mean softmax cross-entropy."""
    logits = _arr(logits)
    _check_rows(logits)
    n, k = value(logits).shape
    if n == 0:
        raise EmptyInput("cross-entropy of an empty batch")
    onehot = _one_hot(_labels(labels, n), k)
    return _out((logsumexp(logits, axis=1) - (logits * onehot).sum(axis=1)).mean(), logits)


def energy_scores(logits, temperature: float = 1.0):
    """Row-wise ``-T * log sum_k exp(logit_k / T)``."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits = _arr(logits)
    return logsumexp(logits * (1.0 / temperature), axis=-1) * (-temperature)


def energy_score_sum(logits, temperature: float = 1.0) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise EmptyInput("energy of an empty logit vector")
    return float(energy_scores(logits, temperature))


def energy_margin_loss(logits_id, logits_ood, cfg: EnergyBaselineConfig):
    """Squared hinge pushing ID energies below ``m_in`` and OOD energies above ``m_out``."""
    logits_id, logits_ood = _arr(logits_id), _arr(logits_ood)
    _check_rows(logits_id, logits_ood)
    if value(logits_id).shape[0] == 0 or value(logits_ood).shape[0] == 0:
        raise EmptyInput("energy margin loss needs ID and OOD logits")
    e_id = energy_scores(logits_id, cfg.temperature)
    e_ood = energy_scores(logits_ood, cfg.temperature)
    over = relu(e_id - cfg.m_in)
    under = relu(cfg.m_out - e_ood)
    return _out((over * over).mean() + (under * under).mean(), logits_id, logits_ood)


__all__ = [
    "DEFAULT_TAU", "EnergyBaselineConfig", "LossWeights", "Variant",
    "ce_loss", "energy_margin_loss", "energy_score_sum", "energy_scores",
    "ood_encoder_contrast", "ood_head_contrast", "supcon_loss",
    "supcon_loss_decomposed", "tightness_loss", "total_loss",
]
