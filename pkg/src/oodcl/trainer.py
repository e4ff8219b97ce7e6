"""Two-phase training (prototype SupCon pretraining, OOD-aware finetuning),
the cross-entropy and energy-finetuning baselines, and evaluation."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from oodcl.autodiff import Tensor, normalize_rows, value
from oodcl.data import AugmentSpec, Dataset, augment_views
from oodcl.errors import EmptyInput, MissingOOD
from oodcl.losses import (
    EnergyBaselineConfig,
    LossWeights,
    Variant,
    ce_loss,
    energy_margin_loss,
    energy_scores,
    ood_encoder_contrast,
    ood_head_contrast,
    supcon_loss_decomposed,
    tightness_loss,
    total_loss,
)
from oodcl.metrics import EvalScores, MetricsReport, evaluate_sets
from oodcl.network import (
    NetworkDims,
    NetworkParams,
    encode,
    gradient,
    init_params,
    project,
    read_checkpoint,
    write_checkpoint,
)
from oodcl.prototypes import (
    PrototypeSet,
    ScoreFunction,
    init_prototypes,
    scale_prototypes,
    scores_from_logits,
)
from oodcl.pseudo_ood import MixupConfig, OODMode, assemble_ood_batch, mixup_pseudo_ood

log = logging.getLogger(__name__)

# SeedSequence stream tags
_INIT_NET, _INIT_PROTO, _PRETRAIN, _FINETUNE, _CE, _ENERGY = range(6)

DEFAULT_GAMMA = {Variant.OPSUPCON_R: 1.0, Variant.OPSUPCON_P: 0.5, Variant.OPSUPCON_M: 1.0}
VARIANT_OOD_MODE = {
    Variant.PSUPCON: OODMode.NONE,
    Variant.OPSUPCON_R: OODMode.REAL_ONLY,
    Variant.OPSUPCON_P: OODMode.PSEUDO_ONLY,
    Variant.OPSUPCON_M: OODMode.MIXED,
}


@dataclass(frozen=True)
class TrainConfig:
    dims: NetworkDims
    loss: LossWeights = LossWeights()
    mixup: MixupConfig = MixupConfig()
    augment: AugmentSpec = AugmentSpec()
    batch_size: int = 64
    pretrain_epochs: int = 200
    finetune_epochs: int = 30
    base_lr: float = 0.5
    lr_min: float = 0.0
    finetune_lr: float | None = None
    momentum: float = 0.0
    seed: int = 0
    ood_mode: OODMode = OODMode.NONE
    prototype_lr_scale: float = 1.0
    ood_batch_ratio: float = 1.0
    energy_weight: float = 0.1
    energy_temperature: float = 1.0
    prototype_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ood_mode", OODMode(self.ood_mode))
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not self.base_lr > 0 or self.lr_min < 0:
            raise ValueError("base_lr must be positive and lr_min non-negative")
        if not self.prototype_lr_scale > 0:
            raise ValueError("prototype_lr_scale must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def for_variant(cls, variant: Variant | str, **kwargs) -> "TrainConfig":
        """Config with the loss variant, its default gamma and its OOD mode filled in."""
        variant = Variant(variant)
        loss = kwargs.pop("loss", LossWeights())
        gamma = DEFAULT_GAMMA.get(variant, loss.gamma)
        kwargs.setdefault("ood_mode", VARIANT_OOD_MODE[variant])
        return cls(loss=replace(loss, variant=variant, gamma=gamma), **kwargs)

    def echo(self) -> dict:
        out = asdict(self)
        out["loss"]["variant"] = self.loss.variant.value
        out["ood_mode"] = self.ood_mode.value
        out["mixup"]["clamp_range"] = list(self.mixup.clamp_range)
        return out


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    lr: float
    losses: dict[str, float]


@dataclass
class TrainedModel:
    """Network weights plus either unit prototypes or a linear classifier."""

    params: NetworkParams
    kind: str
    protos: PrototypeSet | None = None
    classifier: np.ndarray | None = None
    prototype_scale: float = 1.0
    energy: EnergyBaselineConfig | None = None
    config: dict = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)

    def logit_weights(self) -> np.ndarray:
        if self.classifier is not None:
            return self.classifier
        return scale_prototypes(self.protos, self.prototype_scale)

    def class_ids(self) -> np.ndarray:
        if self.protos is not None:
            return np.asarray(self.protos.class_ids)
        return np.arange(len(self.classifier))

    def features(self, x) -> np.ndarray:
        return encode(self.params.arrays, np.asarray(x, dtype=np.float64))

    def logits(self, x) -> np.ndarray:
        return self.features(x) @ self.logit_weights().T

    def predict(self, x) -> np.ndarray:
        return self.class_ids()[np.argmax(self.logits(x), axis=1)]

    def copy(self) -> "TrainedModel":
        return TrainedModel(
            params=self.params.copy(),
            kind=self.kind,
            protos=None if self.protos is None else self.protos.copy(),
            classifier=None if self.classifier is None else self.classifier.copy(),
            prototype_scale=self.prototype_scale,
            energy=self.energy,
            config=json.loads(json.dumps(self.config)),
            history=list(self.history),
        )

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {"kind": self.kind, "prototype_scale": format(self.prototype_scale, ".17g")}
        if self.energy is not None:
            meta["energy"] = " ".join(
                format(float(v), ".17g")
                for v in (self.energy.m_in, self.energy.m_out, self.energy.temperature,
                          self.energy.prototype_scale)
            )
        meta["class_ids"] = " ".join(str(c) for c in self.class_ids())
        meta["config"] = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        extra = {"protos": self.protos.vectors} if self.protos is not None else {"classifier": self.classifier}
        write_checkpoint(path, self.params, extra, meta)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        params, tensors, meta = read_checkpoint(path)
        ids = [int(c) for c in meta.get("class_ids", "").split()]
        protos = PrototypeSet(tensors["protos"], ids) if "protos" in tensors else None
        energy = None
        if "energy" in meta:
            m_in, m_out, t, s = (float(v) for v in meta["energy"].split())
            energy = EnergyBaselineConfig(m_in, m_out, t, s)
        return cls(
            params=params,
            kind=meta["kind"],
            protos=protos,
            classifier=tensors.get("classifier"),
            prototype_scale=float(meta.get("prototype_scale", "1")),
            energy=energy,
            config=json.loads(meta.get("config", "{}")),
        )


def write_history(history: list[EpochRecord], path: str | Path) -> None:
    """Tab-separated, one line per epoch: phase, epoch, lr, then each loss component."""
    keys: list[str] = []
    for rec in history:
        keys.extend(k for k in rec.losses if k not in keys)
    lines = ["\t".join(["phase", "epoch", "lr", *keys])]
    for rec in history:
        cells = [rec.phase, str(rec.epoch), format(rec.lr, ".17g")]
        cells += [format(rec.losses[k], ".17g") if k in rec.losses else "" for k in keys]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# optimization

def cosine_lr(step: int, total_steps: int, base_lr: float, lr_min: float = 0.0) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError("need 0 <= step <= total_steps and total_steps >= 1")
    return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def _phase_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


@dataclass
class Batch:
    """One optimization step's inputs: stacked views and their labels, plus OOD inputs."""

    views: np.ndarray
    labels: np.ndarray
    ood_inputs: np.ndarray | None = None


StepObjective = Callable[[dict[str, Tensor], Batch, np.random.Generator, dict], object]


def _renormalize(arrays: dict[str, np.ndarray]) -> None:
    if "protos" in arrays:
        arrays["protos"] = normalize_rows(arrays["protos"])


def sgd_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             prototype_lr_scale: float = 1.0, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> None:
    """In-place SGD update followed by prototype re-normalization."""
    for name, g in grads.items():
        if momentum and velocity is not None:
            velocity[name] = momentum * velocity.get(name, 0.0) + g
            g = velocity[name]
        step = lr * prototype_lr_scale if name == "protos" else lr
        arrays[name] = arrays[name] - step * g
    _renormalize(arrays)


def _run_phase(
    arrays: dict[str, np.ndarray],
    phase: str,
    epochs: int,
    base_lr: float,
    cfg: TrainConfig,
    id_data: Dataset,
    objective: StepObjective,
    rng: np.random.Generator,
    aux_ood: Dataset | None = None,
) -> list[EpochRecord]:
    n = len(id_data)
    b = cfg.batch_size
    if n < b:
        raise EmptyInput(f"{n} training samples cannot fill a batch of {b}")
    steps_per_epoch = n // b
    total = max(1, epochs * steps_per_epoch)
    n_ood = max(1, int(round(cfg.ood_batch_ratio * b)))
    velocity: dict[str, np.ndarray] = {}
    history = []
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        sums: dict[str, float] = {}
        for s in range(steps_per_epoch):
            idx = perm[s * b:(s + 1) * b]
            views = augment_views(id_data.inputs[idx], cfg.augment, rng)
            batch = Batch(
                views=views.reshape(-1, id_data.dim),
                labels=np.tile(id_data.labels[idx], cfg.augment.views_per_sample),
            )
            if aux_ood is not None:
                pick = rng.choice(len(aux_ood), size=n_ood, replace=n_ood > len(aux_ood))
                batch.ood_inputs = aux_ood.inputs[pick]
            parts: dict[str, float] = {}
            lr = cosine_lr(step, total, base_lr, cfg.lr_min)
            loss, grads = gradient(arrays, lambda t: objective(t, batch, rng, parts))
            sgd_step(arrays, grads, lr, cfg.prototype_lr_scale, cfg.momentum, velocity)
            parts["total"] = loss
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            step += 1
        record = EpochRecord(phase, epoch, lr, {k: v / steps_per_epoch for k, v in sums.items()})
        log.debug("%s epoch %d lr %.4g loss %.6f", phase, epoch, lr, record.losses["total"])
        history.append(record)
    return history


def _contrastive_objective(weights: LossWeights, mode: OODMode, mixup: MixupConfig) -> StepObjective:
    """Build the per-step total loss for a prototype-SupCon variant."""

    def objective(t, batch: Batch, rng, parts):
        f_id = encode(t, batch.views)
        z_id = project(t, f_id)
        protos = t["protos"]
        f_ood = z_ood = None
        if mode is not OODMode.NONE:
            real = encode(t, batch.ood_inputs) if batch.ood_inputs is not None else None
            pseudo = None
            if mode in (OODMode.PSEUDO_ONLY, OODMode.MIXED):
                # pseudo features are constants: no gradient into the mixed ID features
                pseudo = mixup_pseudo_ood(value(f_id), batch.labels, mixup, rng)
            f_ood = assemble_ood_batch(real, pseudo, mode)
            z_ood = project(t, f_ood)
        loss = total_loss(z_id, batch.labels, f_id, f_ood, z_ood, protos, weights)
        _record_parts(parts, weights, z_id, batch.labels, f_id, f_ood, z_ood, protos)
        return loss

    return objective


def _record_parts(parts, weights, z_id, labels, f_id, f_ood, z_ood, protos) -> None:
    z, f, p = value(z_id), value(f_id), value(protos)
    tight, contrast = supcon_loss_decomposed(z, labels, weights.tau)
    parts["supcon"] = tight + contrast
    parts["proto_tightness"] = tightness_loss(f, labels, p)
    if z_ood is not None:
        parts["ood_head"] = ood_head_contrast(value(z_ood), z, weights.tau)
        if weights.variant.uses_encoder_contrast:
            parts["ood_encoder"] = ood_encoder_contrast(value(f_ood), p, weights.tau)


def _initial_arrays(cfg: TrainConfig, n_classes: int) -> tuple[NetworkParams, np.ndarray]:
    params = init_params(cfg.dims, int(np.random.SeedSequence([cfg.seed, _INIT_NET]).generate_state(1)[0]))
    proto_seed = int(np.random.SeedSequence([cfg.seed, _INIT_PROTO]).generate_state(1)[0])
    protos = init_prototypes(n_classes, cfg.dims.feat_dim, proto_seed)
    return params, protos.vectors


def _n_classes(id_data: Dataset) -> int:
    if not id_data.labeled:
        raise ValueError("training data must be labeled")
    k = int(id_data.labels.max()) + 1
    if np.unique(id_data.labels).size < 2:
        raise ValueError("training needs at least two classes")
    return k


def _model_from_arrays(arrays, dims, kind, class_ids, cfg, history, **kw) -> TrainedModel:
    net = NetworkParams(dims, {k: v for k, v in arrays.items() if k.startswith(("enc_", "head_"))})
    protos = PrototypeSet(arrays["protos"], class_ids) if "protos" in arrays else None
    classifier = arrays.get("classifier")
    return TrainedModel(net, kind, protos, classifier, config=cfg.echo(), history=history, **kw)


def _arrays_of(model: TrainedModel) -> dict[str, np.ndarray]:
    arrays = {k: v.copy() for k, v in model.params.arrays.items()}
    if model.protos is not None:
        arrays["protos"] = model.protos.vectors.copy()
    if model.classifier is not None:
        arrays["classifier"] = model.classifier.copy()
    return arrays


def pretrain(cfg: TrainConfig, id_data: Dataset) -> TrainedModel:
    """SupCon on the head plus prototype tightness on the encoder."""
    k = _n_classes(id_data)
    params, protos = _initial_arrays(cfg, k)
    arrays = dict(params.arrays)
    arrays["protos"] = protos
    weights = replace(cfg.loss, variant=Variant.PSUPCON)
    objective = _contrastive_objective(weights, OODMode.NONE, cfg.mixup)
    history = _run_phase(arrays, "pretrain", cfg.pretrain_epochs, cfg.base_lr, cfg, id_data,
                         objective, _phase_rng(cfg.seed, _PRETRAIN))
    return _model_from_arrays(arrays, cfg.dims, Variant.PSUPCON.value, range(k), cfg, history)


def finetune(model: TrainedModel, cfg: TrainConfig, id_data: Dataset, aux_ood: Dataset | None = None) -> TrainedModel:
    """Continue training a prototype model on the full objective of ``cfg.loss.variant``."""
    if model.protos is None:
        raise ValueError("finetune needs a prototype model")
    mode = cfg.ood_mode
    variant = cfg.loss.variant
    if variant.uses_ood and mode is OODMode.NONE:
        raise MissingOOD(f"variant {variant.value} needs an OOD mode")
    if mode in (OODMode.REAL_ONLY, OODMode.MIXED) and (aux_ood is None or len(aux_ood) == 0):
        raise MissingOOD(f"OOD mode {mode.value!r} needs an auxiliary OOD dataset")
    if mode in (OODMode.PSEUDO_ONLY, OODMode.NONE) and aux_ood is not None:
        warnings.warn(f"OOD mode {mode.value!r} ignores the auxiliary OOD dataset", stacklevel=2)
        aux_ood = None
    out = model.copy()
    out.kind = variant.value
    out.config = cfg.echo()
    if cfg.finetune_epochs == 0:
        return out
    arrays = _arrays_of(model)
    objective = _contrastive_objective(cfg.loss, mode, cfg.mixup)
    lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.base_lr
    history = _run_phase(arrays, "finetune", cfg.finetune_epochs, lr, cfg, id_data, objective,
                         _phase_rng(cfg.seed, _FINETUNE), aux_ood)
    return _model_from_arrays(arrays, cfg.dims, variant.value, model.protos.class_ids, cfg,
                              model.history + history)


def train_ce_baseline(cfg: TrainConfig, id_data: Dataset) -> TrainedModel:
    """Encoder plus bias-free linear classifier trained with cross-entropy."""
    k = _n_classes(id_data)
    params, _ = _initial_arrays(cfg, k)
    arrays = dict(params.arrays)
    cls_rng = _phase_rng(cfg.seed, _CE)
    arrays["classifier"] = cls_rng.standard_normal((k, cfg.dims.feat_dim)) / math.sqrt(cfg.dims.feat_dim)

    def objective(t, batch, rng, parts):
        loss = ce_loss(encode(t, batch.views) @ t["classifier"].T, batch.labels)
        parts["ce"] = float(value(loss))
        return loss

    history = _run_phase(arrays, "ce", cfg.pretrain_epochs, cfg.base_lr, cfg, id_data,
                         objective, cls_rng)
    return _model_from_arrays(arrays, cfg.dims, "ce", range(k), cfg, history)


def estimate_energy_margins(
    model: TrainedModel,
    id_data: Dataset,
    ood_data: Dataset,
    temperature: float = 1.0,
    prototype_scale: float | None = None,
) -> tuple[float, float]:
    """Mean energy over the ID set and over the OOD set."""
    if len(id_data) == 0 or len(ood_data) == 0:
        raise EmptyInput("energy margins need nonempty ID and OOD sets")
    if prototype_scale is not None and model.protos is not None:
        w = scale_prototypes(model.protos, prototype_scale)
    else:
        w = model.logit_weights()
    e_id = energy_scores(model.features(id_data.inputs) @ w.T, temperature)
    e_ood = energy_scores(model.features(ood_data.inputs) @ w.T, temperature)
    return float(np.mean(e_id)), float(np.mean(e_ood))


def finetune_energy_baseline(
    model: TrainedModel,
    cfg: TrainConfig,
    id_data: Dataset,
    aux_ood: Dataset,
    ebc: EnergyBaselineConfig,
) -> TrainedModel:
    """Energy-margin finetuning on top of the model's own training objective.

    Prototype models keep SupCon plus prototype tightness and compute energy
    logits against prototypes scaled by ``ebc.prototype_scale``; CE models
    keep cross-entropy on their classifier.
    """
    if aux_ood is None or len(aux_ood) == 0:
        raise MissingOOD("energy finetuning needs an auxiliary OOD dataset")
    arrays = _arrays_of(model)
    scale = ebc.prototype_scale
    base = replace(cfg.loss, variant=Variant.PSUPCON)

    def objective(t, batch, rng, parts):
        f_id = encode(t, batch.views)
        f_ood = encode(t, batch.ood_inputs)
        if "protos" in t:
            z_id = project(t, f_id)
            keep = total_loss(z_id, batch.labels, f_id, None, None, t["protos"], base)
            w = t["protos"] * scale
            _record_parts(parts, base, z_id, batch.labels, f_id, None, None, t["protos"])
        else:
            w = t["classifier"]
            keep = ce_loss(f_id @ w.T, batch.labels)
            parts["ce"] = float(value(keep))
        margin = energy_margin_loss(f_id @ w.T, f_ood @ w.T, ebc)
        parts["energy_margin"] = float(value(margin))
        return keep + cfg.energy_weight * margin

    out = model.copy()
    if cfg.finetune_epochs > 0:
        lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.base_lr
        history = _run_phase(arrays, "energy", cfg.finetune_epochs, lr, cfg, id_data, objective,
                             _phase_rng(cfg.seed, _ENERGY), aux_ood)
        ids = model.class_ids()
        out = _model_from_arrays(arrays, cfg.dims, "energy", ids, cfg, model.history + history)
    out.kind = "energy"
    out.config = cfg.echo()
    out.energy = ebc
    if out.protos is not None:
        out.prototype_scale = scale
    return out


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    accuracy: float
    function: ScoreFunction
    per_set: dict[str, MetricsReport]
    average: dict[str, float]
    n_id: int


def model_scores(model: TrainedModel, x, function: ScoreFunction | str, temperature: float = 1.0) -> np.ndarray:
    return scores_from_logits(model.logits(x), function, temperature)


def evaluate(
    model: TrainedModel,
    id_test: Dataset,
    ood_sets: list[Dataset],
    function: ScoreFunction | str = ScoreFunction.MAX_LOGIT,
    temperature: float = 1.0,
) -> EvalReport:
    if len(id_test) == 0 or not ood_sets:
        raise EmptyInput("evaluation needs ID test data and at least one OOD set")
    function = ScoreFunction(function)
    accuracy = float(np.mean(model.predict(id_test.inputs) == id_test.labels))
    id_scores = model_scores(model, id_test.inputs, function, temperature)
    per_set = [
        (ds.name, EvalScores(id_scores, model_scores(model, ds.inputs, function, temperature)))
        for ds in ood_sets
    ]
    reports, average = evaluate_sets(per_set)
    return EvalReport(accuracy, function, reports, average, len(id_test))
