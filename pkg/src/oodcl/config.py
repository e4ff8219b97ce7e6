"""Flat ``section.key=value`` run configuration with strict key checking."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from oodcl.data import AugmentSpec, OODKind, SyntheticSpec
from oodcl.errors import ConfigError
from oodcl.losses import LossWeights, Variant
from oodcl.network import NetworkDims
from oodcl.prototypes import ScoreFunction
from oodcl.pseudo_ood import MixupConfig
from oodcl.trainer import TrainConfig

SEED_ENV = "OODCL_SEED"

# key -> (parser, default); a default of None means "unset"
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, None),
    "data.n_classes": (int, 4),
    "data.input_dim": (int, 16),
    "data.samples_per_class": (int, 500),
    "data.cluster_spread": (float, 0.5),
    "data.cluster_separation": (float, 6.0),
    "data.test_fraction": (float, 0.2),
    "data.ood_samples": (int, 500),
    "data.aux_ood_samples": (int, 2000),
    "data.aux_ood": (str, "heldout"),
    "data.test_ood": (str, "shell,uniform,interpolated"),
    "data.dir": (str, "data"),
    "aug.noise_std": (float, 0.1),
    "aug.scale_jitter": (float, 0.1),
    "aug.views_per_sample": (int, 2),
    "net.hidden_dim": (int, 32),
    "net.feat_dim": (int, 16),
    "net.head_dim": (int, 8),
    "train.batch_size": (int, 64),
    "train.pretrain_epochs": (int, 200),
    "train.finetune_epochs": (int, 30),
    "train.base_lr": (float, 0.5),
    "train.lr_min": (float, 0.0),
    "train.finetune_lr": (float, None),
    "train.momentum": (float, 0.0),
    "train.tau": (float, 0.1),
    "train.alpha": (float, 0.1),
    "train.gamma": (float, None),
    "train.prototype_lr_scale": (float, 1.0),
    "train.ood_batch_ratio": (float, 1.0),
    "mixup.lambda_mean": (float, 0.5),
    "mixup.lambda_std": (float, 0.3),
    "mixup.clamp_lo": (float, 0.05),
    "mixup.clamp_hi": (float, 0.95),
    "energy.base": (str, "psupcon"),
    "energy.temperature": (float, 1.0),
    "energy.prototype_scale": (float, 10.0),
    "energy.weight": (float, 0.1),
    "eval.score": (str, "maxlogit"),
    "eval.temperature": (float, 1.0),
    "output.dir": (str, "runs"),
    "compare.variants": (str, "psupcon,opsupcon-r,opsupcon-p"),
}

TRAIN_VARIANTS = ("psupcon", "opsupcon-r", "opsupcon-p", "opsupcon-m", "ce", "energy")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment line."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = val
    return raw


def _convert(key: str, val: str):
    kind = SCHEMA[key][0]
    if val == "":
        return None
    try:
        return kind(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind.__name__}") from None


@dataclass
class RunConfig:
    values: dict[str, object]
    base_dir: Path
    overrides: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        return cls.from_text(text, path.resolve().parent, str(path), overrides)

    @classmethod
    def from_text(cls, text: str, base_dir: Path, source: str = "<config>",
                  overrides: dict[str, str] | None = None) -> "RunConfig":
        raw = parse_config_text(text, source)
        for key, val in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            raw[key] = val
        values = {key: default for key, (_, default) in SCHEMA.items()}
        values.update({key: _convert(key, val) for key, val in raw.items()})
        if values["seed"] is None:
            env = os.environ.get(SEED_ENV)
            values["seed"] = _convert("seed", env) if env else 0
        cfg = cls(values, Path(base_dir), dict(overrides or {}))
        cfg._validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def _validate(self) -> None:
        for key in ("data.aux_ood",):
            self._ood_kind(key, self[key])
        self.test_ood_kinds()
        self.score_function()
        self.compare_variants()
        if self["energy.base"] not in ("psupcon", "ce"):
            raise ConfigError("energy.base: must be 'psupcon' or 'ce'")
        try:
            self.synthetic_spec()
            self.augment_spec()
            self.train_config("psupcon")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid value: {exc}") from None

    @staticmethod
    def _ood_kind(key: str, name: str) -> OODKind:
        try:
            return OODKind(name)
        except ValueError:
            valid = ", ".join(k.value for k in OODKind)
            raise ConfigError(f"{key}: unknown OOD kind {name!r} (valid: {valid})") from None

    def test_ood_kinds(self) -> list[OODKind]:
        names = [n.strip() for n in str(self["data.test_ood"]).split(",") if n.strip()]
        if not names:
            raise ConfigError("data.test_ood: at least one OOD set is required")
        return [self._ood_kind("data.test_ood", n) for n in names]

    def score_function(self, name: str | None = None) -> ScoreFunction:
        name = name or self["eval.score"]
        try:
            return ScoreFunction(name)
        except ValueError:
            valid = ", ".join(f.value for f in ScoreFunction)
            raise ConfigError(f"eval.score: unknown score {name!r} (valid: {valid})") from None

    def compare_variants(self) -> list[str]:
        names = [n.strip() for n in str(self["compare.variants"]).split(",") if n.strip()]
        for n in names:
            if n not in TRAIN_VARIANTS:
                raise ConfigError(f"compare.variants: unknown variant {n!r}")
        return names

    def path(self, key: str) -> Path:
        p = Path(str(self[key]))
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self["seed"])

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_classes=self["data.n_classes"],
            input_dim=self["data.input_dim"],
            samples_per_class=self["data.samples_per_class"],
            cluster_spread=self["data.cluster_spread"],
            cluster_separation=self["data.cluster_separation"],
            seed=self.seed,
        )

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(self["aug.noise_std"], self["aug.scale_jitter"], self["aug.views_per_sample"])

    def train_config(self, variant: str) -> TrainConfig:
        dims = NetworkDims(self["data.input_dim"], self["net.hidden_dim"], self["net.feat_dim"], self["net.head_dim"])
        loss = LossWeights(tau=self["train.tau"], alpha=self["train.alpha"])
        kwargs = dict(
            dims=dims,
            loss=loss,
            mixup=MixupConfig(self["mixup.lambda_mean"], self["mixup.lambda_std"],
                              (self["mixup.clamp_lo"], self["mixup.clamp_hi"])),
            augment=self.augment_spec(),
            batch_size=self["train.batch_size"],
            pretrain_epochs=self["train.pretrain_epochs"],
            finetune_epochs=self["train.finetune_epochs"],
            base_lr=self["train.base_lr"],
            lr_min=self["train.lr_min"],
            finetune_lr=self["train.finetune_lr"],
            momentum=self["train.momentum"],
            seed=self.seed,
            prototype_lr_scale=self["train.prototype_lr_scale"],
            ood_batch_ratio=self["train.ood_batch_ratio"],
            energy_weight=self["energy.weight"],
            energy_temperature=self["energy.temperature"],
            prototype_scale=self["energy.prototype_scale"],
        )
        contrastive = variant if variant in {v.value for v in Variant} else "psupcon"
        cfg = TrainConfig.for_variant(contrastive, **kwargs)
        if self["train.gamma"] is not None:
            cfg = replace(cfg, loss=replace(cfg.loss, gamma=self["train.gamma"]))
        return cfg
