"""End-to-end experiment steps shared by the CLI and the benchmark tests:
dataset generation, per-variant training, report building and rendering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from oodcl.config import RunConfig
from oodcl.data import Dataset, OODKind, gen_id_dataset, gen_ood_dataset, read_dataset, split_dataset, write_dataset
from oodcl.losses import EnergyBaselineConfig
from oodcl.prototypes import ScoreFunction
from oodcl.trainer import (
    EvalReport,
    TrainedModel,
    estimate_energy_margins,
    evaluate,
    finetune,
    finetune_energy_baseline,
    pretrain,
    train_ce_baseline,
)

TRAIN_FILE, TEST_FILE, AUX_FILE = "train.csv", "test.csv", "aux-ood.csv"
METRIC_KEYS = ("fpr95", "auroc", "aupr")

# SeedSequence tags for the dataset draws
_SPLIT, _AUX, _TEST_OOD = 10, 11, 12


def derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def ood_file(kind: OODKind) -> str:
    return f"ood-{kind.value}.csv"


@dataclass
class Datasets:
    train: Dataset
    test: Dataset
    aux_ood: Dataset | None
    test_ood: list[Dataset]


def generate_datasets(cfg: RunConfig) -> Datasets:
    spec = cfg.synthetic_spec()
    full = gen_id_dataset(spec)
    train, test = split_dataset(full, cfg["data.test_fraction"], derived_seed(cfg.seed, _SPLIT))
    train.name, test.name = "train", "test"
    aux = gen_ood_dataset(cfg["data.aux_ood"], spec, derived_seed(cfg.seed, _AUX), cfg["data.aux_ood_samples"])
    aux.name = "aux-ood"
    tests = []
    for i, kind in enumerate(cfg.test_ood_kinds()):
        ds = gen_ood_dataset(kind, spec, derived_seed(cfg.seed, _TEST_OOD, i), cfg["data.ood_samples"])
        tests.append(ds)
    return Datasets(train, test, aux, tests)


def write_datasets(ds: Datasets, out_dir: Path) -> list[tuple[Path, int]]:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [(out_dir / TRAIN_FILE, ds.train), (out_dir / TEST_FILE, ds.test)]
    if ds.aux_ood is not None:
        files.append((out_dir / AUX_FILE, ds.aux_ood))
    files += [(out_dir / ood_file(OODKind(d.name)), d) for d in ds.test_ood]
    for path, d in files:
        write_dataset(d, path)
    return [(path, len(d)) for path, d in files]


def load_datasets(cfg: RunConfig, need_aux: bool) -> Datasets:
    """Read the files written by :func:`write_datasets`; missing files raise FileNotFoundError."""
    data_dir = cfg.path("data.dir")

    def read(name: str, label: str) -> Dataset:
        path = data_dir / name
        if not path.exists():
            raise FileNotFoundError(f"{label} set missing: {path} (data.dir)")
        return read_dataset(path, name=label)

    aux = read(AUX_FILE, "aux-ood") if need_aux else None
    tests = [read(ood_file(k), k.value) for k in cfg.test_ood_kinds()]
    return Datasets(read(TRAIN_FILE, "train"), read(TEST_FILE, "test"), aux, tests)


def needs_aux(variant: str) -> bool:
    return variant in ("opsupcon-r", "opsupcon-m", "energy")


def train_variant(cfg: RunConfig, variant: str, data: Datasets,
                  pretrained: TrainedModel | None = None) -> TrainedModel:
    """Run the training recipe of ``variant``.

    ``pretrained`` lets callers reuse one PSupCon pretraining across variants;
    it must come from ``train_variant(cfg, "psupcon", data)``.
    """
    if variant == "ce":
        return train_ce_baseline(cfg.train_config("psupcon"), data.train)
    if variant == "energy":
        tcfg = cfg.train_config("psupcon")
        if cfg["energy.base"] == "ce":
            base = train_ce_baseline(tcfg, data.train)
            scale = 1.0
        else:
            base = pretrained or pretrain(tcfg, data.train)
            scale = cfg["energy.prototype_scale"]
        temperature = cfg["energy.temperature"]
        m_in, m_out = estimate_energy_margins(base, data.train, data.aux_ood, temperature, scale)
        ebc = EnergyBaselineConfig(m_in, m_out, temperature, scale)
        return finetune_energy_baseline(base, tcfg, data.train, data.aux_ood, ebc)
    tcfg = cfg.train_config(variant)
    base = pretrained or pretrain(cfg.train_config("psupcon"), data.train)
    if variant == "psupcon":
        return base
    return finetune(base, tcfg, data.train, data.aux_ood if needs_aux(variant) else None)


def build_report(variant: str, rep: EvalReport, temperature: float) -> dict:
    sets = {
        name: {
            "fpr95": r.fpr_at_95, "auroc": r.auroc, "aupr": r.aupr,
            "n_id": r.n_id, "n_ood": r.n_ood,
        }
        for name, r in rep.per_set.items()
    }
    sets["average"] = {
        "fpr95": rep.average["fpr_at_95"], "auroc": rep.average["auroc"], "aupr": rep.average["aupr"],
    }
    return {
        "variant": variant,
        "score": rep.function.value,
        "temperature": temperature,
        "accuracy": rep.accuracy,
        "n_id_test": rep.n_id,
        "sets": sets,
    }


def evaluate_model(cfg: RunConfig, model: TrainedModel, data: Datasets, variant: str,
                   score: ScoreFunction) -> dict:
    temperature = cfg["eval.temperature"]
    rep = evaluate(model, data.test, data.test_ood, score, temperature)
    return build_report(variant, rep, temperature)


# ---------------------------------------------------------------------------
# rendering

def to_json(obj, indent: int = 0) -> str:
    """JSON with insertion-ordered keys and every float at 6 decimal places."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}"{k}": {to_json(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + to_json(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError("reports cannot hold non-finite numbers")
        text = f"{float(obj):.6f}"
        return "0.000000" if text == "-0.000000" else text
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def compare_table(reports: dict[str, dict]) -> str:
    """Rows are OOD sets plus the average; each variant contributes FPR/AUROC/AUPR columns (%)."""
    variants = list(reports)
    set_names = list(next(iter(reports.values()))["sets"])
    col = 8
    head1 = f"{'':<14}" + "".join(f"| {v:^{3 * col}}" for v in variants)
    head2 = f"{'OOD set':<14}" + "".join(
        "| " + "".join(f"{m:>{col}}" for m in ("FPR95", "AUROC", "AUPR")) for _ in variants
    )
    lines = [head1, head2, "-" * len(head2)]
    for name in set_names:
        row = f"{name:<14}"
        for v in variants:
            m = reports[v]["sets"][name]
            row += "| " + "".join(f"{100 * m[k]:>{col}.2f}" for k in METRIC_KEYS)
        lines.append(row)
    acc = f"{'accuracy':<14}" + "".join(f"| {100 * reports[v]['accuracy']:>{col}.2f}{'':>{2 * col}}" for v in variants)
    lines += ["-" * len(head2), acc]
    return "\n".join(line.rstrip() for line in lines) + "\n"
