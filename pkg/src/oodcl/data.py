"""Synthetic Gaussian-mixture datasets, feature-space augmentation and CSV I/O."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from oodcl.errors import ParseError, PlacementFailure

MAX_PLACEMENT_ATTEMPTS = 1000

# stream tags for SeedSequence, so each consumer of a seed draws independently
_MEANS, _ID_SAMPLES, _OOD_MEANS = 0, 1, 2


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int
    input_dim: int
    samples_per_class: int
    cluster_spread: float
    cluster_separation: float
    seed: int = 0
    n_ood_clusters: int | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not self.cluster_spread > 0 or not self.cluster_separation > 0:
            raise ValueError("cluster_spread and cluster_separation must be positive")

    @property
    def mean_radius(self) -> float:
        return float(self.cluster_separation)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.inputs),):
                raise ValueError("need exactly one label per input")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.labeled != other.labeled:
            return False
        same_labels = not self.labeled or np.array_equal(self.labels, other.labels)
        return np.array_equal(self.inputs, other.inputs) and same_labels


@dataclass(frozen=True)
class AugmentSpec:
    noise_std: float = 0.1
    scale_jitter: float = 0.1
    views_per_sample: int = 2

    def __post_init__(self):
        if self.noise_std < 0 or self.scale_jitter < 0:
            raise ValueError("noise_std and scale_jitter must be non-negative")
        if self.views_per_sample < 2:
            # contrastive batches need at least one positive per anchor
            raise ValueError("views_per_sample must be >= 2")


class OODKind(str, enum.Enum):
    SHELL = "shell"
    UNIFORM = "uniform"
    HELD_OUT_CLUSTERS = "heldout"
    INTERPOLATED = "interpolated"


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _sphere_points(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    return radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def _min_distance(a: np.ndarray, b: np.ndarray | None = None) -> float:
    if b is None:
        d = np.linalg.norm(a[:, None, :] - a[None, :, :], axis=-1)
        d[np.diag_indices(len(a))] = np.inf
    else:
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(d.min()) if d.size else np.inf


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """Cluster centres on a sphere of radius ``separation``, pairwise >= ``separation`` apart."""
    rng = _rng(spec.seed, _MEANS)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        means = _sphere_points(rng, spec.n_classes, spec.input_dim, spec.mean_radius)
        if _min_distance(means) >= spec.cluster_separation:
            return means
    raise PlacementFailure(
        f"could not place {spec.n_classes} means {spec.cluster_separation} apart "
        f"in {spec.input_dim} dimensions"
    )


def ood_cluster_means(spec: SyntheticSpec) -> np.ndarray:
    """Fresh cluster centres at least ``separation`` away from every ID mean and each other."""
    id_means = class_means(spec)
    k = spec.n_ood_clusters or spec.n_classes
    rng = _rng(spec.seed, _OOD_MEANS)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        means = _sphere_points(rng, k, spec.input_dim, spec.mean_radius)
        far_from_id = _min_distance(means, id_means) >= spec.cluster_separation
        if far_from_id and _min_distance(means) >= spec.cluster_separation:
            return means
    raise PlacementFailure(f"could not place {k} held-out cluster means")


def gen_id_dataset(spec: SyntheticSpec, name: str = "id") -> Dataset:
    means = class_means(spec)
    rng = _rng(spec.seed, _ID_SAMPLES)
    n = spec.samples_per_class
    noise = rng.standard_normal((spec.n_classes, n, spec.input_dim)) * spec.cluster_spread
    inputs = (means[:, None, :] + noise).reshape(-1, spec.input_dim)
    labels = np.repeat(np.arange(spec.n_classes), n)
    return Dataset(inputs, labels, name)


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; each class keeps its original sample order."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(ds), dtype=bool)
    for c in np.unique(ds.labels):
        idx = np.nonzero(ds.labels == c)[0]
        n_test = max(1, int(round(test_fraction * idx.size)))
        test_mask[rng.permutation(idx)[:n_test]] = True
    train = Dataset(ds.inputs[~test_mask], ds.labels[~test_mask], f"{ds.name}-train")
    test = Dataset(ds.inputs[test_mask], ds.labels[test_mask], f"{ds.name}-test")
    return train, test


def shell_radius(spec: SyntheticSpec) -> float:
    return spec.mean_radius + 4.0 * spec.cluster_spread * np.sqrt(spec.input_dim)


def gen_ood_dataset(kind: OODKind | str, spec: SyntheticSpec, seed: int, n: int | None = None) -> Dataset:
    """Unlabeled OOD samples of the given kind around the ID mixture of ``spec``.

    Cluster geometry comes from ``spec.seed``; ``seed`` only drives the draws,
    so two sets of the same kind share their structure but not their samples.
    """
    kind = OODKind(kind)
    n = spec.n_classes * spec.samples_per_class if n is None else n
    d = spec.input_dim
    means = class_means(spec)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 100 + list(OODKind).index(kind)]))
    if kind is OODKind.SHELL:
        inputs = _sphere_points(rng, n, d, shell_radius(spec))
    elif kind is OODKind.UNIFORM:
        pad = 3.0 * spec.cluster_spread
        lo, hi = means.min(axis=0) - pad, means.max(axis=0) + pad
        inputs = lo + (hi - lo) * rng.random((n, d))
    elif kind is OODKind.HELD_OUT_CLUSTERS:
        ood_means = ood_cluster_means(spec)
        which = rng.integers(0, len(ood_means), size=n)
        inputs = ood_means[which] + spec.cluster_spread * rng.standard_normal((n, d))
    else:
        k = spec.n_classes
        a = rng.integers(0, k, size=n)
        b = (a + rng.integers(1, k, size=n)) % k  # always a different class
        xa = means[a] + spec.cluster_spread * rng.standard_normal((n, d))
        xb = means[b] + spec.cluster_spread * rng.standard_normal((n, d))
        inputs = 0.5 * (xa + xb) + spec.cluster_spread * rng.standard_normal((n, d))
    return Dataset(inputs, None, kind.value)


def augment_views(x, aug: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """``views_per_sample`` copies of ``(1 + u) x + eps``; leading axis indexes views.

    ``x`` may be a single vector or a batch of rows; ``u`` is drawn once per
    sample and view.
    """
    x = np.asarray(x, dtype=np.float64)
    batch_shape = (aug.views_per_sample,) + x.shape[:-1]
    u = rng.uniform(-aug.scale_jitter, aug.scale_jitter, size=batch_shape + (1,))
    eps = rng.standard_normal((aug.views_per_sample,) + x.shape) * aug.noise_std
    return (1.0 + u) * x + eps


# ---------------------------------------------------------------------------
# text format

_HEADER = re.compile(r"^# dim=(\d+) labeled=([01]) n=(\d+)$")


def write_dataset(ds: Dataset, path: str | Path) -> None:
    """One sample per line, label first when labeled, floats at 17 significant digits."""
    lines = [f"# dim={ds.dim} labeled={int(ds.labeled)} n={len(ds)}"]
    for i, row in enumerate(ds.inputs):
        values = ",".join(format(float(v), ".17g") for v in row)
        lines.append(f"{int(ds.labels[i])},{values}" if ds.labeled else values)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    m = _HEADER.match(lines[0])
    if m is None:
        raise ParseError(f"{path}:1: bad header {lines[0][:60]!r}")
    dim, labeled, n = int(m[1]), m[2] == "1", int(m[3])
    body = lines[1:]
    if len(body) != n:
        raise ParseError(f"{path}: header declares {n} rows, found {len(body)}")
    width = dim + int(labeled)
    inputs = np.empty((n, dim))
    labels = np.empty(n, dtype=np.int64) if labeled else None
    for i, line in enumerate(body):
        cols = line.split(",")
        if len(cols) != width:
            raise ParseError(f"{path}:{i + 2}: expected {width} columns, got {len(cols)}")
        try:
            if labeled:
                labels[i] = int(cols[0])
                cols = cols[1:]
            inputs[i] = [float(c) for c in cols]
        except ValueError as exc:
            raise ParseError(f"{path}:{i + 2}: {exc}") from exc
    return Dataset(inputs, labels, name if name is not None else path.stem)
