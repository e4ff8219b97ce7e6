"""Two-layer MLP encoder and projection head with exact gradients.

The encoder maps ``input_dim -> hidden_dim -> feat_dim`` and the head maps
``feat_dim -> feat_dim -> head_dim``; both use ReLU on their hidden layer and
normalize their output to unit length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from oodcl.autodiff import Tensor, normalize_rows, relu, value
from oodcl.errors import DimensionMismatch, NonFiniteLoss, ParseError

PARAM_ORDER = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "head_w1", "head_b1", "head_w2", "head_b2",
)
CHECKPOINT_MAGIC = "# oodcl checkpoint v1"


@dataclass(frozen=True)
class NetworkDims:
    input_dim: int
    hidden_dim: int
    feat_dim: int
    head_dim: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "feat_dim", "head_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, f, z = self.input_dim, self.hidden_dim, self.feat_dim, self.head_dim
        return {
            "enc_w1": (d, h), "enc_b1": (h,),
            "enc_w2": (h, f), "enc_b2": (f,),
            "head_w1": (f, f), "head_b1": (f,),
            "head_w2": (f, z), "head_b2": (z,),
        }


@dataclass
class NetworkParams:
    dims: NetworkDims
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.dims.shapes()
        if set(self.arrays) != set(shapes):
            raise ValueError(f"parameter names must be {sorted(shapes)}")
        for name, shape in shapes.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            self.arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def ordered(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self.arrays[name]) for name in PARAM_ORDER]


def init_params(dims: NetworkDims, seed: int) -> NetworkParams:
    """Gaussian weights with std ``1/sqrt(fan_in)`` and zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name in PARAM_ORDER:
        shape = dims.shapes()[name]
        if "_w" in name:
            arrays[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            arrays[name] = np.zeros(shape)
    return NetworkParams(dims, arrays)


def encode(params: Mapping, x):
    """Batched encoder: rows of ``x`` to unit-norm features (array or Tensor)."""
    hidden = relu(x @ params["enc_w1"] + params["enc_b1"])
    return normalize_rows(hidden @ params["enc_w2"] + params["enc_b2"])


def project(params: Mapping, f):
    """Batched projection head: unit-norm features to unit-norm embeddings."""
    hidden = relu(f @ params["head_w1"] + params["head_b1"])
    return normalize_rows(hidden @ params["head_w2"] + params["head_b2"])


def _check_batch(x, dim: int, what: str) -> None:
    width = value(x).shape[-1] if value(x).ndim else 0
    if width != dim:
        raise DimensionMismatch(f"{what} has dimension {width}, expected {dim}")


def forward_encoder(params: NetworkParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("forward_encoder takes a single input vector")
    _check_batch(x, params.dims.input_dim, "input")
    return encode(params.arrays, x[None, :])[0]


def forward_head(params: NetworkParams, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionMismatch("forward_head takes a single feature vector")
    _check_batch(f, params.dims.feat_dim, "feature")
    return project(params.arrays, f[None, :])[0]


def gradient(
    params: NetworkParams | Mapping[str, np.ndarray],
    loss_fn: Callable[[dict[str, Tensor]], object],
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on leaf tensors built from ``params`` and backpropagate.

    ``loss_fn`` receives a dict of name -> Tensor and must return a scalar
    (Tensor or number). Returns the loss value and one gradient array per
    parameter, zero for parameters the loss does not touch.
    """
    source = params.arrays if isinstance(params, NetworkParams) else params
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in source.items()}
    out = loss_fn(leaves)
    loss = float(value(out))
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss evaluated to {loss}")
    if isinstance(out, Tensor) and out.requires_grad:
        out.backward()
    grads = {}
    for k, leaf in leaves.items():
        grads[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoint text format

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_checkpoint(
    path: str | Path,
    params: NetworkParams,
    extra: Mapping[str, np.ndarray] | None = None,
    meta: Mapping[str, str] | None = None,
) -> None:
    """Write dims, metadata and tensors in a fixed order.

    Layout, one item per line::

        # oodcl checkpoint v1
        dims <input> <hidden> <feat> <head>
        meta <key> <value>                 (zero or more)
        tensor <name> <ndim> <shape...>
        <row of values, space separated, 17 significant digits>  (one per row)

    Network tensors come first in ``PARAM_ORDER``, then ``extra`` tensors in
    insertion order. 1-D tensors occupy a single row.
    """
    d = params.dims
    lines = [CHECKPOINT_MAGIC, f"dims {d.input_dim} {d.hidden_dim} {d.feat_dim} {d.head_dim}"]
    for key, val in (meta or {}).items():
        if any(c.isspace() for c in key) or "\n" in str(val):
            raise ValueError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key} {val}")
    tensors = list(params.ordered()) + list((extra or {}).items())
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(str(s) for s in arr.shape))
        rows = arr.reshape(1, -1) if arr.ndim <= 1 else arr.reshape(arr.shape[0], -1)
        for row in rows:
            lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_checkpoint(path: str | Path) -> tuple[NetworkParams, dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`write_checkpoint`: ``(params, extra tensors, meta)``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not an oodcl v1 checkpoint")
    try:
        tag, *nums = lines[1].split()
        if tag != "dims":
            raise ParseError(f"{path}:2: expected dims line")
        dims = NetworkDims(*(int(n) for n in nums))
        meta: dict[str, str] = {}
        tensors: dict[str, np.ndarray] = {}
        i = 2
        while i < len(lines):
            parts = lines[i].split(" ", 2)
            if parts[0] == "meta":
                meta[parts[1]] = parts[2] if len(parts) > 2 else ""
                i += 1
                continue
            if parts[0] != "tensor":
                raise ParseError(f"{path}:{i + 1}: unexpected line {lines[i][:40]!r}")
            head = lines[i].split()
            name, ndim = head[1], int(head[2])
            shape = tuple(int(s) for s in head[3:3 + ndim])
            n_rows = 1 if ndim <= 1 else shape[0]
            rows = lines[i + 1:i + 1 + n_rows]
            if len(rows) != n_rows:
                raise ParseError(f"{path}: tensor {name} is truncated")
            values = [float(v) for row in rows for v in row.split()]
            tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
            i += 1 + n_rows
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: malformed checkpoint ({exc})") from exc
    net = {k: tensors.pop(k) for k in PARAM_ORDER if k in tensors}
    if len(net) != len(PARAM_ORDER):
        raise ParseError(f"{path}: missing network tensors")
    return NetworkParams(dims, net), tensors, meta
