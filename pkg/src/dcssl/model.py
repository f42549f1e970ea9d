"""Encoder and classifier head: a small fully-connected representation
network producing feature rows, plus a softmax head producing per-sample
class distributions.

The encoder is a stack of affine layers with relu between them and a bare
affine output, so features span all of R^p (normalization, where wanted,
happens inside the loss heads). Forward passes exist in two forms: direct
numpy (``encode``/``classify``, used for evaluation and export) and graph
builders over a tape (``encode_graph``/``classify_graph``, used for training);
the test suite pins the two forms to each other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .numerics import ConfigError, Rng, ShapeError, Tensor, as_tensor, row_softmax

__all__ = [
    "ModelDims",
    "ModelParams",
    "init_params",
    "encode",
    "classify",
    "encode_graph",
    "classify_graph",
    "param_nodes",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"DCSSLCK1"


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    hidden: tuple[int, ...]
    feature_dim: int
    class_count: int

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden, self.feature_dim, self.class_count)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"model dimensions must all be >= 1, got {self}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.feature_dim)


@dataclass
class ModelParams:
    """Encoder affine stack plus classifier head, all float64."""

    dims: ModelDims
    layers: list[tuple[Tensor, Tensor]]  # (weight d_in x d_out, bias d_out)
    head: tuple[Tensor, Tensor]  # (weight p x c, bias c)

    def named(self) -> list[tuple[str, Tensor]]:
        """Parameters in declaration order; the order is a file-format contract."""
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"enc{i}.w", w))
            out.append((f"enc{i}.b", b))
        out.append(("head.w", self.head[0]))
        out.append(("head.b", self.head[1]))
        return out

    def get(self, name: str) -> Tensor:
        for key, arr in self.named():
            if key == name:
                return arr
        raise KeyError(name)

    def replace(self, name: str, array: Tensor) -> "ModelParams":
        """Functional single-parameter update (used by the optimizer and checker)."""
        array = as_tensor(array)
        if array.shape != self.get(name).shape:
            raise ShapeError(
                f"replacement for {name} has shape {array.shape}, "
                f"expected {self.get(name).shape}"
            )
        layers = [(w, b) for w, b in self.layers]
        head = self.head
        if name.startswith("enc"):
            idx, part = name[3:].split(".")
            i = int(idx)
            w, b = layers[i]
            layers[i] = (array, b) if part == "w" else (w, array)
        elif name == "head.w":
            head = (array, head[1])
        elif name == "head.b":
            head = (head[0], array)
        else:
            raise KeyError(name)
        return ModelParams(self.dims, layers, head)


def init_params(rng: Rng, dims: ModelDims) -> ModelParams:
    """He-style init: weights ~ N(0, 2/d_in), biases zero; deterministic under seed."""
    widths = dims.encoder_widths
    layers = []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        w = rng.normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
        layers.append((w, np.zeros(d_out)))
    head_w = rng.normal((dims.feature_dim, dims.class_count)) * np.sqrt(
        2.0 / dims.feature_dim
    )
    return ModelParams(dims, layers, (head_w, np.zeros(dims.class_count)))


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} expects n x {width} input, got shape {x.shape}")


def encode(params: ModelParams, x) -> Tensor:
    """Feature rows for a batch of flat inputs (affine+relu stack, bare last layer)."""
    x = as_tensor(x)
    _check_width(x, params.dims.input_dim, "encode")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def classify(params: ModelParams, z, temperature: float = 1.0) -> Tensor:
    """Class-distribution rows from feature rows (affine head + softmax)."""
    z = as_tensor(z)
    _check_width(z, params.dims.feature_dim, "classify")
    w, b = params.head
    return row_softmax(z @ w + b, temperature)


def param_nodes(tape: Tape, params: ModelParams) -> dict[str, int]:
    """Register every parameter as a differentiable leaf on the tape."""
    return {name: tape.leaf(arr) for name, arr in params.named()}


def encode_graph(tape: Tape, nodes: dict[str, int], x: int) -> int:
    n_layers = sum(1 for name in nodes if name.endswith(".w") and name.startswith("enc"))
    h = x
    for i in range(n_layers):
        h = tape.add(tape.matmul(h, nodes[f"enc{i}.w"]), nodes[f"enc{i}.b"])
        if i < n_layers - 1:
            h = tape.relu(h)
    return h


def classify_graph(
    tape: Tape, nodes: dict[str, int], z: int, temperature: float = 1.0
) -> int:
    logits = tape.add(tape.matmul(z, nodes["head.w"]), nodes["head.b"])
    return tape.row_softmax(logits, temperature)


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with its header."""


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned binary layout: magic, dims header, then the flat parameter
    arrays as 64-bit little-endian floats in declaration order."""
    dims = params.dims
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(
            struct.pack(
                "<IIII",
                dims.input_dim,
                dims.feature_dim,
                dims.class_count,
                len(dims.hidden),
            )
        )
        if dims.hidden:
            f.write(struct.pack(f"<{len(dims.hidden)}I", *dims.hidden))
        for _, arr in params.named():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise CheckpointError(
                f"{path}: truncated at byte {len(raw)}, expected {offset + count}"
            )
        chunk = raw[offset : offset + count]
        offset += count
        return chunk

    input_dim, feature_dim, class_count, n_hidden = struct.unpack("<IIII", take(16))
    hidden = struct.unpack(f"<{n_hidden}I", take(4 * n_hidden)) if n_hidden else ()
    dims = ModelDims(input_dim, tuple(hidden), feature_dim, class_count)

    def read_array(shape: tuple[int, ...]) -> Tensor:
        count = int(np.prod(shape))
        return np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()

    widths = dims.encoder_widths
    layers = []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        layers.append((read_array((d_in, d_out)), read_array((d_out,))))
    head = (
        read_array((dims.feature_dim, dims.class_count)),
        read_array((dims.class_count,)),
    )
    if offset != len(raw):
        raise CheckpointError(
            f"{path}: {len(raw) - offset} trailing bytes after parameter arrays"
        )
    return ModelParams(dims, layers, head)
