"""Reverse-mode differentiation over a fixed primitive vocabulary.

A ``Tape`` records a topologically ordered DAG of primitive applications
(construction order is evaluation order, so every input id precedes its
consumers). ``backward`` walks the tape once in reverse, accumulating adjoints
by summation over all consumer paths, and returns the gradient of a scalar
output with respect to every leaf.

The primitive set is deliberately closed: the encoder, the classifier head,
and all three loss heads compile to the handful of operations below, and a
closed vocabulary keeps each backward rule small enough to verify one by one
against central finite differences (``finite_diff_grad`` / ``grad_check``).

Conventions baked in here:
  - logarithms are always log(x + 1e-12), guarding softmax underflow in loss
    code paths;
  - relu's derivative at exactly 0 is defined as 0 (any fixed convention
    works; the checker excludes kink coordinates from comparison);
  - add/sub/mul follow numpy broadcasting, with adjoints summed back down to
    each operand's shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import (
    DomainError,
    ShapeError,
    Tensor,
    as_tensor,
    l2_normalize_rows,
    row_softmax,
)

__all__ = [
    "LOG_EPS",
    "Node",
    "Tape",
    "backward",
    "finite_diff_grad",
    "GradCheckReport",
    "grad_check",
]

LOG_EPS = 1e-12

# A scalar function expressed as a graph builder: given a tape and the node id
# of its input tensor, it must return the node id of a scalar output.
TapeFunction = Callable[["Tape", int], int]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: Tensor
    payload: object = None


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum an adjoint back down to `shape` (the reverse of numpy broadcasting)."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Append-only computation record; finalize before calling backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._finalized = False

    # -- bookkeeping ---------------------------------------------------

    def _push(self, op: str, inputs: tuple[int, ...], value, payload=None) -> int:
        if self._finalized:
            raise RuntimeError("tape is finalized; no further operations allowed")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"unknown node id {i}")
        self.nodes.append(Node(op, inputs, as_tensor(value), payload))
        return len(self.nodes) - 1

    def value(self, nid: int) -> Tensor:
        return self.nodes[nid].value

    def finalize(self) -> "Tape":
        self._finalized = True
        return self

    @property
    def finalized(self) -> bool:
        return self._finalized

    # -- graph inputs --------------------------------------------------

    def leaf(self, value) -> int:
        """A differentiable input (parameter or data we want gradients for)."""
        return self._push("leaf", (), value)

    def constant(self, value) -> int:
        """A non-differentiable input; receives no adjoint."""
        return self._push("const", (), value)

    # -- primitives ----------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b), self.value(a) + self.value(b))

    def sub(self, a: int, b: int) -> int:
        return self._push("sub", (a, b), self.value(a) - self.value(b))

    def mul(self, a: int, b: int) -> int:
        return self._push("mul", (a, b), self.value(a) * self.value(b))

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.ndim != 2 or vb.ndim != 2:
            raise ShapeError(
                f"matmul operands must be 2-D, got {va.shape} x {vb.shape}"
            )
        if va.shape[1] != vb.shape[0]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {va.shape} x {vb.shape}"
            )
        return self._push("matmul", (a, b), va @ vb)

    def transpose(self, a: int) -> int:
        return self._push("transpose", (a,), self.value(a).T.copy())

    def exp(self, a: int) -> int:
        return self._push("exp", (a,), np.exp(self.value(a)))

    def log_eps(self, a: int, eps: float = LOG_EPS) -> int:
        return self._push("log_eps", (a,), np.log(self.value(a) + eps), eps)

    def relu(self, a: int) -> int:
        return self._push("relu", (a,), np.maximum(self.value(a), 0.0))

    def row_sum(self, a: int) -> int:
        va = self.value(a)
        if va.ndim != 2:
            raise ShapeError(f"row_sum input must be 2-D, got shape {va.shape}")
        return self._push("row_sum", (a,), va.sum(axis=1, keepdims=True))

    def sum_all(self, a: int) -> int:
        return self._push("sum_all", (a,), np.asarray(self.value(a).sum()))

    def scale(self, a: int, factor: float) -> int:
        return self._push("scale", (a,), self.value(a) * float(factor), float(factor))

    def row_softmax(self, a: int, temperature: float = 1.0) -> int:
        value = row_softmax(self.value(a), temperature)
        return self._push("row_softmax", (a,), value, float(temperature))

    def l2norm_rows(self, a: int, eps: float = 1e-12) -> int:
        value = l2_normalize_rows(self.value(a), eps)
        return self._push("l2norm_rows", (a,), value, float(eps))

    # -- diagnostics ----------------------------------------------------

    def kink_signature(self) -> tuple[bytes, ...]:
        """Branch pattern of every piecewise-defined primitive.

        Covers relu activation signs and the eps guard branch of row
        normalization; a coordinate whose perturbation changes (or whose base
        point sits on) one of these branches cannot be finite-differenced.
        """
        parts = []
        for node in self.nodes:
            if node.op == "relu":
                parts.append((self.value(node.inputs[0]) > 0).tobytes())
            elif node.op == "l2norm_rows":
                norms = np.linalg.norm(self.value(node.inputs[0]), axis=1)
                parts.append((norms >= node.payload).tobytes())
        return tuple(parts)


def backward(tape: Tape, output: int) -> dict[int, Tensor]:
    """Gradient of a scalar output node with respect to every leaf node.

    Adjoints accumulate by summation over all consumer paths; the walk is a
    single reverse pass in construction order, so repeated calls on the same
    tape produce bit-identical gradients. Leaves not reachable from the output
    receive an all-zero gradient of their own shape.
    """
    if not tape.finalized:
        raise RuntimeError("tape must be finalized before backward")
    nodes = tape.nodes
    out_value = nodes[output].value
    if out_value.size != 1:
        raise ValueError(
            f"backward output must be scalar, node {output} has shape {out_value.shape}"
        )

    adjoints: list[Tensor | None] = [None] * len(nodes)
    adjoints[output] = np.ones_like(out_value)

    def accumulate(nid: int, contribution: Tensor) -> None:
        if adjoints[nid] is None:
            adjoints[nid] = np.zeros_like(nodes[nid].value)
        adjoints[nid] += contribution

    for nid in range(output, -1, -1):
        node = nodes[nid]
        g = adjoints[nid]
        if g is None or node.op in ("leaf", "const"):
            continue
        op = node.op
        if op == "add":
            a, b = node.inputs
            accumulate(a, _unbroadcast(g, nodes[a].value.shape))
            accumulate(b, _unbroadcast(g, nodes[b].value.shape))
        elif op == "sub":
            a, b = node.inputs
            accumulate(a, _unbroadcast(g, nodes[a].value.shape))
            accumulate(b, -_unbroadcast(g, nodes[b].value.shape))
        elif op == "mul":
            a, b = node.inputs
            accumulate(a, _unbroadcast(g * nodes[b].value, nodes[a].value.shape))
            accumulate(b, _unbroadcast(g * nodes[a].value, nodes[b].value.shape))
        elif op == "matmul":
            a, b = node.inputs
            accumulate(a, g @ nodes[b].value.T)
            accumulate(b, nodes[a].value.T @ g)
        elif op == "transpose":
            accumulate(node.inputs[0], g.T.copy())
        elif op == "exp":
            accumulate(node.inputs[0], g * node.value)
        elif op == "log_eps":
            a = node.inputs[0]
            accumulate(a, g / (nodes[a].value + node.payload))
        elif op == "relu":
            a = node.inputs[0]
            accumulate(a, g * (nodes[a].value > 0))
        elif op == "row_sum":
            a = node.inputs[0]
            accumulate(a, np.broadcast_to(g, nodes[a].value.shape).copy())
        elif op == "sum_all":
            a = node.inputs[0]
            accumulate(a, np.broadcast_to(g, nodes[a].value.shape).copy())
        elif op == "scale":
            accumulate(node.inputs[0], g * node.payload)
        elif op == "row_softmax":
            a = node.inputs[0]
            y = node.value
            inner = (g * y).sum(axis=1, keepdims=True)
            accumulate(a, y * (g - inner) / node.payload)
        elif op == "l2norm_rows":
            a = node.inputs[0]
            eps = node.payload
            va = nodes[a].value
            norms = np.linalg.norm(va, axis=1, keepdims=True)
            y = node.value
            dot = (y * g).sum(axis=1, keepdims=True)
            accumulate(a, np.where(norms >= eps, (g - y * dot) / np.maximum(norms, eps), g / eps))
        else:  # pragma: no cover - closed vocabulary
            raise NotImplementedError(f"no backward rule for op '{op}'")

    grads: dict[int, Tensor] = {}
    for nid, node in enumerate(nodes):
        if node.op == "leaf":
            grads[nid] = (
                adjoints[nid] if adjoints[nid] is not None else np.zeros_like(node.value)
            )
    return grads


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate."""
    if h <= 0:
        raise DomainError(f"finite difference step must be > 0, got {h}")
    x = as_tensor(x)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return grad


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_index: tuple | None
    checked: int
    excluded: int
    nan_at: str | None = None

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        extra = f" nan_at={self.nan_at}" if self.nan_at else ""
        return (
            f"{status} max_rel_err={self.max_rel_err:.3e} "
            f"checked={self.checked} excluded={self.excluded}{extra}"
        )


def grad_check(
    f: TapeFunction,
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare the tape gradient of f at x against central finite differences.

    Per-coordinate relative error is |a - n| / max(|a|, |n|, 1e-8); the check
    passes iff the maximum over compared coordinates is <= tol. Coordinates
    whose +/-h perturbations straddle a kink (a relu sign flip or an eps
    normalization branch), or whose base point already sits on one, are
    excluded: finite differences are meaningless across a kink. Any NaN in a
    function value or gradient fails the check outright, reporting where.
    """
    x = as_tensor(x)

    def build(xv: Tensor) -> tuple[Tape, int, int]:
        tape = Tape()
        xid = tape.leaf(xv)
        out = f(tape, xid)
        tape.finalize()
        return tape, xid, out

    tape0, xid, out = build(x)
    base_signature = tape0.kink_signature()
    if np.isnan(tape0.value(out)).any():
        return GradCheckReport(False, np.inf, None, 0, 0, nan_at="f(x)")
    analytic = backward(tape0, out)[xid]
    if np.isnan(analytic).any():
        bad = tuple(int(v) for v in np.argwhere(np.isnan(analytic))[0])
        return GradCheckReport(False, np.inf, bad, 0, 0, nan_at=f"analytic gradient {bad}")

    max_rel = 0.0
    worst: tuple | None = None
    checked = 0
    excluded = 0
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        tape_p, _, out_p = build(xp)
        tape_m, _, out_m = build(xm)
        sig_p = tape_p.kink_signature()
        if sig_p != tape_m.kink_signature() or sig_p != base_signature:
            excluded += 1
            it.iternext()
            continue
        fp = float(tape_p.value(out_p))
        fm = float(tape_m.value(out_m))
        if np.isnan(fp) or np.isnan(fm):
            return GradCheckReport(
                False, np.inf, idx, checked, excluded, nan_at=f"f(x +/- h) at {idx}"
            )
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > max_rel:
            max_rel = rel
            worst = idx
        checked += 1
        it.iternext()

    return GradCheckReport(max_rel <= tol, max_rel, worst, checked, excluded)
