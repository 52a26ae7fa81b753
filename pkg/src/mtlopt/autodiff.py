"""Dense reverse-mode differentiation over flat parameter vectors.

Everything runs in float64. A loss program is a closure that wires parameter
leaves and batch constants into a scalar graph node; `loss_and_grad` runs the
tape backward and returns the exact gradient with respect to the flat vector.

Conventions baked in here and relied on by the rest of the package:

* MSE averages over the batch AND output dimensions.
* ReLU's subgradient at 0 is 0.
* Softmax cross-entropy is fused and stabilized by max subtraction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "NumericOverflowError",
    "ParamLayout",
    "ParamVector",
    "Batch",
    "Node",
    "LossProgram",
    "eval_loss",
    "eval_grad",
    "finite_diff_grad",
    "substream",
]


class ShapeMismatchError(ValueError):
    """A tensor did not have the shape a program or layout declared."""


class NumericOverflowError(FloatingPointError):
    """A forward intermediate became NaN or infinite."""


def substream(root_seed: int, *names: str) -> np.random.Generator:
    """Derive a named, reproducible RNG substream from one root seed.

    The same (root_seed, names) always yields the same generator, on any
    platform, so every source of randomness in a run can be pinned down.
    """
    words = [int(root_seed) & 0xFFFFFFFF]
    for name in names:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# Parameter layout and containers
# ---------------------------------------------------------------------------


class ParamLayout:
    """Ordered (name, shape) slots describing how a flat vector unpacks."""

    def __init__(self, entries):
        self.entries = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in entries)
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer ids in layout")
        self._slices = {}
        offset = 0
        for name, shape in self.entries:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    def names(self):
        return [name for name, _ in self.entries]

    def shape(self, name: str):
        for entry_name, shape in self.entries:
            if entry_name == name:
                return shape
        raise KeyError(name)

    def slot(self, name: str) -> slice:
        return self._slices[name]

    def unflatten(self, values: np.ndarray) -> dict:
        if values.shape != (self.size,):
            raise ShapeMismatchError(
                f"flat vector has length {values.shape}, layout expects ({self.size},)"
            )
        return {
            name: values[self._slices[name]].reshape(shape)
            for name, shape in self.entries
        }

    def flatten(self, arrays: dict) -> np.ndarray:
        out = np.empty(self.size, dtype=np.float64)
        for name, shape in self.entries:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(
                    f"layer '{name}' has shape {arr.shape}, layout expects {shape}"
                )
            out[self._slices[name]] = arr.ravel()
        return out

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.entries == other.entries

    def __repr__(self):
        inner = ", ".join(f"{n}:{s}" for n, s in self.entries)
        return f"ParamLayout({inner})"


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus the layout that unpacks it."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ShapeMismatchError(
                f"values length {self.values.shape} does not match layout size {self.layout.size}"
            )

    def view(self, name: str) -> np.ndarray:
        return self.values[self.layout.slot(name)].reshape(self.layout.shape(name))

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class Batch:
    """One minibatch: inputs (n, d_in), targets (n, d_out), owning task id."""

    inputs: np.ndarray
    targets: np.ndarray
    task_id: int = 0

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one row")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeMismatchError(
                f"batch inputs have {self.inputs.shape[0]} rows, targets {self.targets.shape[0]}"
            )
        if not (np.isfinite(self.inputs).all() and np.isfinite(self.targets).all()):
            raise ValueError("batch contains non-finite entries")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Node:
    """One value in the computation graph, with VJP closures to its parents."""

    __slots__ = ("value", "parents", "name")

    def __init__(self, value, parents=(), name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Node, vjp) pairs
        self.name = name
        if not np.isfinite(self.value).all():
            where = f" in '{name}'" if name else ""
            raise NumericOverflowError(f"non-finite intermediate{where}")


def constant(x, name="const") -> Node:
    return Node(x, (), name)


def leaf(x, name="leaf") -> Node:
    return Node(x, (), name)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Node, b: Node) -> Node:
    return Node(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
        "add",
    )


def sub(a: Node, b: Node) -> Node:
    return Node(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
        "sub",
    )


def mul(a: Node, b: Node) -> Node:
    return Node(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
        "mul",
    )


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, ((a, lambda g: g * c),), "scale")


def add_const(a: Node, c) -> Node:
    return Node(a.value + np.asarray(c, dtype=np.float64), ((a, lambda g: g),), "add_const")


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dims {a.value.shape} @ {b.value.shape}"
        )
    return Node(
        a.value @ b.value,
        (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ),
        "matmul",
    )


def bias_add(x: Node, b: Node) -> Node:
    """Add a (d,) bias to every row of an (n, d) activation."""
    if x.value.shape[-1] != b.value.shape[-1]:
        raise ShapeMismatchError(
            f"bias of shape {b.value.shape} against activations {x.value.shape}"
        )
    return Node(
        x.value + b.value,
        (
            (x, lambda g: g),
            (b, lambda g: g.sum(axis=tuple(range(g.ndim - 1))) if g.ndim > 1 else g),
        ),
        "bias_add",
    )


def relu(x: Node) -> Node:
    mask = x.value > 0.0  # subgradient at 0 is 0
    return Node(np.where(mask, x.value, 0.0), ((x, lambda g: g * mask),), "relu")


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return Node(t, ((x, lambda g: g * (1.0 - t * t)),), "tanh")


def sigmoid(x: Node) -> Node:
    s = _sigmoid(x.value)
    return Node(s, ((x, lambda g: g * s * (1.0 - s)),), "sigmoid")


def softplus(x: Node) -> Node:
    v = np.logaddexp(0.0, x.value)
    s = _sigmoid(x.value)
    return Node(v, ((x, lambda g: g * s),), "softplus")


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):
        e = np.exp(x.value)
    return Node(e, ((x, lambda g: g * e),), "exp")


def square(x: Node) -> Node:
    return Node(x.value * x.value, ((x, lambda g: g * 2.0 * x.value),), "square")


def sqrt(x: Node) -> Node:
    r = np.sqrt(x.value)
    return Node(r, ((x, lambda g: g * 0.5 / r),), "sqrt")


def absval(x: Node) -> Node:
    s = np.sign(x.value)  # sign(0) = 0, matching the ReLU kink convention
    return Node(np.abs(x.value), ((x, lambda g: g * s),), "abs")


def atan2(y: Node, x: Node) -> Node:
    denom = x.value * x.value + y.value * y.value
    return Node(
        np.arctan2(y.value, x.value),
        (
            (y, lambda g: g * x.value / denom),
            (x, lambda g: -g * y.value / denom),
        ),
        "atan2",
    )


def transpose(x: Node) -> Node:
    return Node(x.value.T, ((x, lambda g: g.T),), "transpose")


def component(x: Node, index: int) -> Node:
    """Extract one scalar entry from a tensor (flat C-order index)."""
    index = int(index)
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        out.ravel()[index] = g
        return out

    return Node(x.value.ravel()[index], ((x, vjp),), "component")


def total(x: Node) -> Node:
    shape = x.value.shape
    return Node(x.value.sum(), ((x, lambda g: np.broadcast_to(g, shape).copy()),), "sum")


def mean(x: Node) -> Node:
    n = x.value.size
    shape = x.value.shape
    return Node(
        x.value.mean(),
        ((x, lambda g: np.broadcast_to(g / n, shape).copy()),),
        "mean",
    )


def mse(pred: Node, target: np.ndarray) -> Node:
    """Mean squared error over every entry (batch and output dims)."""
    target = np.asarray(target, dtype=np.float64)
    if pred.value.shape != target.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.value.shape} vs target shape {target.shape}"
        )
    diff = pred.value - target
    n = diff.size
    return Node(
        float(np.mean(diff * diff)),
        ((pred, lambda g: g * 2.0 * diff / n),),
        "mse",
    )


def softmax_cross_entropy(logits: Node, onehot: np.ndarray) -> Node:
    """Fused stabilized softmax + cross-entropy, averaged over the batch."""
    onehot = np.asarray(onehot, dtype=np.float64)
    if logits.value.shape != onehot.shape:
        raise ShapeMismatchError(
            f"logits shape {logits.value.shape} vs targets shape {onehot.shape}"
        )
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logprob = z - logsumexp
    n = logits.value.shape[0]
    value = float(-(onehot * logprob).sum() / n)
    probs = np.exp(logprob)
    return Node(
        value,
        ((logits, lambda g: g * (probs - onehot) / n),),
        "softmax_xent",
    )


def affine_combine(nodes, coeffs) -> Node:
    """Scalar combination sum_i c_i * L_i of scalar nodes."""
    coeffs = [float(c) for c in coeffs]
    if len(nodes) != len(coeffs):
        raise ValueError("one coefficient per node required")
    value = sum(c * float(n.value) for n, c in zip(nodes, coeffs))

    def make_vjp(c):
        return lambda g: g * c

    return Node(value, tuple((n, make_vjp(c)) for n, c in zip(nodes, coeffs)), "affine")


def gradients(output: Node, leaves) -> list:
    """Backward pass: d(output)/d(leaf) for each requested leaf node."""
    if output.value.shape != ():
        raise ValueError("backward pass starts from a scalar node")
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(output): np.asarray(1.0)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = np.asarray(contribution, dtype=np.float64)
    return [
        grads.get(id(leaf), np.zeros_like(leaf.value))
        for leaf in leaves
    ]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Loss programs
# ---------------------------------------------------------------------------


@dataclass
class LossProgram:
    """A scalar loss over a declared parameter layout.

    `build` receives a dict of parameter leaf nodes (one per layout entry)
    plus the batch, and returns the scalar loss node.
    """

    layout: ParamLayout
    build: "callable"
    name: str = "loss"

    def _check(self, params: ParamVector):
        if params.layout != self.layout:
            raise ShapeMismatchError(
                f"program '{self.name}' declares layout {self.layout}, got {params.layout}"
            )


def _make_leaves(params: ParamVector) -> dict:
    return {
        name: leaf(params.view(name), name=name)
        for name, _ in params.layout.entries
    }


def eval_loss(program: LossProgram, params: ParamVector, batch: Batch) -> float:
    """Evaluate the scalar loss. Raises on shape mismatch or non-finite values."""
    program._check(params)
    out = program.build(_make_leaves(params), batch)
    return float(out.value)


def eval_grad(program: LossProgram, params: ParamVector, batch: Batch):
    """Evaluate loss and its exact reverse-mode gradient as a flat vector."""
    program._check(params)
    leaves = _make_leaves(params)
    out = program.build(leaves, batch)
    ordered = [leaves[name] for name, _ in params.layout.entries]
    grads = gradients(out, ordered)
    flat = params.layout.flatten(
        {name: g for (name, _), g in zip(params.layout.entries, grads)}
    )
    if not np.isfinite(flat).all():
        raise NumericOverflowError(f"non-finite gradient in program '{program.name}'")
    return float(out.value), flat


def finite_diff_grad(
    program: LossProgram, params: ParamVector, batch: Batch, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = params.values
    grad = np.empty_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + eps
        hi = eval_loss(program, ParamVector(bumped, params.layout), batch)
        bumped[i] = base[i] - eps
        lo = eval_loss(program, ParamVector(bumped, params.layout), batch)
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad
