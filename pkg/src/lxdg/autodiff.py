"""Reverse-mode differentiation over dense numpy arrays.

A ``Tape`` records every operation in creation order; because the graph is
built forward, walking the records in reverse is a valid reverse topological
order. ``backward`` propagates vector-Jacobian products through exactly the
ancestors of the loss node and accumulates the results into persistent
``grad`` buffers, so several losses can be backpropagated one after another
and their parameter gradients sum.

Only the primitives needed by the gated network and its regularizers are
provided. No general broadcasting: the single documented broadcast is a gate
vector multiplied across batch rows in ``hadamard``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, ParameterError, ShapeError


class DiffNode:
    """One value in the computation graph.

    ``grad`` is lazily allocated: reading it before any backward pass (or for
    a node the loss never reached) yields zeros of the right shape.
    """

    __slots__ = ("tape", "values", "op_record", "requires_grad", "generation", "_grad")

    def __init__(self, tape: "Tape", values: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.values = values
        self.op_record: OpRecord | None = None
        self.requires_grad = requires_grad
        self.generation = tape.generation
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.op_record is None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on non-scalar node of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else self.op_record.name
        return f"DiffNode({kind}, shape={self.shape})"


@dataclass
class OpRecord:
    """Producing operation of a non-leaf node: inputs plus its VJP."""

    name: str
    out: DiffNode
    inputs: tuple[DiffNode, ...]
    # maps the output cotangent to one cotangent per input (None = no flow)
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered op record list, reusable across training steps via ``reset``.

    Nodes are generation-stamped; feeding a node created before the last
    ``reset`` into a new op raises, which is what keeps gradients from
    leaking between steps.
    """

    def __init__(self) -> None:
        self._records: list[OpRecord] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()
        self.generation += 1

    def leaf(self, values: np.ndarray | float, requires_grad: bool = True) -> DiffNode:
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        return DiffNode(self, arr, requires_grad)

    def const(self, values: np.ndarray | float) -> DiffNode:
        return self.leaf(values, requires_grad=False)

    def _emit(
        self,
        name: str,
        values: np.ndarray,
        inputs: tuple[DiffNode, ...],
        vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    ) -> DiffNode:
        for node in inputs:
            if node.tape is not self:
                raise ContractError(f"op '{name}': input from a different tape")
            if node.generation != self.generation:
                raise ContractError(
                    f"op '{name}': input from generation {node.generation}, "
                    f"tape is at {self.generation} (stale node after reset)"
                )
        out = DiffNode(self, values, any(n.requires_grad for n in inputs))
        rec = OpRecord(name, out, inputs, vjp)
        out.op_record = rec
        self._records.append(rec)
        return out


def _tape_of(*nodes: DiffNode) -> Tape:
    return nodes[0].tape


def affine(x: DiffNode, w: DiffNode, b: DiffNode) -> DiffNode:
    """x @ w + b with b broadcast over batch rows."""
    if x.values.ndim != 2 or w.values.ndim != 2:
        raise ShapeError(f"affine expects 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine inner dims disagree: x {x.shape} vs w {w.shape}")
    if b.values.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine bias shape {b.shape} does not match w {w.shape}")
    values = x.values @ w.values + b.values

    def vjp(g: np.ndarray):
        gx = g @ w.values.T if x.requires_grad else None
        gw = x.values.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _tape_of(x)._emit("affine", values, (x, w, b), vjp)


def relu(x: DiffNode) -> DiffNode:
    """max(0, x); derivative at exactly 0 is taken as 0."""
    values = np.maximum(x.values, 0.0)

    def vjp(g: np.ndarray):
        return ((x.values > 0.0) * g,)

    return _tape_of(x)._emit("relu", values, (x,), vjp)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # sign-split form: never exponentiates a large positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: DiffNode) -> DiffNode:
    values = _stable_sigmoid(x.values)

    def vjp(g: np.ndarray):
        return (values * (1.0 - values) * g,)

    return _tape_of(x)._emit("sigmoid", values, (x,), vjp)


def activation(x: DiffNode, kind: str) -> DiffNode:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation kind {kind!r}")


def hadamard(a: DiffNode, b: DiffNode) -> DiffNode:
    """Elementwise product; b may be a single gate vector broadcast over rows of a."""
    broadcast = a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]
    if not broadcast and a.shape != b.shape:
        raise ShapeError(f"hadamard shapes {a.shape} and {b.shape} are incompatible")
    values = a.values * b.values

    def vjp(g: np.ndarray):
        ga = g * b.values if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif broadcast:
            gb = (g * a.values).sum(axis=0)
        else:
            gb = g * a.values
        return ga, gb

    return _tape_of(a, b)._emit("hadamard", values, (a, b), vjp)


def dropout(x: DiffNode, p: float, mode: str, rng: np.random.Generator | None = None) -> DiffNode:
    """Inverted dropout: survivors scaled by 1/(1-p) so eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.values.dtype) / (1.0 - p)
    values = x.values * mask

    def vjp(g: np.ndarray):
        return (g * mask,)

    return _tape_of(x)._emit("dropout", values, (x,), vjp)


def softmax_cross_entropy(logits: DiffNode, labels: np.ndarray) -> DiffNode:
    """Mean over the batch of -log softmax(logits)[label], log-sum-exp form."""
    if logits.values.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    bad = np.nonzero((labels < 0) | (labels >= c))[0]
    if bad.size:
        raise DataError(f"label out of range [0, {c}) at index {bad[0]}: {labels[bad[0]]}")
    z = logits.values
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(n), labels]
    values = np.asarray((lse - picked).mean())

    def vjp(g: np.ndarray):
        soft = np.exp(z - lse[:, None])
        soft[np.arange(n), labels] -= 1.0
        return (soft * (g / n),)

    return _tape_of(logits)._emit("softmax_xent", values, (logits,), vjp)


def mean(x: DiffNode) -> DiffNode:
    values = np.asarray(x.values.mean())

    def vjp(g: np.ndarray):
        return (np.full_like(x.values, g / x.values.size),)

    return _tape_of(x)._emit("mean", values, (x,), vjp)


def dot(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length 1-D operands, got {a.shape} and {b.shape}")
    values = np.asarray(a.values @ b.values)

    def vjp(g: np.ndarray):
        ga = g * b.values if a.requires_grad else None
        gb = g * a.values if b.requires_grad else None
        return ga, gb

    return _tape_of(a, b)._emit("dot", values, (a, b), vjp)


def row_dot(a: DiffNode, b: DiffNode) -> DiffNode:
    """Row-wise dot of two [B, N] matrices -> vector [B]."""
    if a.values.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"row_dot expects matching 2-D operands, got {a.shape} and {b.shape}")
    values = np.einsum("ij,ij->i", a.values, b.values)

    def vjp(g: np.ndarray):
        ga = g[:, None] * b.values if a.requires_grad else None
        gb = g[:, None] * a.values if b.requires_grad else None
        return ga, gb

    return _tape_of(a, b)._emit("row_dot", values, (a, b), vjp)


def mean_rows(x: DiffNode) -> DiffNode:
    """Column means of a [B, N] matrix -> vector [N]."""
    if x.values.ndim != 2:
        raise ShapeError(f"mean_rows expects a 2-D operand, got {x.shape}")
    n_rows = x.shape[0]
    values = x.values.mean(axis=0)

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g / n_rows, x.shape).copy(),)

    return _tape_of(x)._emit("mean_rows", values, (x,), vjp)


def squared_distance_to(x: DiffNode, target: np.ndarray | float) -> DiffNode:
    """Elementwise (x - target)^2 against a constant target."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != () and t.shape != x.shape:
        raise ShapeError(f"target shape {t.shape} does not match operand {x.shape}")
    diff = x.values - t
    values = diff * diff

    def vjp(g: np.ndarray):
        return (2.0 * diff * g,)

    return _tape_of(x)._emit("sq_dist", values, (x,), vjp)


def weighted_sum(x: DiffNode, weights: np.ndarray) -> DiffNode:
    """sum(weights * x) with constant weights -> scalar."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {w.shape} does not match operand {x.shape}")
    values = np.asarray(float((w * x.values).sum()))

    def vjp(g: np.ndarray):
        return (w * g,)

    return _tape_of(x)._emit("weighted_sum", values, (x,), vjp)


def add_n(nodes: Sequence[DiffNode]) -> DiffNode:
    if not nodes:
        raise ParameterError("add_n needs at least one node")
    first = nodes[0]
    for node in nodes[1:]:
        if node.shape != first.shape:
            raise ShapeError(f"add_n shapes differ: {first.shape} vs {node.shape}")
    values = first.values.copy()
    for node in nodes[1:]:
        values = values + node.values

    def vjp(g: np.ndarray):
        # copies: returned cotangents must not alias g or each other
        return tuple(g.copy() if n.requires_grad else None for n in nodes)

    return _tape_of(*nodes)._emit("add_n", values, tuple(nodes), vjp)


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    return add_n([a, b])


def scale(x: DiffNode, c: float) -> DiffNode:
    c = float(c)
    values = x.values * c

    def vjp(g: np.ndarray):
        return (g * c,)

    return _tape_of(x)._emit("scale", values, (x,), vjp)


def backward(loss: DiffNode) -> None:
    """Accumulate d loss / d node into ``grad`` for every ancestor of ``loss``.

    Cotangents are tracked per call and folded into the persistent buffers at
    the end, so backpropagating two losses that share subexpressions never
    double-counts; after a single call the loss node's own grad is exactly 1.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if loss.generation != tape.generation:
        raise ContractError("backward on a node from a previous tape generation")
    flows: dict[DiffNode, np.ndarray] = {loss: np.ones_like(loss.values)}
    for rec in reversed(tape._records):
        g = flows.get(rec.out)
        if g is None or not rec.out.requires_grad:
            continue
        contribs = rec.vjp(g)
        for node, contrib in zip(rec.inputs, contribs):
            if contrib is None or not node.requires_grad:
                continue
            seen = flows.get(node)
            if seen is None:
                flows[node] = contrib
            else:
                seen += contrib
    for node, g in flows.items():
        if node._grad is None:
            node._grad = g.copy()
        else:
            node._grad += g


def finite_difference_check(
    loss_builder: Callable[[Tape, dict[str, DiffNode]], DiffNode],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_coords_per_array: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_builder`` must be deterministic (dropout in eval mode or a frozen
    mask); this is verified with two forward passes before differencing.
    Returns max over checked coordinates of
    |analytic - central| / max(|analytic|, |central|, 1e-12).
    """

    def eval_value(arrays: dict[str, np.ndarray]) -> float:
        tape = Tape()
        leaves = {k: tape.leaf(v.copy()) for k, v in arrays.items()}
        node = loss_builder(tape, leaves)
        if node.values.size != 1:
            raise ContractError(f"loss_builder produced non-scalar of shape {node.shape}")
        return node.item()

    base = eval_value(params)
    if eval_value(params) != base:
        raise ContractError("loss_builder is not deterministic (two passes differ)")

    tape = Tape()
    leaves = {k: tape.leaf(v.copy()) for k, v in params.items()}
    backward(loss_builder(tape, leaves))

    worst = 0.0
    for name, arr in params.items():
        analytic = leaves[name].grad.reshape(-1)
        size = arr.size
        if max_coords_per_array is not None and size > max_coords_per_array:
            if rng is None:
                raise ParameterError("coordinate sampling requires an rng")
            coords = rng.choice(size, size=max_coords_per_array, replace=False)
        else:
            coords = range(size)
        for j in coords:
            perturbed = {k: v for k, v in params.items()}
            bumped = arr.copy().reshape(-1)
            bumped[j] += eps
            perturbed[name] = bumped.reshape(arr.shape)
            hi = eval_value(perturbed)
            bumped[j] -= 2.0 * eps
            perturbed[name] = bumped.reshape(arr.shape)
            lo = eval_value(perturbed)
            central = (hi - lo) / (2.0 * eps)
            err = abs(analytic[j] - central) / max(abs(analytic[j]), abs(central), 1e-12)
            worst = max(worst, err)
    return worst
