"""Regularization terms, Fisher estimation, and per-task anchors.

Three gate regularizers plus a quadratic parameter penalty:

* sparsity: each example's gate self-overlap ``u.u/N`` is driven to a target
  fraction, batch-averaged per layer;
* change: the batch-mean gate on current data is driven to a target overlap
  (default 0, orthogonality) with the batch-mean gate recalled on each prior
  task's stored inputs;
* keep: gates recalled on a prior task's stored inputs are driven to overlap
  the anchored gate recordings, example-wise, with a target deliberately set
  above the sparsity fraction;
* quadratic penalty: 0.5 * F * (theta_snapshot - theta)^2 per prior task,
  with F the empirical Fisher diagonal.

Anchored gate recordings are constants: no gradient ever flows into them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, IO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode, Tape, backward
from .errors import ContractError, ParameterError
from .network import GatedNetParams, forward, gate_outputs_only

ANCHOR_MAGIC = b"LXAN"
ANCHOR_VERSION = 1


@dataclass(frozen=True)
class LossCoefficients:
    beta_s: float = 0.2
    beta_c: float = 0.0
    beta_k: float = 0.3
    lambda_sparse: float = 1000.0
    lambda_change: float = 1000.0
    lambda_keep: float = 1000.0
    lambda_ewc: float = 1000.0

    def __post_init__(self):
        if not (0.0 <= self.beta_s <= 1.0 and 0.0 <= self.beta_c <= 1.0 and 0.0 <= self.beta_k <= 1.0):
            raise ParameterError("beta values must lie in [0, 1]")
        if self.beta_k <= self.beta_s:
            raise ParameterError(
                f"beta_k ({self.beta_k}) must exceed beta_s ({self.beta_s})"
            )
        for name in ("lambda_sparse", "lambda_change", "lambda_keep", "lambda_ewc"):
            if getattr(self, name) < 0.0:
                raise ParameterError(f"{name} must be >= 0")

    @classmethod
    def with_gate_lambda(cls, lambda_gate: float, lambda_ewc: float = 1000.0, **kw) -> "LossCoefficients":
        """The three gate coefficients share one value in the default protocol."""
        return cls(
            lambda_sparse=lambda_gate, lambda_change=lambda_gate,
            lambda_keep=lambda_gate, lambda_ewc=lambda_ewc, **kw,
        )


@dataclass
class TaskAnchor:
    """Snapshot taken when training on a task finishes.

    ``anchor_inputs`` and ``anchor_gates`` are present only for runs that use
    gate regularizers; ``fisher_diag`` only for runs with the quadratic
    penalty. ``theta_snapshot`` is always recorded. No labels are stored.
    """

    task_id: int
    theta_snapshot: np.ndarray = field(repr=False)
    anchor_inputs: np.ndarray | None = field(default=None, repr=False)
    anchor_gates: list[np.ndarray] | None = field(default=None, repr=False)
    fisher_diag: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.fisher_diag is not None:
            if self.fisher_diag.shape != self.theta_snapshot.shape:
                raise ContractError("fisher_diag length does not match theta_snapshot")
            if self.fisher_diag.size and self.fisher_diag.min() < 0.0:
                raise ContractError("fisher_diag entries must be non-negative")
        if (self.anchor_gates is None) != (self.anchor_inputs is None):
            raise ContractError("anchor gates and inputs must be recorded together")
        if self.anchor_gates is not None:
            for g in self.anchor_gates:
                if g.shape[0] != self.anchor_inputs.shape[0]:
                    raise ContractError("anchor gate rows do not match anchor inputs")


def sparsity_loss(gates: Sequence[DiffNode], beta_s: float) -> DiffNode:
    """Sum over layers of mean_b (u_b.u_b / N - beta_s)^2."""
    terms = []
    for u in gates:
        n_hidd = u.shape[1]
        per_example = ad.scale(ad.row_dot(u, u), 1.0 / n_hidd)
        terms.append(ad.mean(ad.squared_distance_to(per_example, beta_s)))
    return ad.add_n(terms)


def change_loss(
    gates_on_new: Sequence[DiffNode],
    gates_on_anchor: Sequence[DiffNode],
    beta_c: float,
) -> DiffNode:
    """Sum over layers of (mean-gate(anchor data) . mean-gate(current data) / N - beta_c)^2.

    Batch-mean vectors are used for both operands: the two batches have no
    row pairing. Gradients flow into both (both are the current network).
    """
    terms = []
    for u_new, u_anchor in zip(gates_on_new, gates_on_anchor):
        n_hidd = u_new.shape[1]
        overlap = ad.scale(ad.dot(ad.mean_rows(u_anchor), ad.mean_rows(u_new)), 1.0 / n_hidd)
        terms.append(ad.squared_distance_to(overlap, beta_c))
    return ad.add_n(terms)


def keep_loss(
    anchor: TaskAnchor,
    gates_now_on_anchor: Sequence[DiffNode],
    beta_k: float,
) -> DiffNode:
    """Sum over layers of mean_a (recorded_a . current_a / N - beta_k)^2.

    Rows align because the current gates are evaluated on exactly the stored
    anchor inputs. Recorded gates enter as constants.
    """
    if anchor.anchor_gates is None:
        raise ContractError(f"anchor for task {anchor.task_id} has no recorded gates")
    terms = []
    for recorded, u_now in zip(anchor.anchor_gates, gates_now_on_anchor):
        if recorded.shape != u_now.shape:
            raise ContractError(
                f"anchor gates {recorded.shape} vs current gates {u_now.shape}: "
                "rows must align with the stored anchor inputs"
            )
        n_hidd = u_now.shape[1]
        recorded_node = u_now.tape.const(recorded)
        per_example = ad.scale(ad.row_dot(recorded_node, u_now), 1.0 / n_hidd)
        terms.append(ad.mean(ad.squared_distance_to(per_example, beta_k)))
    return ad.add_n(terms)


def ewc_anchor_term(
    anchor: TaskAnchor,
    leaves: dict[str, DiffNode],
    slices: dict[str, slice],
) -> DiffNode:
    """0.5 * sum_j F_j (theta_snapshot_j - theta_j)^2 for one prior task."""
    if anchor.fisher_diag is None:
        raise ContractError(f"anchor for task {anchor.task_id} has no Fisher diagonal")
    total_len = max(s.stop for s in slices.values())
    if anchor.theta_snapshot.size != total_len:
        raise ContractError(
            f"theta snapshot length {anchor.theta_snapshot.size} does not match "
            f"current parameter count {total_len}"
        )
    terms = []
    for name, leaf in leaves.items():
        sl = slices[name]
        snap = anchor.theta_snapshot[sl].reshape(leaf.shape)
        fish = anchor.fisher_diag[sl].reshape(leaf.shape)
        terms.append(ad.weighted_sum(ad.squared_distance_to(leaf, snap), fish))
    return ad.scale(ad.add_n(terms), 0.5)


def ewc_penalty(
    anchors: Sequence[TaskAnchor],
    leaves: dict[str, DiffNode],
    slices: dict[str, slice],
) -> DiffNode:
    """Quadratic penalty summed over all prior tasks."""
    if not anchors:
        raise ParameterError("ewc_penalty needs at least one anchor")
    return ad.add_n([ewc_anchor_term(a, leaves, slices) for a in anchors])


LogitsFn = Callable[[Tape, dict[str, DiffNode], np.ndarray], DiffNode]


def _default_logits_fn(params: GatedNetParams) -> LogitsFn:
    def fn(tape: Tape, leaves: dict[str, DiffNode], x: np.ndarray) -> DiffNode:
        x_node = tape.leaf(x, requires_grad=False)
        return forward(leaves, x_node, params.config, mode="eval").logits
    return fn


def estimate_fisher_diagonal(
    params: GatedNetParams,
    images: np.ndarray,
    labels: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
    logits_fn: LogitsFn | None = None,
) -> np.ndarray:
    """Empirical Fisher: mean squared per-example gradient of -log p(y|x).

    One example per backward pass, eval-mode forward, true labels.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    if n_samples > images.shape[0]:
        raise ParameterError(
            f"n_samples {n_samples} exceeds dataset size {images.shape[0]}"
        )
    if logits_fn is None:
        logits_fn = _default_logits_fn(params)
    picks = rng.choice(images.shape[0], size=n_samples, replace=False)
    slices = params.flat_slices()
    fisher = np.zeros(params.n_params, dtype=np.float64)
    tape = Tape()
    for idx in picks:
        tape.reset()
        leaves = params.leaves(tape)
        logits = logits_fn(tape, leaves, images[idx:idx + 1])
        nll = ad.softmax_cross_entropy(logits, labels[idx:idx + 1])
        backward(nll)
        for name, leaf in leaves.items():
            g = leaf.grad.reshape(-1)
            fisher[slices[name]] += g * g
    fisher /= n_samples
    return fisher


def record_anchor(
    params: GatedNetParams,
    images: np.ndarray,
    labels: np.ndarray,
    anchor_size: int,
    fisher_samples: int,
    rng: np.random.Generator,
    task_id: int,
    record_gates: bool = True,
    record_fisher: bool = True,
    logits_fn: LogitsFn | None = None,
) -> TaskAnchor:
    """Freeze a finished task: sampled inputs, their gate outputs, Fisher, theta.

    Labels are used only transiently for the Fisher estimate; the anchor
    itself stores none.
    """
    n = images.shape[0]
    if record_gates and anchor_size > n:
        raise ParameterError(f"anchor_size {anchor_size} exceeds dataset size {n}")
    anchor_inputs = anchor_gates = fisher = None
    if record_gates:
        picks = rng.choice(n, size=anchor_size, replace=False)
        anchor_inputs = images[picks].copy()
        anchor_gates = [g.values.copy() for g in gate_outputs_only(params, anchor_inputs)]
    if record_fisher:
        fisher = estimate_fisher_diagonal(
            params, images, labels, fisher_samples, rng, logits_fn=logits_fn
        )
    return TaskAnchor(
        task_id=task_id,
        theta_snapshot=params.flatten(),
        anchor_inputs=anchor_inputs,
        anchor_gates=anchor_gates,
        fisher_diag=fisher,
    )


@dataclass
class GateLossReport:
    """Unweighted per-term values for one training step."""

    task_loss: float
    coefficients: LossCoefficients
    sparse: float | None = None
    change: list[float] = field(default_factory=list)
    keep: list[float] = field(default_factory=list)
    ewc: list[float] = field(default_factory=list)
    total: float = 0.0

    def weighted_total(self) -> float:
        c = self.coefficients
        total = self.task_loss
        if self.sparse is not None:
            total += c.lambda_sparse * self.sparse
        total += c.lambda_change * sum(self.change)
        total += c.lambda_keep * sum(self.keep)
        total += c.lambda_ewc * sum(self.ewc)
        return total


def total_loss(
    task_loss: DiffNode,
    coefficients: LossCoefficients,
    sparse: DiffNode | None = None,
    change: Sequence[DiffNode] = (),
    keep: Sequence[DiffNode] = (),
    ewc: Sequence[DiffNode] = (),
) -> tuple[DiffNode, GateLossReport]:
    """Weighted sum of all supplied terms; change/keep/ewc are per prior task."""
    c = coefficients
    terms = [task_loss]
    if sparse is not None:
        terms.append(ad.scale(sparse, c.lambda_sparse))
    terms.extend(ad.scale(t, c.lambda_change) for t in change)
    terms.extend(ad.scale(t, c.lambda_keep) for t in keep)
    terms.extend(ad.scale(t, c.lambda_ewc) for t in ewc)
    total = ad.add_n(terms) if len(terms) > 1 else task_loss
    report = GateLossReport(
        task_loss=task_loss.item(),
        coefficients=c,
        sparse=sparse.item() if sparse is not None else None,
        change=[t.item() for t in change],
        keep=[t.item() for t in keep],
        ewc=[t.item() for t in ewc],
        total=total.item(),
    )
    return total, report


def save_anchors(anchors: Sequence[TaskAnchor], path) -> None:
    """Binary archive: magic, version, count, then per anchor the header
    (task_id, rows, layer count, input/gate widths, fisher/theta lengths)
    followed by its arrays as little-endian float64."""
    with open(path, "wb") as f:
        f.write(ANCHOR_MAGIC)
        f.write(struct.pack("<II", ANCHOR_VERSION, len(anchors)))
        for a in anchors:
            rows = 0 if a.anchor_inputs is None else a.anchor_inputs.shape[0]
            n_layers = 0 if a.anchor_gates is None else len(a.anchor_gates)
            input_dim = 0 if a.anchor_inputs is None else a.anchor_inputs.shape[1]
            n_hidd = 0 if not n_layers else a.anchor_gates[0].shape[1]
            fisher_len = 0 if a.fisher_diag is None else a.fisher_diag.size
            f.write(struct.pack(
                "<IIIII QQ", a.task_id, rows, n_layers, input_dim, n_hidd,
                fisher_len, a.theta_snapshot.size,
            ))
            if rows:
                f.write(a.anchor_inputs.astype("<f8").tobytes())
                for g in a.anchor_gates:
                    f.write(g.astype("<f8").tobytes())
            if fisher_len:
                f.write(a.fisher_diag.astype("<f8").tobytes())
            f.write(a.theta_snapshot.astype("<f8").tobytes())


def _read_array(f: IO[bytes], count: int, path) -> np.ndarray:
    data = f.read(8 * count)
    if len(data) != 8 * count:
        raise ContractError(f"{path}: truncated anchor archive")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def load_anchors(path) -> list[TaskAnchor]:
    anchors = []
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != ANCHOR_MAGIC:
            raise ContractError(f"{path}: bad anchor archive magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != ANCHOR_VERSION:
            raise ContractError(f"{path}: unsupported anchor archive version {version}")
        for _ in range(count):
            header = f.read(36)
            if len(header) != 36:
                raise ContractError(f"{path}: truncated anchor header")
            task_id, rows, n_layers, input_dim, n_hidd, fisher_len, theta_len = struct.unpack(
                "<IIIII QQ", header
            )
            inputs = gates = fisher = None
            if rows:
                inputs = _read_array(f, rows * input_dim, path).reshape(rows, input_dim)
                gates = [
                    _read_array(f, rows * n_hidd, path).reshape(rows, n_hidd)
                    for _ in range(n_layers)
                ]
            if fisher_len:
                fisher = _read_array(f, fisher_len, path)
            theta = _read_array(f, theta_len, path)
            anchors.append(TaskAnchor(
                task_id=task_id, theta_snapshot=theta, anchor_inputs=inputs,
                anchor_gates=gates, fisher_diag=fisher,
            ))
    return anchors
