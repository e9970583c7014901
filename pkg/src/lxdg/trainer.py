"""Sequential continual-learning loop and baselines.

Four methods share one loop:

* ``none``      - task loss only (catastrophic-forgetting reference);
* ``ewc``       - task loss + quadratic parameter penalty;
* ``xdg_ewc``   - fixed random 20%-active binary gates selected by an
                  explicit context label, + quadratic penalty;
* ``lxdg_ewc``  - learned gates with all three gate regularizers, + penalty.

``none``, ``ewc`` and ``lxdg_ewc`` train the identical gated architecture
(comparable trainable-parameter counts); ``xdg_ewc`` drops the gate subnets
since its masks are fixed.

Seeding: every stream (shuffle order, dropout masks, anchor sampling, mask
construction, parameter init) is an independent child of ``TrainConfig.seed``,
so one integer reproduces a run bitwise on a single thread.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .errors import ContractError, ParameterError, TrainingDiverged
from .network import (
    GatedNetParams, NetworkConfig, forward, gate_forward, init_params, make_xdg_masks,
)
from .objectives import (
    GateLossReport, LossCoefficients, TaskAnchor, change_loss, ewc_anchor_term,
    keep_loss, record_anchor, sparsity_loss, total_loss,
)
from .tasks import Dataset, TaskStream

METHODS = ("none", "ewc", "xdg_ewc", "lxdg_ewc")

# spawn keys for the independent rng streams derived from TrainConfig.seed
_INIT_KEY, _SHUFFLE_KEY, _DROPOUT_KEY, _ANCHOR_KEY, _MASK_KEY = 10, 11, 12, 13, 14


@dataclass(frozen=True)
class TrainConfig:
    method: str = "lxdg_ewc"
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs_per_task: int = 20
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    coefficients: LossCoefficients = field(default_factory=LossCoefficients)
    anchor_size: int = 256
    fisher_samples: int = 1000
    xdg_active_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.learning_rate <= 0.0:
            raise ParameterError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ParameterError("batch_size and epochs_per_task must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: GatedNetParams, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(params.arrays[n]) for n in params.names}
        self.v = {n: np.zeros_like(params.arrays[n]) for n in params.names}

    def step(self, params: GatedNetParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in params.names:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.arrays[name] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: GatedNetParams, grads: dict[str, np.ndarray]) -> None:
        for name in params.names:
            params.arrays[name] -= self.lr * grads[name]


def _make_optimizer(config: TrainConfig, params: GatedNetParams):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, config.adam_beta1,
                    config.adam_beta2, config.adam_eps)
    return Sgd(config.learning_rate)


def _child_rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


@dataclass
class StepLog:
    task_id: int
    epoch: int
    step: int  # global step index across the whole run
    report: GateLossReport


@dataclass
class RunState:
    net_config: NetworkConfig
    config: TrainConfig
    params: GatedNetParams
    optimizer: Adam | Sgd
    anchors: list[TaskAnchor] = field(default_factory=list)
    completed_tasks: int = 0
    global_step: int = 0
    shuffle_rng: np.random.Generator = None
    dropout_rng: np.random.Generator = None
    anchor_rng: np.random.Generator = None
    xdg_masks: dict[int, list[np.ndarray]] = field(default_factory=dict)
    tape: Tape = field(default_factory=Tape)

    def masks_for(self, context_id: int) -> list[np.ndarray]:
        if context_id not in self.xdg_masks:
            mask_seed = int(np.random.SeedSequence(
                entropy=self.config.seed, spawn_key=(_MASK_KEY,)).generate_state(1)[0])
            self.xdg_masks[context_id] = make_xdg_masks(
                self.net_config, context_id, mask_seed, self.config.xdg_active_fraction)
        return self.xdg_masks[context_id]


def init_run_state(net_config: NetworkConfig, config: TrainConfig) -> RunState:
    init_seed = int(np.random.SeedSequence(
        entropy=config.seed, spawn_key=(_INIT_KEY,)).generate_state(1)[0])
    net_config = replace(net_config, init_seed=init_seed)
    params = init_params(net_config, with_gate_subnets=config.method != "xdg_ewc")
    return RunState(
        net_config=net_config,
        config=config,
        params=params,
        optimizer=_make_optimizer(config, params),
        shuffle_rng=_child_rng(config.seed, _SHUFFLE_KEY),
        dropout_rng=_child_rng(config.seed, _DROPOUT_KEY),
        anchor_rng=_child_rng(config.seed, _ANCHOR_KEY),
    )


def _find_bad_term(report: GateLossReport) -> str:
    if not np.isfinite(report.task_loss):
        return "task_loss"
    if report.sparse is not None and not np.isfinite(report.sparse):
        return "sparse"
    for name, values in (("change", report.change), ("keep", report.keep), ("ewc", report.ewc)):
        for t, v in enumerate(values):
            if not np.isfinite(v):
                return f"{name}[anchor {t}]"
    return "total"


def train_step(
    state: RunState,
    x: np.ndarray,
    y: np.ndarray,
    task_id: int,
) -> GateLossReport:
    """One minibatch update of the method's full objective."""
    cfg, net_cfg = state.config, state.net_config
    tape = state.tape
    tape.reset()
    leaves = state.params.leaves(tape)
    x_node = tape.leaf(x.astype(net_cfg.np_dtype, copy=False), requires_grad=False)

    if cfg.method == "xdg_ewc":
        masks = [tape.const(m) for m in state.masks_for(task_id)]
        out = forward(leaves, x_node, net_cfg, "train", state.dropout_rng, fixed_gates=masks)
    else:
        out = forward(leaves, x_node, net_cfg, "train", state.dropout_rng)
    task_term = ad.softmax_cross_entropy(out.logits, y)

    sparse = None
    change_terms: list = []
    keep_terms: list = []
    ewc_terms: list = []
    if cfg.method == "lxdg_ewc":
        # deterministic gate path for every regularizer
        gates_now = [gate_forward(leaves, x_node, i, net_cfg, "eval") for i in (1, 2)]
        sparse = sparsity_loss(gates_now, cfg.coefficients.beta_s)
        for anchor in state.anchors:
            xa = tape.leaf(anchor.anchor_inputs, requires_grad=False)
            gates_on_anchor = [gate_forward(leaves, xa, i, net_cfg, "eval") for i in (1, 2)]
            change_terms.append(change_loss(gates_now, gates_on_anchor, cfg.coefficients.beta_c))
            keep_terms.append(keep_loss(anchor, gates_on_anchor, cfg.coefficients.beta_k))
    if cfg.method in ("ewc", "xdg_ewc", "lxdg_ewc") and state.anchors:
        slices = state.params.flat_slices()
        ewc_terms = [ewc_anchor_term(a, leaves, slices) for a in state.anchors]

    total, report = total_loss(
        task_term, cfg.coefficients, sparse=sparse,
        change=change_terms, keep=keep_terms, ewc=ewc_terms,
    )
    if not np.isfinite(report.total):
        raise TrainingDiverged(
            f"non-finite loss at global step {state.global_step} (task {task_id}): "
            f"term {_find_bad_term(report)}"
        )
    backward(total)
    state.optimizer.step(state.params, {n: leaves[n].grad for n in state.params.names})
    state.global_step += 1
    return report


def train_task(
    state: RunState,
    spec_task_id: int,
    train_ds: Dataset,
) -> list[StepLog]:
    """All epochs for one task, then anchor recording."""
    cfg = state.config
    n = len(train_ds)
    logs: list[StepLog] = []
    for epoch in range(cfg.epochs_per_task):
        order = state.shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            report = train_step(state, train_ds.images[idx], train_ds.labels[idx], spec_task_id)
            logs.append(StepLog(spec_task_id, epoch, state.global_step - 1, report))

    record_gates = cfg.method == "lxdg_ewc"
    record_fisher = cfg.method != "none"
    logits_fn = None
    if cfg.method == "xdg_ewc":
        masks = state.masks_for(spec_task_id)

        def logits_fn(tape, leaves, xrow):
            consts = [tape.const(m) for m in masks]
            x_node = tape.leaf(xrow, requires_grad=False)
            return forward(leaves, x_node, state.net_config, "eval", fixed_gates=consts).logits

    anchor = record_anchor(
        state.params, train_ds.images, train_ds.labels,
        anchor_size=cfg.anchor_size, fisher_samples=cfg.fisher_samples,
        rng=state.anchor_rng, task_id=spec_task_id,
        record_gates=record_gates, record_fisher=record_fisher, logits_fn=logits_fn,
    )
    state.anchors.append(anchor)
    state.completed_tasks += 1
    return logs


def evaluate(
    params: GatedNetParams,
    dataset: Dataset,
    method: str = "lxdg_ewc",
    context_id: int | None = None,
    xdg_masks: dict[int, list[np.ndarray]] | None = None,
    batch: int = 1024,
) -> float:
    """Fraction of argmax-correct predictions, eval mode. Ties resolve to the
    lowest class index. Only the fixed-mask method may (and must) receive a
    context label."""
    if method == "xdg_ewc":
        if context_id is None or xdg_masks is None:
            raise ContractError("xdg_ewc evaluation requires a context_id and its masks")
        masks = xdg_masks[context_id]
    else:
        if context_id is not None:
            raise ContractError(f"method {method!r} must not receive a context label")
        masks = None
    correct = 0
    tape = Tape()
    for start in range(0, len(dataset), batch):
        x = dataset.images[start:start + batch]
        y = dataset.labels[start:start + batch]
        tape.reset()
        leaves = params.leaves(tape)
        x_node = tape.leaf(x.astype(params.config.np_dtype, copy=False), requires_grad=False)
        consts = [tape.const(m) for m in masks] if masks is not None else None
        logits = forward(leaves, x_node, params.config, "eval", fixed_gates=consts).logits
        correct += int((logits.values.argmax(axis=1) == y).sum())
    return correct / len(dataset)


class AccuracyMatrix:
    """Lower-triangular grid: entry [j, k] = accuracy on task k after
    finishing task j (k <= j); rows above the diagonal are NaN."""

    def __init__(self, n_tasks: int):
        self.acc = np.full((n_tasks, n_tasks), np.nan)

    def record(self, after_task: int, eval_task: int, accuracy: float) -> None:
        if eval_task > after_task:
            raise ParameterError("cannot evaluate a task that has not been trained yet")
        self.acc[after_task, eval_task] = accuracy

    @property
    def n_tasks(self) -> int:
        return self.acc.shape[0]

    def mean_curve(self) -> np.ndarray:
        return np.array([np.mean(self.acc[j, : j + 1]) for j in range(self.n_tasks)])

    def final_mean(self) -> float:
        return float(self.mean_curve()[-1])


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    logs: list[StepLog]
    state: RunState
    wall_seconds: float


def run_sequence(
    net_config: NetworkConfig,
    config: TrainConfig,
    stream: TaskStream,
    progress: Callable[[str], None] | None = None,
) -> RunResult:
    """Train every task in order, evaluating on all seen test sets after each."""
    t0 = time.perf_counter()
    state = init_run_state(net_config, config)
    matrix = AccuracyMatrix(len(stream))
    logs: list[StepLog] = []
    for j, spec in enumerate(stream.specs):
        logs.extend(train_task(state, spec.task_id, stream.train(j)))
        for k in range(j + 1):
            if config.method == "xdg_ewc":
                acc = evaluate(state.params, stream.test(k), config.method,
                               context_id=k, xdg_masks=state.xdg_masks)
            else:
                acc = evaluate(state.params, stream.test(k), config.method)
            matrix.record(j, k, acc)
        if progress is not None:
            progress(
                f"[{config.method}] task {j + 1}/{len(stream)}: "
                f"mean acc {matrix.mean_curve()[j]:.4f}"
            )
    return RunResult(matrix, logs, state, time.perf_counter() - t0)


def sweep(
    lambda_name: str,
    values: Sequence[float],
    net_config: NetworkConfig,
    config: TrainConfig,
    stream: TaskStream,
    progress: Callable[[str], None] | None = None,
) -> list[tuple[float, float]]:
    """Independent run per coefficient value -> (value, final mean accuracy) rows,
    sorted by value."""
    if not values:
        raise ParameterError("sweep needs at least one value")
    if lambda_name not in ("lambda_ewc", "lambda_gate"):
        raise ParameterError(f"unknown sweep coefficient {lambda_name!r}")
    rows = []
    for value in sorted(values):
        c = config.coefficients
        if lambda_name == "lambda_ewc":
            coeffs = replace(c, lambda_ewc=value)
        else:
            coeffs = replace(c, lambda_sparse=value, lambda_change=value, lambda_keep=value)
        run_cfg = replace(config, coefficients=coeffs)
        result = run_sequence(net_config, run_cfg, stream, progress)
        rows.append((float(value), result.matrix.final_mean()))
    return rows
