"""Gated feedforward classifier.

Two forward hidden layers, each multiplied elementwise by the output of an
adjacent gate subnetwork that reads the raw input. Gate subnets end in a
sigmoid, so gate values live strictly in (0, 1). A fixed-random-mask variant
(context-indexed binary gates, no subnets) and an ungated configuration share
the same forward pipeline.

Within a layer the order is: affine -> relu -> gate multiply -> dropout.
Gate subnets apply relu + dropout after their hidden layer and sigmoid on the
output; their dropout is active only in the main train-mode pass, never when
gates are evaluated for regularizers, anchors, or analysis (those paths must
be deterministic).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode, Tape
from .errors import ContractError, ParameterError, ShapeError

CHECKPOINT_MAGIC = b"LXDG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 784
    n_forward_layers: int = 2
    forward_width: int = 2000
    gate_hidden_width: int = 400
    n_classes: int = 10
    dropout_p: float = 0.5
    init_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_forward_layers != 2:
            raise ParameterError("exactly two forward layers are supported")
        if self.forward_width < 1 or self.gate_hidden_width < 1:
            raise ParameterError("layer widths must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


# canonical parameter order; EWC and checkpoints rely on it never changing
FORWARD_PARAM_NAMES = ("fw1_w", "fw1_b", "fw2_w", "fw2_b", "out_w", "out_b")
GATE_PARAM_NAMES = (
    "gate1_w1", "gate1_b1", "gate1_w2", "gate1_b2",
    "gate2_w1", "gate2_b1", "gate2_w2", "gate2_b2",
)


def _param_shapes(config: NetworkConfig, with_gate_subnets: bool) -> dict[str, tuple[int, ...]]:
    d, h, g, c = config.input_dim, config.forward_width, config.gate_hidden_width, config.n_classes
    shapes = {
        "fw1_w": (d, h), "fw1_b": (h,),
        "fw2_w": (h, h), "fw2_b": (h,),
        "out_w": (h, c), "out_b": (c,),
    }
    if with_gate_subnets:
        for i in (1, 2):
            shapes[f"gate{i}_w1"] = (d, g)
            shapes[f"gate{i}_b1"] = (g,)
            shapes[f"gate{i}_w2"] = (g, h)
            shapes[f"gate{i}_b2"] = (h,)
    return shapes


def parameter_count(config: NetworkConfig, with_gate_subnets: bool = True) -> int:
    shapes = _param_shapes(config, with_gate_subnets)
    return sum(int(np.prod(s)) for s in shapes.values())


@dataclass
class GatedNetParams:
    """All trainable arrays, in a canonical, stable flattening order."""

    config: NetworkConfig
    arrays: dict[str, np.ndarray] = field(repr=False)

    @property
    def names(self) -> tuple[str, ...]:
        order = FORWARD_PARAM_NAMES + GATE_PARAM_NAMES
        return tuple(n for n in order if n in self.arrays)

    @property
    def has_gate_subnets(self) -> bool:
        return "gate1_w1" in self.arrays

    @property
    def n_params(self) -> int:
        return sum(self.arrays[n].size for n in self.names)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].reshape(-1) for n in self.names])

    def load_flat(self, theta: np.ndarray) -> None:
        if theta.size != self.n_params:
            raise ShapeError(f"flat vector has {theta.size} entries, expected {self.n_params}")
        offset = 0
        for name in self.names:
            arr = self.arrays[name]
            arr[...] = theta[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def flat_slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name in self.names:
            size = self.arrays[name].size
            out[name] = slice(offset, offset + size)
            offset += size
        return out

    def copy(self) -> "GatedNetParams":
        return GatedNetParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, tape: Tape) -> dict[str, DiffNode]:
        return {name: tape.leaf(self.arrays[name]) for name in self.names}


def init_params(config: NetworkConfig, with_gate_subnets: bool = True) -> GatedNetParams:
    """Weights uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero."""
    rng = np.random.default_rng(config.init_seed)
    dtype = config.np_dtype
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config, with_gate_subnets).items():
        if name.split("_")[-1].startswith("b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return GatedNetParams(config, arrays)


@dataclass
class ForwardOutput:
    logits: DiffNode
    gate_outputs: list[DiffNode]
    hidden: list[DiffNode] | None = None


def _check_input(config: NetworkConfig, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ShapeError(f"input batch shape {x.shape} does not match input_dim {config.input_dim}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("input values must lie in [0, 1]")


def gate_forward(
    leaves: dict[str, DiffNode],
    x: DiffNode,
    layer: int,
    config: NetworkConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> DiffNode:
    """Gate subnet for one forward layer: x -> relu -> (dropout) -> sigmoid.

    Dropout fires only for mode='train'; every other caller gets the
    deterministic gate value for this input.
    """
    h = ad.relu(ad.affine(x, leaves[f"gate{layer}_w1"], leaves[f"gate{layer}_b1"]))
    h = ad.dropout(h, config.dropout_p, mode, rng)
    return ad.sigmoid(ad.affine(h, leaves[f"gate{layer}_w2"], leaves[f"gate{layer}_b2"]))


def forward(
    leaves: dict[str, DiffNode],
    x: DiffNode,
    config: NetworkConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    keep_hidden: bool = False,
    fixed_gates: list[DiffNode] | None = None,
) -> ForwardOutput:
    """Full pass: per layer affine -> relu -> gate multiply -> dropout.

    ``fixed_gates`` substitutes precomputed gate vectors (one per layer,
    broadcast across the batch) for the gate subnets.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and config.dropout_p > 0.0 and rng is None:
        raise ContractError("train-mode forward needs a dropout rng")
    gates: list[DiffNode] = []
    hidden: list[DiffNode] = []
    prev = x
    for layer in (1, 2):
        h = ad.relu(ad.affine(prev, leaves[f"fw{layer}_w"], leaves[f"fw{layer}_b"]))
        if fixed_gates is not None:
            u = fixed_gates[layer - 1]
        else:
            u = gate_forward(leaves, x, layer, config, mode, rng)
        gated = ad.hadamard(h, u)
        prev = ad.dropout(gated, config.dropout_p, mode, rng)
        gates.append(u)
        hidden.append(h)
    logits = ad.affine(prev, leaves["out_w"], leaves["out_b"])
    return ForwardOutput(logits, gates, hidden if keep_hidden else None)


def run_forward(
    params: GatedNetParams,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> ForwardOutput:
    """Convenience wrapper: wraps ``params`` and ``x`` on a fresh tape."""
    _check_input(params.config, x)
    tape = tape or Tape()
    leaves = params.leaves(tape)
    x_node = tape.leaf(x.astype(params.config.np_dtype, copy=False), requires_grad=False)
    return forward(leaves, x_node, params.config, mode, rng)


def make_xdg_masks(
    config: NetworkConfig, context_id: int, seed: int, active_fraction: float = 0.2
) -> list[np.ndarray]:
    """Fixed binary gates for one context: exactly floor(f * width) active units per layer."""
    n_active = int(np.floor(active_fraction * config.forward_width))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(context_id,)))
    masks = []
    for _ in range(config.n_forward_layers):
        mask = np.zeros(config.forward_width, dtype=config.np_dtype)
        idx = rng.choice(config.forward_width, size=n_active, replace=False)
        mask[idx] = 1.0
        masks.append(mask)
    return masks


def forward_xdg(
    params: GatedNetParams,
    x: np.ndarray,
    context_id: int,
    fixed_gates: dict[int, list[np.ndarray]],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> ForwardOutput:
    """Forward pass with stored binary masks selected by an explicit context."""
    if context_id not in fixed_gates:
        raise KeyError(f"unknown context_id {context_id}; known: {sorted(fixed_gates)}")
    _check_input(params.config, x)
    tape = tape or Tape()
    leaves = params.leaves(tape)
    x_node = tape.leaf(x.astype(params.config.np_dtype, copy=False), requires_grad=False)
    masks = [tape.const(m) for m in fixed_gates[context_id]]
    return forward(leaves, x_node, params.config, mode, rng, fixed_gates=masks)


def gate_outputs_only(
    params: GatedNetParams,
    x: np.ndarray,
    tape: Tape | None = None,
    leaves: dict[str, DiffNode] | None = None,
) -> list[DiffNode]:
    """Deterministic per-layer gate matrices for a batch; skips the forward path.

    Pass ``tape``+``leaves`` to build the evaluation into an existing graph
    (regularizers need gradients to flow into the gate subnets).
    """
    if not params.has_gate_subnets:
        raise ContractError("parameters carry no gate subnetworks")
    _check_input(params.config, x)
    if tape is None:
        tape = Tape()
    if leaves is None:
        leaves = params.leaves(tape)
    x_node = tape.leaf(x.astype(params.config.np_dtype, copy=False), requires_grad=False)
    return [
        gate_forward(leaves, x_node, layer, params.config, mode="eval")
        for layer in (1, 2)
    ]


def save_checkpoint(params: GatedNetParams, path) -> None:
    """Binary layout: magic, version, config fields, flat little-endian float64 vector."""
    cfg = params.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(
            "<IIIIII d q B Q",
            CHECKPOINT_VERSION, cfg.input_dim, cfg.n_forward_layers, cfg.forward_width,
            cfg.gate_hidden_width, cfg.n_classes, cfg.dropout_p, cfg.init_seed,
            1 if params.has_gate_subnets else 0, params.n_params,
        ))
        f.write(params.flatten().astype("<f8").tobytes())


def _read_exact(f: IO[bytes], n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ContractError(f"{path}: truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> GatedNetParams:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: bad checkpoint magic {magic!r}")
        header = struct.unpack("<IIIIII d q B Q", _read_exact(f, 49, path, "header"))
        (version, input_dim, n_layers, width, gate_width, n_classes,
         dropout_p, init_seed, has_gates, n_params) = header
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        config = NetworkConfig(
            input_dim=input_dim, n_forward_layers=n_layers, forward_width=width,
            gate_hidden_width=gate_width, n_classes=n_classes,
            dropout_p=dropout_p, init_seed=init_seed,
        )
        params = init_params(config, with_gate_subnets=bool(has_gates))
        if params.n_params != n_params:
            raise ContractError(f"{path}: parameter count {n_params} does not match config")
        theta = np.frombuffer(_read_exact(f, 8 * n_params, path, "parameters"), dtype="<f8")
        params.load_flat(theta.astype(np.float64))
    return params
