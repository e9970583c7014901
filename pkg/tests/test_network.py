import numpy as np
import pytest

from lxdg import autodiff as ad
from lxdg.autodiff import Tape
from lxdg.errors import ContractError, ParameterError, ShapeError
from lxdg.network import (
    GatedNetParams, NetworkConfig, forward, forward_xdg, gate_outputs_only, init_params,
    load_checkpoint, make_xdg_masks, parameter_count, run_forward, save_checkpoint,
)

TOY = NetworkConfig(input_dim=6, forward_width=5, gate_hidden_width=4, n_classes=3,
                    dropout_p=0.5, init_seed=123)


def toy_batch(n=4, seed=0, dim=6):
    return np.random.default_rng(seed).uniform(size=(n, dim))


def test_init_deterministic_under_seed():
    a = init_params(TOY)
    b = init_params(TOY)
    for name in a.names:
        np.testing.assert_array_equal(a.arrays[name], b.arrays[name])


def test_init_weight_bounds_follow_fan_in():
    config = NetworkConfig(input_dim=784, forward_width=16, gate_hidden_width=8, init_seed=7)
    params = init_params(config)
    bound = 1.0 / np.sqrt(784)
    for name in ("fw1_w", "gate1_w1", "gate2_w1"):
        w = params.arrays[name]
        assert w.shape[0] == 784
        assert np.all(np.abs(w) <= bound)
        assert np.abs(w).max() > 0.8 * bound  # actually spans the range
    assert np.all(np.abs(params.arrays["fw2_w"]) <= 1.0 / np.sqrt(16))


def test_init_biases_exactly_zero():
    params = init_params(TOY)
    for name in params.names:
        if name.split("_")[-1].startswith("b"):
            np.testing.assert_array_equal(params.arrays[name], 0.0)


def test_parameter_count_closed_form():
    for config, with_gates in [
        (TOY, True),
        (TOY, False),
        (NetworkConfig(input_dim=784, forward_width=2000, gate_hidden_width=400), True),
    ]:
        d, h, g, c = config.input_dim, config.forward_width, config.gate_hidden_width, config.n_classes
        expected = d * h + h + h * h + h + h * c + c
        if with_gates:
            expected += 2 * (d * g + g + g * h + h)
        params = init_params(config, with_gate_subnets=with_gates)
        assert parameter_count(config, with_gates) == expected == params.n_params


def test_flatten_roundtrip_and_stable_order():
    params = init_params(TOY)
    theta = params.flatten()
    assert theta.size == params.n_params
    other = init_params(NetworkConfig(**{**TOY.__dict__, "init_seed": 999}))
    other.load_flat(theta)
    for name in params.names:
        np.testing.assert_array_equal(other.arrays[name], params.arrays[name])
    slices = params.flat_slices()
    np.testing.assert_array_equal(
        theta[slices["fw2_w"]].reshape(5, 5), params.arrays["fw2_w"]
    )


def test_flat_load_rejects_wrong_length():
    params = init_params(TOY)
    with pytest.raises(ShapeError):
        params.load_flat(np.zeros(params.n_params - 1))


def _pin_gates(params: GatedNetParams, value: float) -> GatedNetParams:
    pinned = params.copy()
    pinned.arrays["gate1_b2"][:] = value
    pinned.arrays["gate1_w2"][:] = 0.0
    pinned.arrays["gate2_b2"][:] = value
    pinned.arrays["gate2_w2"][:] = 0.0
    return pinned


def ungated_logits(params: GatedNetParams, x: np.ndarray) -> np.ndarray:
    a = params.arrays
    h1 = np.maximum(x @ a["fw1_w"] + a["fw1_b"], 0.0)
    h2 = np.maximum(h1 @ a["fw2_w"] + a["fw2_b"], 0.0)
    return h2 @ a["out_w"] + a["out_b"]


def test_all_ones_gates_match_ungated_mlp():
    params = _pin_gates(init_params(TOY), 50.0)
    x = toy_batch()
    out = run_forward(params, x, mode="eval")
    np.testing.assert_allclose(out.logits.values, ungated_logits(params, x), atol=1e-6)


def test_all_zero_gates_leave_only_bias_pathway():
    params = _pin_gates(init_params(TOY), -50.0)
    x = toy_batch()
    out = run_forward(params, x, mode="eval")
    # hidden contributions vanish, logits collapse to the output bias
    np.testing.assert_allclose(
        out.logits.values, np.tile(params.arrays["out_b"], (x.shape[0], 1)), atol=1e-6
    )


def test_eval_forward_is_deterministic():
    params = init_params(TOY)
    x = toy_batch()
    a = run_forward(params, x, mode="eval").logits.values
    b = run_forward(params, x, mode="eval").logits.values
    np.testing.assert_array_equal(a, b)


def test_gate_outputs_strictly_inside_unit_interval():
    params = init_params(TOY)
    out = run_forward(params, toy_batch(), mode="eval")
    for u in out.gate_outputs:
        assert np.all(u.values > 0.0) and np.all(u.values < 1.0)


def test_forward_rejects_wrong_width():
    params = init_params(TOY)
    with pytest.raises(ShapeError):
        run_forward(params, toy_batch(dim=7))


def test_forward_rejects_out_of_range_pixels():
    params = init_params(TOY)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        run_forward(params, np.full((2, 6), 1.5))


def test_gate_outputs_only_matches_eval_forward():
    params = init_params(TOY)
    x = toy_batch()
    gates = gate_outputs_only(params, x)
    out = run_forward(params, x, mode="eval")
    for a, b in zip(gates, out.gate_outputs):
        np.testing.assert_array_equal(a.values, b.values)


def test_gates_depend_only_on_input_and_gate_parameters():
    params = init_params(TOY)
    x = toy_batch()
    before = [g.values.copy() for g in gate_outputs_only(params, x)]
    perturbed = params.copy()
    perturbed.arrays["fw1_w"] += 0.37
    perturbed.arrays["out_w"] -= 1.4
    after = gate_outputs_only(perturbed, x)
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b.values)


def test_task_gradients_flow_into_gate_subnets():
    params = init_params(TOY)
    x = toy_batch()
    tape = Tape()
    leaves = params.leaves(tape)
    out = forward(leaves, tape.leaf(x, requires_grad=False), TOY, mode="eval")
    ad.backward(ad.softmax_cross_entropy(out.logits, np.array([0, 1, 2, 0])))
    assert np.abs(leaves["gate1_w2"].grad).max() > 0.0
    assert np.abs(leaves["gate2_w1"].grad).max() > 0.0


def test_train_mode_needs_rng():
    params = init_params(TOY)
    with pytest.raises(ContractError):
        run_forward(params, toy_batch(), mode="train")


def test_xdg_mask_construction():
    config = NetworkConfig(input_dim=6, forward_width=50, gate_hidden_width=4)
    masks = make_xdg_masks(config, context_id=3, seed=11)
    assert len(masks) == 2
    for m in masks:
        assert int(m.sum()) == 10  # floor(0.2 * 50)
        assert set(np.unique(m)) <= {0.0, 1.0}
    again = make_xdg_masks(config, context_id=3, seed=11)
    for a, b in zip(masks, again):
        np.testing.assert_array_equal(a, b)


def test_xdg_mask_overlap_near_four_percent():
    config = NetworkConfig(input_dim=6, forward_width=2000, gate_hidden_width=4)
    rng = np.random.default_rng(0)
    overlaps = []
    masks = {c: make_xdg_masks(config, c, seed=5)[0] for c in range(80)}
    for _ in range(500):
        i, j = rng.choice(80, size=2, replace=False)
        overlaps.append((masks[i] * masks[j]).sum() / 2000.0)
    assert abs(np.mean(overlaps) - 0.04) < 0.01


def test_forward_xdg_uses_stored_mask_and_rejects_unknown_context():
    params = init_params(TOY, with_gate_subnets=False)
    fixed = {0: make_xdg_masks(TOY, 0, seed=2)}
    x = toy_batch()
    out = forward_xdg(params, x, context_id=0, fixed_gates=fixed)
    for u, m in zip(out.gate_outputs, fixed[0]):
        np.testing.assert_array_equal(u.values, m)
    inactive = fixed[0][0] == 0.0
    # gated hidden activity is exactly zero on masked-off units
    tape = Tape()
    leaves = params.leaves(tape)
    h1 = ad.relu(ad.affine(tape.leaf(x, requires_grad=False), leaves["fw1_w"], leaves["fw1_b"]))
    gated = h1.values * fixed[0][0]
    assert np.all(gated[:, inactive] == 0.0)
    with pytest.raises(KeyError):
        forward_xdg(params, x, context_id=9, fixed_gates=fixed)


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(TOY)
    params.arrays["fw1_w"][0, 0] = 0.123456789
    path = tmp_path / "model.lxdg"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.config.forward_width == TOY.forward_width
    assert loaded.has_gate_subnets
    np.testing.assert_array_equal(loaded.flatten(), params.flatten())


def test_checkpoint_roundtrip_without_gates(tmp_path):
    params = init_params(TOY, with_gate_subnets=False)
    path = tmp_path / "model.lxdg"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert not loaded.has_gate_subnets
    np.testing.assert_array_equal(loaded.flatten(), params.flatten())


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.lxdg"
    path.write_bytes(b"NOPE" + b"\x00" * 60)
    with pytest.raises(ContractError, match="magic"):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ParameterError):
        NetworkConfig(dropout_p=1.0)
    with pytest.raises(ParameterError):
        NetworkConfig(forward_width=0)
    with pytest.raises(ParameterError):
        NetworkConfig(n_forward_layers=3)
