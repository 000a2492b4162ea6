import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

import autodiff as ad
import umap_loss
from autodiff import ShapeError, Tensor
from data_io import DataError, Standardizer
from edge_sampler import EdgeBatch
from gradcheck import check_param_gradients
from mixup_engine import mixed_loss, umap_mixup_forward
from neighbor_graph import build_graph
from nn import (
    EMBED, HEAD, Adam, AdamState, LstmState, ModelSpec, SplitModel, adam_step, load_model, lstm_forward, mlp_forward,
    sample_lambda, save_model,
)


def _set(model, name, value):
    model.params[name].data = np.array(value, dtype=np.float64).reshape(model.params[name].shape)


def _zero(model):
    for p in model.params.values():
        p.data = np.zeros_like(p.data)


def test_zero_network_predicts_zero(rng):
    model = SplitModel.init(ModelSpec(d_x=4, hidden=(6, 3)), rng)
    _zero(model)
    _, y_hat = mlp_forward(model, rng.normal(size=(5, 4)))
    assert_array_equal(y_hat.numpy(), np.zeros((5, 1)))


def test_identity_embedding_and_linear_head(rng):
    model = SplitModel.init(ModelSpec(d_x=1, hidden=(1,), activation="identity"), rng)
    _set(model, f"{EMBED}.0.weight", [[1.0]])
    _set(model, f"{EMBED}.0.bias", [0.0])
    _set(model, f"{HEAD}.0.weight", [[2.0]])
    _set(model, f"{HEAD}.0.bias", [0.0])
    x = np.array([[-1.5], [0.0], [2.25]])
    _, y_hat = mlp_forward(model, x)
    assert_array_equal(y_hat.numpy(), 2.0 * x)


def test_default_mlp_shapes_on_boston_width(rng):
    model = SplitModel.init(ModelSpec(d_x=13), rng)
    z, y_hat = mlp_forward(model, rng.normal(size=(7, 13)))
    assert z.shape == (7, 50)
    assert y_hat.shape == (7, 1)


def test_width_mismatch_raises(rng):
    model = SplitModel.init(ModelSpec(d_x=3, hidden=(4,)), rng)
    with pytest.raises(ShapeError):
        model.predict(np.ones((2, 5)))


def test_predict_is_head_of_embed(rng):
    model = SplitModel.init(ModelSpec(d_x=3, hidden=(5, 4), head_hidden=(3,)), rng)
    x = rng.normal(size=(6, 3))
    assert_array_equal(model.predict(x).numpy(), model.head(model.embed(x)).numpy())


def test_parameter_groups_partition_parameters(rng):
    for spec in (ModelSpec(d_x=3, hidden=(5, 4), head_hidden=(2,)), ModelSpec(d_x=1, kind="lstm", lstm_hidden=3)):
        model = SplitModel.init(spec, rng)
        theta1, theta2 = set(model.theta1), set(model.theta2)
        assert theta1 and theta2
        assert not theta1 & theta2
        assert theta1 | theta2 == set(model.params)


def test_lstm_zero_weights_fixed_point(rng):
    model = SplitModel.init(ModelSpec(d_x=1, kind="lstm", lstm_hidden=3), rng)
    _zero(model)
    x = rng.normal(size=(2, 6))
    state = model.lstm_step(Tensor(x[:, :1]), LstmState.zeros(2, 3))
    assert_array_equal(state.h.numpy(), np.zeros((2, 3)))
    assert_array_equal(state.c.numpy(), np.zeros((2, 3)))
    z, _ = lstm_forward(model, x)
    assert_array_equal(z.numpy(), np.zeros((2, 3)))


def test_lstm_single_step_matches_hand_gates(rng):
    model = SplitModel.init(ModelSpec(d_x=1, kind="lstm", lstm_hidden=2), rng)
    weights = {"i": [0.3, -0.2], "f": [0.5, 0.1], "g": [-0.7, 0.4], "o": [0.2, 0.9]}
    biases = {"i": [0.1, 0.0], "f": [1.0, 1.0], "g": [0.0, -0.3], "o": [0.05, 0.0]}
    for gate in "ifgo":
        _set(model, f"{EMBED}.lstm.w_{gate}", [weights[gate]])
        _set(model, f"{EMBED}.lstm.u_{gate}", np.zeros((2, 2)))
        _set(model, f"{EMBED}.lstm.b_{gate}", biases[gate])
    x = 0.5
    pre = {g: x * np.array(weights[g]) + np.array(biases[g]) for g in "ifgo"}
    c = expit(pre["i"]) * np.tanh(pre["g"])
    h = expit(pre["o"]) * np.tanh(c)
    z, _ = lstm_forward(model, np.array([[x]]))
    assert_allclose(z.numpy()[0], h, rtol=1e-14)


def test_lstm_rejects_empty_and_ragged_sequences(rng):
    model = SplitModel.init(ModelSpec(d_x=2, kind="lstm", lstm_hidden=3), rng)
    with pytest.raises(ValueError):
        lstm_forward(model, np.zeros((2, 0)))
    with pytest.raises(ShapeError):
        lstm_forward(model, np.zeros((2, 5)))


def test_lstm_gradient_through_five_steps(rng):
    model = SplitModel.init(ModelSpec(d_x=1, kind="lstm", lstm_hidden=3), rng)
    x = rng.normal(size=(4, 5))
    y = rng.normal(size=(4, 1))
    check_param_gradients(lambda: mixed_loss(model.predict(x), y, y, 1.0), model.params, rng)


def test_lstm_output_invariant_to_batch_order(rng):
    model = SplitModel.init(ModelSpec(d_x=1, kind="lstm", lstm_hidden=4), rng)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    assert_allclose(model.predict(x[perm]).numpy(), model.predict(x).numpy()[perm], rtol=0, atol=1e-12)


def test_mlp_layer_gradients(rng):
    model = SplitModel.init(ModelSpec(d_x=3, hidden=(5, 4), activation="tanh", head_hidden=(3,)), rng)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))
    check_param_gradients(lambda: mixed_loss(model.predict(x), y, y, 1.0), model.params, rng)


def test_forget_bias_initialized_to_one(rng):
    model = SplitModel.init(ModelSpec(d_x=1, kind="lstm", lstm_hidden=3), rng)
    assert_array_equal(model.params[f"{EMBED}.lstm.b_f"].data, np.ones(3))
    assert_array_equal(model.params[f"{EMBED}.lstm.b_i"].data, np.zeros(3))


def test_init_bounds_follow_fan_in(rng):
    model = SplitModel.init(ModelSpec(d_x=16, hidden=(9,)), rng)
    assert np.all(np.abs(model.params[f"{EMBED}.0.weight"].data) <= 1.0 / 4.0)
    assert np.all(np.abs(model.params[f"{HEAD}.0.weight"].data) <= 1.0 / 3.0)


# --- optimizer ---

def test_adam_zero_gradient_leaves_parameters(rng):
    params = {"embed.w": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
    before = params["embed.w"].numpy()
    state = AdamState(lr=0.1)
    for _ in range(5):
        adam_step(state, params, {"embed.w": np.zeros((3, 2))})
    assert_array_equal(params["embed.w"].data, before)
    assert state.t == 5


def test_adam_first_step_moves_by_lr():
    params = {"head.b": Tensor([1.0, -2.0], requires_grad=True)}
    adam_step(AdamState(lr=1e-3), params, {"head.b": np.array([50.0, -50.0])})
    assert_allclose(params["head.b"].data, [1.0 - 1e-3, -2.0 + 1e-3], rtol=0, atol=1e-12)


def test_adam_minimizes_scalar_quadratic():
    params = {"embed.w": Tensor([0.0], requires_grad=True)}
    state = AdamState(lr=0.1)
    for _ in range(200):
        w = params["embed.w"].data
        adam_step(state, params, {"embed.w": 2.0 * (w - 3.0)})
    assert abs(params["embed.w"].data[0] - 3.0) < 0.1


def test_adam_rejects_nan_gradient_naming_group():
    params = {"embed.0.weight": Tensor([1.0], requires_grad=True)}
    with pytest.raises(FloatingPointError, match="embed"):
        adam_step(AdamState(), params, {"embed.0.weight": np.array([np.nan])})


def test_adam_rejects_shape_mismatch():
    params = {"head.0.bias": Tensor([1.0, 2.0], requires_grad=True)}
    with pytest.raises(ShapeError):
        adam_step(AdamState(), params, {"head.0.bias": np.ones(3)})


def test_adam_wrapper_takes_tape_gradients(rng):
    model = SplitModel.init(ModelSpec(d_x=2, hidden=(3,)), rng)
    before = {k: p.numpy() for k, p in model.params.items()}
    opt = Adam(model.params, lr=0.01)
    with ad.Graph() as tape:
        loss = mixed_loss(model.predict(np.ones((2, 2))), np.zeros((2, 1)), np.zeros((2, 1)), 1.0)
    opt.step(tape.backward(loss))
    assert opt.state.t == 1
    assert any(not np.array_equal(before[k], p.data) for k, p in model.params.items())


# --- mixing ratio ---

def test_beta_one_is_uniform():
    draws = sample_lambda(1.0, np.random.default_rng(7), size=100_000)
    assert abs(draws.mean() - 0.5) < 0.005
    assert abs(draws.var() - 1.0 / 12.0) < 0.003


@pytest.mark.parametrize("alpha", [0.2, 1.0, 2.0, 8.0])
def test_beta_mean_is_one_half(alpha):
    draws = sample_lambda(alpha, np.random.default_rng(11), size=100_000)
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - 0.5) < 3 * se
    assert np.all((draws > 0.0) & (draws < 1.0))


def test_beta_two_variance():
    draws = sample_lambda(2.0, np.random.default_rng(3), size=100_000)
    assert abs(draws.var() - 0.05) < 0.005


def test_beta_rejects_non_positive_alpha(rng):
    with pytest.raises(ValueError):
        sample_lambda(0.0, rng)
    with pytest.raises(ValueError):
        sample_lambda(-1.0, rng)


def test_reseeding_reproduces_lambda_sequence():
    a = sample_lambda(2.0, np.random.default_rng(5), size=50)
    b = sample_lambda(2.0, np.random.default_rng(5), size=50)
    assert_array_equal(a, b)


# --- gradient routing between the parameter groups ---

def test_umap_loss_reaches_only_embedding_parameters(rng):
    x = rng.normal(size=(20, 3))
    graph = build_graph(x, k=4)
    model = SplitModel.init(ModelSpec(d_x=3, hidden=(6, 4)), rng)
    batch = EdgeBatch.from_edges([[0, 1], [2, 3]], [[0, 7], [2, 9]])
    with ad.Graph() as tape:
        loss = umap_loss.cross_entropy_batch(graph, batch, model.embed(x[batch.vertices]), umap_loss.fit_ab(0.1))
    grads = tape.backward(loss)
    assert any(np.any(grads[p] != 0.0) for p in model.theta1.values())
    assert all(np.all(grads.get(p, np.zeros(1)) == 0.0) for p in model.theta2.values())


def test_mixup_loss_reaches_embedding_parameters(rng):
    model = SplitModel.init(ModelSpec(d_x=3, hidden=(6, 4)), rng)
    x, x2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    y, y2 = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
    with ad.Graph() as tape:
        loss = mixed_loss(umap_mixup_forward(model, x, x2, 0.3), y, y2, 0.3)
    grads = tape.backward(loss)
    assert any(np.any(grads[p] != 0.0) for p in model.theta1.values())


# --- persistence ---

def test_model_file_round_trip(tmp_path, rng):
    model = SplitModel.init(ModelSpec(d_x=3, hidden=(5, 4), head_hidden=(2,)), rng)
    features = rng.normal(size=(10, 3))
    model.scaler_x = Standardizer.fit(features)
    model.scaler_y = Standardizer(mean=np.array([2.0]), std=np.array([0.5]))
    path = tmp_path / "model.bin"
    save_model(model, path)

    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
    assert header["format_version"] == 1
    assert (header["d_x"], header["d_z"], header["d_y"]) == (3, 4, 1)
    assert [name for name, _ in header["parameters"]] == list(model.params)

    loaded = load_model(path)
    assert loaded.spec == model.spec
    assert_array_equal(loaded.predict_original(features), model.predict_original(features))
    assert_array_equal(loaded.embed_original(features), model.embed_original(features))


def test_model_file_is_deterministic(tmp_path):
    for name in ("a.bin", "b.bin"):
        save_model(SplitModel.init(ModelSpec(d_x=2, kind="lstm", lstm_hidden=3), np.random.default_rng(9)),
                   tmp_path / name)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_truncated_model_file_rejected(tmp_path, rng):
    path = tmp_path / "model.bin"
    save_model(SplitModel.init(ModelSpec(d_x=2, hidden=(3,)), rng), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError, match="expected"):
        load_model(path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DataError, match="whole number"):
        load_model(path)


@pytest.mark.parametrize("first_line", [b"not json", b"[1, 2]", b'{"format_version": 9}', b'{"format_version": 1}'])
def test_bad_model_headers_rejected(tmp_path, first_line):
    path = tmp_path / "model.bin"
    path.write_bytes(first_line + b"\n")
    with pytest.raises(DataError):
        load_model(path)


def test_feature_names_survive_the_model_file(tmp_path, rng):
    model = SplitModel.init(ModelSpec(d_x=2, hidden=(3,)), rng)
    model.feature_names = ["speed", "angle"]
    save_model(model, tmp_path / "named.bin")
    assert load_model(tmp_path / "named.bin").feature_names == ["speed", "angle"]

    save_model(SplitModel.init(ModelSpec(d_x=2, hidden=(3,)), rng), tmp_path / "bare.bin")
    assert load_model(tmp_path / "bare.bin").feature_names == []
