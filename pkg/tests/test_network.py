import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsedoa import container
from sparsedoa.array_signal import ArrayGeometry, ScanGrid, manifold
from sparsedoa.network import (Adam, ShapeMismatch, TrainConfig, backward, bce_logit_grad, bce_loss,
                               bce_with_logits, count_for, count_parameters, forward, forward_logits,
                               init_params, load_checkpoint, model_inputs, save_checkpoint, sigmoid)

SMALL_TRUNK = (16, 12, 8, 6, 5)


def small_problem(kind, seed=0, batch=3):
    geom = ArrayGeometry.ula(4)
    grid = ScanGrid(-10, 10, 5)
    A = manifold(geom, grid)
    params = init_params(kind, 4, grid.size, hidden=6, seed=seed, trunk=SMALL_TRUNK)
    rng = np.random.default_rng(seed + 100)
    for t in params.tensors():
        t += 0.1 * rng.standard_normal(t.shape)  # non-zero biases too
    Y = rng.standard_normal((batch, 4)) + 1j * rng.standard_normal((batch, 4))
    masks = np.array([[1, 1, 0, 1], [1, 1, 1, 1], [0, 1, 1, 1]][:batch], dtype=np.int8)
    T = rng.uniform(0, 1, (batch, grid.size)) * (rng.random((batch, grid.size)) < 0.4)
    return params, Y, masks, T, A


def batch_loss(params, Y, masks, T, A):
    X, _ = model_inputs(params, Y, masks, masks.sum(1), A)
    return float(bce_with_logits(forward_logits(params, X), T).mean())


def analytic_grads(params, Y, masks, T, A):
    X, cache = model_inputs(params, Y, masks, masks.sum(1), A)
    logits, acts = forward_logits(params, X, keep=True)
    return backward(params, acts, bce_logit_grad(logits, T) / len(Y), cache)


@pytest.mark.parametrize("kind", ["augmented", "plain"])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(kind, seed):
    params, Y, masks, T, A = small_problem(kind, seed)
    grads = analytic_grads(params, Y, masks, T, A)
    h = 1e-5
    for name, tensor, g in zip(params.tensor_names(), params.tensors(), grads):
        num = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            orig = tensor[idx]
            tensor[idx] = orig + h
            up = batch_loss(params, Y, masks, T, A)
            tensor[idx] = orig - h
            down = batch_loss(params, Y, masks, T, A)
            tensor[idx] = orig
            num[idx] = (up - down) / (2 * h)
        rel = np.linalg.norm(num - g) / max(np.linalg.norm(num) + np.linalg.norm(g), 1e-12)
        assert rel < 1e-4, f"{name}: relative error {rel:.2e}"


def test_logit_gradient():
    rng = np.random.default_rng(4)
    z = rng.standard_normal(61)
    t = rng.uniform(0, 1, 61)
    g = bce_logit_grad(z, t)
    np.testing.assert_allclose(g, (sigmoid(z) - t) / 61)
    h = 1e-6
    num = np.array([(bce_with_logits(z + h * e, t) - bce_with_logits(z - h * e, t)) / (2 * h)
                    for e in np.eye(61)])
    assert np.max(np.abs(num - g) / np.abs(g)) < 1e-6


def test_bce_values():
    t = np.zeros(61)
    t[40] = 1
    p = np.where(t == 1, 1 - 1e-7, 1e-7)
    assert bce_loss(p, t) < 1e-5
    assert bce_loss(np.full(61, 0.5), np.random.default_rng(0).uniform(0, 1, 61)) == pytest.approx(np.log(2))
    # logits form agrees with probabilities away from the clamp
    z = np.linspace(-4, 4, 61)
    assert float(bce_with_logits(z, t)) == pytest.approx(bce_loss(sigmoid(z), t), rel=1e-12)


def test_zero_network_outputs_half():
    params = init_params("plain", 10, 61, seed=0)
    for t in params.tensors():
        t[...] = 0
    out = forward(params, np.random.default_rng(0).standard_normal(20))
    np.testing.assert_array_equal(out, 0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 1e3))
def test_outputs_open_interval(seed, scale):
    params, Y, masks, _, A = small_problem("augmented", seed % 1000)
    X, _ = model_inputs(params, scale * Y, masks, masks.sum(1), A)
    p = sigmoid(forward_logits(params, X))
    assert np.all((p > 0) & (p < 1)) and np.all(np.isfinite(p))


def test_sigmoid_monotone_per_bin():
    z = np.linspace(-3, 3, 61)
    base = sigmoid(z)
    for m in (0, 30, 60):
        z2 = z.copy()
        z2[m] += 0.5
        out = sigmoid(z2)
        assert out[m] > base[m]
        np.testing.assert_array_equal(np.delete(out, m), np.delete(base, m))


def test_forward_deterministic():
    a = init_params("augmented", seed=5)
    b = init_params("augmented", seed=5)
    x = np.random.default_rng(1).standard_normal(a.input_width)
    np.testing.assert_array_equal(forward(a, x), forward(b, x))
    with pytest.raises(ShapeMismatch):
        forward(a, x[:-1])


def test_adam_zero_gradient_and_zero_lr():
    params = init_params("plain", 4, 5, trunk=SMALL_TRUNK, seed=2)
    before = [t.copy() for t in params.tensors()]
    opt = Adam(params.tensors(), lr=1e-2)
    for _ in range(3):
        opt.step(params.tensors(), [np.zeros_like(t) for t in params.tensors()])
    for a, b in zip(before, params.tensors()):
        np.testing.assert_array_equal(a, b)
    opt = Adam(params.tensors(), lr=0.0)
    opt.step(params.tensors(), [np.ones_like(t) for t in params.tensors()])
    for a, b in zip(before, params.tensors()):
        np.testing.assert_array_equal(a, b)


def test_adam_matches_reference_update():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(5)
    ref = p.copy()
    opt = Adam([p], lr=0.1)
    m = v = np.zeros(5)
    for t in range(1, 4):
        g = rng.standard_normal(5)
        opt.step([p], [g])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_parameter_counts():
    plain = init_params("plain", 10, 61)
    assert count_parameters(plain) == 2_838_077
    assert count_for("plain", 10, 61, 0) == 2_838_077
    aug = init_params("augmented", 10, 61, hidden=384)
    n = count_parameters(aug)
    assert n == count_for("augmented", 10, 61, 384) == 4_091_325
    assert 2_800_000 <= n <= 4_300_000
    # the count is linear in the augmentation width
    for H in (64, 256, 512):
        assert count_for("augmented", 10, 61, 2 * H) - count_for("augmented", 10, 61, H) == 2 * 10 * H + H + 2048 * H


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate) == (200, 1024, 1e-4)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(model="cnn")


@pytest.mark.parametrize("kind", ["augmented", "plain"])
def test_checkpoint_round_trip(kind):
    params = init_params(kind, 4, 5, hidden=6, trunk=SMALL_TRUNK, seed=3)
    params.metadata = {"best_epoch": 2, "note": "x", "loss": 0.1 + 0.2}
    blob = save_checkpoint(params)
    back = load_checkpoint(blob)
    for a, b in zip(params.tensors(), back.tensors()):
        np.testing.assert_array_equal(a, b)
    assert back.metadata == params.metadata
    assert save_checkpoint(back) == blob


def test_checkpoint_float32_round_trip():
    params = init_params("plain", 4, 5, trunk=SMALL_TRUNK, dtype=np.float32)
    back = load_checkpoint(save_checkpoint(params))
    assert back.dtype == np.float32
    assert save_checkpoint(back) == save_checkpoint(params)


def test_checkpoint_errors():
    params = init_params("plain", 4, 5, trunk=SMALL_TRUNK)
    blob = save_checkpoint(params)
    with pytest.raises(container.ContainerError, match="payload length"):
        load_checkpoint(blob[:-8])
    header, payload = container.unpack(blob, "sparsedoa-checkpoint", 1)
    header["parameter_count"] += 1
    with pytest.raises(container.ContainerError, match="parameters"):
        load_checkpoint(container.pack(header, payload))
    header["parameter_count"] -= 1
    header["version"] = 2
    with pytest.raises(container.ContainerError, match="version"):
        load_checkpoint(container.pack(header, payload))
    with pytest.raises(ShapeMismatch):
        load_checkpoint(blob, expected_grid_size=121)
