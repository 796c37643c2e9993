import math

import numpy as np
import pytest

from tensorseg import backbone as bb

TINY = bb.BackboneConfig(input_size=(8, 8), num_classes=3, stage_channels=(3, 5), seed=0)


def rand_input(config, seed=0):
    rng = np.random.default_rng(seed)
    h, w = config.input_size
    return rng.uniform(0.0, 1.0, size=(h, w, config.in_channels))


def num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = f()
        flat[i] = orig - h
        lm = f()
        flat[i] = orig
        gf[i] = (lp - lm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# init


def test_init_deterministic():
    a = bb.init(TINY)
    b = bb.init(TINY)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_init_seed_changes_params():
    a = bb.init(TINY)
    b = bb.init(bb.BackboneConfig(**{**vars(TINY), "seed": 1}))
    assert any(not np.array_equal(a[k], b[k]) for k in a if k.endswith("_w"))


def test_init_rejects_indivisible_input():
    bad = bb.BackboneConfig(input_size=(100, 100), stage_channels=(4, 8, 16))
    with pytest.raises(ValueError):
        bb.init(bad)


def test_conv_plan_shapes():
    plan = bb.conv_plan(bb.BackboneConfig(num_classes=5, stage_channels=(16, 32, 64)))
    assert plan == [
        ("enc0", 1, 16), ("enc1", 16, 32), ("enc2", 32, 64),
        ("dec0", 64, 32), ("dec1", 32, 16), ("dec2", 16, 5),
    ]


# ---------------------------------------------------------------------------
# forward


def test_forward_probabilities_sum_to_one():
    params = bb.init(TINY)
    probs = bb.forward(params, rand_input(TINY), TINY)
    assert probs.shape == (8, 8, 3)
    assert np.abs(probs.sum(-1) - 1.0).max() < 1e-6
    assert probs.min() > 0.0


def test_forward_zero_final_layer_uniform():
    params = bb.init(TINY)
    params["dec1_w"][:] = 0.0
    params["dec1_b"][:] = 0.0
    probs = bb.forward(params, rand_input(TINY), TINY)
    assert np.allclose(probs, 1.0 / 3.0, atol=1e-7)


def test_forward_rejects_wrong_size():
    params = bb.init(TINY)
    with pytest.raises(ValueError):
        bb.forward(params, np.zeros((4, 4)), TINY)


# ---------------------------------------------------------------------------
# loss


def test_loss_zero_at_one_hot():
    target = np.array([[0, 1], [2, 1]])
    probs = np.zeros((2, 2, 3))
    np.put_along_axis(probs, target[..., None], 1.0, axis=-1)
    assert bb.loss(probs, target, np.ones(3)) == pytest.approx(0.0, abs=1e-12)


def test_loss_uniform_is_log_c():
    probs = np.full((4, 4, 5), 0.2)
    target = np.random.default_rng(0).integers(0, 5, (4, 4))
    assert bb.loss(probs, target, np.ones(5)) == pytest.approx(math.log(5), rel=1e-12)


def test_loss_linear_in_weights():
    rng = np.random.default_rng(1)
    probs = bb.softmax(rng.normal(size=(4, 4, 3)))
    target = rng.integers(0, 3, (4, 4))
    w = rng.uniform(0.5, 1.5, 3)
    assert bb.loss(probs, target, 2.0 * w) == pytest.approx(
        2.0 * bb.loss(probs, target, w), rel=1e-12
    )


def test_loss_rejects_out_of_range_target():
    probs = np.full((2, 2, 3), 1 / 3)
    with pytest.raises(ValueError):
        bb.loss(probs, np.full((2, 2), 3), np.ones(3))


# ---------------------------------------------------------------------------
# per-layer gradient checks (finite differences on projection losses)


def test_conv_layer_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4, 3))
    w = rng.normal(size=(3, 3, 3, 2)) * 0.5
    b = rng.normal(size=2)
    proj = rng.normal(size=(2, 4, 4, 2))

    def f():
        y, _ = bb.conv_forward(x, w, b)
        return float((y * proj).sum())

    _, cache = bb.conv_forward(x, w, b)
    dx, dw, db = bb.conv_backward(proj, cache)
    assert np.abs(dx - num_grad(f, x)).max() < 1e-7
    assert np.abs(dw - num_grad(f, w)).max() < 1e-7
    assert np.abs(db - num_grad(f, b)).max() < 1e-7


def test_relu_gradients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 4, 3)) + 0.05  # keep away from the kink
    proj = rng.normal(size=x.shape)

    def f():
        y, _ = bb.relu_forward(x)
        return float((y * proj).sum())

    _, cache = bb.relu_forward(x)
    dx = bb.relu_backward(proj, cache)
    assert np.abs(dx - num_grad(f, x)).max() < 1e-7


def test_maxpool_gradients():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 6, 2))
    proj = rng.normal(size=(2, 3, 3, 2))

    def f():
        y, _ = bb.maxpool_forward(x)
        return float((y * proj).sum())

    _, idx = bb.maxpool_forward(x)
    dx = bb.maxpool_backward(proj, idx)
    assert np.abs(dx - num_grad(f, x)).max() < 1e-7


def test_unpool_gradients():
    rng = np.random.default_rng(5)
    pooled_src = rng.normal(size=(2, 6, 6, 2))
    _, idx = bb.maxpool_forward(pooled_src)
    x = rng.normal(size=(2, 3, 3, 2))
    proj = rng.normal(size=(2, 6, 6, 2))

    def f():
        return float((bb.unpool_forward(x, idx) * proj).sum())

    dx = bb.unpool_backward(proj, idx)
    assert np.abs(dx - num_grad(f, x)).max() < 1e-7


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(1, 4, 4, 3))
    target = rng.integers(0, 3, size=(1, 4, 4))
    w = rng.uniform(0.5, 1.5, 3)

    def f():
        return bb.loss(bb.softmax(logits), target, w)

    probs = bb.softmax(logits)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, target[..., None], 1.0, -1)
    dlogits = (probs - onehot) * w[target][..., None] / target.size
    assert np.abs(dlogits - num_grad(f, logits)).max() < 1e-8


def test_unpool_is_left_inverse_at_argmax_positions():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 8, 8, 3))
    y, idx = bb.maxpool_forward(x)
    up = bb.unpool_forward(y, idx)
    # at every recorded argmax position the original value is reproduced
    view = bb._pool_view(x)
    upview = bb._pool_view(up)
    taken = np.take_along_axis(view, idx[:, :, :, None, :], axis=3)
    placed = np.take_along_axis(upview, idx[:, :, :, None, :], axis=3)
    assert np.array_equal(taken, placed)


# ---------------------------------------------------------------------------
# full-network gradient check


def test_full_network_gradient_check():
    assert bb.gradient_check() < 1e-4


def test_backward_deterministic():
    params = bb.init(TINY, dtype=np.float64)
    x = rand_input(TINY, seed=8)
    target = np.random.default_rng(8).integers(0, 3, TINY.input_size)
    w = np.ones(3)
    g1 = bb.backward(params, x, target, w, TINY)
    g2 = bb.backward(params, x, target, w, TINY)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_backward_zero_gradient_at_constructed_minimum():
    # drive the final conv to emit extreme one-hot-matching logits: the
    # softmax saturates and every gradient vanishes
    config = bb.BackboneConfig(input_size=(4, 4), num_classes=2, stage_channels=(2,), seed=0)
    params = bb.init(config, dtype=np.float64)
    params["dec0_w"][:] = 0.0
    params["dec0_b"][:] = np.array([60.0, -60.0])
    target = np.zeros((4, 4), dtype=np.int64)
    grads = bb.backward(params, rand_input(config, 9), target, np.ones(2), config)
    for k, g in grads.items():
        assert np.abs(g).max() < 1e-20, k


# ---------------------------------------------------------------------------
# optimizer


def test_adadelta_first_step_hand_oracle():
    params = {"w": np.zeros(1)}
    grads = {"w": np.ones(1)}
    state = bb.OptimizerState(rho=0.95, eps=1e-6, lr=1.0)
    bb.adadelta_step(params, grads, state)
    expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
    assert params["w"][0] == pytest.approx(expected, abs=1e-12)
    assert params["w"][0] == pytest.approx(-0.004472, abs=1e-6)
    assert state.eg2["w"][0] == pytest.approx(0.05, rel=1e-12)


def test_adadelta_zero_gradient_keeps_params():
    rng = np.random.default_rng(10)
    params = {"w": rng.normal(size=(3, 3))}
    before = params["w"].copy()
    state = bb.OptimizerState()
    state.eg2["w"] = np.full((3, 3), 0.5)
    state.edx2["w"] = np.full((3, 3), 0.25)
    bb.adadelta_step(params, {"w": np.zeros((3, 3))}, state)
    assert np.array_equal(params["w"], before)
    assert np.allclose(state.eg2["w"], 0.95 * 0.5)
    assert np.allclose(state.edx2["w"], 0.95 * 0.25)


def test_adadelta_step_opposes_gradient():
    rng = np.random.default_rng(11)
    params = {"w": np.zeros(32)}
    grads = {"w": rng.normal(size=32)}
    state = bb.OptimizerState()
    bb.adadelta_step(params, grads, state)
    nonzero = grads["w"] != 0
    assert np.all(np.sign(params["w"][nonzero]) == -np.sign(grads["w"][nonzero]))


def test_adadelta_first_step_magnitude_identity():
    rng = np.random.default_rng(12)
    g = rng.normal(size=16)
    params = {"w": np.zeros(16)}
    state = bb.OptimizerState()
    bb.adadelta_step(params, {"w": g.copy()}, state)
    rho, eps = state.rho, state.eps
    expected = np.sqrt(eps / ((1 - rho) * g * g + eps)) * np.abs(g)
    assert np.allclose(np.abs(params["w"]), expected, rtol=1e-12)


def test_adadelta_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        bb.adadelta_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, bb.OptimizerState())


def test_optimizer_state_validation():
    with pytest.raises(ValueError):
        bb.OptimizerState(rho=1.0)
    with pytest.raises(ValueError):
        bb.OptimizerState(eps=0.0)


# ---------------------------------------------------------------------------
# training


def overfit_records(config, n=4, seed=13):
    rng = np.random.default_rng(seed)
    h, w = config.input_size
    records = []
    for _ in range(n):
        x = rng.uniform(0, 1, size=(h, w))
        t = np.zeros((h, w), dtype=np.int64)
        r0, c0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
        t[r0 : r0 + 4, c0 : c0 + 4] = rng.integers(1, config.num_classes)
        x[r0 : r0 + 4, c0 : c0 + 4] += 0.8  # learnable signal
        records.append(bb.TrainRecord(input=np.clip(x, 0, 1.2), target=t))
    return records


def test_train_overfits_tiny_dataset():
    config = bb.BackboneConfig(input_size=(16, 16), num_classes=3, stage_channels=(6, 10), seed=5)
    records = overfit_records(config)
    params, history = bb.train(records, config, epochs=200, batch_size=4)
    assert len(history) == 200
    assert history[-1] < 0.05
    drops = sum(1 for a, b in zip(history, history[1:]) if b <= a + 1e-9)
    assert drops / (len(history) - 1) >= 0.9


def test_train_zero_epochs_returns_init():
    config = bb.BackboneConfig(input_size=(8, 8), num_classes=3, stage_channels=(3,), seed=5)
    records = overfit_records(config, n=2)
    params, history = bb.train(records, config, epochs=0)
    assert history == []
    fresh = bb.init(config)
    for k in fresh:
        assert np.array_equal(params[k], fresh[k])


def test_train_deterministic_history():
    config = bb.BackboneConfig(input_size=(8, 8), num_classes=3, stage_channels=(3,), seed=6)
    records = overfit_records(config, n=3)
    _, h1 = bb.train(records, config, epochs=5, batch_size=2)
    _, h2 = bb.train(records, config, epochs=5, batch_size=2)
    assert h1 == h2


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        bb.train([], TINY, epochs=1)


def test_train_raises_on_nonfinite_input():
    config = bb.BackboneConfig(input_size=(8, 8), num_classes=3, stage_channels=(3,), seed=7)
    records = overfit_records(config, n=2)
    records[0].input[0, 0] = np.nan
    with pytest.raises(bb.TrainingDivergedError):
        bb.train(records, config, epochs=2)


def test_median_frequency_weights():
    t1 = np.zeros((4, 4), dtype=np.int64)
    t1[0, 0] = 1  # class 1 rare
    records = [bb.TrainRecord(input=np.zeros((4, 4)), target=t1)]
    w = bb.median_frequency_weights(records, 3)
    assert w[2] == 0.0  # absent class
    assert w[1] > w[0] > 0  # rare class upweighted
    freq0, freq1 = 15 / 16, 1 / 16
    med = np.median([freq0, freq1])
    assert w[0] == pytest.approx(med / freq0)
    assert w[1] == pytest.approx(med / freq1)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    params = bb.init(TINY)
    echo = {"backbone": bb.config_to_dict(TINY), "note": "x"}
    path = tmp_path / "model.tstb"
    bb.save_checkpoint(path, params, echo)
    with open(path, "rb") as f:
        assert f.read(4) == b"TSTB"
    loaded, echo2 = bb.load_checkpoint(path)
    assert echo2["note"] == "x"
    assert loaded.keys() == params.keys()
    for k in params:
        assert np.array_equal(loaded[k], params[k])
    assert bb.config_from_dict(echo2["backbone"]) == TINY


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.tstb"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ValueError):
        bb.load_checkpoint(path)


def test_checkpoint_bytes_deterministic(tmp_path):
    params = bb.init(TINY)
    echo = {"backbone": bb.config_to_dict(TINY)}
    p1, p2 = tmp_path / "a.tstb", tmp_path / "b.tstb"
    bb.save_checkpoint(p1, params, echo)
    bb.save_checkpoint(p2, params, echo)
    assert p1.read_bytes() == p2.read_bytes()
