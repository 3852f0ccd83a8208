from __future__ import annotations

import numpy as np
import pytest

from replayguard import _accel, kernels
from replayguard.nnet import layers as L
from replayguard.nnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from replayguard.nnet.gradcheck import check_gradients
from replayguard.nnet.model import (
    BONAFIDE,
    backward,
    build_model,
    feature_maps,
    forward,
    head,
    parameter_breakdown,
    score_utterance,
)
from replayguard.nnet.train import (
    SGD,
    PlateauSchedule,
    TrainConfig,
    fit_length,
    make_minibatch,
    recalibrate_bn,
    train,
    train_step,
)


def tiny(dtype=np.float64, in_channels=1, seed=0):
    return build_model(in_channels, seed, "desk", dtype=dtype, channels=(4, 8), blocks=(1, 1))


def rand_input(B, C, T, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal((B, C, 512, T)).astype(dtype)


# --- architecture -----------------------------------------------------------


def test_table1_parameter_counts():
    m = build_model(1)
    assert abs(m.n_parameters() - 1.33e6) / 1.33e6 < 0.02
    rows = parameter_breakdown(m)
    assert rows["conv1"] == 144
    assert rows["fc"] == 128 * 32 + 32
    assert rows["res1"] == 13824 and rows["res2"] == 69120
    assert rows["res3"] == 423936 and rows["res4"] == 811008
    # a non-downsampling block holds two 3x3 convs; in units of 1024 weights
    # the table lists 4K, 18K, 72K and 288K per block
    per_block = [m.params[f"res{s}.1.conv1.w"].size + m.params[f"res{s}.1.conv2.w"].size for s in (1, 2, 3, 4)]
    assert [n // 1024 for n in per_block] == [4, 18, 72, 288]


def test_build_model_deterministic_and_checked():
    a, b = build_model(2, seed=5, preset="compact"), build_model(2, seed=5, preset="compact")
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.params["conv1.w"].shape == (4, 2, 3, 3)
    with pytest.raises(ValueError, match="in_channels"):
        build_model(3)
    with pytest.raises(ValueError, match="preset"):
        build_model(1, preset="huge")
    m = build_model(1, preset="desk")
    assert m.arch.channels == (8, 16, 32, 64) and m.arch.blocks == (2, 2, 2, 2)


def test_res4_output_shape():
    m = build_model(1, preset="table1")
    F, _ = feature_maps(m, rand_input(1, 1, 256, dtype=np.float32))
    assert F.shape == (1, 128, 64, 32)


def test_odd_length_uses_ceil():
    m = build_model(1, preset="compact")
    F, _ = feature_maps(m, rand_input(1, 1, 13, dtype=np.float32))
    assert F.shape[-2:] == (64, 2)


def test_zero_input_zero_head_gives_zero_logits():
    m = build_model(1, preset="compact")
    m.params["out.w"][:] = 0
    logits, _ = forward(m, np.zeros((1, 512, 40), np.float32))
    assert np.array_equal(logits, np.zeros((1, 2)))


def test_input_checks():
    m = build_model(1, preset="compact")
    with pytest.raises(ValueError, match="D=512"):
        forward(m, np.zeros((1, 1, 256, 40), np.float32))
    with pytest.raises(ValueError, match="at least 8 frames"):
        forward(m, np.zeros((1, 1, 512, 7), np.float32))
    with pytest.raises(ValueError, match="input channels"):
        forward(m, np.zeros((1, 2, 512, 40), np.float32))
    with pytest.raises(ValueError, match="mode"):
        forward(m, np.zeros((1, 512, 40), np.float32), "test")


# --- pooling ---------------------------------------------------------------


def test_gap_examples():
    F = np.zeros((1, 2, 2, 2))
    F[0, 0] = [[1, 2], [3, 4]]
    v, _ = L.gap_forward(F)
    assert v[0, 0] == 2.5
    c, _ = L.gap_forward(np.full((2, 3, 4, 5), 7.0))
    assert np.all(c == 7.0)
    a, _ = L.gap_forward(np.ones((1, 3, 4, 2)))
    b, _ = L.gap_forward(np.ones((1, 3, 4, 9)))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        L.gap_forward(np.zeros((1, 3, 0, 4)))


def test_head_invariant_to_spatial_permutation():
    m = build_model(1, preset="compact", dtype=np.float64)
    F, _ = feature_maps(m, rand_input(1, 1, 64))
    rng = np.random.default_rng(0)
    flat = F.reshape(1, F.shape[1], -1)
    Fp = flat[:, :, rng.permutation(flat.shape[-1])].reshape(F.shape)
    z1, _ = head(m, L.gap_forward(F)[0])
    z2, _ = head(m, L.gap_forward(Fp)[0])
    np.testing.assert_allclose(z1, z2, atol=1e-12)


@pytest.mark.parametrize("T", [16, 37, 150])
def test_variable_length_gives_two_logits(T):
    m = build_model(2, preset="compact")
    logits, _ = forward(m, rand_input(1, 2, T, dtype=np.float32))
    assert logits.shape == (1, 2) and np.all(np.isfinite(logits))


# --- gradients -------------------------------------------------------------


def test_finite_difference_gradients():
    m = tiny()
    r = check_gradients(m, rand_input(3, 1, 16, seed=1), np.array([0, 1, 1]), n_params=60, seed=2)
    assert set(r.names) == set(m.params)
    assert r.worst()[2] < 1e-4


def test_gradcheck_catches_a_wrong_gradient(monkeypatch):
    real = L.linear_backward

    def off_by_ten_percent(dy, cache):
        dx, dw, db = real(dy, cache)
        return dx, dw * 1.1, db

    monkeypatch.setattr(L, "linear_backward", off_by_ten_percent)
    r = check_gradients(tiny(), rand_input(2, 1, 16, seed=3), np.array([0, 1]), n_params=30, seed=0)
    assert r.worst()[2] > 0.05


def test_gradcheck_needs_float64():
    with pytest.raises(ValueError):
        check_gradients(tiny(np.float32), rand_input(2, 1, 16), np.array([0, 1]))


def test_cross_entropy_gradient():
    z = np.array([[1.0, -0.5], [0.2, 0.3]])
    y = np.array([0, 1])
    loss, d = L.softmax_cross_entropy(z, y)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[[0, 1], y])))
    np.testing.assert_allclose(d, (p - np.eye(2)[y]) / 2)


# --- kernels: numba and numpy paths agree ----------------------------------


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("shape", [(2, 3, 9, 11), (1, 4, 12, 8)])
def test_conv_backends_agree(monkeypatch, stride, shape):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((5, shape[1], 3, 3))
    y1, c1 = kernels.conv3x3_forward(x, w, stride)
    dy = rng.standard_normal(y1.shape)
    dx1, dw1 = kernels.conv3x3_backward(dy, c1, w, stride)
    monkeypatch.setattr(_accel, "USE_NUMBA", False)
    y2, c2 = kernels.conv3x3_forward(x, w, stride)
    dx2, dw2 = kernels.conv3x3_backward(dy, c2, w, stride)
    for a, b in ((y1, y2), (dx1, dx2), (dw1, dw2)):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_conv_matches_direct_definition():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    y, _ = kernels.conv3x3_forward(x, w, 2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(y, ref, atol=1e-12)


@pytest.mark.parametrize("relu", [False, True])
def test_batchnorm_backends_agree(monkeypatch, relu):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 5, 6))
    g, b = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
    dy = rng.standard_normal(x.shape)
    out1 = kernels.bn_train_forward(x, g, b, 1e-5, relu)
    back1 = kernels.bn_train_backward(dy, out1[1], out1[0], g, out1[4], relu)
    monkeypatch.setattr(_accel, "USE_NUMBA", False)
    out2 = kernels.bn_train_forward(x, g, b, 1e-5, relu)
    back2 = kernels.bn_train_backward(dy, out2[1], out2[0], g, out2[4], relu)
    for a, c in zip(out1 + back1, out2 + back2):
        np.testing.assert_allclose(a, c, atol=1e-10)


# --- training --------------------------------------------------------------


def test_zero_learning_rate_is_noop():
    m = tiny(np.float32)
    before = {k: v.copy() for k, v in m.params.items()}
    opt = SGD(m.params, 0.0)
    train_step(m, (rand_input(2, 1, 16, dtype=np.float32), np.array([0, 1])), opt)
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_sgd_momentum_on_quadratic():
    # loss = 0.5 * a * p^2, gradient a * p
    a, lr, mu, wd = 3.0, 0.1, 0.9, 1e-4
    p = {"p": np.array([2.0])}
    opt = SGD(p, lr, mu, wd)
    v = 0.0
    ref = 2.0
    for _ in range(3):
        g = a * p["p"].copy()
        opt.step(p, {"p": g})
        v = mu * v + a * ref + wd * ref
        ref = ref - lr * v
        assert p["p"][0] == pytest.approx(ref, abs=1e-15)


def test_fit_length_crop_and_wrap():
    rng = np.random.default_rng(0)
    f = np.arange(10.0)[None, None, :]
    assert fit_length(f, 10, rng) is f
    np.testing.assert_array_equal(fit_length(f, 25, rng)[0, 0], list(range(10)) * 2 + list(range(5)))
    crop = fit_length(np.arange(40.0)[None, None, :], 12, rng)[0, 0]
    assert len(crop) == 12 and np.all(np.diff(crop) == 1)


def test_minibatch_length_statistics():
    cfg = TrainConfig(batch_size=1)
    rng = np.random.default_rng(1)
    data = ([np.zeros((1, 4, 5))], [0])
    Ls = np.array([make_minibatch(data, cfg, rng)[2] for _ in range(10000)])
    assert Ls.min() >= 150 and Ls.max() <= 350
    assert abs(Ls.mean() - 250) < 3


def test_minibatch_shapes():
    cfg = TrainConfig(batch_size=3, min_frames=20, max_frames=20)
    feats = [np.ones((2, 512, n)) for n in (5, 20, 33, 40)]
    x, y, n = make_minibatch((feats, [0, 1, 0, 1]), cfg, np.random.default_rng(2))
    assert x.shape == (3, 2, 512, 20) and n == 20 and y.shape == (3,)


def test_plateau_schedule():
    s = PlateauSchedule(TrainConfig(plateau_patience=2))
    assert s.update(1.0) == 0.1
    assert s.update(0.9995) == 0.1
    assert s.update(0.9999) == 0.01
    assert s.update(0.5) == 0.01


def test_recalibration_sets_population_statistics():
    rng = np.random.default_rng(7)
    feats = [rng.standard_normal((1, 512, 24)) * 3.0 + 1.0 for _ in range(6)]
    m = tiny()
    cfg = TrainConfig(batch_size=6, min_frames=24, max_frames=24)
    assert recalibrate_bn(m, (feats, [0, 1] * 3), cfg, np.random.default_rng(0)) == 1
    y, _ = L.conv_forward(np.stack(feats), m.params["conv1.w"])
    np.testing.assert_allclose(m.buffers["bn1.mean"], y.mean(axis=(0, 2, 3)), rtol=1e-10)
    n = y.size // y.shape[1]
    np.testing.assert_allclose(m.buffers["bn1.var"], y.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-10)


def test_recalibration_averages_batches():
    feats = [np.full((1, 512, 16), float(v)) for v in (0, 0, 4, 4)]
    m = tiny()
    w = np.zeros_like(m.params["conv1.w"])
    w[:, 0, 1, 1] = 1.0  # identity centre tap: conv1 passes the input through
    m.params["conv1.w"][...] = w
    cfg = TrainConfig(batch_size=2, min_frames=16, max_frames=16)
    # whatever the batch order, every channel mean is averaged over the batches
    recalibrate_bn(m, (feats, [0, 1, 0, 1]), cfg, np.random.default_rng(1))
    np.testing.assert_allclose(m.buffers["bn1.mean"], 2.0)


def test_training_reduces_loss_and_is_reproducible():
    rng = np.random.default_rng(3)
    feats = [rng.standard_normal((1, 512, 24)) + (2.0 if i % 2 else 0.0) for i in range(8)]
    labels = [i % 2 for i in range(8)]
    cfg = TrainConfig(batch_size=4, min_frames=16, max_frames=24, epochs=4, seed=1, lr_schedule=(0.05,))
    runs = []
    for _ in range(2):
        m = tiny(np.float32)
        curve = train(m, (feats, labels), cfg)
        runs.append((curve, m))
    assert runs[0][0] == runs[1][0]
    assert runs[0][0][-1] < runs[0][0][0]
    assert all(np.array_equal(runs[0][1].params[k], runs[1][1].params[k]) for k in runs[0][1].params)


def test_non_finite_loss_reported():
    m = tiny(np.float32)
    m.params["out.w"][:] = np.nan
    with pytest.raises(FloatingPointError):
        train_step(m, (rand_input(2, 1, 16, dtype=np.float32), np.array([0, 1])), SGD(m.params, 0.1))


# --- scoring and checkpoints ------------------------------------------------


def test_score_kinds():
    m = build_model(1, preset="compact")
    m.params["out.w"][:] = 0
    x = np.zeros((1, 512, 16), np.float32)
    assert score_utterance(m, x) == pytest.approx(-np.log(2))
    assert score_utterance(m, x, "softmax") == pytest.approx(0.5)
    assert score_utterance(m, x, "logit") == 0.0
    m.params["out.b"][:] = [10.0, -10.0]
    assert score_utterance(m, x) == pytest.approx(-2.061e-9, rel=1e-3)
    with pytest.raises(ValueError):
        score_utterance(m, x, "prob")
    assert BONAFIDE == 0


def test_scoring_is_batch_free():
    m = build_model(1, preset="compact")
    rng = np.random.default_rng(4)
    a = rng.standard_normal((1, 512, 32)).astype(np.float32)
    b = rng.standard_normal((1, 512, 32)).astype(np.float32)
    alone, _ = forward(m, a[None])
    together, _ = forward(m, np.stack([a, b]))
    np.testing.assert_array_equal(alone[0], together[0])


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(2, seed=3, preset="compact")
    train_step(m, (rand_input(2, 2, 16, dtype=np.float32), np.array([0, 1])), SGD(m.params, 0.01))
    save_checkpoint(m, tmp_path / "m.arsn")
    back = load_checkpoint(tmp_path / "m.arsn")
    assert back.arch == m.arch
    for group in ("params", "buffers"):
        a, b = getattr(m, group), getattr(back, group)
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    x = rand_input(1, 2, 20, dtype=np.float32)
    assert score_utterance(m, x[0]) == score_utterance(back, x[0])


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "m.arsn"
    save_checkpoint(build_model(1, preset="compact"), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
