import numpy as np
import pytest

from usvfog.classifier.gradcheck import (
    SMALL_CONFIG,
    grad_check,
    grad_check_detail,
    matched_target_gradient_norm,
)
from usvfog.classifier.model import (
    Weights,
    WeightFileError,
    forward,
    load_weights,
    predict,
    save_weights,
)
from usvfog.classifier.network import (
    BlockSpec,
    NetworkConfig,
    depthwise_backward,
    depthwise_forward,
    forward_logits,
    init_params,
    pointwise_forward,
)
from usvfog.classifier.train import TrainParams, dataset_loss, train
from usvfog.harness.campaign import training_set


@pytest.fixture(scope="module")
def rand_scalograms():
    return np.random.default_rng(0).random((3, 6, 150, 192)).astype(np.float32)


def test_default_architecture():
    cfg = NetworkConfig()
    shapes = cfg.param_shapes()
    assert shapes["stem.w"] == (16, 6, 3, 3)
    assert shapes["block0.expand.w"] == (96, 16)
    assert shapes["block1.dw.w"] == (96, 3, 3)
    assert shapes["block3.project.w"] == (32, 144)
    assert shapes["head.w"] == (4, 32)
    assert [b.residual for b in cfg.blocks] == [False, False, True, False]
    assert 20_000 < cfg.n_params() < 60_000


def test_residual_requires_matching_shapes():
    with pytest.raises(ValueError):
        NetworkConfig(blocks=(BlockSpec(6, 16, 1), BlockSpec(6, 24, 2, residual=True)))


def test_zero_weights_uniform(rand_scalograms):
    p = forward(Weights.zeros(), rand_scalograms[0])
    np.testing.assert_array_equal(p, np.full(4, 0.25))


def test_probabilities_on_simplex(rand_scalograms):
    for seed in range(3):
        probs = predict(Weights.initial(seed=seed), rand_scalograms)
        assert probs.shape == (3, 4)
        assert np.all((probs >= 0) & (probs <= 1))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_forward_deterministic_and_batch_consistent(rand_scalograms):
    w = Weights.initial(seed=4)
    a = forward(w, rand_scalograms[1])
    b = forward(w, rand_scalograms[1])
    np.testing.assert_array_equal(a, b)
    batched = predict(w, rand_scalograms)
    np.testing.assert_allclose(batched[1], a, atol=1e-6)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ValueError):
        forward(Weights.initial(), np.zeros((6, 150, 191), np.float32))


def test_pointwise_conv_matches_dense_oracle():
    # 1x1 conv over a 2x2 image equals a block-diagonal dense matrix on the unrolled pixels
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 2, 3))
    w = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    out = pointwise_forward(x, w)
    dense = np.kron(np.eye(4), w)
    expect = (dense @ x.reshape(-1)).reshape(1, 2, 2, 2)
    np.testing.assert_allclose(out, expect, atol=1e-12)
    # by hand for the top-left pixel
    px = x[0, 0, 0]
    assert out[0, 0, 0, 0] == pytest.approx(px[0] - 2 * px[1] + 0.5 * px[2])


def test_single_pointwise_network_logits_by_hand():
    # fixture network: 1x1 conv (2 -> 2) then global average pool then affine head
    x = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.0, 1.0], [1.0, 0.0]]])  # (C=2, H=2, W=2)
    w = np.array([[1.0, 1.0], [2.0, -1.0]])
    head_w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]])
    head_b = np.array([0.0, 1.0, -1.0, 0.0])
    h = pointwise_forward(x.transpose(1, 2, 0)[None], w)
    logits = h.mean(axis=(1, 2)) @ head_w.T + head_b
    # channel means: x0 = 2.5, x1 = 0.5 -> conv means: (3.0, 4.5)
    np.testing.assert_allclose(logits[0], [3.0, 5.5, 6.5, -0.75])


def _grouped_dense_oracle(x, w, stride):
    """Brute-force dense convolution with an (out, in, 3, 3) kernel that is zero off the diagonal."""
    n, h, wd, c = x.shape
    dense = np.zeros((c, c, 3, 3))
    for ch in range(c):
        dense[ch, ch] = w[ch]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, c))
    for b in range(n):
        for o in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(3):
                            for d in range(3):
                                r, q = i * stride + a - 1, j * stride + d - 1
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += dense[o, ci, a, d] * x[b, r, q, ci]
                    out[b, i, j, o] = acc
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_matches_grouped_dense_oracle(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((2, 4, 4, 3))
    w = rng.standard_normal((3, 3, 3))
    np.testing.assert_allclose(depthwise_forward(x, w, stride), _grouped_dense_oracle(x, w, stride),
                               rtol=0, atol=1e-9)


def test_depthwise_backward_is_adjoint():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 5, 4, 3))
    w = rng.standard_normal((3, 3, 3))
    dout = rng.standard_normal(depthwise_forward(x, w, 2).shape)
    dx, dw = depthwise_backward(dout, x, w, 2)
    # <dout, D(x)> is linear in x and in w
    assert np.vdot(dout, depthwise_forward(x, w, 2)) == pytest.approx(np.vdot(dx, x))
    assert np.vdot(dout, depthwise_forward(x, w, 2)) == pytest.approx(np.vdot(dw, w))


def test_argmax_stable_under_head_scaling(rand_scalograms):
    w = Weights.initial(seed=2)
    base = np.argmax(predict(w, rand_scalograms), axis=1)
    for c in (0.1, 3.0, 50.0):
        t = dict(w.tensors)
        t["head.w"] = w.tensors["head.w"] * np.float32(c)
        t["head.b"] = w.tensors["head.b"] * np.float32(c)
        scaled = Weights(w.config, t)
        np.testing.assert_array_equal(np.argmax(predict(scaled, rand_scalograms), axis=1), base)


@pytest.mark.parametrize("seed", range(5))
def test_grad_check(seed):
    assert grad_check(SMALL_CONFIG, seed) < 1e-3


def test_grad_check_second_order():
    e1 = grad_check_detail(SMALL_CONFIG, 0, h=1e-4)
    e2 = grad_check_detail(SMALL_CONFIG, 0, h=2e-4)
    d1 = np.abs(e1.analytic - e1.numeric).max()
    d2 = np.abs(e2.analytic - e2.numeric).max()
    # central differences: halving h cuts truncation error by ~4
    assert 3.0 < d2 / d1 < 5.0


def test_matched_target_zero_gradient():
    assert matched_target_gradient_norm(SMALL_CONFIG, 0) < 1e-10


def test_weights_roundtrip(tmp_path):
    w = Weights.initial(seed=3)
    w.epochs, w.final_loss = 7, 0.125
    save_weights(w, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin", NetworkConfig())
    assert list(back.tensors) == list(w.tensors)
    for k in w.tensors:
        assert back.tensors[k].tobytes() == w.tensors[k].tobytes()
    assert (back.seed, back.epochs, back.final_loss) == (3, 7, 0.125)
    blob = (tmp_path / "w.bin").read_bytes()
    assert blob[:4] == b"MNV2" and blob[4:6] == b"\x01\x00"
    assert blob[6:38] == NetworkConfig().config_hash()


def test_truncated_weight_file(tmp_path):
    save_weights(Weights.initial(), tmp_path / "w.bin")
    blob = (tmp_path / "w.bin").read_bytes()
    for cut in (3, 20, 100, len(blob) - 1):
        (tmp_path / "t.bin").write_bytes(blob[:cut])
        with pytest.raises(WeightFileError) as err:
            load_weights(tmp_path / "t.bin")
        assert err.value.field


def test_config_hash_mismatch(tmp_path):
    save_weights(Weights.initial(SMALL_CONFIG), tmp_path / "w.bin")
    with pytest.raises(WeightFileError) as err:
        load_weights(tmp_path / "w.bin", NetworkConfig())
    assert err.value.field == "config_hash"


def test_tampered_hash_rejected(tmp_path):
    save_weights(Weights.initial(), tmp_path / "w.bin")
    blob = bytearray((tmp_path / "w.bin").read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / "w.bin").write_bytes(bytes(blob))
    with pytest.raises(WeightFileError, match="config_hash"):
        load_weights(tmp_path / "w.bin")


def test_weights_reject_non_finite():
    t = init_params(NetworkConfig(), 0)
    t["head.b"][0] = np.nan
    with pytest.raises(ValueError):
        Weights(NetworkConfig(), t)


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train(np.zeros((0, 6, 150, 192)), np.zeros(0, int))
    with pytest.raises(ValueError):
        train(np.zeros((1, 6, 150, 192)), np.array([4]))


SMALL_TRAIN = TrainParams(lr=0.05, epochs=150, batch=8, seed=0)


def _small_inputs(n, seed):
    return np.random.default_rng(seed).random((n, 6, 10, 12)).astype(np.float32)


def test_single_sample_is_learned():
    x = _small_inputs(1, 1)
    w = train(x, np.array([2]), SMALL_TRAIN, config=SMALL_CONFIG)
    _, acc = dataset_loss(w, x, np.array([2]))
    assert acc == 1.0


def test_conflicting_labels_cap_accuracy():
    x = np.repeat(_small_inputs(1, 2), 2, axis=0)
    y = np.array([0, 1])
    w = train(x, y, SMALL_TRAIN, config=SMALL_CONFIG)
    _, acc = dataset_loss(w, x, y)
    assert acc <= 0.5


def test_train_is_deterministic():
    x = _small_inputs(6, 3)
    y = np.array([0, 1, 2, 3, 0, 1])
    hp = TrainParams(lr=0.05, epochs=3, batch=4, seed=5)
    a = train(x, y, hp, config=SMALL_CONFIG)
    b = train(x, y, hp, config=SMALL_CONFIG)
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes()
    assert a.final_loss == b.final_loss


def test_overfit_twenty_scalograms():
    x, y = training_set(per_class=5, seed=77)
    assert len(y) == 20
    w = train(x, y, TrainParams(lr=0.01, epochs=200, batch=8, seed=0))
    assert w.final_loss < 0.1
    assert w.epochs == 200
