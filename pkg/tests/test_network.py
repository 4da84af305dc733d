"""Network assembly: spatial chains, end-to-end gradients on a miniature
configuration, weight-file round-trips and error classes, cache staleness."""

import numpy as np
import pytest

from conftest import max_rel_err
from mcseg import network, neural

MINI_SPEC = network.NetworkSpec(patch_size=9, conv_mode="same",
                                conv_widths=(2, 2, 3, 3, 4, 4))


def mini_weights(seed=0):
    return network.build_network(MINI_SPEC, seed=seed)


# ----------------------------------------------------------------- chains

def test_valid_chain_for_49_patch():
    spec = network.NetworkSpec(patch_size=49, conv_mode="valid")
    assert network.spatial_chain(spec) == [49, 47, 23, 21, 10, 8, 6, 4, 2]
    assert network.flatten_width(spec) == 64 * 2 * 2


def test_same_chain_for_49_patch():
    spec = network.NetworkSpec(patch_size=49, conv_mode="same")
    assert network.spatial_chain(spec) == [49, 49, 25, 25, 13, 13, 13, 13, 13]
    assert network.flatten_width(spec) == 64 * 13 * 13


def test_valid_chain_rejects_too_small_patch():
    with pytest.raises(ValueError):
        network.NetworkSpec(patch_size=41, conv_mode="valid")
    # 43 is the smallest odd size the valid chain survives
    assert network.spatial_chain(
        network.NetworkSpec(patch_size=43, conv_mode="valid"))[-1] == 1


def test_spec_validation():
    with pytest.raises(ValueError):
        network.NetworkSpec(patch_size=48)  # even
    with pytest.raises(ValueError):
        network.NetworkSpec(conv_mode="reflect")
    with pytest.raises(ValueError):
        network.NetworkSpec(conv_widths=(16, 16, 32))
    with pytest.raises(ValueError):
        network.NetworkSpec(dropout_keep=0.0)
    with pytest.raises(ValueError):
        network.NetworkSpec(class_count=1)


# ----------------------------------------------------------------- forward

def test_forward_shapes_and_probability_rows():
    w = mini_weights()
    x = np.random.default_rng(1).normal(size=(5, 1, 9, 9))
    probs, cache = network.forward(w, x)
    assert probs.shape == (5, 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert cache["phase"] == "infer"
    feats = network.penultimate_features(w, x)
    assert feats.shape == (5, network.HIDDEN_UNITS)
    probs2, feats2 = network.predict_with_features(w, x)
    assert np.array_equal(probs, probs2) and np.array_equal(feats, feats2)


def test_forward_validates_batch_shape_and_phase():
    w = mini_weights()
    with pytest.raises(ValueError):
        network.forward(w, np.zeros((2, 1, 7, 7)))
    with pytest.raises(ValueError):
        network.forward(w, np.zeros((2, 3, 9, 9)))
    with pytest.raises(ValueError):
        network.forward(w, np.zeros((2, 1, 9, 9)), phase="test")
    with pytest.raises(ValueError):  # dropout active but no rng
        network.forward(w, np.zeros((2, 1, 9, 9)), phase="train")


def test_build_network_deterministic():
    a, b = mini_weights(seed=5), mini_weights(seed=5)
    c = mini_weights(seed=6)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    assert any(not np.array_equal(a.params[n], c.params[n])
               for n in network.trainable_names(MINI_SPEC))


# ----------------------------------------------------------------- gradients

def test_full_network_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    batch = rng.normal(size=(3, 1, 9, 9))
    labels = np.eye(2)[[0, 1, 1]]
    base = mini_weights(seed=2)

    def loss_with(name, values):
        w = base.clone()
        w.params[name] = values
        probs, _ = network.forward(w, batch, phase="train",
                                   dropout_rng=np.random.default_rng(11))
        return neural.cross_entropy(probs, labels)[0]

    w = base.clone()
    probs, cache = network.forward(w, batch, phase="train",
                                   dropout_rng=np.random.default_rng(11))
    _, grad_scores = neural.cross_entropy(probs, labels)
    grads = network.backward(w, cache, grad_scores)

    assert set(grads) == set(network.trainable_names(MINI_SPEC))
    h = 1e-5
    for name in network.trainable_names(MINI_SPEC):
        param = base.params[name]
        numeric = np.zeros_like(param)
        flat_p = param.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            fp = loss_with(name, param)
            flat_p[i] = orig - h
            fm = loss_with(name, param)
            flat_p[i] = orig
            flat_n[i] = (fp - fm) / (2.0 * h)
        # biases feeding straight into batch norm have structurally zero
        # gradients, so pure relative error would divide noise by noise;
        # accept absolute agreement there and relative agreement elsewhere
        abs_err = float(np.abs(grads[name] - numeric).max(initial=0.0))
        err = max_rel_err(grads[name], numeric)
        assert abs_err < 1e-6 or err < 1e-3, \
            f"{name}: relative error {err:.2e}, absolute {abs_err:.2e}"


# ----------------------------------------------------------------- staleness

def test_backward_rejects_stale_and_foreign_caches():
    w = mini_weights()
    x = np.random.default_rng(3).normal(size=(2, 1, 9, 9))
    probs, cache = network.forward(w, x, phase="train",
                                   dropout_rng=np.random.default_rng(0))
    _, g = neural.cross_entropy(probs, np.eye(2)[[0, 1]])
    w.bump()  # weights were updated since the forward pass
    with pytest.raises(network.StaleCacheError):
        network.backward(w, cache, g)

    probs, cache = network.forward(w, x, phase="train",
                                   dropout_rng=np.random.default_rng(0))
    _, g = neural.cross_entropy(probs, np.eye(2)[[0, 1]])
    other = w.clone()  # same revision, different object
    with pytest.raises(network.StaleCacheError):
        network.backward(other, cache, g)
    assert network.backward(w, cache, g)  # original still fine


def test_backward_rejects_infer_cache():
    w = mini_weights()
    x = np.random.default_rng(4).normal(size=(2, 1, 9, 9))
    probs, cache = network.forward(w, x)
    _, g = neural.cross_entropy(probs, np.eye(2)[[0, 1]])
    with pytest.raises(ValueError):
        network.backward(w, cache, g)


# ----------------------------------------------------------------- weight file

def test_save_load_round_trip_bitwise_at_float32(tmp_path):
    w = mini_weights(seed=9)
    path = tmp_path / "mini.weights"
    network.save_weights(w, path)
    loaded = network.load_weights(path, expected_spec=MINI_SPEC)
    assert loaded.spec == MINI_SPEC
    w32 = w.astype(np.float32)
    for name in w.params:
        assert loaded.params[name].dtype == np.float32
        assert np.array_equal(loaded.params[name], w32.params[name]), name
    x = np.random.default_rng(5).normal(size=(3, 1, 9, 9)).astype(np.float32)
    probs_a, _ = network.forward(loaded, x)
    probs_b, _ = network.forward(w32, x)
    assert np.array_equal(probs_a, probs_b)


def test_second_save_is_byte_identical(tmp_path):
    w = mini_weights(seed=10)
    p1, p2 = tmp_path / "a.weights", tmp_path / "b.weights"
    network.save_weights(w, p1)
    network.save_weights(w, p2)
    assert p1.read_bytes() == p2.read_bytes()


def _saved_bytes(tmp_path):
    path = tmp_path / "w.weights"
    network.save_weights(mini_weights(), path)
    return bytearray(path.read_bytes()), path


def test_weight_file_error_classes(tmp_path):
    data, path = _saved_bytes(tmp_path)

    bad = bytearray(data)
    bad[:4] = b"JUNK"
    path.write_bytes(bad)
    with pytest.raises(network.BadMagicError):
        network.load_weights(path)

    bad = bytearray(data)
    bad[4] = 99  # little-endian version field
    path.write_bytes(bad)
    with pytest.raises(network.BadVersionError):
        network.load_weights(path)

    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(network.TruncatedFileError):
        network.load_weights(path)

    path.write_bytes(data[:10])  # shorter than the header
    with pytest.raises(network.TruncatedFileError):
        network.load_weights(path)

    path.write_bytes(bytes(data) + b"\x00\x00")
    with pytest.raises(network.WeightFileError):
        network.load_weights(path)

    path.write_bytes(bytes(data))
    other = network.NetworkSpec(patch_size=11, conv_mode="same",
                                conv_widths=(2, 2, 3, 3, 4, 4))
    with pytest.raises(network.SpecMismatchError):
        network.load_weights(path, expected_spec=other)
    # all parse failures share one catchable base class
    for exc in (network.BadMagicError, network.BadVersionError,
                network.TruncatedFileError, network.SpecMismatchError):
        assert issubclass(exc, network.WeightFileError)


def test_loaded_dropout_keep_survives_float32(tmp_path):
    spec = network.NetworkSpec(patch_size=9, conv_mode="same",
                               conv_widths=(2, 2, 3, 3, 4, 4),
                               dropout_keep=0.5)
    path = tmp_path / "w.weights"
    network.save_weights(network.build_network(spec), path)
    assert network.load_weights(path).spec.dropout_keep == 0.5
