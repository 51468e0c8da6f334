import io

import numpy as np
import pytest

from e2esv import nn, phonetic


def gaussian_classes(seed, per_class=200, sep=5.0):
    rng = np.random.default_rng(seed)
    means = sep * rng.standard_normal((10, 38))
    y = np.repeat(np.arange(10), per_class)
    X = means[y] + rng.standard_normal((y.size, 38))
    return X, y, means


@pytest.fixture(scope="module")
def trained():
    X, y, means = gaussian_classes(0)
    return phonetic.train_phonetic(X, y, epochs=10, seed=0), X, y, means


def test_class_table():
    assert phonetic.PHONEMES == ("hh", "ey", "k", "ao", "r", "t", "aa", "n", "er", "garbage")
    assert phonetic.GARBAGE == 9


def test_separable_accuracy(trained):
    model, X, y, means = trained
    # nearest class mean is the reference classifier for this data
    d = ((X[:, None, :] - means[None]) ** 2).sum(-1)
    oracle_acc = (d.argmin(1) == y).mean()
    assert oracle_acc > 0.99
    acc = (model.posteriors(X).argmax(1) == y).mean()
    assert acc > 0.95
    assert model.final_loss < model.initial_loss


def test_cluster_centre_argmax(trained):
    model, _, _, means = trained
    assert np.all(model.posteriors(means).argmax(1) == np.arange(10))


def test_single_class():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((1000, 38))
    model = phonetic.train_phonetic(X, np.full(1000, 4), epochs=40, seed=0)
    assert model.posteriors(X)[:, 4].min() > 0.99


def test_zero_epochs_unchanged():
    X, y, _ = gaussian_classes(2, per_class=5)
    init = phonetic.init_phonetic(3)
    before = {k: t.data.copy() for k, t in init.params.items()}
    out = phonetic.train_phonetic(X, y, epochs=0, seed=3)
    for k, t in out.params.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_rows_are_distributions():
    model = phonetic.init_phonetic(0)
    x = np.random.default_rng(0).standard_normal((50, 38)) * 100
    p = phonetic.posteriors(model, x)
    assert p.shape == (50, 10)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-9)


def test_bottleneck_recomposition(trained):
    model, X, _, _ = trained
    p = model.params
    a1 = 1 / (1 + np.exp(-(X[:20] @ p["l1.W"].data.T + p["l1.b"].data)))
    a2 = 1 / (1 + np.exp(-(a1 @ p["l2.W"].data.T + p["l2.b"].data)))
    b = phonetic.bottleneck(model, X[:20])
    assert b.shape == (20, 64)
    assert np.max(np.abs(1 / (1 + np.exp(-b)) - a2)) < 1e-12


def test_zero_weight_bottleneck_is_bias():
    model = phonetic.init_phonetic(0)
    for k, t in model.params.items():
        t.data[...] = 0.0
    model.params["l2.b"].data[:] = np.linspace(-1, 1, 64)
    b = model.bottleneck(np.random.default_rng(0).standard_normal((3, 38)))
    np.testing.assert_array_equal(b, np.tile(np.linspace(-1, 1, 64), (3, 1)))


def test_identical_frames_identical_rows():
    model = phonetic.init_phonetic(0)
    x = np.tile(np.random.default_rng(0).standard_normal(38), (2, 1))
    b = model.bottleneck(x)
    assert b[0].tobytes() == b[1].tobytes()


def test_shape_errors():
    model = phonetic.init_phonetic(0)
    with pytest.raises(nn.ShapeError):
        model.posteriors(np.zeros((4, 13)))
    with pytest.raises(nn.ShapeError):
        model.bottleneck(np.zeros((4, 13)))


def test_training_errors():
    with pytest.raises(ValueError, match="empty"):
        phonetic.train_phonetic(np.zeros((0, 38)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError, match="label"):
        phonetic.train_phonetic(np.zeros((3, 38)), np.array([0, 1, 10]))


def test_deterministic_training():
    X, y, _ = gaussian_classes(4, per_class=30)
    a = phonetic.train_phonetic(X, y, epochs=2, seed=5)
    b = phonetic.train_phonetic(X, y, epochs=2, seed=5)
    for k in phonetic.PARAM_NAMES:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_per_utterance_lists_equal_stacked():
    X, y, _ = gaussian_classes(5, per_class=10)
    a = phonetic.train_phonetic([X[:40], X[40:]], [y[:40], y[40:]], epochs=1, seed=0)
    b = phonetic.train_phonetic(X, y, epochs=1, seed=0)
    for k in phonetic.PARAM_NAMES:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_file_round_trip(tmp_path, trained):
    model = trained[0]
    phonetic.save(model, tmp_path / "m.e2ep")
    assert (tmp_path / "m.e2ep").read_bytes()[:4] == b"E2EP"
    back = phonetic.load(tmp_path / "m.e2ep")
    for k in phonetic.PARAM_NAMES:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
    x = np.random.default_rng(0).standard_normal((5, 38))
    assert back.posteriors(x).tobytes() == model.posteriors(x).tobytes()


def test_missing_tensor_rejected():
    buf = io.BytesIO()
    buf.write(b"E2EP")
    nn.write_u32(buf, 1)
    nn.write_named(buf, [("l1.W", np.zeros((128, 38)))])
    buf.seek(0)
    with pytest.raises(ValueError, match="lacks"):
        phonetic.from_stream(buf)


def test_frozen_receives_no_gradient():
    model = phonetic.init_phonetic(0).freeze()
    x = np.random.default_rng(0).standard_normal((4, 38))
    with nn.Tape() as tape:
        logits, _ = model.forward(x)
        assert not logits.requires_grad
    assert all(t.grad is None for _, t in model.params.items())
