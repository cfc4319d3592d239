import numpy as np
import pytest

from saliencykit.gradcheck import check_network_params
from saliencykit.layers import Dense, Flatten
from saliencykit.network import Network, build_network, gapnet_layers, plainnet_layers
from saliencykit.training import TrainConfig, TrainingError, cross_entropy, predict, predict_batch, train_sgd


def _bright_side_toy(n_per_class=10, size=8, seed=0):
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in (0, 1):
        for _ in range(n_per_class):
            img = rng.uniform(0.0, 0.2, size=(1, size, size))
            half = slice(0, size // 2) if label == 0 else slice(size // 2, size)
            img[0, :, half] += rng.uniform(0.6, 0.8)
            images.append(img)
            labels.append(label)
    return np.array(images), np.array(labels)


def test_toy_set_is_linearly_separable():
    X, y = _bright_side_toy()
    # hand linear oracle: left-half mean minus right-half mean
    score = X[:, 0, :, :4].mean(axis=(1, 2)) - X[:, 0, :, 4:].mean(axis=(1, 2))
    assert np.all((score > 0) == (y == 0))


def test_toy_reaches_full_training_accuracy():
    X, y = _bright_side_toy()
    net = build_network(gapnet_layers(2), X.shape[1:], seed=0)
    net, losses = train_sgd(net, (X, y), TrainConfig(learning_rate=0.1, epochs=50, batch_size=4))
    assert len(losses) == 50
    assert losses[-1] <= losses[0]
    assert np.all(predict_batch(net, X)[0] == y)
    assert predict(net, X[3])[0] == y[3]


def test_zero_learning_rate_keeps_parameters():
    X, y = _bright_side_toy(4)
    net = build_network(gapnet_layers(2), X.shape[1:], seed=1)
    out, losses = train_sgd(net, (X, y), TrainConfig(learning_rate=0.0, epochs=3, batch_size=2))
    for (_, _, a), (_, _, b) in zip(net.parameter_arrays(), out.parameter_arrays()):
        assert a.tobytes() == b.tobytes()
    assert len(losses) == 3


def test_training_is_seed_reproducible():
    X, y = _bright_side_toy(6)
    cfg = TrainConfig(learning_rate=0.05, epochs=4, batch_size=3, seed=9, schedule="linear")
    runs = [train_sgd(build_network(gapnet_layers(2), X.shape[1:], seed=9), (X, y), cfg) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    for (_, _, a), (_, _, b) in zip(runs[0][0].parameter_arrays(), runs[1][0].parameter_arrays()):
        assert a.tobytes() == b.tobytes()


def test_only_parameter_values_change():
    X, y = _bright_side_toy(4)
    net = build_network(gapnet_layers(2), X.shape[1:], seed=0)
    out, _ = train_sgd(net, (X, y), TrainConfig(epochs=2, batch_size=4))
    assert out.layers == net.layers and out.input_shape == net.input_shape
    assert not np.array_equal(out.params[0]["weight"], net.params[0]["weight"])


def test_non_finite_loss_aborts_with_location():
    X, y = _bright_side_toy(2)
    X[1, 0, 0, 0] = np.inf
    net = build_network(gapnet_layers(2), X.shape[1:], seed=0)
    with pytest.raises(TrainingError, match=r"epoch 0, batch \d"):
        train_sgd(net, (X, y), TrainConfig(epochs=1, batch_size=2))


@pytest.mark.parametrize(
    "kw", [dict(learning_rate=-1), dict(epochs=0), dict(batch_size=0), dict(seed=-1), dict(schedule="cosine")]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_linear_schedule():
    cfg = TrainConfig(learning_rate=1.0, epochs=4, schedule="linear")
    assert [cfg.rate_at(e) for e in range(4)] == [1.0, 0.75, 0.5, 0.25]


def test_cross_entropy_of_uniform_logits():
    loss, grad = cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert abs(loss - np.log(4)) < 1e-15
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-16)


@pytest.mark.parametrize("arch", ["gapnet", "plainnet"])
def test_parameter_gradients_match_finite_differences(arch):
    shape = (1, 12, 12)
    layers = gapnet_layers(3) if arch == "gapnet" else plainnet_layers(shape, 3)
    for seed in range(3):
        result = check_network_params(build_network(layers, shape, seed=seed), seed)
        assert result.passed, result


def test_uniform_logits_predict_class_zero():
    net = Network(
        (Flatten(), Dense(4, 3)), ({}, {"weight": np.zeros((3, 4)), "bias": np.zeros(3)}), (1, 2, 2)
    )
    c, p = predict(net, np.ones((1, 2, 2)))
    assert c == 0 and abs(p - 1 / 3) < 1e-15
    with pytest.raises(ValueError):
        predict(net, np.ones((2, 1, 2, 2)))
