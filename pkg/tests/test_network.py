import numpy as np
import pytest

from saliencykit.layers import Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool2D, ReLU, ShapeError
from saliencykit.network import (
    Network,
    backward_from_class,
    build_network,
    finite_difference_gradient,
    gapnet_layers,
    network_forward,
    permute_channels,
    plainnet_layers,
)
from saliencykit.training import predict


def _net(layers, input_shape, params):
    return Network(tuple(layers), tuple(params), input_shape)


def test_zero_dense_gives_uniform_probabilities():
    net = _net([Flatten(), Dense(4, 2)], (1, 2, 2), [{}, {"weight": np.zeros((2, 4)), "bias": np.zeros(2)}])
    trace = network_forward(net, np.random.default_rng(3).normal(size=(1, 2, 2)))
    assert trace.logits.tolist() == [0.0, 0.0]
    assert trace.probabilities.tolist() == [0.5, 0.5]


def test_identity_network_keeps_input_bitwise():
    net = _net([Flatten()], (3,), [{}])
    x = np.array([0.1, -2.5, 7.0])
    trace = network_forward(net, x)
    assert np.array_equal(trace.activation(0), x)
    assert np.array_equal(trace.activation(-1), x)


def test_forward_matches_scalar_loops():
    net = build_network([Conv2D(1, 2, 2), ReLU(), Flatten(), Dense(8, 3)], (1, 3, 3), seed=0)
    x = np.random.default_rng(0).normal(size=(1, 3, 3))
    w1, b1 = net.params[0]["weight"], net.params[0]["bias"]
    feat = []
    for o in range(2):
        for i in range(2):
            for j in range(2):
                acc = b1[o]
                for di in range(2):
                    for dj in range(2):
                        acc += w1[o, 0, di, dj] * x[0, i + di, j + dj]
                feat.append(max(acc, 0.0))
    w2, b2 = net.params[3]["weight"], net.params[3]["bias"]
    logits = [b2[c] + sum(w2[c, k] * feat[k] for k in range(8)) for c in range(3)]
    np.testing.assert_allclose(network_forward(net, x).logits, logits, rtol=1e-13)


def test_trace_invariants_and_purity(rng):
    net = build_network(gapnet_layers(4), (1, 16, 16), seed=2)
    x = rng.uniform(size=(1, 16, 16))
    t1, t2 = network_forward(net, x), network_forward(net, x)
    assert abs(t1.probabilities.sum() - 1) < 1e-9
    assert np.all((t1.probabilities >= 0) & (t1.probabilities <= 1))
    for a, b in zip(t1.activations, t2.activations):
        assert np.array_equal(a, b)
    batch = network_forward(net, rng.uniform(size=(5, 1, 16, 16)))
    np.testing.assert_allclose(batch.probabilities.sum(axis=1), 1.0, atol=1e-9)


def test_shape_inconsistency_rejected_before_compute():
    with pytest.raises(ShapeError):
        network_forward(build_network(gapnet_layers(2), (1, 16, 16)), np.zeros((1, 15, 16)))


def test_linear_gradient_is_weight_row():
    w = np.arange(8.0).reshape(2, 4)
    net = _net([Flatten(), Dense(4, 2)], (1, 2, 2), [{}, {"weight": w, "bias": np.zeros(2)}])
    g = backward_from_class(network_forward(net, np.ones((1, 2, 2))), 1)
    assert np.array_equal(g, w[1].reshape(1, 2, 2))


def test_relu_only_network_on_negative_input_has_zero_gradient():
    net = _net([ReLU()], (3,), [{}])
    g = backward_from_class(network_forward(net, np.array([-1.0, -2.0, -0.5])), 0)
    assert np.array_equal(g, np.zeros(3))


def test_layer_target_gradient_and_spatial_check(rng):
    net = build_network(gapnet_layers(3), (1, 16, 16), seed=1)
    trace = network_forward(net, rng.uniform(size=(1, 16, 16)))
    g = backward_from_class(trace, 0, target=4, spatial=True)
    assert g.shape == net.shapes[5]
    with pytest.raises(ShapeError):
        backward_from_class(trace, 0, target=5, spatial=True)
    with pytest.raises(IndexError):
        backward_from_class(trace, 7)


def test_probability_source_matches_chain_rule(rng):
    net = build_network(gapnet_layers(3), (1, 16, 16), seed=4)
    trace = network_forward(net, rng.uniform(size=(1, 16, 16)))
    p = trace.probabilities
    expected = sum(
        p[1] * ((1.0 if k == 1 else 0.0) - p[k]) * backward_from_class(trace, k) for k in range(3)
    )
    np.testing.assert_allclose(backward_from_class(trace, 1, source="probability"), expected, atol=1e-14)


def test_finite_difference_examples():
    w = np.array([[3.0], [0.0]])
    net = _net([Dense(1, 2)], (1,), [{"weight": w, "bias": np.zeros(2)}])
    for x in (-2.0, 0.3, 11.0):
        assert abs(finite_difference_gradient(net, np.array([x]), 0)[0] - 3.0) < 1e-9
    const = _net([Flatten(), Dense(4, 2)], (1, 2, 2), [{}, {"weight": np.zeros((2, 4)), "bias": np.ones(2)}])
    assert np.array_equal(finite_difference_gradient(const, np.ones((1, 2, 2)), 1), np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        finite_difference_gradient(net, np.array([1.0]), 0, step=0.0)


def test_seed0_cnn_agrees_with_backward():
    from saliencykit.gradcheck import relative_error

    net = build_network(gapnet_layers(3), (1, 12, 12), seed=0)
    x = np.random.default_rng(0).uniform(size=(1, 12, 12))
    analytic = backward_from_class(network_forward(net, x), 2)
    assert relative_error(analytic, finite_difference_gradient(net, x, 2)) < 1e-4


def test_build_network_is_seeded():
    a = build_network(gapnet_layers(4), (1, 64, 64), seed=7)
    b = build_network(gapnet_layers(4), (1, 64, 64), seed=7)
    for (_, _, x), (_, _, y) in zip(a.parameter_arrays(), b.parameter_arrays()):
        assert x.tobytes() == y.tobytes()
    c = build_network(gapnet_layers(4), (1, 64, 64), seed=8)
    assert a.params[0]["weight"].tobytes() != c.params[0]["weight"].tobytes()


def test_init_scale_is_fan_in_bounded():
    net = build_network(gapnet_layers(4), (1, 64, 64), seed=0)
    for layer, p in zip(net.layers, net.params):
        if p:
            assert np.abs(p["weight"]).max() <= np.sqrt(6.0) / np.sqrt(layer.fan_in)


def test_build_network_shape_checks():
    build_network([Flatten(), Dense(4, 2)], (1, 2, 2))
    with pytest.raises(ShapeError, match="layer 1"):
        build_network([Flatten(), Dense(5, 2)], (1, 2, 2))
    with pytest.raises(ValueError):
        build_network([], (1, 2, 2))
    with pytest.raises(ShapeError):
        build_network([Flatten(), Dense(4, 1)], (1, 2, 2))  # m >= 2


def test_gapnet_final_map_is_8x8():
    net = build_network(gapnet_layers(4), (1, 64, 64))
    assert net.shapes[5] == (16, 8, 8)
    assert build_network(plainnet_layers((1, 64, 64), 4), (1, 64, 64)).layers[-1].in_features == 16 * 64


def test_parameters_are_read_only():
    net = build_network(gapnet_layers(2), (1, 16, 16))
    with pytest.raises(ValueError):
        net.params[0]["weight"][0, 0, 0, 0] = 1.0


def test_permute_identity_is_bitwise_equal():
    net = build_network(gapnet_layers(3), (1, 16, 16), seed=5)
    same = permute_channels(net, 0, np.arange(8))
    for (_, _, a), (_, _, b) in zip(net.parameter_arrays(), same.parameter_arrays()):
        assert a.tobytes() == b.tobytes()


def test_swap_two_channels_preserves_logits(rng):
    layers = [Conv2D(1, 2, 3), ReLU(), MaxPool2D(2), Conv2D(2, 3, 3), ReLU(), GlobalAvgPool(), Dense(3, 2)]
    net = build_network(layers, (1, 10, 10), seed=0)
    swapped = permute_channels(net, 0, [1, 0])
    xs = rng.uniform(size=(100, 1, 10, 10))
    assert np.max(np.abs(network_forward(net, xs).logits - network_forward(swapped, xs).logits)) <= 1e-12


@pytest.mark.parametrize("arch", ["gapnet", "plainnet"])
@pytest.mark.parametrize("layer_index", [0, 3])
def test_random_permutations_preserve_predictions(rng, arch, layer_index):
    shape = (1, 16, 16)
    layers = gapnet_layers(4) if arch == "gapnet" else plainnet_layers(shape, 4)
    net = build_network(layers, shape, seed=3)
    c = net.layers[layer_index].out_channels
    perm = rng.permutation(c)
    other = permute_channels(net, layer_index, perm)
    assert not np.array_equal(other.params[layer_index]["weight"], net.params[layer_index]["weight"])
    for x in rng.uniform(size=(20, *shape)):
        c1, p1 = predict(net, x)
        c2, p2 = predict(other, x)
        assert c1 == c2 and abs(p1 - p2) <= 1e-12


def test_permute_rejections():
    net = build_network(gapnet_layers(3), (1, 16, 16))
    with pytest.raises(ValueError):
        permute_channels(net, 0, [0, 1, 2])
    with pytest.raises(ValueError):
        permute_channels(net, 0, [0, 0, 1, 2, 3, 4, 5, 6])
    with pytest.raises(TypeError):
        permute_channels(net, 1, np.arange(8))
