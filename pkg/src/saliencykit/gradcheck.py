"""Finite-difference verification of every analytic gradient in the engine.

Each case compares an analytic gradient against central differences and
reports the largest elementwise relative error, with the denominator
``max(|a|, |b|, 1e-8)``.

Inputs are drawn away from non-differentiable points: a case is resampled
while any ReLU pre-activation lies within ``margin`` of zero or any max-pool
window has its two largest entries within ``margin`` of each other. A central
difference straddling such a kink measures a one-sided slope average, not the
derivative, so comparing there would test the sampler rather than the code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool2D, ReLU
from .network import (
    backprop,
    build_network,
    forward_batch,
    gapnet_layers,
    network_forward,
    plainnet_layers,
    backward_from_class,
    finite_difference_gradient,
)

STEP = 1e-5
TOLERANCE = 1e-4
MARGIN = 1e-3
MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_error: float
    n_values: int
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def norm_relative_error(analytic, numeric):
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def central_difference(fn, x, step=STEP):
    """Gradient of scalar ``fn`` at ``x`` by central differences; ``x`` is restored."""
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def _near_kink(layer, x, margin):
    if isinstance(layer, ReLU):
        return bool(np.any(np.abs(x) < margin))
    if isinstance(layer, MaxPool2D):
        win = layer._windows(x)
        flat = np.sort(win.reshape(*win.shape[:4], -1), axis=-1)
        # ties among ReLU-clamped zeros carry no gradient either way
        close = (flat[..., -1] - flat[..., -2] < margin) & (flat[..., -1] != 0.0)
        return bool(np.any(close))
    return False


def kink_free(layers, params, x, margin=MARGIN):
    """True when no ReLU or max-pool input in the forward pass of ``x`` sits near a kink."""
    a = x
    for layer, p in zip(layers, params):
        if _near_kink(layer, a, margin):
            return False
        a = layer.forward(a, p)
    return True


# ---------------------------------------------------------------------------
# single layers


def _layer_cases():
    """Small layer configurations with their (C, H, W) or (F,) input shapes."""
    return [
        (Conv2D(2, 3, 3), (2, 5, 5)),
        (Conv2D(1, 2, 3, stride=2, padding=1), (1, 6, 6)),
        (Conv2D(2, 2, 2, stride=1, padding=1), (2, 4, 3)),
        (ReLU(), (2, 4, 4)),
        (ReLU(), (7,)),
        (MaxPool2D(2), (2, 4, 4)),
        (MaxPool2D(3, 2), (1, 7, 5)),
        (GlobalAvgPool(), (3, 4, 5)),
        (Flatten(), (2, 3, 3)),
        (Dense(6, 4), (6,)),
    ]


def _random_params(layer, rng):
    return {k: rng.normal(size=s) for k, s in layer.param_shapes().items()}


def check_layer(layer, input_shape, seed, step=STEP, margin=MARGIN):
    """Check input and parameter gradients of ``sum(r * layer(x))`` for a random ``r``."""
    rng = np.random.default_rng(seed)
    params = _random_params(layer, rng)
    for _ in range(MAX_RESAMPLES):
        x = rng.normal(size=(1, *input_shape))
        if kink_free([layer], [params], x, margin):
            break
    else:
        raise RuntimeError(f"could not draw a kink-free input for {layer}")
    out = layer.forward(x, params)
    r = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(r * layer.forward(x, params)))

    gx, gp = layer.backward(x, out, params, r)
    errors = [relative_error(gx, central_difference(loss, x, step))]
    n = x.size
    for name, value in params.items():
        errors.append(relative_error(gp[name], central_difference(loss, value, step)))
        n += value.size
    return CheckResult(f"{type(layer).__name__}{input_shape}", seed, max(errors), n)


# ---------------------------------------------------------------------------
# whole networks


def _kink_free_input(network, rng, margin):
    params = list(network.params)
    for _ in range(MAX_RESAMPLES):
        x = rng.uniform(0.0, 1.0, size=(1, *network.input_shape))
        if kink_free(network.layers, params, x, margin):
            return x[0]
    raise RuntimeError("could not draw a kink-free network input")


def check_network_input(network, seed, step=STEP, margin=MARGIN, source="logit"):
    """Input gradient of one class score against :func:`finite_difference_gradient`."""
    rng = np.random.default_rng(seed)
    x = _kink_free_input(network, rng, margin)
    c = int(rng.integers(network.n_classes))
    trace = network_forward(network, x)
    analytic = backward_from_class(trace, c, source=source)
    numeric = finite_difference_gradient(network, x, c, step=step, source=source)
    return CheckResult(f"input-grad/{source}", seed, relative_error(analytic, numeric), x.size)


def check_network_params(network, seed, step=STEP, margin=MARGIN, batch=3):
    """Parameter gradients of mean cross-entropy, the quantity training descends.

    Errors here are per tensor, ``|a - b| / max(|a|, |b|, 1e-8)`` in the
    Euclidean norm: individual weight gradients can be ~1e-8, below what a
    central difference of an O(1) loss resolves in float64.
    """
    from .training import cross_entropy

    rng = np.random.default_rng(seed)
    xs = np.stack([_kink_free_input(network, rng, margin) for _ in range(batch)])
    labels = rng.integers(network.n_classes, size=batch)
    params = [{k: v.copy() for k, v in p.items()} for p in network.params]
    acts = forward_batch(network, xs)
    _, top = cross_entropy(acts[-1], labels)
    _, analytic = backprop(network, acts, top, need_params=True, need_input=False)

    def loss():
        a = xs
        for layer, p in zip(network.layers, params):
            a = layer.forward(a, p)
        return cross_entropy(a, labels)[0]

    errors, n = [], 0
    for p, g in zip(params, analytic):
        for name, value in p.items():
            errors.append(norm_relative_error(g[name], central_difference(loss, value, step)))
            n += value.size
    return CheckResult("param-grad/cross-entropy", seed, max(errors), n)


NETWORK_INPUT_SHAPE = (1, 12, 12)


def run_gradcheck(seed=0, layer_repeats=8, network_repeats=12, step=STEP, margin=MARGIN):
    """Run the full battery; returns a list of :class:`CheckResult`.

    The default sizes give 80 layer cases and 48 whole-network input-gradient
    cases (logit and probability sources on both architectures).
    """
    ss = np.random.SeedSequence(seed)
    seeds = iter(int(s.generate_state(1)[0]) for s in ss.spawn(10_000))
    results = []
    for layer, shape in _layer_cases():
        for _ in range(layer_repeats):
            results.append(check_layer(layer, shape, next(seeds), step, margin))
    for name, layers in (
        ("gapnet", gapnet_layers(3)),
        ("plainnet", plainnet_layers(NETWORK_INPUT_SHAPE, 3)),
    ):
        for _ in range(network_repeats):
            s = next(seeds)
            net = build_network(layers, NETWORK_INPUT_SHAPE, seed=s)
            for res in (
                check_network_input(net, s, step, margin),
                check_network_input(net, s, step, margin, source="probability"),
            ):
                results.append(CheckResult(f"{name}/{res.name}", s, res.max_error, res.n_values))
    return results
