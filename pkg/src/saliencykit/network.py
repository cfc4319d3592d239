"""Network container, forward traces and class-score gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    ReLU,
    ShapeError,
    softmax,
)


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def infer_shapes(layers, input_shape):
    """Return the activation shape after each layer, input shape first.

    Raises :class:`ShapeError` naming the first layer whose input does not fit.
    """
    shapes = [tuple(int(s) for s in input_shape)]
    for i, layer in enumerate(layers):
        try:
            shapes.append(tuple(int(s) for s in layer.output_shape(shapes[-1])))
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
    return shapes


@dataclass(frozen=True, eq=False)
class Network:
    """An immutable layer chain with its parameters.

    ``params[i]`` holds ``{"weight": ..., "bias": ...}`` for parameterized
    layers and is an empty dict otherwise.
    """

    layers: tuple
    params: tuple
    input_shape: tuple
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        if len(self.params) != len(layers):
            raise ValueError("one parameter dict per layer is required")
        shapes = infer_shapes(layers, self.input_shape)
        out = shapes[-1]
        if len(out) != 1 or out[0] < 2:
            raise ShapeError(f"final layer must emit m >= 2 logits, got shape {out}")
        params = []
        for i, (layer, p) in enumerate(zip(layers, self.params)):
            expected = layer.param_shapes()
            p = dict(p or {})
            if set(p) != set(expected):
                raise ValueError(f"layer {i}: expected parameters {sorted(expected)}, got {sorted(p)}")
            frozen = {}
            for name, shape in expected.items():
                arr = _frozen(p[name])
                if arr.shape != tuple(shape):
                    raise ShapeError(
                        f"layer {i}: parameter {name!r} has shape {arr.shape}, expected {tuple(shape)}"
                    )
                frozen[name] = arr
            params.append(frozen)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "params", tuple(params))
        object.__setattr__(self, "input_shape", shapes[0])
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def n_classes(self):
        return self.shapes[-1][0]

    def with_params(self, params):
        return Network(self.layers, tuple(params), self.input_shape)

    def parameter_arrays(self):
        """Flat list of ``(layer_index, name, array)`` in storage order."""
        return [
            (i, name, p[name])
            for i, (layer, p) in enumerate(zip(self.layers, self.params))
            for name in layer.param_shapes()
        ]

    def spatial_layers(self):
        """Indices of layers whose output is a ``(C, H, W)`` feature map."""
        return [i for i, s in enumerate(self.shapes[1:]) if len(s) == 3]


INIT_GAIN = np.sqrt(6.0)


def build_network(specs, input_shape, seed=0, gain=INIT_GAIN):
    """Create a network with parameters drawn from ``U(-gain, gain) / sqrt(fan_in)``.

    Weights and biases use the same range; the default gain is He-uniform.
    """
    specs = tuple(specs)
    if not specs:
        raise ValueError("specs must be non-empty")
    infer_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    params = []
    for layer in specs:
        shapes = layer.param_shapes()
        if not shapes:
            params.append({})
            continue
        scale = gain / np.sqrt(layer.fan_in)
        params.append({name: rng.uniform(-scale, scale, size=shape) for name, shape in shapes.items()})
    return Network(specs, tuple(params), tuple(input_shape))


def gapnet_layers(n_classes=4, in_channels=1):
    """Conv-ReLU-MaxPool-Conv-ReLU-GAP-Dense, the architecture CAM applies to.

    Both convolutions are 3x3 with stride 2 and padding 1, so a 64x64 input
    ends in an 8x8 feature map.
    """
    return (
        Conv2D(in_channels, 8, 3, stride=2, padding=1),
        ReLU(),
        MaxPool2D(2),
        Conv2D(8, 16, 3, stride=2, padding=1),
        ReLU(),
        GlobalAvgPool(),
        Dense(16, n_classes),
    )


def plainnet_layers(input_shape=(1, 64, 64), n_classes=4):
    """Same trunk as :func:`gapnet_layers` with Flatten+Dense instead of GAP."""
    trunk = gapnet_layers(n_classes, input_shape[0])[:5]
    c, h, w = infer_shapes(trunk, input_shape)[-1]
    return trunk + (Flatten(), Dense(c * h * w, n_classes))


ARCHITECTURES = {
    "gapnet": lambda input_shape, n_classes: gapnet_layers(n_classes, input_shape[0]),
    "plainnet": lambda input_shape, n_classes: plainnet_layers(input_shape, n_classes),
}


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Cached activations of one forward pass.

    ``activations[0]`` is the input and ``activations[i + 1]`` the output of
    layer ``i``. Arrays always carry a leading batch axis; ``batched`` records
    whether the caller passed a batch or a single input.
    """

    network: Network
    activations: tuple
    probabilities_batch: np.ndarray
    batched: bool

    @property
    def logits(self):
        s = self.activations[-1]
        return s if self.batched else s[0]

    @property
    def probabilities(self):
        p = self.probabilities_batch
        return p if self.batched else p[0]

    def activation(self, layer_index):
        """Output of ``layer_index`` (``-1`` gives the input)."""
        a = self.activations[layer_index + 1]
        return a if self.batched else a[0]


def _as_batch(network, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == network.input_shape:
        return x[None], False
    if x.ndim == len(network.input_shape) + 1 and x.shape[1:] == network.input_shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match network input {network.input_shape}")


def forward_batch(network, xb):
    """Activations for a batch that is already known to be well-shaped."""
    acts = [xb]
    for layer, p in zip(network.layers, network.params):
        acts.append(layer.forward(acts[-1], p))
    return acts


def network_forward(network, x):
    """Run ``x`` (single input or batch) through ``network``."""
    xb, batched = _as_batch(network, x)
    acts = forward_batch(network, xb)
    for a in acts:
        a.flags.writeable = False
    probs = softmax(acts[-1])
    probs.flags.writeable = False
    return ForwardTrace(network, tuple(acts), probs, batched)


def class_logits(network, x):
    return network_forward(network, x).logits


def _top_gradient(logits, probs, class_index, source):
    n, m = logits.shape
    cls = np.broadcast_to(np.asarray(class_index), (n,))
    if np.any(cls < 0) or np.any(cls >= m):
        raise IndexError(f"class index {class_index} out of range for {m} classes")
    onehot = np.zeros((n, m))
    onehot[np.arange(n), cls] = 1.0
    if source == "logit":
        return onehot
    if source == "probability":
        pc = probs[np.arange(n), cls][:, None]
        return pc * (onehot - probs)
    raise ValueError(f"source must be 'logit' or 'probability', got {source!r}")


def backprop(network, activations, grad_top, stop=0, need_params=False, need_input=True):
    """Propagate ``grad_top`` from the logits down to ``activations[stop]``.

    Returns ``(grad_at_stop, param_grads)`` where ``param_grads[i]`` is a dict
    for every layer at or above ``stop`` when ``need_params`` is set. With
    ``need_input=False`` the gradient at ``stop`` itself may be skipped.
    """
    grad = grad_top
    param_grads = [None] * len(network.layers)
    for i in range(len(network.layers) - 1, stop - 1, -1):
        layer = network.layers[i]
        grad, pg = layer.backward(
            activations[i], activations[i + 1], network.params[i], grad,
            need_params=need_params and bool(network.params[i]),
            need_input=need_input or i > stop,
        )
        param_grads[i] = pg
    return grad, param_grads


def resolve_target(network, target):
    """Map ``"input"`` or a layer index to the activation slot it names."""
    if target == "input" or target is None:
        return 0
    idx = int(target)
    n = len(network.layers)
    if idx < 0:
        idx += n
    if not 0 <= idx < n:
        raise IndexError(f"layer index {target} out of range for {n} layers")
    return idx + 1


def backward_from_class(trace, class_index, target="input", source="logit", spatial=False):
    """Gradient of ``S^c`` (``source="logit"``) or ``P^c`` with respect to ``target``.

    ``target`` is ``"input"`` or the index of a layer whose output activation
    is differentiated. With ``spatial=True`` the target must be a ``(C, H, W)``
    feature map, as Grad-CAM requires.
    """
    net = trace.network
    slot = resolve_target(net, target)
    if spatial and len(net.shapes[slot]) != 3:
        raise ShapeError(
            f"target {target!r} has activation shape {net.shapes[slot]}, which has no spatial extent"
        )
    grad_top = _top_gradient(trace.activations[-1], trace.probabilities_batch, class_index, source)
    grad, _ = backprop(net, trace.activations, grad_top, stop=slot)
    return grad if trace.batched else grad[0]


def input_gradient(network, xb, class_index, source="logit"):
    """Batched input gradient without building a public trace."""
    acts = forward_batch(network, xb)
    probs = softmax(acts[-1]) if source == "probability" else None
    grad_top = _top_gradient(acts[-1], probs, class_index, source)
    return backprop(network, acts, grad_top, stop=0)[0], acts[-1], probs


def finite_difference_gradient(network, x, class_index, step=1e-5, source="logit"):
    """Central differences of the class score, using forward passes only."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    _as_batch(network, x)
    if x.shape != network.input_shape:
        raise ShapeError("finite_difference_gradient takes a single input")
    n = x.size
    flat = x.reshape(-1)
    grad = np.empty(n)
    chunk = 256
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        plus = np.repeat(flat[None], len(idx), axis=0)
        minus = plus.copy()
        plus[np.arange(len(idx)), idx] += step
        minus[np.arange(len(idx)), idx] -= step
        batch = np.concatenate([plus, minus]).reshape((-1,) + network.input_shape)
        trace = network_forward(network, batch)
        out = trace.logits if source == "logit" else trace.probabilities
        vals = out[:, class_index]
        grad[idx] = (vals[: len(idx)] - vals[len(idx):]) / (2.0 * step)
    return grad.reshape(x.shape)


def permute_channels(network, layer_index, permutation):
    """Return a functionally equivalent network with conv output channels reordered.

    Output channel ``j`` of the new layer is old channel ``permutation[j]``;
    the input slices of the next parameterized layer are permuted to match.
    """
    layer = network.layers[layer_index]
    if not isinstance(layer, Conv2D):
        raise TypeError(f"layer {layer_index} is {type(layer).__name__}, not Conv2D")
    perm = np.asarray(permutation)
    c = layer.out_channels
    if perm.shape != (c,) or not np.array_equal(np.sort(perm), np.arange(c)):
        raise ValueError(f"permutation must be a bijection on {c} channels, got {list(permutation)}")
    params = [dict(p) for p in network.params]
    params[layer_index] = {
        "weight": network.params[layer_index]["weight"][perm],
        "bias": network.params[layer_index]["bias"][perm],
    }
    for j in range(layer_index + 1, len(network.layers)):
        nxt = network.layers[j]
        if isinstance(nxt, (ReLU, MaxPool2D, GlobalAvgPool)):
            continue
        if isinstance(nxt, Flatten):
            # channel-major flattening: permute whole (H*W) blocks in the following Dense
            k = j + 1
            if k >= len(network.layers) or not isinstance(network.layers[k], Dense):
                raise TypeError("Flatten must be followed by Dense to permute channels")
            w = network.params[k]["weight"]
            blocks = w.reshape(w.shape[0], c, -1)[:, perm, :]
            params[k] = {"weight": blocks.reshape(w.shape), "bias": network.params[k]["bias"]}
            break
        if isinstance(nxt, (Conv2D, Dense)):
            params[j] = {
                "weight": network.params[j]["weight"][:, perm],
                "bias": network.params[j]["bias"],
            }
            break
        raise TypeError(f"cannot propagate a channel permutation through {type(nxt).__name__}")
    return network.with_params(params)
