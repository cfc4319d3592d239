"""Saliency-map generators: occlusion, CAM, Grad-CAM and integrated gradients."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .layers import Dense, GlobalAvgPool, ShapeError, softmax
from .network import (
    _top_gradient,
    backprop,
    backward_from_class,
    forward_batch,
    network_forward,
)

METHODS = ("occlusion", "gradcam", "cam", "ig")


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Per-pixel contribution grid for one image and one class.

    ``values`` has shape ``(height, width)``. Grad-CAM and CAM maps keep their
    feature-map resolution grid in ``coarse``; Grad-CAM also records the
    per-channel weights it derived from gradients.
    """

    values: np.ndarray
    class_index: int
    method: str
    native_resolution: bool = True
    coarse: np.ndarray | None = None
    channel_weights: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"saliency values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("saliency values must be finite")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def _check_image(network, image):
    x = np.asarray(image, dtype=np.float64)
    if x.shape != network.input_shape:
        raise ShapeError(f"image shape {x.shape} does not match network input {network.input_shape}")
    if len(x.shape) != 3:
        raise ShapeError("saliency maps need a (C, H, W) image")
    return x


def _check_class(network, class_index):
    c = int(class_index)
    if not 0 <= c < network.n_classes:
        raise IndexError(f"class index {class_index} out of range for {network.n_classes} classes")
    return c


def _map_chunks(fn, n, chunk, n_jobs):
    """Apply ``fn(start, stop)`` over fixed-size chunks, results in index order.

    Chunk boundaries never depend on ``n_jobs`` so the arithmetic, and hence
    the output bits, are the same for any worker count.
    """
    starts = list(range(0, n, chunk))
    if n_jobs is None or n_jobs <= 1 or len(starts) == 1:
        return [fn(s, min(s + chunk, n)) for s in starts]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(lambda s: fn(s, min(s + chunk, n)), starts))


def _padded(batch, chunk):
    """Pad a partial chunk with copies of its last row so every BLAS call sees the same batch size."""
    short = chunk - len(batch)
    if short <= 0:
        return batch
    return np.concatenate([batch, np.repeat(batch[-1:], short, axis=0)])


# ---------------------------------------------------------------------------
# occlusion


def default_patch_size(height, width):
    """Largest odd integer not above a quarter of the shorter image side."""
    p = max(1, min(height, width) // 4)
    return p if p % 2 else p - 1


def _nearest(visited, n):
    """For each index in ``range(n)`` the position of the nearest visited index (ties go low)."""
    visited = np.asarray(visited)
    d = np.abs(np.arange(n)[:, None] - visited[None, :])
    return d.argmin(axis=1)


def occlusion_map(
    network,
    image,
    class_index,
    patch_size=None,
    patch_value=0.0,
    stride=1,
    source="probability",
    chunk=64,
    n_jobs=1,
):
    """Probability drop when a square patch centred on each pixel is blanked out.

    The patch is clipped at the image border. With ``stride > 1`` only every
    ``stride``-th centre is evaluated and the others copy their nearest
    evaluated neighbour.
    """
    x = _check_image(network, image)
    c = _check_class(network, class_index)
    _, h, w = x.shape
    if patch_size is None:
        patch_size = default_patch_size(h, w)
    if int(patch_size) != patch_size or patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be an odd positive integer, got {patch_size}")
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image size {h}x{w}")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if source not in ("probability", "logit"):
        raise ValueError(f"source must be 'probability' or 'logit', got {source!r}")
    r = patch_size // 2
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    centers = [(-1, -1)] + [(i, j) for i in rows for j in cols]  # slot 0 is the intact image

    def evaluate(start, stop):
        batch = np.repeat(x[None], stop - start, axis=0)
        for b, (i, j) in enumerate(centers[start:stop]):
            if i >= 0:
                batch[b, :, max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1] = patch_value
        logits = forward_batch(network, _padded(batch, chunk))[-1][: stop - start]
        scores = softmax(logits) if source == "probability" else logits
        return scores[:, c]

    scores = np.concatenate(_map_chunks(evaluate, len(centers), chunk, n_jobs))
    grid = (scores[0] - scores[1:]).reshape(len(rows), len(cols))
    values = grid[np.ix_(_nearest(rows, h), _nearest(cols, w))]
    config = {"patch_size": int(patch_size), "patch_value": float(patch_value), "stride": int(stride), "source": source}
    return SaliencyMap(values, c, "occlusion", True, config=config)


# ---------------------------------------------------------------------------
# CAM family


def upsample_array(coarse, height, width):
    """Align-corners bilinear interpolation of a 2-D array."""
    a = np.asarray(coarse, dtype=np.float64)
    h, w = a.shape
    if height < h or width < w:
        raise ValueError(f"cannot downscale {h}x{w} to {height}x{width}")
    if (height, width) == (h, w):
        return a.copy()

    def axis(n_out, n_in):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, ty = axis(height, h)
    x0, x1, tx = axis(width, w)
    ty, tx = ty[:, None], tx[None, :]
    top = a[y0][:, x0] * (1 - tx) + a[y0][:, x1] * tx
    bottom = a[y1][:, x0] * (1 - tx) + a[y1][:, x1] * tx
    out = top * (1 - ty) + bottom * ty
    return np.clip(out, a.min(), a.max())


def upsample_bilinear(coarse, target_width, target_height):
    """Upsample a saliency map (or bare 2-D array) with align-corners bilinear interpolation."""
    if isinstance(coarse, SaliencyMap):
        values = upsample_array(coarse.values, target_height, target_width)
        native = coarse.native_resolution and values.shape == coarse.values.shape
        return SaliencyMap(
            values, coarse.class_index, coarse.method, native,
            coarse=coarse.values if coarse.coarse is None else coarse.coarse,
            channel_weights=coarse.channel_weights, config=dict(coarse.config),
        )
    return upsample_array(coarse, target_height, target_width)


def default_target_layer(network):
    """Index of the last layer that still outputs a ``(C, H, W)`` feature map."""
    spatial = network.spatial_layers()
    if not spatial:
        raise ShapeError("network has no layer with a spatial activation")
    return spatial[-1]


def gradcam_map(network, image, class_index, target_layer=None, source="logit", relu=False):
    """Grad-CAM: channel weights are spatial sums of class-score gradients.

    The coarse map ``sum_k w_k A_k`` is kept unclamped unless ``relu`` is set,
    then upsampled to the image size.
    """
    x = _check_image(network, image)
    c = _check_class(network, class_index)
    layer = default_target_layer(network) if target_layer is None else int(target_layer)
    if layer < 0:
        layer += len(network.layers)
    trace = network_forward(network, x)
    grads = backward_from_class(trace, c, target=layer, source=source, spatial=True)
    acts = trace.activation(layer)
    weights = grads.sum(axis=(1, 2))
    coarse = np.tensordot(weights, acts, axes=1)
    if relu:
        coarse = np.maximum(coarse, 0.0)
    values = upsample_array(coarse, x.shape[1], x.shape[2])
    config = {"target_layer": layer, "source": source, "relu": bool(relu)}
    return SaliencyMap(values, c, "gradcam", False, coarse=coarse, channel_weights=weights, config=config)


def cam_map(network, image, class_index):
    """Class activation map from the dense weights behind a global-average-pool head."""
    layers = network.layers
    if len(layers) < 2 or not isinstance(layers[-2], GlobalAvgPool) or not isinstance(layers[-1], Dense):
        raise ShapeError("CAM requires a GlobalAvgPool layer immediately followed by the final Dense layer")
    x = _check_image(network, image)
    c = _check_class(network, class_index)
    trace = network_forward(network, x)
    acts = trace.activation(len(layers) - 3)
    weights = network.params[-1]["weight"][c]
    coarse = np.tensordot(weights, acts, axes=1)
    values = upsample_array(coarse, x.shape[1], x.shape[2])
    return SaliencyMap(
        values, c, "cam", False, coarse=coarse, channel_weights=weights.copy(),
        config={"target_layer": len(layers) - 3},
    )


# ---------------------------------------------------------------------------
# integrated gradients


def _check_baseline(x, baseline):
    if baseline is None:
        return np.zeros_like(x)
    b = np.asarray(baseline, dtype=np.float64)
    if b.shape != x.shape:
        raise ShapeError(f"baseline shape {b.shape} does not match image shape {x.shape}")
    return b


def path_gradient_sum(network, image, baseline, class_index, steps, source="logit", chunk=32, n_jobs=1):
    """Sum of input gradients at ``baseline + (k/m)(image - baseline)`` for ``k = 1..m``.

    Gradients are accumulated one step at a time in increasing ``k``.
    """
    diff = image - baseline

    def evaluate(start, stop):
        alphas = np.arange(start + 1, stop + 1, dtype=np.float64) / steps
        batch = baseline[None] + alphas.reshape(-1, 1, 1, 1) * diff[None]
        acts = forward_batch(network, _padded(batch, chunk))
        probs = softmax(acts[-1]) if source == "probability" else None
        top = _top_gradient(acts[-1], probs, class_index, source)
        return backprop(network, acts, top, stop=0)[0][: stop - start]

    total = np.zeros_like(image)
    for grads in _map_chunks(evaluate, steps, chunk, n_jobs):
        for g in grads:
            total += g
    return total


def integrated_gradients_map(
    network, image, class_index, steps=64, baseline=None, source="logit", chunk=32, n_jobs=1
):
    """Right-endpoint Riemann approximation of integrated gradients.

    ``value[i, j] = (x - x')[i, j] * (1/m) * sum_k dF_c(x' + k/m (x - x'))/dx[i, j]``,
    summed over input channels. ``F_c`` is the pre-softmax logit unless
    ``source="probability"``.
    """
    x = _check_image(network, image)
    c = _check_class(network, class_index)
    if int(steps) != steps or not 1 <= steps <= 10000:
        raise ValueError(f"steps must be an integer in [1, 10000], got {steps}")
    if source not in ("logit", "probability"):
        raise ValueError(f"source must be 'logit' or 'probability', got {source!r}")
    base = _check_baseline(x, baseline)
    total = path_gradient_sum(network, x, base, c, int(steps), source, chunk, n_jobs)
    attr = (x - base) * (total / steps)
    config = {"steps": int(steps), "source": source, "baseline": "zeros" if baseline is None else "custom"}
    return SaliencyMap(attr.sum(axis=0), c, "ig", True, config=config)


def class_score(network, image, class_index, source="logit"):
    trace = network_forward(network, image)
    out = trace.logits if source == "logit" else trace.probabilities
    return float(out[class_index])


def completeness_residual(saliency, network, image, baseline, class_index):
    """``sum(attributions) - (F_c(x) - F_c(x'))``."""
    x = np.asarray(image, dtype=np.float64)
    base = _check_baseline(x, baseline)
    source = saliency.config.get("source", "logit")
    delta = class_score(network, x, class_index, source) - class_score(network, base, class_index, source)
    return float(saliency.values.sum() - delta)


def sensitivity_probe(network, image, baseline, pixel, class_index, steps=1000, source="logit"):
    """Integrated-gradients attribution of the single pixel where image and baseline differ."""
    x = _check_image(network, image)
    base = _check_baseline(x, baseline)
    i, j = pixel
    differs = np.any(x != base, axis=0)
    others = differs.copy()
    others[i, j] = False
    if others.any():
        raise ValueError(
            f"image and baseline must differ only at pixel {(i, j)}; they also differ at "
            f"{tuple(int(v) for v in np.argwhere(others)[0])}"
        )
    sal = integrated_gradients_map(network, x, class_index, steps=steps, baseline=base, source=source)
    return float(sal.values[i, j])
