"""Seeded synthetic grayscale scenes with per-object ground-truth masks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

CLASSES = ("blob", "multi-blob", "oval", "curve-chain")
IMAGE_SIZE = 64
BACKGROUND_AMPLITUDE = 0.1
MAX_PLACEMENT_TRIES = 500
OVAL_AXES = ((13.0, 17.0), (2.5, 3.5))  # semi-axis ranges (major, minor)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    class_label: str
    object_count: int = 1
    contrast: float = 0.5
    distractors: int = 0
    noise_sigma: float = 0.0
    seed: int = 0
    size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.class_label not in CLASSES:
            raise SceneError(f"class_label must be one of {CLASSES}, got {self.class_label!r}")
        if not 1 <= self.object_count <= 4:
            raise SceneError(f"object_count must be in 1..4, got {self.object_count}")
        if not 0 < self.contrast <= 1:
            raise SceneError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.distractors < 0:
            raise SceneError(f"distractors must be >= 0, got {self.distractors}")
        if self.noise_sigma < 0:
            raise SceneError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.seed < 0:
            raise SceneError(f"seed must be non-negative, got {self.seed}")

    @property
    def label(self):
        return CLASSES.index(self.class_label)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Scene:
    """A rendered scene. ``image`` is ``(1, H, W)`` with values in ``[0, 1]``.

    ``feature_masks`` split the objects into their prominent parts: the bends
    of a curve chain, otherwise one entry per object. ``background`` is the
    noise field the objects were painted on (before pixel noise), and
    ``family`` names the evaluation family the scene was drawn for, if any.
    """

    image: np.ndarray
    label: int
    masks: tuple
    spec: SceneSpec
    feature_masks: tuple = field(default=())
    id: str = ""
    background: np.ndarray | None = None
    family: str | None = None

    @property
    def class_label(self):
        return CLASSES[self.label]

    @property
    def union_mask(self):
        return np.logical_or.reduce(self.masks)


def _value_noise(rng, size, cells=5):
    lattice = rng.random((cells + 1, cells + 1))
    return ndimage.zoom(lattice, size / (cells + 1), order=3, mode="nearest", grid_mode=True)[:size, :size].clip(0, 1)


def _grid(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _disk(size, cy, cx, r):
    yy, xx = _grid(size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _ellipse(size, cy, cx, a, b, theta):
    yy, xx = _grid(size)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polyline_mask(size, points, half_width):
    mask = np.zeros((size, size), dtype=bool)
    lo = np.maximum(np.floor(points.min(axis=0) - half_width).astype(int), 0)
    hi = np.minimum(np.ceil(points.max(axis=0) + half_width).astype(int) + 1, size)
    yy, xx = np.mgrid[lo[0] : hi[0], lo[1] : hi[1]].astype(np.float64)
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1)
    p, d = points[:-1], np.diff(points, axis=0)
    rel = pix[:, None, :] - p[None, :, :]  # (P, S, 2)
    t = np.clip((rel * d[None]).sum(-1) / np.maximum((d * d).sum(-1), 1e-12), 0.0, 1.0)
    dist = np.sqrt(((rel - t[..., None] * d[None]) ** 2).sum(-1)).min(axis=1)
    mask[lo[0] : hi[0], lo[1] : hi[1]] = (dist <= half_width).reshape(yy.shape)
    return mask


def _fits(points, size, margin):
    return points.min() >= margin and points.max() <= size - 1 - margin


def _curve_chain(rng, size):
    """Sinuous polyline; returns ``(mask, bend_masks)`` or ``None`` if it leaves the image."""
    length = rng.uniform(36, 46)
    periods = rng.uniform(1.5, 2.2)
    amp = rng.uniform(4.0, 6.0)
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(10, max(10, size - 10), 2)
    s = np.linspace(-length / 2, length / 2, 60)
    off = amp * np.sin(2 * np.pi * periods * (s + length / 2) / length)
    ux, uy = np.cos(theta), np.sin(theta)
    pts = np.stack([cy + s * uy + off * ux, cx + s * ux - off * uy], axis=1)
    if not _fits(pts, size, 3):
        return None
    mask = _polyline_mask(size, pts, 1.3)
    # bends sit at the extrema of the offset profile
    bends = [k for k in range(1, len(s) - 1) if abs(off[k]) >= abs(off[k - 1]) and abs(off[k]) > abs(off[k + 1])]
    return mask, [mask & _disk(size, pts[k, 0], pts[k, 1], 5.0) for k in bends]


def _center(rng, size, radius):
    lo, hi = radius + 2, size - 3 - radius
    if hi < lo:  # cannot fit; the caller's bounds check rejects it
        return np.full(2, size / 2)
    return rng.uniform(lo, hi, 2)


def _draw_object(rng, spec):
    n = spec.size
    if spec.class_label == "blob":
        r = rng.uniform(7.0, 10.0)
        return _disk(n, *_center(rng, n, r), r), None
    if spec.class_label == "multi-blob":
        r = rng.uniform(3.0, 4.5)
        return _disk(n, *_center(rng, n, r), r), None
    if spec.class_label == "oval":
        a, b = rng.uniform(*OVAL_AXES[0]), rng.uniform(*OVAL_AXES[1])
        return _ellipse(n, *_center(rng, n, a), a, b, rng.uniform(0, np.pi)), None
    chain = _curve_chain(rng, n)
    if chain is None:
        return np.zeros((n, n), dtype=bool), None
    return chain


def _inside(mask, margin=1):
    n = mask.shape[0]
    border = np.ones_like(mask)
    border[margin : n - margin, margin : n - margin] = False
    return mask.any() and not (mask & border).any()


def _segment(size, rng):
    length = rng.uniform(20, 40)
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(2, size - 3, 2)
    d = np.array([np.sin(theta), np.cos(theta)]) * length / 2
    p = np.array([cy, cx])
    ends = np.stack([p - d, p + d])
    if not _fits(ends, size, 1):
        return None
    return _polyline_mask(size, ends, 0.5)


def generate_scene(spec):
    """Render ``spec`` deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    amp = BACKGROUND_AMPLITUDE
    offset = float(np.clip(1.0 - spec.contrast - amp, 0.0, 0.15))
    background = offset + amp * _value_noise(rng, n)

    masks, features = [], []
    occupied = np.zeros((n, n), dtype=bool)
    for _ in range(spec.object_count):
        for _ in range(MAX_PLACEMENT_TRIES):
            mask, parts = _draw_object(rng, spec)
            if _inside(mask) and not (ndimage.binary_dilation(mask, iterations=3) & occupied).any():
                break
        else:
            raise SceneError(f"could not place object {len(masks)} for {spec}")
        masks.append(mask)
        features.extend(parts if parts else [mask])
        occupied |= mask

    image = background.copy()
    for mask in masks:
        ring = ndimage.binary_dilation(mask, iterations=2)
        level = background[ring].max() + spec.contrast
        image[mask] = min(level, 1.0)

    keep_out = ndimage.binary_dilation(occupied, iterations=3)
    for _ in range(spec.distractors):
        for _ in range(MAX_PLACEMENT_TRIES):
            line = _segment(n, rng)
            if line is not None and _inside(line) and not (line & keep_out).any():
                break
        else:
            raise SceneError(f"could not place distractor for {spec}")
        image[line] = 1.0
        keep_out |= ndimage.binary_dilation(line, iterations=1)

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Scene(
        image[None], spec.label, tuple(masks), spec, tuple(features),
        id=f"{spec.class_label}-{spec.seed}", background=background,
    )


# ---------------------------------------------------------------------------
# datasets


def scene_seed(*key):
    """Stable 63-bit seed for a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0] >> np.uint64(1))


def sample_spec(class_label, seed, low_contrast_rate=0.25, distractor_rate=0.15):
    """Draw the nuisance parameters of one training-distribution scene."""
    rng = np.random.default_rng([seed, 1])
    contrast = rng.uniform(0.08, 0.15) if rng.random() < low_contrast_rate else rng.uniform(0.3, 0.8)
    distractors = int(rng.integers(1, 4)) if rng.random() < distractor_rate else 0
    count = int(rng.integers(2, 5)) if class_label == "multi-blob" else 1
    return SceneSpec(class_label, count, round(float(contrast), 4), distractors, 0.01, seed)


def generate_dataset(per_class_count=100, split_seed=0, train_fraction=0.7):
    """Stratified 70/30 split of ``per_class_count`` scenes per class."""
    if per_class_count < 10:
        raise ValueError(f"per_class_count must be >= 10, got {per_class_count}")
    rng = np.random.default_rng(split_seed)
    train, test = [], []
    n_train = int(round(train_fraction * per_class_count))
    for label, name in enumerate(CLASSES):
        scenes = [generate_scene(sample_spec(name, scene_seed(split_seed, label, i))) for i in range(per_class_count)]
        order = rng.permutation(per_class_count)
        train.extend(scenes[k] for k in order[:n_train])
        test.extend(scenes[k] for k in order[n_train:])
    return train, test


# Evaluation families, one per explanation goal (goal 4 uses every scene).
FAMILIES = {
    "multi-object": dict(class_label="multi-blob", contrast=(0.3, 0.8), distractors=0),
    "multi-feature": dict(class_label="curve-chain", contrast=(0.3, 0.8), distractors=0),
    "shape": dict(class_label="oval", contrast=(0.3, 0.8), distractors=0),
    "distractors": dict(class_label=None, contrast=(0.3, 0.8), distractors=(1, 3)),
    "low-contrast": dict(class_label=None, contrast=(0.08, 0.15), distractors=0),
}


def family_specs(family, count, seed=0):
    """Specs for ``count`` scenes probing one explanation goal."""
    cfg = FAMILIES[family]
    specs = []
    for i in range(count):
        s = scene_seed(seed, 7919, list(FAMILIES).index(family), i)
        rng = np.random.default_rng([s, 2])
        label = cfg["class_label"] or CLASSES[i % len(CLASSES)]
        lo, hi = cfg["contrast"]
        d = cfg["distractors"]
        distractors = int(rng.integers(d[0], d[1] + 1)) if isinstance(d, tuple) else d
        count_ = int(rng.integers(2, 5)) if label == "multi-blob" else 1
        specs.append(SceneSpec(label, count_, round(float(rng.uniform(lo, hi)), 4), distractors, 0.01, s))
    return specs


def generate_family(family, count, seed=0):
    return [
        replace(generate_scene(s), family=family, id=f"{family}-{i}")
        for i, s in enumerate(family_specs(family, count, seed))
    ]


def goal_families(count=30, seed=0):
    return {f: generate_family(f, count, seed) for f in FAMILIES}
