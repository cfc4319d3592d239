"""Quantitative proxies for the six explanation goals and their aggregation.

All metrics ignore negative attributions and are invariant to positive
rescaling of the map, so methods emitting values on different scales
(probability drops, gradient sums) can be compared.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .attribution import SaliencyMap

GOALS = (
    "multi-object",
    "multi-feature",
    "shape",
    "localization",
    "high-contrast-clarity",
    "low-contrast-clarity",
)
LOW_CONTRAST = 0.15


@dataclass(frozen=True)
class GoalMetricConfig:
    attribution_threshold_quantile: float = 0.8
    coverage_fraction: float = 0.25
    iou_pass: float = 0.5
    clarity_pass: float = 0.6
    mass_pass: float = 0.5

    def __post_init__(self):
        if not 0 < self.attribution_threshold_quantile < 1:
            raise ValueError("attribution_threshold_quantile must be in (0, 1)")
        if not 0 < self.coverage_fraction <= 1:
            raise ValueError("coverage_fraction must be in (0, 1]")
        for name in ("iou_pass", "clarity_pass", "mass_pass"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")

    def to_dict(self):
        return asdict(self)


def _values(saliency):
    return saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)


def _mask(mask):
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("mask is empty")
    return m


def threshold_map(saliency, quantile=0.8):
    """Pixels at or above the empirical ``quantile`` of the positive map values."""
    if not 0 < quantile < 1:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    v = _values(saliency)
    pos = v[v > 0]
    if pos.size == 0:
        return np.zeros(v.shape, dtype=bool)
    t = np.quantile(pos, quantile, method="inverted_cdf")
    return (v >= t) & (v > 0)


def multi_object_coverage(saliency, masks, config=GoalMetricConfig()):
    """Return ``(covered_count, all_covered)``.

    An object is covered when at least ``coverage_fraction`` of its pixels
    survive thresholding.
    """
    masks = [_mask(m) for m in masks]
    if not masks:
        raise ValueError("at least one mask is required")
    hot = threshold_map(saliency, config.attribution_threshold_quantile)
    covered = sum(int((hot & m).sum() >= config.coverage_fraction * m.sum()) for m in masks)
    return covered, covered == len(masks)


def shape_iou(saliency, mask, config=GoalMetricConfig()):
    m = _mask(mask)
    hot = threshold_map(saliency, config.attribution_threshold_quantile)
    return float((hot & m).sum() / (hot | m).sum())


def attribution_mass_in_mask(saliency, mask):
    """Share of the positive attribution mass that falls inside ``mask``."""
    m = _mask(mask)
    pos = np.clip(_values(saliency), 0.0, None)
    total = pos.sum()
    if total == 0:
        return 0.0
    return float(pos[m].sum() / total)


def clarity_score(saliency, mask, config=GoalMetricConfig(), dilation=2):
    """One minus the share of thresholded pixels lying outside the dilated mask.

    A map with no positive values highlights nothing and scores 0.
    """
    m = _mask(mask)
    hot = threshold_map(saliency, config.attribution_threshold_quantile)
    n = hot.sum()
    if n == 0:
        return 0.0
    near = ndimage.binary_dilation(m, structure=np.ones((3, 3), bool), iterations=dilation)
    return float(1.0 - (hot & ~near).sum() / n)


# ---------------------------------------------------------------------------
# aggregation

# Method settings used for goal evaluation. The occlusion patch is smaller
# than the attribution default so it resolves the thinnest objects (ovals
# are ~5-7 px across); IG uses the default step count.
EVALUATION_METHODS = {
    "occlusion": {"patch_size": 5, "stride": 1, "patch_value": 0.0},
    "gradcam": {"target_layer": None, "source": "logit"},
    "ig": {"steps": 64, "source": "logit"},
}


def standard_methods(overrides=None, n_jobs=1):
    """Method callables for :func:`goal_report` plus the settings they use."""
    from . import attribution

    cfg = {k: dict(v) for k, v in EVALUATION_METHODS.items()}
    for name, extra in (overrides or {}).items():
        if name not in cfg:
            raise ValueError(f"unknown method {name!r}")
        cfg[name].update(extra)
    occ, gc, ig = cfg["occlusion"], cfg["gradcam"], cfg["ig"]
    methods = {
        "occlusion": lambda net, x, c: attribution.occlusion_map(
            net, x, c, occ["patch_size"], occ["patch_value"], occ["stride"], n_jobs=n_jobs
        ),
        "gradcam": lambda net, x, c: attribution.gradcam_map(net, x, c, gc["target_layer"], gc["source"]),
        "ig": lambda net, x, c: attribution.integrated_gradients_map(
            net, x, c, ig["steps"], source=ig["source"], n_jobs=n_jobs
        ),
    }
    return methods, cfg


FAMILY_GOALS = {
    "multi-object": ("multi-object", "localization"),
    "multi-feature": ("multi-feature", "localization"),
    "shape": ("shape", "localization"),
    "distractors": ("localization", "high-contrast-clarity"),
    "low-contrast": ("localization", "low-contrast-clarity"),
}


def scene_goals(scene):
    """Goals a scene supports: fixed by its family, else read off its spec."""
    if scene.family is not None:
        return list(FAMILY_GOALS[scene.family])
    spec = scene.spec
    goals = []
    if spec.class_label == "multi-blob" and len(scene.masks) >= 2:
        goals.append("multi-object")
    if spec.class_label == "curve-chain":
        goals.append("multi-feature")
    if spec.class_label == "oval":
        goals.append("shape")
    goals.append("localization")
    if spec.distractors > 0:
        goals.append("high-contrast-clarity")
    if spec.contrast <= LOW_CONTRAST:
        goals.append("low-contrast-clarity")
    return goals


def score_goal(goal, saliency, scene, config=GoalMetricConfig()):
    """Return ``(metric_value, passed)`` for one goal on one scene."""
    union = scene.union_mask
    if goal == "multi-object":
        covered, ok = multi_object_coverage(saliency, scene.masks, config)
        return covered / len(scene.masks), ok
    if goal == "multi-feature":
        covered, ok = multi_object_coverage(saliency, scene.feature_masks, config)
        return covered / len(scene.feature_masks), ok
    if goal == "shape":
        v = shape_iou(saliency, union, config)
        return v, v >= config.iou_pass
    if goal == "localization":
        v = attribution_mass_in_mask(saliency, union)
        return v, v >= config.mass_pass
    if goal in ("high-contrast-clarity", "low-contrast-clarity"):
        v = clarity_score(saliency, union, config)
        return v, v >= config.clarity_pass
    raise ValueError(f"unknown goal {goal!r}")


@dataclass
class GoalReport:
    """Per method and goal: scenes evaluated, scenes passed and the pass rate."""

    methods: tuple
    counts: dict
    config: dict
    records: list = field(default_factory=list)

    def evaluated(self, goal, method):
        return self.counts[goal, method][0]

    def passed(self, goal, method):
        return self.counts[goal, method][1]

    def rate(self, goal, method):
        n, k = self.counts[goal, method]
        return k / n if n else None

    def median_metric(self, goal, method):
        vals = [r["value"] for r in self.records if r["goal"] == goal and r["method"] == method]
        return float(np.median(vals)) if vals else None

    def rows(self):
        for goal in GOALS:
            for method in self.methods:
                n, k = self.counts[goal, method]
                yield goal, method, n, k, self.rate(goal, method)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["goal", "method", "evaluated", "passed", "rate"])
        for goal, method, n, k, rate in self.rows():
            w.writerow([goal, method, n, k, "n/a" if rate is None else repr(rate)])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(
            {
                "config": self.config,
                "goals": [
                    {"goal": g, "method": m, "evaluated": n, "passed": k, "rate": r,
                     "median_metric": self.median_metric(g, m)}
                    for g, m, n, k, r in self.rows()
                ],
                "records": self.records,
            },
            indent=2,
            default=str,
        )


def goal_report(network, scenes, methods, config=GoalMetricConfig(), run_config=None, target="label"):
    """Score every method on every scene for each goal the scene supports.

    ``methods`` maps a method name to ``fn(network, image, class_index) -> SaliencyMap``.
    Maps are explained for the ground-truth label unless ``target="predicted"``.
    """
    if not methods:
        raise ValueError("at least one method is required")
    names = tuple(methods)
    counts = {(g, m): [0, 0] for g in GOALS for m in names}
    records = []
    for scene in scenes:
        goals = scene_goals(scene)
        cls = scene.label
        if target == "predicted":
            from .training import predict

            cls = predict(network, scene.image)[0]
        for name in names:
            sal = methods[name](network, scene.image, cls)
            for goal in goals:
                value, ok = score_goal(goal, sal, scene, config)
                counts[goal, name][0] += 1
                counts[goal, name][1] += int(ok)
                records.append(
                    {"scene": scene.id, "goal": goal, "method": name, "value": value, "passed": bool(ok)}
                )
    cfg = {"metrics": config.to_dict(), "target": target}
    if run_config:
        cfg.update(run_config)
    return GoalReport(names, {k: tuple(v) for k, v in counts.items()}, cfg, records)
