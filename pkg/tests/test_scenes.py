import numpy as np
import pytest
from scipy import ndimage

from saliencykit.estimators import TemplateCorrelationClassifier
from saliencykit.scenes import (
    CLASSES,
    FAMILIES,
    SceneError,
    SceneSpec,
    generate_dataset,
    generate_family,
    generate_scene,
    goal_families,
    sample_spec,
)


def test_two_blobs_give_two_disjoint_masks():
    s = generate_scene(SceneSpec("multi-blob", 2, 0.5, 0, 0.01, 1))
    assert len(s.masks) == 2
    assert not (s.masks[0] & s.masks[1]).any()


def test_full_contrast_pixel_scan():
    for seed in range(10):
        s = generate_scene(SceneSpec(CLASSES[seed % 4], 1, 1.0, 0, 0.0, seed))
        img = s.image[0]
        for m in s.masks:
            ring = ndimage.binary_dilation(m, iterations=1) & ~m
            assert img[m].min() - img[ring].max() >= 0.9


def test_same_seed_is_bitwise_identical():
    spec = SceneSpec("curve-chain", 1, 0.3, 2, 0.05, 42)
    a, b = generate_scene(spec), generate_scene(spec)
    assert a.image.tobytes() == b.image.tobytes()
    assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))


@pytest.mark.parametrize("seed", range(40))
def test_scene_invariants(seed):
    spec = sample_spec(CLASSES[seed % 4], 1000 + seed, low_contrast_rate=0.5, distractor_rate=0.5)
    s = generate_scene(spec)
    img = s.image[0]
    assert s.image.shape == (1, 64, 64) and img.min() >= 0 and img.max() <= 1
    assert s.label == CLASSES.index(spec.class_label)
    union = np.zeros_like(img, dtype=bool)
    for m in s.masks:
        assert m.any() and not (m & union).any()
        rows, cols = np.nonzero(m)
        assert rows.min() >= 1 and cols.min() >= 1 and rows.max() <= 62 and cols.max() <= 62
        union |= m
    assert np.all(np.abs(img[union] - s.background.mean()) >= spec.contrast / 2)


def test_curve_chain_has_at_least_two_bends():
    for seed in range(10):
        s = generate_scene(SceneSpec("curve-chain", 1, 0.5, 0, 0.0, seed))
        assert len(s.feature_masks) >= 2


@pytest.mark.parametrize(
    "kw", [dict(class_label="star"), dict(object_count=5), dict(contrast=0.0), dict(distractors=-1), dict(seed=-1)]
)
def test_spec_validation(kw):
    base = dict(class_label="blob")
    base.update(kw)
    with pytest.raises(SceneError):
        SceneSpec(**base)


def test_unsatisfiable_placement_echoes_spec():
    with pytest.raises(SceneError, match="SceneSpec"):
        generate_scene(SceneSpec("oval", 4, 0.5, 0, 0.0, 0, size=24))


@pytest.mark.parametrize("n,train,test", [(100, 70, 30), (10, 7, 3)])
def test_split_sizes(n, train, test):
    tr, te = generate_dataset(n, 0)
    for label in range(4):
        assert sum(s.label == label for s in tr) == train
        assert sum(s.label == label for s in te) == test
    assert not {s.spec.seed for s in tr} & {s.spec.seed for s in te}


def test_dataset_rejects_tiny_counts():
    with pytest.raises(ValueError):
        generate_dataset(9)


def test_families_probe_their_conditions():
    fams = goal_families(6, seed=0)
    assert set(fams) == set(FAMILIES)
    assert all(len(s.masks) >= 2 for s in fams["multi-object"])
    assert all(s.spec.class_label == "oval" for s in fams["shape"])
    assert all(s.spec.distractors > 0 for s in fams["distractors"])
    assert all(s.spec.contrast <= 0.15 for s in fams["low-contrast"])
    assert generate_family("shape", 3)[0].image.tobytes() == fams["shape"][0].image.tobytes()


def test_template_baseline_reaches_ninety_percent(default_dataset):
    X, y = default_dataset["train_xy"]
    Xt, yt = default_dataset["test_xy"]
    clf = TemplateCorrelationClassifier().fit(X, y)
    assert clf.score(Xt, yt) >= 0.9
