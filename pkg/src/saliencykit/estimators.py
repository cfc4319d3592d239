"""scikit-learn compatible wrappers around the network and the saliency methods."""

from __future__ import annotations

import numpy as np
from scipy import ndimage, signal
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import attribution
from .network import ARCHITECTURES, Network, build_network
from .training import TrainConfig, predict_batch, train_sgd


def check_images(X, input_shape=None):
    """Validate a batch of channels-first images and return it as float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n_samples, C, H, W), got {X.shape}")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, expected {tuple(input_shape)}")
    return X


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Small convolutional classifier trained with plain mini-batch SGD.

    Parameters
    ----------
    architecture : {"gapnet", "plainnet"}
        ``gapnet`` ends in global average pooling (so CAM applies);
        ``plainnet`` flattens the last feature map instead.
    learning_rate, epochs, batch_size, schedule
        Passed to :class:`~saliencykit.training.TrainConfig`.
    random_state : int
        Seeds both initialization and batch order.
    """

    def __init__(
        self,
        architecture="gapnet",
        learning_rate=0.1,
        epochs=300,
        batch_size=4,
        schedule="linear",
        random_state=0,
    ):
        self.architecture = architecture
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.schedule = schedule
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, int(self.random_state), self.schedule)

    def fit(self, X, y):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {sorted(ARCHITECTURES)}, got {self.architecture!r}")
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        config = self._train_config()
        layers = ARCHITECTURES[self.architecture](X.shape[1:], len(self.classes_))
        net = build_network(layers, X.shape[1:], seed=config.seed)
        self.network_, self.loss_curve_ = train_sgd(net, (X, y_idx), config)
        return self

    @classmethod
    def from_network(cls, network, classes=None, **params):
        """Wrap an already trained :class:`~saliencykit.network.Network`."""
        est = cls(**params)
        est.network_ = network
        est.classes_ = np.arange(network.n_classes) if classes is None else np.asarray(classes)
        est.loss_curve_ = []
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.network_.input_shape)
        return predict_batch(self.network_, X)[1]

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]


def _template_bank(half=15):
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1]
    shapes = [(xx**2 + yy**2 <= r * r) for r in (3.5, 5.5, 8.5)]
    for t in np.linspace(0, np.pi, 8, endpoint=False):
        u = xx * np.cos(t) + yy * np.sin(t)
        v = -xx * np.sin(t) + yy * np.cos(t)
        shapes.append((u / 15) ** 2 + (v / 3) ** 2 <= 1)
    bank = []
    for m in shapes:
        t = m.astype(np.float64)
        t -= t.mean()
        bank.append(t / np.linalg.norm(t))
    return bank


class TemplateCorrelationClassifier(ClassifierMixin, BaseEstimator):
    """Hand-written baseline: peak correlation with disk and oval templates.

    Each image is flattened (a wide Gaussian estimate of the background is
    subtracted) and median-filtered to suppress one-pixel lines. The features
    are the peak responses to three disks and eight oval orientations, scaled
    by the strongest, plus the number of small-disk peaks. Classes are
    assigned to the nearest standardized class centroid.
    """

    def __init__(self, background_sigma=6.0, peak_window=7):
        self.background_sigma = background_sigma
        self.peak_window = peak_window

    def _features(self, X):
        bank = _template_bank()
        out = []
        for img in X:
            x = img.sum(axis=0)
            x = ndimage.median_filter(x - ndimage.gaussian_filter(x, self.background_sigma), 3)
            responses = [signal.fftconvolve(x, t[::-1, ::-1], mode="same") for t in bank]
            peaks = np.array([r.max() for r in responses])
            peaks /= max(peaks.max(), 1e-9)
            small = responses[0]
            local = (small == ndimage.maximum_filter(small, self.peak_window)) & (small > 0.5 * small.max())
            out.append(np.append(peaks, local.sum()))
        return np.array(out)

    def fit(self, X, y):
        X = check_images(X)
        F = self._features(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        self.mean_, self.scale_ = F.mean(axis=0), F.std(axis=0) + 1e-9
        Z = (F - self.mean_) / self.scale_
        self.centroids_ = np.array([Z[y_idx == k].mean(axis=0) for k in range(len(self.classes_))])
        return self

    def predict(self, X):
        check_is_fitted(self, "centroids_")
        Z = (self._features(check_images(X)) - self.mean_) / self.scale_
        d = ((Z[:, None, :] - self.centroids_[None]) ** 2).sum(axis=-1)
        return self.classes_[d.argmin(axis=1)]


def _network_of(estimator):
    if isinstance(estimator, Network):
        return estimator
    check_is_fitted(estimator, "network_")
    return estimator.network_


class _SaliencyExplainer(TransformerMixin, BaseEstimator):
    """Shared plumbing: ``explain`` returns maps, ``transform`` stacks their values."""

    def fit(self, X=None, y=None):
        self.network_ = _network_of(self.estimator)
        return self

    def _map(self, image, class_index):
        raise NotImplementedError

    def explain(self, X, targets=None):
        """Saliency maps for each image, for ``targets`` or the predicted class."""
        if not hasattr(self, "network_"):
            self.fit()
        X = check_images(X, self.network_.input_shape)
        if targets is None:
            targets = predict_batch(self.network_, X)[0]
        targets = np.broadcast_to(np.asarray(targets), (len(X),))
        return [self._map(x, int(c)) for x, c in zip(X, targets)]

    def transform(self, X):
        return np.stack([m.values for m in self.explain(X)])


class OcclusionExplainer(_SaliencyExplainer):
    def __init__(self, estimator, patch_size=None, patch_value=0.0, stride=1, source="probability", n_jobs=1):
        self.estimator = estimator
        self.patch_size = patch_size
        self.patch_value = patch_value
        self.stride = stride
        self.source = source
        self.n_jobs = n_jobs

    def _map(self, image, class_index):
        return attribution.occlusion_map(
            self.network_, image, class_index, self.patch_size, self.patch_value,
            self.stride, self.source, n_jobs=self.n_jobs,
        )


class GradCAMExplainer(_SaliencyExplainer):
    def __init__(self, estimator, target_layer=None, source="logit", relu=False):
        self.estimator = estimator
        self.target_layer = target_layer
        self.source = source
        self.relu = relu

    def _map(self, image, class_index):
        return attribution.gradcam_map(self.network_, image, class_index, self.target_layer, self.source, self.relu)


class CAMExplainer(_SaliencyExplainer):
    def __init__(self, estimator):
        self.estimator = estimator

    def _map(self, image, class_index):
        return attribution.cam_map(self.network_, image, class_index)


class IntegratedGradientsExplainer(_SaliencyExplainer):
    def __init__(self, estimator, steps=64, baseline=None, source="logit", n_jobs=1):
        self.estimator = estimator
        self.steps = steps
        self.baseline = baseline
        self.source = source
        self.n_jobs = n_jobs

    def _map(self, image, class_index):
        return attribution.integrated_gradients_map(
            self.network_, image, class_index, self.steps, self.baseline, self.source, n_jobs=self.n_jobs
        )


EXPLAINERS = {
    "occlusion": OcclusionExplainer,
    "gradcam": GradCAMExplainer,
    "cam": CAMExplainer,
    "ig": IntegratedGradientsExplainer,
}
