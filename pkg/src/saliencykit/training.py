"""Mini-batch SGD on mean cross-entropy, and prediction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .layers import softmax
from .network import _as_batch, backprop, forward_batch, network_forward

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 300
    batch_size: int = 4
    seed: int = 0
    schedule: str = "linear"

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be a finite non-negative number, got {self.learning_rate}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be an unsigned integer, got {self.seed}")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"schedule must be 'constant' or 'linear', got {self.schedule!r}")

    def rate_at(self, epoch):
        """Step size for ``epoch``; ``linear`` decays to ``lr / epochs`` in the last epoch."""
        if self.schedule == "linear":
            return self.learning_rate * (self.epochs - epoch) / self.epochs
        return self.learning_rate

    def to_dict(self):
        return asdict(self)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _as_arrays(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2:
        images, labels = dataset
    else:
        images = [s.image for s in dataset]
        labels = [s.label for s in dataset]
    return np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def train_sgd(network, dataset, config=TrainConfig(), callback=None):
    """Train with plain SGD (no momentum) and return ``(network, epoch_losses)``.

    ``dataset`` is either a list of scenes or an ``(images, labels)`` pair.
    Each epoch visits the samples in a seeded permutation; the reported loss
    of an epoch is the sample-weighted mean of its batch losses.
    """
    images, labels = _as_arrays(dataset)
    if images.shape[1:] != network.input_shape:
        raise ValueError(f"images have shape {images.shape[1:]}, network expects {network.input_shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= network.n_classes:
        raise ValueError(f"labels must lie in [0, {network.n_classes})")
    n = len(labels)
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")

    rng = np.random.default_rng(config.seed)
    params = [{k: v.copy() for k, v in p.items()} for p in network.params]
    net = network
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        lr = config.rate_at(epoch)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            acts = forward_batch(net, images[idx])
            loss, grad = cross_entropy(acts[-1], labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            _, pgrads = backprop(net, acts, grad, stop=0, need_params=True, need_input=False)
            if lr:
                for p, g in zip(params, pgrads):
                    for name in p:
                        p[name] -= lr * g[name]
                net = network.with_params(params)
            total += loss * len(idx)
        losses.append(total / n)
        logger.debug("epoch %d loss %.6f", epoch, losses[-1])
        if callback is not None:
            callback(epoch, losses[-1], net)
    return net, losses


def predict(network, image):
    """Return ``(class_index, probability)``; ties go to the lowest index."""
    _, batched = _as_batch(network, image)
    if batched:
        raise ValueError("predict takes a single image; use predict_batch for batches")
    probs = network_forward(network, image).probabilities
    c = int(np.argmax(probs))
    return c, float(probs[c])


def predict_batch(network, images, chunk=128):
    images = np.asarray(images, dtype=np.float64)
    probs = np.concatenate(
        [network_forward(network, images[i : i + chunk]).probabilities for i in range(0, len(images), chunk)]
    ) if len(images) else np.zeros((0, network.n_classes))
    return probs.argmax(axis=1), probs
