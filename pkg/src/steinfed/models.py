"""Priors, local losses, and the frozen feature extractor.

Local models expose two methods consumed by the federation layer:

``loss(theta)``
    Scalar loss of one parameter vector, batched over rows when given a
    matrix.

``neg_loss_grad(theta, alpha)``
    (1/alpha) times the gradient of minus the loss, i.e. the score of the
    tempered local likelihood exp(-loss/alpha).  Batched the same way.

Priors additionally expose samples, log densities, scores, and a support
clamp used to keep particles inside a bounded support.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

CLAMP_MARGIN = 1e-6


class OutOfSupportError(ValueError):
    """A point fell outside the open support of a bounded prior."""


def _as_rows(theta: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(theta, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"parameter shape {np.asarray(theta).shape} does not match dimension {dim}")
    return arr, single


# --- priors -----------------------------------------------------------------


class UniformPrior:
    """Box-uniform prior on an open axis-aligned support."""

    def __init__(self, lo, hi, dim: int | None = None):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.ndim == 0 and hi.ndim == 0:
            dim = 1 if dim is None else dim
            lo = np.full(dim, float(lo))
            hi = np.full(dim, float(hi))
        else:
            lo, hi = np.broadcast_arrays(lo, hi)
            lo = np.array(lo, dtype=float).ravel()
            hi = np.array(hi, dtype=float).ravel()
            if dim is not None and dim != lo.size:
                raise ValueError(f"dim {dim} conflicts with bound length {lo.size}")
        if not np.all(lo < hi):
            raise ValueError("lower bounds must be strictly below upper bounds")
        self.lo = lo
        self.hi = hi
        self.dim = lo.size
        self._log_volume = float(np.log(hi - lo).sum())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def log_density(self, theta: np.ndarray) -> float | np.ndarray:
        """Normalized log density; the closed box carries the mass."""
        arr, single = _as_rows(theta, self.dim)
        inside = np.all((arr >= self.lo) & (arr <= self.hi), axis=1)
        out = np.where(inside, -self._log_volume, -np.inf)
        return float(out[0]) if single else out

    def score(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of the log density; the support is treated as open."""
        arr, single = _as_rows(theta, self.dim)
        inside = np.all((arr > self.lo) & (arr < self.hi), axis=1)
        if not np.all(inside):
            bad = arr[np.flatnonzero(~inside)[0]]
            raise OutOfSupportError(f"point {bad} is outside the prior support")
        out = np.zeros_like(arr)
        return out[0] if single else out

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        """Pull escaped particles back to just inside the support boundary."""
        return np.clip(theta, self.lo + CLAMP_MARGIN, self.hi - CLAMP_MARGIN)


class GaussianPrior:
    """Diagonal Gaussian prior."""

    def __init__(self, mean, variance, dim: int | None = None):
        mean = np.asarray(mean, dtype=float)
        variance = np.asarray(variance, dtype=float)
        if mean.ndim == 0 and variance.ndim == 0:
            dim = 1 if dim is None else dim
            mean = np.full(dim, float(mean))
            variance = np.full(dim, float(variance))
        else:
            mean, variance = np.broadcast_arrays(mean, variance)
            mean = np.array(mean, dtype=float).ravel()
            variance = np.array(variance, dtype=float).ravel()
            if dim is not None and dim != mean.size:
                raise ValueError(f"dim {dim} conflicts with parameter length {mean.size}")
        if not np.all(variance > 0):
            raise ValueError("variances must be positive")
        self.mean = mean
        self.variance = variance
        self.dim = mean.size

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))

    def log_density(self, theta: np.ndarray) -> float | np.ndarray:
        arr, single = _as_rows(theta, self.dim)
        quad = ((arr - self.mean) ** 2 / self.variance).sum(axis=1)
        const = float(np.log(2.0 * np.pi * self.variance).sum())
        out = -0.5 * (quad + const)
        return float(out[0]) if single else out

    def score(self, theta: np.ndarray) -> np.ndarray:
        arr, single = _as_rows(theta, self.dim)
        out = (self.mean - arr) / self.variance
        return out[0] if single else out

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        """Unbounded support: clamping is the identity."""
        return np.asarray(theta, dtype=float)


# --- local losses -----------------------------------------------------------


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "variance", np.atleast_1d(np.asarray(self.variance, dtype=float)))
        if not self.weight > 0:
            raise ValueError(f"component weight must be positive, got {self.weight}")
        if not np.all(self.variance > 0):
            raise ValueError("component variances must be positive")
        if self.mean.shape != self.variance.shape:
            raise ValueError("component mean and variance lengths differ")


class GaussianMixtureLoss:
    """Local loss whose tempered likelihood is a Gaussian mixture.

    The loss is defined as ``-alpha * log sum_i w_i N(theta; mu_i, var_i)``
    for the protocol temperature alpha, so the score of the tempered
    likelihood, ``neg_loss_grad``, is the mixture score independent of
    alpha.  Weights are normalized internally; ``loss`` reports the alpha=1
    value unless told otherwise.
    """

    def __init__(self, components: list[MixtureComponent] | tuple[MixtureComponent, ...]):
        if len(components) == 0:
            raise ValueError("mixture needs at least one component")
        dims = {c.mean.size for c in components}
        if len(dims) != 1:
            raise ValueError("mixture components have inconsistent dimensions")
        self.components = tuple(components)
        self.dim = dims.pop()
        weights = np.array([c.weight for c in components], dtype=float)
        self._log_weights = np.log(weights / weights.sum())
        self._means = np.stack([c.mean for c in components])
        self._variances = np.stack([c.variance for c in components])

    def _component_log_densities(self, arr: np.ndarray) -> np.ndarray:
        diff = arr[:, None, :] - self._means[None, :, :]
        quad = (diff ** 2 / self._variances[None, :, :]).sum(axis=2)
        const = np.log(2.0 * np.pi * self._variances).sum(axis=1)
        return self._log_weights[None, :] - 0.5 * (quad + const[None, :])

    def log_mixture_density(self, theta: np.ndarray) -> float | np.ndarray:
        arr, single = _as_rows(theta, self.dim)
        out = logsumexp(self._component_log_densities(arr), axis=1)
        return float(out[0]) if single else out

    def loss(self, theta: np.ndarray, alpha: float = 1.0) -> float | np.ndarray:
        log_mix = self.log_mixture_density(theta)
        return -alpha * log_mix

    def neg_loss_grad(self, theta: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        arr, single = _as_rows(theta, self.dim)
        resp = softmax(self._component_log_densities(arr), axis=1)
        comp_scores = (self._means[None, :, :] - arr[:, None, :]) / self._variances[None, :, :]
        out = (resp[:, :, None] * comp_scores).sum(axis=1)
        return out[0] if single else out


class SoftmaxHeadLoss:
    """Mean cross-entropy of a linear softmax head on frozen features.

    The parameter vector is the flattened ``(f + 1, C)`` matrix whose first
    ``f`` rows are the weights and last row the biases.  An empty shard
    yields a loss of exactly 0 and a zero gradient.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, num_classes: int):
        features = np.asarray(features, dtype=float)
        labels = np.asarray(labels)
        if features.ndim != 2:
            raise ValueError(f"expected (n, f) features, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(
                f"label count {labels.shape} does not match feature count {features.shape[0]}"
            )
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError("labels outside [0, num_classes)")
        self.features = features
        self.labels = labels.astype(np.int64)
        self.num_classes = num_classes
        self.num_features = features.shape[1]
        self.dim = (self.num_features + 1) * num_classes
        self._design = np.hstack([features, np.ones((features.shape[0], 1))])
        self._onehot = np.zeros((features.shape[0], num_classes))
        if labels.size:
            self._onehot[np.arange(labels.size), self.labels] = 1.0

    def _logits(self, arr: np.ndarray) -> np.ndarray:
        mats = arr.reshape(arr.shape[0], self.num_features + 1, self.num_classes)
        return np.einsum("nf,qfc->qnc", self._design, mats)

    def loss(self, theta: np.ndarray) -> float | np.ndarray:
        arr, single = _as_rows(theta, self.dim)
        if self.labels.size == 0:
            out = np.zeros(arr.shape[0])
            return float(out[0]) if single else out
        logits = self._logits(arr)
        log_probs = logits - logsumexp(logits, axis=2, keepdims=True)
        picked = log_probs[:, np.arange(self.labels.size), self.labels]
        out = -picked.mean(axis=1)
        return float(out[0]) if single else out

    def neg_loss_grad(self, theta: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        arr, single = _as_rows(theta, self.dim)
        if self.labels.size == 0:
            out = np.zeros_like(arr)
            return out[0] if single else out
        probs = softmax(self._logits(arr), axis=2)
        resid = (probs - self._onehot[None, :, :]) / self.labels.size
        grad = np.einsum("nf,qnc->qfc", self._design, resid)
        out = -grad.reshape(arr.shape[0], self.dim) / alpha
        return out[0] if single else out

    def predict_proba(self, theta: np.ndarray, features: np.ndarray) -> np.ndarray:
        """Class probabilities of a single parameter vector on new features."""
        arr, _ = _as_rows(theta, self.dim)
        design = np.hstack([np.asarray(features, dtype=float), np.ones((len(features), 1))])
        mats = arr.reshape(arr.shape[0], self.num_features + 1, self.num_classes)
        logits = np.einsum("nf,qfc->qnc", design, mats)
        return softmax(logits, axis=2)


# --- model-averaged prediction ----------------------------------------------


def averaged_class_probabilities(
    particles: np.ndarray, features: np.ndarray, num_classes: int
) -> np.ndarray:
    """Average softmax head probabilities over a particle ensemble."""
    theta = np.asarray(particles, dtype=float)
    features = np.asarray(features, dtype=float)
    if theta.ndim != 2 or theta.shape[0] == 0:
        raise ValueError(f"expected a nonempty (N, d) particle array, got shape {theta.shape}")
    num_features = features.shape[1]
    if theta.shape[1] != (num_features + 1) * num_classes:
        raise ValueError(
            f"particle dimension {theta.shape[1]} does not match head layout "
            f"({num_features} features, {num_classes} classes)"
        )
    design = np.hstack([features, np.ones((features.shape[0], 1))])
    mats = theta.reshape(theta.shape[0], num_features + 1, num_classes)
    logits = np.einsum("nf,qfc->qnc", design, mats)
    return softmax(logits, axis=2).mean(axis=0)


def per_class_accuracy(
    particles: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    classes: tuple[int, ...] | None = None,
) -> dict[int, float]:
    """Accuracy of the model-averaged prediction, broken out per class.

    Ties in the averaged probabilities resolve to the lowest class index.
    Requesting a class with no test examples is an error.
    """
    labels = np.asarray(labels).astype(np.int64)
    probs = averaged_class_probabilities(particles, features, num_classes)
    predicted = np.argmax(probs, axis=1)
    wanted = tuple(sorted(set(labels.tolist()))) if classes is None else tuple(classes)
    result: dict[int, float] = {}
    for cls in wanted:
        mask = labels == cls
        if not mask.any():
            raise ValueError(f"no test examples for class {cls}")
        result[int(cls)] = float((predicted[mask] == cls).mean())
    return result


def macro_accuracy(accuracy_map: dict[int, float], classes) -> float:
    """Unweighted mean of per-class accuracies over a class subset."""
    classes = tuple(classes)
    if len(classes) == 0:
        raise ValueError("macro accuracy over an empty class set")
    missing = [c for c in classes if c not in accuracy_map]
    if missing:
        raise ValueError(f"classes {missing} missing from accuracy map")
    return float(np.mean([accuracy_map[c] for c in classes]))


# --- frozen feature extractor -------------------------------------------------


@dataclass(frozen=True)
class FeatureMapConfig:
    """Pretraining settings for the one-hidden-layer feature extractor."""

    hidden_units: int = 100
    epochs: int = 500
    step_size: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_units < 1:
            raise ValueError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")


@dataclass(frozen=True)
class FeatureMap:
    """Frozen input-to-hidden ReLU layer of a pretrained network."""

    weights: np.ndarray
    biases: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.maximum(x @ self.weights + self.biases, 0.0)

    @property
    def num_features(self) -> int:
        return self.weights.shape[1]


def pretrain_feature_map(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    config: FeatureMapConfig | None = None,
) -> FeatureMap:
    """Fit input -> hidden ReLU -> softmax by full-batch gradient descent.

    The softmax head is discarded; only the hidden layer is returned, to be
    used as a frozen feature map.  Training is deterministic under the
    config seed.
    """
    config = config or FeatureMapConfig()
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected nonempty (n, f) features, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise ValueError(f"label count {y.shape} does not match feature count {x.shape[0]}")

    n, f = x.shape
    h = config.hidden_units
    rng = np.random.default_rng(config.seed)
    w1 = rng.standard_normal((f, h)) * np.sqrt(2.0 / f)
    b1 = np.zeros(h)
    w2 = rng.standard_normal((h, num_classes)) * np.sqrt(2.0 / h)
    b2 = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0

    for _ in range(config.epochs):
        pre = x @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ w2 + b2
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        loss = -log_probs[np.arange(n), y].mean()
        if not np.isfinite(loss):
            raise FloatingPointError("pretraining loss diverged")
        resid = (np.exp(log_probs) - onehot) / n
        grad_w2 = hidden.T @ resid
        grad_b2 = resid.sum(axis=0)
        back = (resid @ w2.T) * (pre > 0.0)
        grad_w1 = x.T @ back
        grad_b1 = back.sum(axis=0)
        w2 -= config.step_size * grad_w2
        b2 -= config.step_size * grad_b2
        w1 -= config.step_size * grad_w1
        b1 -= config.step_size * grad_b1

    return FeatureMap(weights=w1, biases=b1)
