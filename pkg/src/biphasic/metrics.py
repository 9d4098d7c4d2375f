"""Evaluation metrics: FID on embedder features, MS-SSIM and attribute error.

Image arguments use the dataset convention: float arrays in [0, 1] with
shape (N, 3, H, W).  Networks are fed the [-1, 1] rescaling, average-pooled
down to their input resolution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .toydata import DomainSpec, LabelError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
EVAL_CHUNK = 256


class MetricError(ValueError):
    pass


# -- network feeding ------------------------------------------------------------


def net_input(images: np.ndarray, hw: int) -> Tensor:
    """[0, 1] images -> [-1, 1] tensor pooled down to ``hw``."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4:
        raise MetricError(f"expected (N, C, H, W) images, got shape {x.shape}")
    t = Tensor(x * 2.0 - 1.0)
    while t.shape[2] > hw:
        t = ops.avg_pool2d(t, 2)
    if t.shape[2:] != (hw, hw):
        raise MetricError(f"cannot pool {x.shape[2]}x{x.shape[3]} images to {hw}x{hw}")
    return t


def _require_frozen(net, what: str) -> None:
    if getattr(net, "frozen", True) is False:
        raise MetricError(f"{what} {getattr(net, 'name', '')!r} must be frozen for evaluation")


def embed_images(images: np.ndarray, phi) -> np.ndarray:
    """Embeddings of [0, 1] images, computed in fixed-size chunks."""
    _require_frozen(phi, "embedder")
    hw = phi.arch["hw"]
    out = []
    with no_grad():
        for start in range(0, len(images), EVAL_CHUNK):
            out.append(phi.embed(net_input(images[start : start + EVAL_CHUNK], hw)).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, phi.arch["embed_dim"]))


# -- FID ----------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def stats_from_features(features: np.ndarray) -> FeatureStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise MetricError(f"need a nonempty (n, d) feature array, got shape {f.shape}")
    n, d = f.shape
    if n < d + 1:
        warnings.warn(f"{n} samples for {d}-dim features: covariance is rank deficient", stacklevel=2)
    mu = f.mean(axis=0)
    sigma = np.cov(f, rowvar=False, ddof=1) if n > 1 else np.zeros((d, d))
    return FeatureStats(mu, np.atleast_2d(sigma))


def feature_stats(images: np.ndarray, phi) -> FeatureStats:
    """Mean and unbiased covariance of ``phi`` embeddings of ``images``."""
    if len(images) == 0:
        raise MetricError("feature_stats needs at least one image")
    return stats_from_features(embed_images(images, phi))


def matrix_sqrt_sym(a: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MetricError(f"matrix_sqrt_sym needs a square matrix, got shape {a.shape}")
    asym = np.abs(a - a.T).max() if a.size else 0.0
    if asym > tol * max(1.0, np.abs(a).max()):
        raise MetricError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(real: FeatureStats, fake: FeatureStats) -> float:
    """Fréchet distance between two gaussian fits."""
    if real.dim != fake.dim:
        raise MetricError(f"feature dimensions differ: {real.dim} vs {fake.dim}")
    diff = real.mu - fake.mu
    root = matrix_sqrt_sym(real.sigma)
    cross = matrix_sqrt_sym(_sym(root @ fake.sigma @ root))
    value = diff @ diff + np.trace(real.sigma) + np.trace(fake.sigma) - 2.0 * np.trace(cross)
    return float(max(value, 0.0))


def _sym(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


# -- MS-SSIM --------------------------------------------------------------------


@lru_cache(maxsize=None)
def gaussian_window(size: int, sigma: float = SIGMA) -> np.ndarray:
    """Normalized 1-D gaussian of odd length ``size``."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    g.setflags(write=False)
    return g


def _window_for(side: int) -> int:
    size = min(WINDOW, side)
    return size if size % 2 else size - 1


def _filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def _ssim_terms(x: np.ndarray, y: np.ndarray, data_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-image mean luminance and contrast-structure terms."""
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(_window_for(min(x.shape[-2:])))
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    axes = tuple(range(1, x.ndim))
    return lum.mean(axis=axes), cs.mean(axis=axes)


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise MetricError(f"expected an image or image batch, got shape {x.shape}")


def ms_ssim_per_image(x1: np.ndarray, x2: np.ndarray, scales: int = 3, data_range: float = 1.0) -> np.ndarray:
    a, b = _as_batch(x1), _as_batch(x2)
    if a.shape != b.shape:
        raise MetricError(f"ms_ssim: shapes differ, {a.shape} vs {b.shape}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise MetricError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}, got {scales}")
    coarsest = min(a.shape[-2:]) // 2 ** (scales - 1)
    if coarsest < 3:
        raise MetricError(f"{a.shape[-2]}x{a.shape[-1]} images are too small for {scales} scales")
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    out = np.ones(a.shape[0])
    for j in range(scales):
        lum, cs = _ssim_terms(a, b, data_range)
        term = cs if j < scales - 1 else lum * cs
        out *= np.clip(term, 0.0, None) ** weights[j]
        if j < scales - 1:
            a, b = _pool2(a), _pool2(b)
    return np.clip(out, 0.0, 1.0)


def ms_ssim(x1: np.ndarray, x2: np.ndarray, scales: int = 3, data_range: float = 1.0) -> float:
    """Mean multi-scale SSIM over a batch.

    The 11-pixel gaussian window shrinks to the largest odd size that fits
    at coarse scales, so 32x32 images support three scales.
    """
    return float(ms_ssim_per_image(x1, x2, scales, data_range).mean())


# -- attribute classification error ---------------------------------------------


def clas_error_from_predictions(predicted: np.ndarray, target: np.ndarray, spec: DomainSpec) -> float:
    """Fraction of samples with any group or flag disagreeing with the target."""
    target = spec.validate_batch(target)
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != target.shape:
        raise LabelError(f"predictions {predicted.shape} do not match targets {target.shape}")
    if len(target) == 0:
        raise MetricError("clas_error needs at least one sample")
    wrong = np.zeros(len(target), dtype=bool)
    for sl in spec.group_slices():
        wrong |= predicted[:, sl].argmax(axis=1) != target[:, sl].argmax(axis=1)
    for i in spec.flag_indices():
        wrong |= predicted[:, i] != target[:, i]
    return float(wrong.mean())


def predict_attributes(images: np.ndarray, classifier, spec: DomainSpec) -> np.ndarray:
    """Hard labels from a frozen attribute classifier."""
    from .nets import predict_labels

    _require_frozen(classifier, "classifier")
    hw = classifier.arch["hw"]
    if classifier.arch["label_size"] != spec.label_size:
        raise LabelError(f"classifier emits {classifier.arch['label_size']} logits; {spec.describe()} needs {spec.label_size}")
    out = []
    with no_grad():
        for start in range(0, len(images), EVAL_CHUNK):
            out.append(predict_labels(classifier, net_input(images[start : start + EVAL_CHUNK], hw), spec))
    return np.concatenate(out, axis=0)


def clas_error(images: np.ndarray, target_labels: np.ndarray, classifier, spec: DomainSpec) -> float:
    return clas_error_from_predictions(predict_attributes(images, classifier, spec), target_labels, spec)
