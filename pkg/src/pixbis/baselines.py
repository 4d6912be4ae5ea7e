"""Handcrafted-feature baselines: uniform LBP histograms and a reduced
image-quality-measure vector, each scored by L2-regularized logistic
regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import gaussian_blur

LUMA = np.array([0.299, 0.587, 0.114])
LBP_BINS = 59
PSNR_CAP = 100.0
IQM_BLUR_SIGMA = 1.17
IQM_NAMES = (
    "mse", "psnr", "snr", "max_diff", "avg_diff", "nae", "structural_content",
    "ncc", "mean_angle_similarity", "total_edge_diff", "laplacian_var",
    "mean_r", "mean_g", "mean_b", "std_r", "std_g", "std_b", "colorfulness",
)
IQM_DISCLAIMER = (
    "IQM baseline uses a reduced 18-measure surrogate, not the full 139-feature set"
)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luminance of an H x W x 3 (or 3 x H x W) image."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[2] != 3:
        arr = arr.transpose(1, 2, 0)
    return arr @ LUMA


def _transitions(code: int) -> int:
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def uniform_lookup() -> np.ndarray:
    """Pattern -> bin: the 58 uniform codes in ascending order, then 58 for the rest."""
    table = np.full(256, LBP_BINS - 1, dtype=np.int64)
    uniform = [c for c in range(256) if _transitions(c) <= 2]
    table[uniform] = np.arange(len(uniform))
    return table


_LOOKUP = uniform_lookup()


def uniform_lbp_histogram(gray: np.ndarray) -> np.ndarray:
    gray = np.ascontiguousarray(gray, dtype=np.float64)
    if gray.ndim != 2 or min(gray.shape) < 3:
        raise ValueError(f"LBP needs a 2-d image of at least 3x3, got {gray.shape}")
    codes = kernels.lbp_codes(gray)
    hist = np.bincount(_LOOKUP[codes].ravel(), minlength=LBP_BINS).astype(np.float64)
    return hist / hist.sum()


def _sobel_magnitude(gray):
    p = np.pad(gray, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def _laplacian(gray):
    return gray[:-2, 1:-1] + gray[2:, 1:-1] + gray[1:-1, :-2] + gray[1:-1, 2:] - 4 * gray[1:-1, 1:-1]


def _reference(x):
    """Blurred reference; anchoring on one pixel keeps constant images exact."""
    anchor = x[:1, :1]
    return gaussian_blur(x - anchor, IQM_BLUR_SIGMA, radius=1) + anchor


def _ratio(num, den, empty):
    return num / den if den > 0 else empty


def iqm_features(image: np.ndarray) -> np.ndarray:
    """18 quality measures; order matches IQM_NAMES.

    Full-reference measures compare the gray image with its Gaussian-blurred
    copy (sigma 1.17, 3x3 support); the rest are no-reference statistics.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
        img = img.transpose(1, 2, 0)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"iqm_features needs a 3-channel image, got {img.shape}")
    gray = img @ LUMA
    ref = _reference(gray)
    diff = gray - ref
    mse = float(np.mean(diff ** 2))
    # the 3-tap kernel with edge replication preserves the mean, so this is
    # zero up to rounding; snap the rounding so it cannot masquerade as signal
    avg_diff = float(np.mean(diff))
    if abs(avg_diff) <= 1e-12 * max(float(np.mean(np.abs(gray))), 1e-300):
        avg_diff = 0.0
    energy = float(np.sum(gray ** 2))
    psnr = min(10 * np.log10(1.0 / mse), PSNR_CAP) if mse > 0 else PSNR_CAP
    snr = min(10 * np.log10(energy / (gray.size * mse)), PSNR_CAP) if mse > 0 and energy > 0 else PSNR_CAP

    # angle between each RGB pixel vector and its blurred counterpart
    ref_rgb = _reference(img)
    dot = np.sum(img * ref_rgb, axis=2)
    norms = np.linalg.norm(img, axis=2) * np.linalg.norm(ref_rgb, axis=2)
    cos = np.where(norms > 0, dot / np.where(norms > 0, norms, 1), 1.0)
    mas = 1 - float(np.mean(2 / np.pi * np.arccos(np.clip(cos, -1, 1))))

    rg = img[..., 0] - img[..., 1]
    yb = 0.5 * (img[..., 0] + img[..., 1]) - img[..., 2]
    colorfulness = np.hypot(rg.std(), yb.std()) + 0.3 * np.hypot(rg.mean(), yb.mean())

    feats = [
        mse,
        psnr,
        snr,
        float(np.max(np.abs(diff))),
        avg_diff,
        _ratio(float(np.sum(np.abs(diff))), float(np.sum(np.abs(gray))), 0.0),
        _ratio(energy, float(np.sum(ref ** 2)), 1.0),
        _ratio(float(np.sum(gray * ref)), energy, 1.0),
        mas,
        float(np.mean(np.abs(_sobel_magnitude(gray) - _sobel_magnitude(ref)))),
        float(np.var(_laplacian(gray))) if min(gray.shape) >= 3 else 0.0,
        *img.mean(axis=(0, 1)),
        *img.std(axis=(0, 1)),
        float(colorfulness),
    ]
    return np.array(feats, dtype=np.float64)


def extract(kind: str, image: np.ndarray) -> np.ndarray:
    """Feature vector of an H x W x 3 (or 3 x H x W) image in [0, 1]."""
    if kind == "lbp":
        return uniform_lbp_histogram(to_grayscale(image))
    if kind == "iqm":
        return iqm_features(image)
    raise ValueError(f"unknown baseline kind {kind!r}")


# -- classifier --------------------------------------------------------------------

@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray

    def response(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.weights.shape[0]:
            raise ValueError(f"feature dimension {x.shape[1]} != model dimension {self.weights.shape[0]}")
        return ((x - self.mean) / self.std) @ self.weights + self.bias


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def linear_train(features, labels, l2: float = 1e-3, epochs: int = 500, lr: float = 0.5, seed: int = 0) -> LinearModel:
    """Logistic regression on standardized features (labels: 1 bonafide, 0 attack).

    Full-batch gradient descent from zero weights; the L2 term is applied as
    a proximal shrink so any ``l2`` is stable. Zero-variance dimensions get
    std 1. Starting from zero keeps the fit deterministic; ``seed`` is
    accepted for interface symmetry with the CNN trainer.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be N x D with one label per row")
    if not (y == 1).any() or not (y == 0).any():
        raise ValueError("training data needs both classes")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    w = np.zeros(z.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(epochs):
        p = _sigmoid(z @ w + b)
        err = p - y
        w = (w - lr * (z.T @ err) / n) / (1 + 2 * lr * l2)
        b -= lr * err.mean()
    return LinearModel(w, float(b), mean, std)


def linear_score(model: LinearModel, feature) -> np.ndarray:
    """Bonafide probability for one feature vector or a batch."""
    s = _sigmoid(model.response(feature))
    return s if np.ndim(feature) == 2 else float(s[0])


def write_features(rows, path) -> None:
    """CSV ``video_id,frame_index,f0..f{D-1}`` from (video_id, frame_index, vector)."""
    rows = list(rows)
    dim = len(rows[0][2]) if rows else 0
    with open(path, "w") as fh:
        fh.write(",".join(["video_id", "frame_index"] + [f"f{i}" for i in range(dim)]) + "\n")
        for vid, fi, vec in rows:
            fh.write(",".join([vid, str(fi)] + [f"{v:.9g}" for v in vec]) + "\n")
