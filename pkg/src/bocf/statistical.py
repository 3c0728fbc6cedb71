"""Static illuminant estimators from the (n, p, sigma) Minkowski framework.

The estimate for channel c is the Minkowski p-mean of the magnitude of the
n-th order spatial derivative of the Gaussian-smoothed channel. Gray-World,
White-Patch, Shades-of-Gray, Gray-Edge and General Gray-World are fixed
parameter choices of the same function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imageio import validate_image

__all__ = [
    "NoEvidenceError",
    "FrameworkParams",
    "derivative_field",
    "minkowski_norms",
    "estimate_framework",
    "gray_world",
    "white_patch",
    "shades_of_gray",
    "gray_edge",
    "general_gray_world",
    "METHODS",
    "get_method",
]

TRUNCATE = 3.0
EVIDENCE_RATIO = 1e-12


class NoEvidenceError(ValueError):
    """The derivative field carries no energy, so there is nothing to estimate from."""


@dataclass(frozen=True)
class FrameworkParams:
    n: int = 0
    p: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.n not in (0, 1, 2):
            raise ValueError(f"derivative order must be 0, 1 or 2, got {self.n}")
        if not (self.p > 0):
            raise ValueError(f"Minkowski norm must be positive or inf, got {self.p}")
        if not (self.sigma >= 0) or math.isinf(self.sigma):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")


def _smooth(ch: np.ndarray, sigma: float, order=(0, 0)) -> np.ndarray:
    return ndimage.gaussian_filter(ch, sigma, order=order, mode="reflect", truncate=TRUNCATE)


def _central(ch: np.ndarray, axis: int) -> np.ndarray:
    return ndimage.correlate1d(ch, [-0.5, 0.0, 0.5], axis=axis, mode="reflect")


def _second(ch: np.ndarray, axis: int) -> np.ndarray:
    return ndimage.correlate1d(ch, [1.0, -2.0, 1.0], axis=axis, mode="reflect")


def derivative_field(img: np.ndarray, n: int, sigma: float) -> np.ndarray:
    """Per-pixel, per-channel magnitude of the n-th order derivative, shape (H, W, 3).

    With ``sigma == 0`` derivatives are central finite differences; otherwise
    Gaussian-derivative filters of scale ``sigma``. Borders reflect.
    """
    img = np.asarray(img, dtype=np.float64)
    out = np.empty_like(img)
    for c in range(3):
        ch = img[:, :, c]
        if n == 0:
            out[:, :, c] = np.abs(_smooth(ch, sigma) if sigma > 0 else ch)
        elif n == 1:
            if sigma > 0:
                gx, gy = _smooth(ch, sigma, (0, 1)), _smooth(ch, sigma, (1, 0))
            else:
                gx, gy = _central(ch, 1), _central(ch, 0)
            out[:, :, c] = np.hypot(gx, gy)
        else:
            if sigma > 0:
                gxx = _smooth(ch, sigma, (0, 2))
                gyy = _smooth(ch, sigma, (2, 0))
                gxy = _smooth(ch, sigma, (1, 1))
            else:
                gxx, gyy = _second(ch, 1), _second(ch, 0)
                gxy = _central(_central(ch, 1), 0)
            # Frobenius norm of the Hessian
            out[:, :, c] = np.sqrt(gxx * gxx + gyy * gyy + 2.0 * gxy * gxy)
    return out


def minkowski_norms(img: np.ndarray, params: FrameworkParams) -> np.ndarray:
    """Unnormalized per-channel Minkowski p-means of the derivative field."""
    field = derivative_field(img, params.n, params.sigma).reshape(-1, 3)
    peak = field.max(axis=0)
    if math.isinf(params.p):
        return peak
    out = np.zeros(3)
    for c in range(3):
        if peak[c] > 0:
            # dividing by the peak keeps large p from underflowing
            out[c] = peak[c] * np.mean((field[:, c] / peak[c]) ** params.p) ** (1.0 / params.p)
    return out


def estimate_framework(img: np.ndarray, params: FrameworkParams) -> np.ndarray:
    """Simplex-normalized illuminant estimate for framework parameters ``params``."""
    img = validate_image(img)
    field = derivative_field(img, params.n, params.sigma)
    if np.sum(field * field) <= EVIDENCE_RATIO * np.sum(img * img):
        raise NoEvidenceError(
            f"derivative field (n={params.n}, sigma={params.sigma}) carries no energy"
        )
    est = minkowski_norms(img, params)
    total = est.sum()
    if not total > 0:
        raise NoEvidenceError("all channel estimates are zero")
    return est / total


def gray_world(img):
    return estimate_framework(img, FrameworkParams(0, 1.0, 0.0))


def white_patch(img):
    return estimate_framework(img, FrameworkParams(0, math.inf, 0.0))


def shades_of_gray(img, p):
    return estimate_framework(img, FrameworkParams(0, p, 0.0))


def gray_edge(img, p, sigma):
    return estimate_framework(img, FrameworkParams(1, p, sigma))


def general_gray_world(img, p, sigma):
    return estimate_framework(img, FrameworkParams(0, p, sigma))


# name -> (function, takes p, takes sigma)
METHODS = {
    "gray-world": (gray_world, False, False),
    "white-patch": (white_patch, False, False),
    "shades-of-gray": (shades_of_gray, True, False),
    "gray-edge": (gray_edge, True, True),
    "general-gray-world": (general_gray_world, True, True),
}


def get_method(name: str, p: float | None = None, sigma: float | None = None):
    """Bind a named estimator to its parameters, returning ``f(img) -> estimate``."""
    try:
        fn, needs_p, needs_sigma = METHODS[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(METHODS)}") from None
    if needs_p and p is None:
        raise ValueError(f"method {name!r} requires --p")
    if needs_sigma and sigma is None:
        raise ValueError(f"method {name!r} requires --sigma")
    if needs_sigma:
        return lambda img: fn(img, p, sigma)
    if needs_p:
        return lambda img: fn(img, p)
    return fn
