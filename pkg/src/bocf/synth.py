"""Synthetic Mondrian-style scenes with exactly known illuminants.

Each scene is a mosaic of rectangles; every pixel equals its patch
reflectance multiplied channel-wise by the illuminant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import validate_illuminant

# Classic 24-patch ColorChecker, 8-bit sRGB (row-major, dark skin .. black).
_COLORCHECKER_SRGB8 = np.array(
    [
        (115, 82, 68), (194, 150, 130), (98, 122, 157), (87, 108, 67),
        (133, 128, 177), (103, 189, 170), (214, 126, 44), (80, 91, 166),
        (193, 90, 99), (94, 60, 108), (157, 188, 64), (224, 163, 46),
        (56, 61, 150), (70, 148, 73), (175, 54, 60), (231, 199, 31),
        (187, 86, 149), (8, 133, 161), (243, 243, 242), (200, 200, 200),
        (160, 160, 160), (122, 122, 121), (85, 85, 85), (52, 52, 52),
    ],
    dtype=np.float64,
)


def _srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


COLORCHECKER = _srgb_to_linear(_COLORCHECKER_SRGB8 / 255.0)

# Achromatic surfaces: any scene built from these satisfies the gray-world
# assumption exactly, so a one-patch scene is the "uniform" recovery case.
GRAY = np.linspace(0.2, 1.0, 5)[:, None].repeat(3, axis=1)

PALETTES = {"colorchecker": COLORCHECKER, "gray": GRAY, "white": np.ones((1, 3))}


@dataclass(frozen=True)
class SceneSpec:
    """Scene descriptor.

    ``palette`` is an (M, 3) array of reflectances in [0, 1] that patches
    draw from, or ``None`` for independent uniform draws per channel.
    """

    n_patches: int = 16
    palette: np.ndarray | None = None
    white_patch: bool = False
    seed: int = 0


def _partition(h: int, w: int, n: int, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Split an h x w canvas into ``n`` rectangles by repeated guillotine cuts."""
    rects = [(0, 0, h, w)]
    while len(rects) < n:
        areas = [rh * rw for _, _, rh, rw in rects]
        i = int(np.argmax(areas))
        top, left, rh, rw = rects[i]
        if max(rh, rw) < 2:
            break
        frac = rng.uniform(0.35, 0.65)
        if rh >= rw:
            cut = min(max(1, int(round(rh * frac))), rh - 1)
            parts = [(top, left, cut, rw), (top + cut, left, rh - cut, rw)]
        else:
            cut = min(max(1, int(round(rw * frac))), rw - 1)
            parts = [(top, left, rh, cut), (top, left + cut, rh, rw - cut)]
        rects[i:i + 1] = parts
    return rects


def generate_synthetic_scene(spec: SceneSpec, illuminant, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Render a ``size`` x ``size`` mosaic lit by ``illuminant``.

    Returns the image and the illuminant unchanged as ground truth.
    """
    illum = validate_illuminant(illuminant)
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if spec.n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    if spec.palette is not None:
        palette = np.asarray(spec.palette, dtype=np.float64).reshape(-1, 3)
        if palette.shape[0] == 0:
            raise ValueError("empty palette")
        if np.any(palette < 0) or np.any(palette > 1):
            raise ValueError("palette reflectances must lie in [0, 1]")

    rng = np.random.default_rng(spec.seed)
    rects = _partition(size, size, spec.n_patches, rng)
    if spec.palette is None:
        refl = rng.uniform(0.0, 1.0, size=(len(rects), 3))
    else:
        refl = palette[rng.integers(0, palette.shape[0], size=len(rects))]
    if spec.white_patch:
        refl[int(rng.integers(0, len(rects)))] = 1.0

    reflectance = np.empty((size, size, 3))
    for (top, left, rh, rw), r in zip(rects, refl):
        reflectance[top:top + rh, left:left + rw] = r
    return reflectance * illum, illum.copy()


def random_illuminant(rng: np.random.Generator) -> np.ndarray:
    """Draw a plausible illuminant with the green gain as reference, max channel 1."""
    r = np.exp(rng.uniform(np.log(0.35), np.log(1.25)))
    b = np.exp(rng.uniform(np.log(0.3), np.log(1.1)))
    v = np.array([r, 1.0, b])
    return v / v.max()


def synthetic_dataset(
    n: int,
    size: int,
    seed: int,
    n_patches: int = 16,
    palette: np.ndarray | None = None,
    white_patch: bool = False,
    bit_depth: int | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` scenes with independently drawn illuminants, reproducible from ``seed``.

    With ``bit_depth`` the illuminant is snapped to that integer grid, so a
    unit-reflectance pixel survives saving at that depth without rounding.
    """
    ss = np.random.SeedSequence(seed)
    out = []
    for child in ss.spawn(n):
        rng = np.random.default_rng(child)
        illum = random_illuminant(rng)
        if bit_depth is not None:
            top = 2 ** bit_depth - 1
            illum = np.maximum(np.round(illum * top), 1) / top
        spec = SceneSpec(n_patches, palette, white_patch, int(rng.integers(2**63)))
        out.append(generate_synthetic_scene(spec, illum, size))
    return out
