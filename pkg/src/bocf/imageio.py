"""Image and dataset ingestion, CCM application and training augmentation.

Images are float64 arrays of shape (H, W, 3) holding linear-light values;
decoded files are divided by their maximum code value so they land in
[0, 1]. No gamma handling is done anywhere.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

__all__ = [
    "ImageError",
    "ManifestEntry",
    "DatasetManifest",
    "AugmentationConfig",
    "validate_image",
    "normalize_illuminant",
    "validate_illuminant",
    "load_image",
    "save_image",
    "load_ccm",
    "apply_ccm",
    "read_manifest",
    "write_manifest",
    "center_square",
    "resample",
    "rotate",
    "augment",
    "prepare_test_image",
]


class ImageError(ValueError):
    """An image or manifest could not be decoded or violates invariants."""


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"non-3-channel image (shape {img.shape})")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError("empty image")
    if not np.all(np.isfinite(img)) or np.any(img < 0):
        raise ImageError("image values must be finite and non-negative")
    return img


def validate_illuminant(rgb) -> np.ndarray:
    v = np.asarray(rgb, dtype=np.float64).reshape(-1)
    if v.shape != (3,) or not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise ImageError(f"illuminant must be three positive finite values, got {rgb!r}")
    return v


def normalize_illuminant(rgb) -> np.ndarray:
    """Scale a positive 3-vector onto the simplex (components sum to 1)."""
    v = np.asarray(rgb, dtype=np.float64)
    return v / v.sum()


# ---------------------------------------------------------------------------
# decoding / encoding

_PNM_SUFFIXES = {".ppm", ".pnm"}


def _read_pnm(path: Path) -> tuple[np.ndarray, int]:
    raw = path.read_bytes()
    magic = raw[:2]
    if magic not in (b"P3", b"P6"):
        if magic in (b"P1", b"P2", b"P4", b"P5"):
            raise ImageError(f"{path}: non-3-channel image ({magic.decode()})")
        raise ImageError(f"{path}: unsupported format")

    # header: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    width, height, maxval = (int(t) for t in tokens)
    if not 0 < maxval < 65536:
        raise ImageError(f"{path}: invalid maxval {maxval}")
    count = width * height * 3

    if magic == b"P6":
        pos += 1  # exactly one whitespace byte before the raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    else:
        body = re.sub(rb"#[^\n]*", b"", raw[pos:])
        data = np.array(body.split()[:count], dtype=np.int64)
        if data.size != count:
            raise ImageError(f"{path}: truncated raster")
    return data.reshape(height, width, 3).astype(np.uint32), maxval


def _write_pnm(path: Path, codes: np.ndarray, maxval: int, ascii_: bool = False) -> None:
    h, w, _ = codes.shape
    if ascii_:
        header = f"P3\n{w} {h}\n{maxval}\n".encode()
        body = "\n".join(" ".join(str(int(v)) for v in row.reshape(-1)) for row in codes)
        path.write_bytes(header + body.encode() + b"\n")
        return
    header = f"P6\n{w} {h}\n{maxval}\n".encode()
    dtype = ">u2" if maxval > 255 else "u1"
    path.write_bytes(header + codes.astype(dtype).tobytes())


def load_image(path: str | os.PathLike, bit_depth_hint: int | None = None) -> np.ndarray:
    """Decode a PNG or PPM/PNM file into an (H, W, 3) float image.

    Values are divided by the format's maximum code value (255 or 65535 for
    PNG, the header maxval for PNM). ``bit_depth_hint`` overrides this with
    ``2**bit_depth_hint - 1``, e.g. 12-bit sensor data stored in 16-bit PNG.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix in _PNM_SUFFIXES:
        codes, maxval = _read_pnm(path)
    elif suffix == ".png":
        arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise ImageError(f"{path}: unreadable file")
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageError(f"{path}: non-3-channel image")
        codes = arr[:, :, ::-1]
        maxval = 65535 if arr.dtype == np.uint16 else 255
    else:
        raise ImageError(f"{path}: unsupported format {suffix!r}")
    if bit_depth_hint is not None:
        maxval = 2 ** int(bit_depth_hint) - 1
    return validate_image(codes.astype(np.float64) / maxval)


def save_image(
    path: str | os.PathLike, img: np.ndarray, bit_depth: int = 16, ascii_pnm: bool = False
) -> None:
    """Encode an image with values in [0, 1] as PNG or PPM (P6, or P3 with ``ascii_pnm``)."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    path = Path(path)
    img = validate_image(img)
    maxval = 2 ** bit_depth - 1
    codes = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    codes = codes.astype(np.uint16 if bit_depth == 16 else np.uint8)
    suffix = path.suffix.lower()
    if suffix in _PNM_SUFFIXES:
        _write_pnm(path, codes, maxval, ascii_pnm)
    elif suffix == ".png":
        if not cv2.imwrite(str(path), np.ascontiguousarray(codes[:, :, ::-1])):
            raise ImageError(f"{path}: write failed")
    else:
        raise ImageError(f"{path}: unsupported format {suffix!r}")


# ---------------------------------------------------------------------------
# CCM


def load_ccm(path: str | os.PathLike) -> np.ndarray:
    """Read 9 whitespace-separated decimals (row-major) into a 3x3 matrix."""
    values = Path(path).read_text().split()
    if len(values) != 9:
        raise ImageError(f"{path}: expected 9 values, got {len(values)}")
    return np.array([float(v) for v in values]).reshape(3, 3)


def apply_ccm(img: np.ndarray, ccm: np.ndarray) -> np.ndarray:
    ccm = np.asarray(ccm, dtype=np.float64)
    if ccm.shape != (3, 3) or not np.all(np.isfinite(ccm)):
        raise ValueError("ccm must be a finite 3x3 matrix")
    out = np.einsum("ij,hwj->hwi", ccm, np.asarray(img, dtype=np.float64))
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    illuminant: np.ndarray
    camera: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(self.root, [self.entries[i] for i in indices])


def read_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Parse a ``path,r,g,b[,camera]`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ImageError(f"{path}: manifest not found")
    root = path.resolve().parent
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "r", "g", "b"} - set(reader.fieldnames or ())
        if missing:
            raise ImageError(f"{path}: manifest header lacks {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            p = Path(row["path"])
            if not p.is_absolute():
                p = root / p
            if check_files and not p.is_file():
                raise ImageError(f"{path}:{lineno}: image {p} does not exist")
            try:
                gt = validate_illuminant([float(row[c]) for c in "rgb"])
            except (ValueError, TypeError) as exc:
                raise ImageError(f"{path}:{lineno}: {exc}") from None
            camera = (row.get("camera") or "").strip() or None
            entries.append(ManifestEntry(p, gt, camera))
    return DatasetManifest(root, entries)


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    path = Path(path)
    with_camera = any(e.camera for e in manifest.entries)
    base = path.resolve().parent
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "r", "g", "b"] + (["camera"] if with_camera else []))
        for e in manifest.entries:
            p = Path(e.path)
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
            row = [p.as_posix()] + [repr(float(v)) for v in e.illuminant]
            if with_camera:
                row.append(e.camera or "")
            writer.writerow(row)


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class AugmentationConfig:
    crop_size: int = 512
    rotation: float = 30.0
    rescale: tuple[float, float] = (0.8, 1.2)
    output_size: int = 227
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rescale
        if not 0 < lo <= hi:
            raise ValueError(f"rescale range must be a positive interval, got {self.rescale}")
        if self.crop_size < 1 or self.output_size < 1 or self.rotation < 0:
            raise ValueError("crop/output size must be >= 1 and rotation >= 0")


def center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def resample(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample to ``size`` x ``size`` with pixel-centre alignment."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return np.array(img, dtype=np.float64)
    ys = (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = (np.arange(size) + 0.5) * (w / size) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack(
        [ndimage.map_coordinates(img[:, :, c], [yy, xx], order=1, mode="nearest") for c in range(3)],
        axis=-1,
    )


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre; bilinear, reflected borders."""
    if degrees == 0:
        return np.array(img, dtype=np.float64)
    h, w = img.shape[:2]
    t = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sy = np.cos(t) * yy - np.sin(t) * xx + cy
    sx = np.sin(t) * yy + np.cos(t) * xx + cx
    return np.stack(
        [ndimage.map_coordinates(img[:, :, c], [sy, sx], order=1, mode="mirror") for c in range(3)],
        axis=-1,
    )


def augment(
    img: np.ndarray, gt, cfg: AugmentationConfig, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Random crop, rotation and intensity rescale, then resample to the output size.

    The same intensity factor multiplies the patch and the ground truth, so
    the simplex-normalized ground truth is unchanged. Values are not clamped.
    ``rng`` defaults to a generator seeded from ``cfg.seed``.
    """
    img = validate_image(img)
    gt = validate_illuminant(gt)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    h, w = img.shape[:2]
    if cfg.crop_size <= min(h, w):
        s = cfg.crop_size
        top = int(rng.integers(0, h - s + 1))
        left = int(rng.integers(0, w - s + 1))
        patch = img[top:top + s, left:left + s]
    else:
        patch = center_square(img)
    angle = float(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation > 0 else 0.0
    lo, hi = cfg.rescale
    factor = float(rng.uniform(lo, hi)) if hi > lo else lo
    patch = rotate(patch, angle) * factor
    return resample(patch, cfg.output_size), gt * factor


def prepare_test_image(img: np.ndarray, size: int) -> np.ndarray:
    """Deterministic test-time path: largest centred square, then bilinear resample."""
    return resample(center_square(validate_image(img)), size)
