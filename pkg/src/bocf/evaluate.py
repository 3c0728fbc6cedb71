"""Recovery angular error and the five-statistic summary report."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .imageio import DatasetManifest, ImageError, load_image, prepare_test_image

__all__ = [
    "rae",
    "quartiles",
    "ErrorReport",
    "summarize",
    "evaluate_arrays",
    "evaluate_model",
    "as_estimator",
]

STAT_KEYS = ("best25", "mean", "median", "trimean", "worst25")


def rae(gt, est) -> float:
    """Angle in degrees between two illuminant vectors.

    Evaluated as ``atan2(|a x b|, a . b)``, which equals the arccos of the
    cosine similarity but stays accurate for nearly parallel vectors.
    """
    a = np.asarray(gt, dtype=np.float64)
    b = np.asarray(est, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("recovery angular error of a zero vector")
    a, b = a / na, b / nb
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b))))


def quartiles(errors: Sequence[float]) -> tuple[float, float, float]:
    """(Q1, median, Q3) interpolating linearly between ranks at position (n+1)p.

    Positions outside [1, n] clamp to the extremes. For 1..7 this gives 2, 4, 6.
    """
    q = np.percentile(np.asarray(errors, dtype=np.float64), [25, 50, 75], method="weibull")
    return float(q[0]), float(q[1]), float(q[2])


@dataclass
class ErrorReport:
    best25: float
    mean: float
    median: float
    trimean: float
    worst25: float
    errors: list[float] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.errors)

    def stats(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in STAT_KEYS}

    def to_json_dict(self, digits: int = 6) -> dict:
        out: dict = {k: round(v, digits) for k, v in self.stats().items()}
        out["n"] = self.n
        if self.failures:
            out["failures"] = [{"path": p, "error": msg} for p, msg in self.failures]
        return out

    def to_json(self, digits: int = 6) -> str:
        return json.dumps(self.to_json_dict(digits), indent=2)

    def format_text(self, digits: int = 6, title: str | None = None) -> str:
        labels = {"best25": "best 25%", "mean": "mean", "median": "median",
                  "trimean": "trimean", "worst25": "worst 25%"}
        lines = [title] if title else []
        for k in STAT_KEYS:
            lines.append(f"{labels[k]:<10} {round(getattr(self, k), digits):>12.{digits}f}")
        lines.append(f"{'n':<10} {self.n:>12d}")
        for p, msg in self.failures:
            lines.append(f"failed     {p}: {msg}")
        return "\n".join(lines)

    def write_errors_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "error_deg"])
            for p, e in zip(self.paths, self.errors):
                w.writerow([p, repr(e)])


def summarize(errors: Iterable[float], paths: Sequence[str] | None = None,
              failures: Sequence[tuple[str, str]] = ()) -> ErrorReport:
    errs = [float(e) for e in errors]
    if not errs:
        raise ValueError("cannot summarize an empty error list")
    s = np.sort(np.asarray(errs))
    m = math.ceil(len(s) / 4)
    q1, q2, q3 = quartiles(s)
    return ErrorReport(
        best25=float(np.mean(s[:m])),
        mean=float(np.mean(s)),
        median=q2,
        trimean=(q1 + 2 * q2 + q3) / 4,
        worst25=float(np.mean(s[-m:])),
        errors=errs,
        paths=list(paths) if paths is not None else [],
        failures=list(failures),
    )


def as_estimator(method) -> tuple[Callable[[np.ndarray], np.ndarray], int | None]:
    """Normalize a model or a callable into ``(estimate_fn, input_size)``."""
    from .model import BocfModel, forward

    if isinstance(method, BocfModel):
        return (lambda img: forward(method, img).data.copy()), method.config.input_size
    return method, None


def evaluate_arrays(method, images: Sequence[np.ndarray], gts: Sequence, input_size: int | None = None) -> ErrorReport:
    """Evaluate on in-memory images; models get the centre-crop-and-resize test path."""
    fn, size = as_estimator(method)
    size = size or input_size
    errs = []
    for img, gt in zip(images, gts):
        x = prepare_test_image(img, size) if size else img
        errs.append(rae(gt, fn(x)))
    return summarize(errs)


def evaluate_model(method, manifest: DatasetManifest, input_size: int | None = None,
                   workers: int = 1) -> ErrorReport:
    """One estimate per manifest image; per-image failures are recorded and skipped.

    ``method`` is a :class:`~bocf.model.BocfModel` or a callable
    ``image -> illuminant``. Models always receive the deterministic
    test-time crop and resize; callables only when ``input_size`` is given.
    """
    fn, size = as_estimator(method)
    size = size or input_size

    def one(entry):
        try:
            img = load_image(entry.path)
            x = prepare_test_image(img, size) if size else img
            return rae(entry.illuminant, fn(x)), None
        except (ImageError, ValueError, OSError) as exc:
            return None, str(exc)

    entries = manifest.entries
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, entries))
    else:
        results = [one(e) for e in entries]

    errs, paths, failures = [], [], []
    for entry, (err, msg) in zip(entries, results):
        if msg is None:
            errs.append(err)
            paths.append(str(entry.path))
        else:
            failures.append((str(entry.path), msg))
    if not errs:
        raise ValueError(f"no image could be evaluated ({len(failures)} failures)")
    return summarize(errs, paths, failures)
