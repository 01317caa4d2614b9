"""Nearest-centroid factor probe over feature sequences.

Stands in for perceptual metrics at desk scale: a class centroid is the
mean of time-averaged frames over its samples, classification is
nearest-centroid in Euclidean distance, and the transfer rate of a batch
of edits is the fraction classified as their intended target class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, StorageError


def time_average(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise InputError("expected a T x H matrix")
    return frames.mean(axis=0)


@dataclass
class CentroidProbe:
    factor_name: str
    centroids: dict[str, np.ndarray]

    def __post_init__(self):
        if len(self.centroids) < 2:
            raise InputError("probe needs at least 2 classes")
        for cls, c in self.centroids.items():
            if not np.isfinite(c).all():
                raise InputError(f"non-finite centroid for class {cls!r}")

    def classes(self) -> list[str]:
        return sorted(self.centroids)


def fit_probe(features: list[np.ndarray], labels: list[str], factor_name: str = "") -> CentroidProbe:
    """Build per-class centroids from labeled feature sequences."""
    if len(features) != len(labels) or not features:
        raise InputError("need matching non-empty features and labels")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for frames, label in zip(features, labels):
        avg = time_average(frames)
        if label in sums:
            sums[label] = sums[label] + avg
            counts[label] += 1
        else:
            sums[label] = avg
            counts[label] = 1
    centroids = {cls: sums[cls] / counts[cls] for cls in sums}
    return CentroidProbe(factor_name=factor_name, centroids=centroids)


def classify(probe: CentroidProbe, frames: np.ndarray) -> str:
    """Nearest centroid; distance ties go to the smallest class id."""
    avg = time_average(frames)
    best_cls, best_dist = None, np.inf
    for cls in probe.classes():
        dist = float(np.linalg.norm(avg - probe.centroids[cls]))
        if dist < best_dist:
            best_cls, best_dist = cls, dist
    return best_cls


def accuracy_and_confusion(probe: CentroidProbe, features: list[np.ndarray], labels: list[str]) -> tuple[float, dict]:
    """Classification accuracy plus a {true: {predicted: count}} table."""
    if len(features) != len(labels) or not features:
        raise InputError("need matching non-empty features and labels")
    confusion: dict[str, dict[str, int]] = {}
    hits = 0
    for frames, label in zip(features, labels):
        pred = classify(probe, frames)
        confusion.setdefault(str(label), {})
        confusion[str(label)][pred] = confusion[str(label)].get(pred, 0) + 1
        hits += pred == str(label)
    return hits / len(features), confusion


def transfer_rate(probe: CentroidProbe, edits: list[np.ndarray], intended: list[str]) -> float:
    """Fraction of edited outputs classified as their intended class."""
    if len(edits) != len(intended) or not edits:
        raise InputError("need matching non-empty edits and intended classes")
    hits = sum(classify(probe, frames) == str(cls) for frames, cls in zip(edits, intended))
    return hits / len(edits)


def save_report(report: dict, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write probe report {path}: {e}") from e
