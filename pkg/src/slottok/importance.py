"""Partition-based slot importance scoring and profile diagnostics.

For a factor that partitions utterances into J groups, the importance of
slot l is the leading eigenvalue of the between-group covariance of the
group-mean codes at that slot, i.e. the squared largest singular value
of the row-centered J x d mean matrix divided by J - 1. A high score
means the slot's mean code spreads across factor groups; zero means the
slot is factor-invariant.

Profiles are compared and summarized with entropy (nats), the Gini
coefficient, Spearman rank correlation, top-k Jaccard overlap, and
cumulative-mass curves.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, StorageError


@dataclass
class PartitionSpec:
    """Disjoint non-empty groups of utterance ids for one factor."""

    factor_name: str
    groups: dict[str, list[str]]

    def __post_init__(self):
        if len(self.groups) < 2:
            raise InputError(f"factor {self.factor_name!r}: need at least 2 groups, got {len(self.groups)}")
        seen = set()
        for gid, members in self.groups.items():
            if not members:
                raise InputError(f"factor {self.factor_name!r}: group {gid!r} is empty")
            dup = seen.intersection(members)
            if dup:
                raise InputError(f"factor {self.factor_name!r}: utterances in multiple groups: {sorted(dup)[:3]}")
            seen.update(members)

    @property
    def J(self) -> int:
        return len(self.groups)

    def sorted_group_ids(self) -> list[str]:
        return sorted(self.groups)


def partition_from_labels(manifest: list[dict], factor: str) -> PartitionSpec:
    """Group manifest entries by the value of one label."""
    groups: dict[str, list[str]] = {}
    for e in manifest:
        if factor not in e["labels"]:
            raise InputError(f"utterance {e['id']!r} has no label for factor {factor!r}")
        groups.setdefault(str(e["labels"][factor]), []).append(e["id"])
    return PartitionSpec(factor_name=factor, groups=groups)


@dataclass
class ImportanceProfile:
    """Per-slot nonnegative importance scores for one factor."""

    factor_name: str
    g: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.g.ndim != 1:
            raise InputError("importance profile must be a vector")
        if not np.isfinite(self.g).all() or (self.g < 0).any():
            raise InputError("importance scores must be finite and nonnegative")

    @property
    def L(self) -> int:
        return self.g.shape[0]

    def normalized(self) -> np.ndarray:
        return normalize(self.g)


def _as_chunk_list(value) -> list[np.ndarray]:
    if isinstance(value, (list, tuple)):
        return [np.asarray(c, dtype=np.float64) for c in value]
    return [np.asarray(value, dtype=np.float64)]


def partition_means(codes: dict[str, object], part: PartitionSpec) -> np.ndarray:
    """Group-mean code tensors: one J x L x d array, groups sorted by id.

    `codes` maps utterance id to an L x d code matrix or a list of them;
    each chunk of a multi-chunk utterance contributes one sample.
    """
    shape = None
    means = []
    for gid in part.sorted_group_ids():
        samples = []
        for uid in part.groups[gid]:
            if uid not in codes:
                raise InputError(f"no codes for utterance {uid!r}")
            for chunk in _as_chunk_list(codes[uid]):
                if chunk.ndim != 2:
                    raise InputError(f"codes for {uid!r} must be L x d matrices")
                if shape is None:
                    shape = chunk.shape
                elif chunk.shape != shape:
                    raise InputError(f"code shape mismatch: {chunk.shape} vs {shape}")
                samples.append(chunk)
        means.append(np.mean(samples, axis=0))
    return np.stack(means)


def importance_score(M: np.ndarray) -> float:
    """Importance of one slot from its J x d group-mean matrix.

    Rows are centered, and the leading eigenvalue of the smaller Gram
    matrix of the centered rows is divided by J - 1. Equals the largest
    squared singular value of the centered matrix over J - 1.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2:
        raise InputError("need a J x d matrix with J >= 2")
    J, d = M.shape
    X = M - M.mean(axis=0, keepdims=True)
    G = X.T @ X if d <= J else X @ X.T
    top = float(np.linalg.eigvalsh(G)[-1])
    return max(top, 0.0) / (J - 1)


def profile(codes: dict[str, object], part: PartitionSpec) -> ImportanceProfile:
    """Importance scores of every slot for one factor partition."""
    means = partition_means(codes, part)
    g = np.array([importance_score(means[:, l, :]) for l in range(means.shape[1])])
    return ImportanceProfile(
        factor_name=part.factor_name,
        g=g,
        provenance={"groups": part.sorted_group_ids(), "num_utterances": sum(len(v) for v in part.groups.values())},
    )


def normalize(g: np.ndarray) -> np.ndarray:
    """Scale a nonnegative profile to unit sum."""
    g = np.asarray(g, dtype=np.float64)
    total = g.sum()
    if not total > 0:
        raise InputError("degenerate profile: all importance scores are zero")
    return g / total


def entropy(g_norm: np.ndarray) -> float:
    """Shannon entropy of a normalized profile, in nats (0 ln 0 = 0)."""
    p = _check_normalized(g_norm)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() + 0.0)  # +0.0 avoids -0.0


def gini(g_norm: np.ndarray) -> float:
    """Gini coefficient of a normalized profile; 0 uniform, 1 - 1/L one-hot."""
    p = _check_normalized(g_norm)
    return float(np.abs(p[:, None] - p[None, :]).sum() / (2 * p.shape[0]))


def _check_normalized(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.shape[0] < 1:
        raise InputError("profile must be a non-empty vector")
    if (g < 0).any() or abs(g.sum() - 1.0) > 1e-6:
        raise InputError("expected a normalized (unit-sum, nonnegative) profile")
    return g


def average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned the mean of their rank range."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0], dtype=np.float64)
    i = 0
    while i < x.shape[0]:
        j = i
        while j + 1 < x.shape[0] and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(g1: np.ndarray, g2: np.ndarray) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    a, b = np.asarray(g1, float), np.asarray(g2, float)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise InputError("need two equal-length vectors of length >= 2")
    ra, rb = average_ranks(a), average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0:
        raise InputError("rank variance is zero; correlation undefined")
    return float((ra * rb).sum() / denom)


def top_k_slots(g: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest entries; ties break toward lower index."""
    g = np.asarray(g, dtype=np.float64)
    if not 1 <= k <= g.shape[0]:
        raise InputError(f"k must be in [1, {g.shape[0]}], got {k}")
    order = sorted(range(g.shape[0]), key=lambda i: (-g[i], i))
    return order[:k]


def jaccard_topk(g1: np.ndarray, g2: np.ndarray, k: int) -> float:
    """Jaccard overlap of the top-k slot sets of two profiles."""
    s1, s2 = set(top_k_slots(g1, k)), set(top_k_slots(g2, k))
    return len(s1 & s2) / len(s1 | s2)


def cumulative_mass_curve(g_norm: np.ndarray) -> np.ndarray:
    """Partial sums of the normalized profile sorted descending."""
    p = _check_normalized(g_norm)
    return np.cumsum(np.sort(p)[::-1])


# Artifact I/O: profile files, diagnostics reports, curve exports.


def save_profile(prof: ImportanceProfile, path: str | Path, normalized: bool = False) -> None:
    g = prof.normalized() if normalized else prof.g
    doc = {"factor": prof.factor_name, "L": prof.L, "g": [float(v) for v in g], "normalized": normalized}
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write profile {path}: {e}") from e


def load_profile(path: str | Path) -> tuple[ImportanceProfile, bool]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"profile not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot parse profile {p}: {e}") from e
    for key in ("factor", "L", "g", "normalized"):
        if key not in doc:
            raise FormatError(f"profile {p}: missing key {key!r}")
    g = np.asarray(doc["g"], dtype=np.float64)
    if g.shape[0] != doc["L"]:
        raise FormatError(f"profile {p}: L={doc['L']} does not match len(g)={g.shape[0]}")
    return ImportanceProfile(factor_name=doc["factor"], g=g), bool(doc["normalized"])


def diagnostics(profiles: list[ImportanceProfile], topk: tuple[int, ...] = (5, 10)) -> dict:
    """Concentration stats per profile plus pairwise similarity stats."""
    conc = {}
    for prof in profiles:
        gn = prof.normalized()
        conc[prof.factor_name] = {"entropy": entropy(gn), "gini": gini(gn)}
    pairs = []
    for i in range(len(profiles)):
        for j in range(i + 1, len(profiles)):
            a, b = profiles[i], profiles[j]
            row = {"factors": [a.factor_name, b.factor_name], "spearman": spearman(a.g, b.g)}
            for k in topk:
                kk = min(k, a.L)
                row[f"jaccard@{k}"] = jaccard_topk(a.g, b.g, kk)
            pairs.append(row)
    return {"concentration": conc, "similarity": pairs}


def save_curve(g_norm: np.ndarray, path: str | Path) -> None:
    """Export a cumulative-mass curve as (rank, cumulative_mass) CSV."""
    curve = cumulative_mass_curve(g_norm)
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rank", "cumulative_mass"])
            for r, v in enumerate(curve, start=1):
                w.writerow([r, f"{v:.12g}"])
    except OSError as e:
        raise StorageError(f"cannot write curve {path}: {e}") from e
