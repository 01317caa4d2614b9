"""Synthetic factor-controlled feature corpora and feature-file I/O.

Each utterance is a T x H matrix built from three additive components:
a per-content smooth trajectory, a constant per-speaker vector, and
scaled Gaussian noise. All randomness is derived by hashing a master
seed, so corpus generation is order-independent and bit-reproducible.

Feature file layout (LATF v1, little-endian):
    magic "LATF" | u32 version=1 | u32 T | u32 H | T*H float32 row-major
Manifest: JSON array of {"id", "path", "labels": {factor: value}}.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, StorageError

LATF_MAGIC = b"LATF"
LATF_VERSION = 1

# Component scales of the synthetic generator. Content trajectories are
# normalized to unit RMS, so SPEAKER_SCALE is the per-entry std of the
# speaker component relative to content power 1.
SPEAKER_SCALE = 2.0
CONTENT_SMOOTHING = 7
# Fraction of noise power carried by a fixed "floor" direction, so that
# degradation level is visible in time-averaged features. beta=1 puts
# half the power in the floor, half in diffuse i.i.d. noise; total noise
# power per entry stays exactly 1.
NOISE_FLOOR_BIAS = 1.0

CLEAN = "clean"


def derive_seed(master_seed: int, *parts) -> int:
    """Derive a 64-bit seed by hashing the master seed with context parts.

    Hash-based derivation keeps per-utterance streams independent of
    generation order.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass
class FeatureSequence:
    """A T x H matrix of codec-space features with an utterance id."""

    frames: np.ndarray
    utterance_id: str = ""
    sample_rate_hint: float = 50.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise InputError(f"frames must be a T x H matrix with T,H >= 1, got shape {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]


@dataclass
class FactorLabels:
    """Global factor labels attached to one utterance."""

    speaker_id: str
    noise_level_db: float | str  # dB value or "clean"
    content_id: str
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"speaker": self.speaker_id, "noise": self.noise_level_db, "content": self.content_id}
        d.update(self.extra)
        return d


@dataclass
class CorpusSpec:
    """Parameters of a synthetic corpus.

    Utterance i walks the (speaker, content, snr) grid with snr fastest,
    wrapping into additional takes once the grid is exhausted. Entries of
    snr_grid_db are dB values or the string "clean".
    """

    num_utterances: int
    T: int
    H: int
    num_speakers: int
    num_contents: int
    snr_grid_db: list
    master_seed: int = 0

    def __post_init__(self):
        if self.num_utterances < 0:
            raise InputError("num_utterances must be >= 0")
        for name in ("T", "H", "num_speakers", "num_contents"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive")
        if not self.snr_grid_db:
            raise InputError("snr_grid_db must be non-empty")
        for v in self.snr_grid_db:
            if v != CLEAN and not isinstance(v, (int, float)):
                raise InputError(f"snr grid entries must be numbers or '{CLEAN}', got {v!r}")

    def grid_assignment(self, index: int) -> tuple[int, int, float | str, int]:
        """(speaker, content, snr, take) of utterance `index`."""
        if index < 0 or index >= self.num_utterances:
            raise InputError(f"utterance index {index} out of range [0, {self.num_utterances})")
        n = len(self.snr_grid_db)
        cells = self.num_speakers * self.num_contents * n
        take, cell = divmod(index, cells)
        speaker = cell // (self.num_contents * n)
        content = (cell // n) % self.num_contents
        snr = self.snr_grid_db[cell % n]
        return speaker, content, snr, take


def noise_gain(snr_db: float | str) -> float:
    """Noise amplitude giving the nominal content-to-noise power ratio."""
    if snr_db == CLEAN:
        return 0.0
    return float(10.0 ** (-float(snr_db) / 20.0))


def speaker_vector(spec: CorpusSpec, speaker: int) -> np.ndarray:
    """Constant per-speaker H-vector, determined by the master seed only."""
    if not 0 <= speaker < spec.num_speakers:
        raise InputError(f"speaker index {speaker} out of range")
    rng = np.random.default_rng(derive_seed(spec.master_seed, "speaker", speaker))
    return (SPEAKER_SCALE * rng.standard_normal(spec.H)).astype(np.float64)


def content_trajectory(spec: CorpusSpec, content: int) -> np.ndarray:
    """Smooth T x H trajectory for one content id, unit RMS.

    A Gaussian walk is low-pass filtered with a short moving average and
    normalized to unit root-mean-square power.
    """
    if not 0 <= content < spec.num_contents:
        raise InputError(f"content index {content} out of range")
    rng = np.random.default_rng(derive_seed(spec.master_seed, "content", content))
    walk = np.cumsum(rng.standard_normal((spec.T, spec.H)), axis=0)
    w = min(CONTENT_SMOOTHING, spec.T)
    if w > 1:
        kernel = np.ones(w) / w
        pad = np.pad(walk, ((w - 1, 0), (0, 0)), mode="edge")
        walk = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, pad)
    rms = float(np.sqrt(np.mean(walk**2)))
    if rms > 0:
        walk = walk / rms
    return walk


def noise_floor_direction(spec: CorpusSpec) -> np.ndarray:
    """Unit H-vector along which the noise carries its mean component."""
    rng = np.random.default_rng(derive_seed(spec.master_seed, "noisefloor"))
    v = rng.standard_normal(spec.H)
    return v / np.linalg.norm(v)


def unit_noise(spec: CorpusSpec, seed: int) -> np.ndarray:
    """T x H noise field with average power exactly 1 per entry.

    A diffuse i.i.d. part plus a deterministic floor along
    noise_floor_direction, mixed so the total power is unchanged.
    """
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((spec.T, spec.H))
    beta = NOISE_FLOOR_BIAS
    floor = np.sqrt(spec.H) * noise_floor_direction(spec)
    return (eps + beta * floor[None, :]) / np.sqrt(1.0 + beta * beta)


def synth_utterance(
    spec: CorpusSpec,
    speaker: int,
    content: int,
    snr_db: float | str,
    seed: int,
    utterance_id: str = "",
) -> FeatureSequence:
    """Generate one utterance: content + speaker + scaled noise.

    Fully deterministic given (spec, arguments); the explicit seed drives
    only the noise realization.
    """
    traj = content_trajectory(spec, content)
    spk = speaker_vector(spec, speaker)
    gain = noise_gain(snr_db)
    frames = traj + spk[None, :]
    if gain > 0.0:
        frames = frames + gain * unit_noise(spec, seed)
    return FeatureSequence(frames.astype(np.float32), utterance_id=utterance_id)


def _noise_label(snr_db: float | str):
    return CLEAN if snr_db == CLEAN else float(snr_db)


def utterance_labels(spec: CorpusSpec, index: int) -> FactorLabels:
    speaker, content, snr, _take = spec.grid_assignment(index)
    return FactorLabels(
        speaker_id=f"spk{speaker:02d}",
        noise_level_db=_noise_label(snr),
        content_id=f"con{content:02d}",
        extra={"speaker_parity": "even" if speaker % 2 == 0 else "odd"},
    )


def build_corpus(spec: CorpusSpec, out_dir: str | Path) -> list[dict]:
    """Generate all utterances into out_dir and write manifest.json.

    Returns the manifest entries. Per-utterance seeds are hashed from the
    master seed and the utterance index, so output does not depend on
    generation order.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        feat_dir = out / "features"
        feat_dir.mkdir(exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create corpus directory {out}: {e}") from e

    manifest = []
    for i in range(spec.num_utterances):
        speaker, content, snr, _take = spec.grid_assignment(i)
        seed = derive_seed(spec.master_seed, "utterance", i)
        uid = f"utt{i:04d}"
        seq = synth_utterance(spec, speaker, content, snr, seed, utterance_id=uid)
        rel = f"features/{uid}.latf"
        write_features(seq, out / rel)
        manifest.append({"id": uid, "path": rel, "labels": utterance_labels(spec, i).as_dict()})
    write_manifest(manifest, out / "manifest.json")
    return manifest


def write_manifest(entries: list[dict], path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write manifest {path}: {e}") from e


def read_manifest(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"manifest not found: {p}")
    try:
        entries = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot parse manifest {p}: {e}") from e
    if not isinstance(entries, list):
        raise FormatError(f"manifest {p} must be a JSON array")
    for e in entries:
        if not isinstance(e, dict) or "id" not in e or "path" not in e or "labels" not in e:
            raise FormatError(f"manifest {p}: entries need id/path/labels")
    return entries


def write_features(seq: FeatureSequence, path: str | Path) -> None:
    """Write a feature sequence in the LATF binary layout."""
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    if not np.isfinite(frames).all():
        raise InputError(f"refusing to write non-finite features for {seq.utterance_id!r}")
    header = LATF_MAGIC + struct.pack("<III", LATF_VERSION, frames.shape[0], frames.shape[1])
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(frames.tobytes())
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def read_features(path: str | Path) -> FeatureSequence:
    """Read a LATF file, validating magic, version, shape, and finiteness."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"feature file not found: {p}")
    try:
        blob = p.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {p}: {e}") from e
    if len(blob) < 16 or blob[:4] != LATF_MAGIC:
        raise FormatError(f"{p}: bad magic, not a LATF file")
    version, T, H = struct.unpack("<III", blob[4:16])
    if version != LATF_VERSION:
        raise FormatError(f"{p}: unsupported LATF version {version}")
    if T < 1 or H < 1:
        raise FormatError(f"{p}: invalid dimensions T={T}, H={H}")
    expected = 16 + 4 * T * H
    if len(blob) != expected:
        raise FormatError(f"{p}: payload length {len(blob)} does not match header ({expected} expected)")
    frames = np.frombuffer(blob, dtype="<f4", offset=16).reshape(T, H)
    if not np.isfinite(frames).all():
        raise FormatError(f"{p}: non-finite entries in payload")
    return FeatureSequence(frames.copy(), utterance_id=p.stem)


def load_corpus(manifest_path: str | Path) -> tuple[list[dict], dict[str, FeatureSequence]]:
    """Read a manifest and all feature files it lists."""
    manifest = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    seqs = {}
    for e in manifest:
        seq = read_features(root / e["path"])
        seq.utterance_id = e["id"]
        seqs[e["id"]] = seq
    return manifest, seqs
