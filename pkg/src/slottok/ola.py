"""Feature-domain overlap-add inference for long sequences.

Sequences longer than the model's training chunk are processed on a
sliding window grid (hop = chunk length minus overlap), each window is
processed independently, and results are fused with a non-periodic Hann
window: weighted chunks accumulate into a buffer alongside the window
envelope, the ratio is taken with the envelope clamped away from zero,
and the result is cropped back to the input length. Sequences that fit
in one chunk take a single padded forward pass instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import FeatureSequence
from .errors import InputError

DEFAULT_OVERLAP = 50
DEFAULT_CLAMP_EPS = 1e-8


@dataclass
class OlaConfig:
    chunk_frames: int
    overlap: int = DEFAULT_OVERLAP
    clamp_eps: float = DEFAULT_CLAMP_EPS

    def __post_init__(self):
        if self.chunk_frames < 2:
            raise InputError("chunk_frames must be >= 2")
        if not 0 < self.overlap < self.chunk_frames:
            raise InputError("overlap must satisfy 0 < overlap < chunk_frames")
        if self.clamp_eps <= 0:
            raise InputError("clamp_eps must be positive")

    @property
    def hop(self) -> int:
        return self.chunk_frames - self.overlap


def chunk_grid(T: int, cfg: OlaConfig) -> tuple[list[tuple[int, int]], int]:
    """Sliding-window grid covering T frames; returns (windows, right pad).

    Windows start at multiples of the hop; the last window is padded so
    it fits the regular grid.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    K, h = cfg.chunk_frames, cfg.hop
    n = 1 if T <= K else int(np.ceil((T - K) / h)) + 1
    windows = [(i * h, i * h + K) for i in range(n)]
    return windows, windows[-1][1] - T


def hann(K: int) -> np.ndarray:
    """Symmetric (non-periodic) Hann window of length K; endpoints are 0."""
    if K < 2:
        raise InputError("hann window needs K >= 2")
    n = np.arange(K, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (K - 1)))


def stitch(chunks: list[np.ndarray], cfg: OlaConfig, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Fuse processed chunks back into a T-frame sequence.

    Returns (features, envelope): the Hann-weighted accumulation divided
    by the clamped envelope, cropped to T, plus the per-frame envelope
    itself (useful for masking low-confidence edge frames).
    """
    windows, _pad = chunk_grid(T, cfg)
    if len(chunks) != len(windows):
        raise InputError(f"got {len(chunks)} chunks for a {len(windows)}-window grid")
    K = cfg.chunk_frames
    H = np.asarray(chunks[0]).shape[1]
    w = hann(K)
    full = windows[-1][1]
    acc = np.zeros((full, H), dtype=np.float64)
    env = np.zeros(full, dtype=np.float64)
    for (s, e), chunk in zip(windows, chunks):
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape != (K, H):
            raise InputError(f"chunk shape {chunk.shape} does not match ({K}, {H})")
        acc[s:e] += chunk * w[:, None]
        env[s:e] += w
    out = acc / np.maximum(env, cfg.clamp_eps)[:, None]
    return out[:T].astype(np.float32), env[:T]


def process_long(frames: np.ndarray, chunk_fn, cfg: OlaConfig, return_envelope: bool = False):
    """Apply a chunk processor to a sequence of arbitrary length.

    chunk_fn maps a (chunk_frames, H) array to an array of the same
    shape. Short inputs are zero-padded to one chunk, processed in a
    single pass, and cropped; long inputs go through the overlap-add
    grid. Output length always equals the input length.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise InputError("expected a T x H matrix")
    T, H = frames.shape
    K = cfg.chunk_frames
    if T <= K:
        padded = np.zeros((K, H), dtype=frames.dtype)
        padded[:T] = frames
        out = np.asarray(chunk_fn(padded))[:T].astype(np.float32)
        env = np.ones(T, dtype=np.float64)
    else:
        windows, pad = chunk_grid(T, cfg)
        padded = np.concatenate([frames, np.zeros((pad, H), dtype=frames.dtype)]) if pad else frames
        processed = [np.asarray(chunk_fn(padded[s:e])) for s, e in windows]
        out, env = stitch(processed, cfg, T)
    if return_envelope:
        return out, env
    return out


@dataclass
class ChunkCodes:
    """Quantized codes of one analysis window of an utterance."""

    codes: np.ndarray  # L x d
    indices: np.ndarray  # L
    start: int
    end: int


def tokenize_sequence(seq: FeatureSequence, model, cfg: OlaConfig) -> list[ChunkCodes]:
    """Tokenize an utterance into one code matrix per analysis window.

    Utterances that fit in one chunk are zero-padded and produce a
    single window; longer ones follow the overlap-add grid.
    """
    windows, pad = chunk_grid(seq.T, cfg)
    padded = np.concatenate([seq.frames, np.zeros((pad, seq.H), dtype=seq.frames.dtype)]) if pad else seq.frames
    out = []
    for s, e in windows:
        res = model.forward(padded[s:e])
        out.append(ChunkCodes(codes=res.codes, indices=res.indices, start=s, end=e))
    return out


def decode_chunks(chunks: list[ChunkCodes], model, cfg: OlaConfig, T: int) -> np.ndarray:
    """Decode per-window code matrices back to a T-frame sequence."""
    if not chunks:
        raise InputError("no chunks to decode")
    if len(chunks) == 1:
        return model.decompress(chunks[0].codes, T)
    decoded = [model.decompress(c.codes, cfg.chunk_frames) for c in chunks]
    out, _env = stitch(decoded, cfg, T)
    return out


def resynthesize(seq: FeatureSequence, model, cfg: OlaConfig) -> FeatureSequence:
    """Tokenize and decode an utterance of arbitrary length."""
    out = process_long(seq.frames, lambda chunk: model.forward(chunk).features_hat, cfg)
    return FeatureSequence(out, utterance_id=seq.utterance_id, sample_rate_hint=seq.sample_rate_hint)
