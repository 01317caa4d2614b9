"""Binary spherical quantization of latent slot vectors.

A latent vector is projected onto the unit sphere and quantized to
per-coordinate signs scaled by 1/sqrt(d); the sign pattern is bit-packed
(coordinate i -> bit i, least significant first, sign(0) counts as +)
into an integer index in [0, 2^d). The entropy regularizer pushes each
sample's soft bits toward confidence while pushing the batch-mean bits
toward balance.

Codes file layout (LATC v1, little-endian):
    magic "LATC" | u32 version=1 | u32 L | u32 d |
    L*d float32 codes row-major | L u64 indices
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, InputError, NumericError, StorageError

LATC_MAGIC = b"LATC"
LATC_VERSION = 1

PROJECT_EPS = 1e-12


@dataclass
class BsqConfig:
    """Quantizer hyperparameters.

    d is the code dimension (bits per token, vocabulary 2^d);
    inv_temperature scales the logits of the soft-bit relaxation used by
    the regularizer; entropy_weight is the coefficient of the regularizer
    in the total training loss; diversity_weight is the coefficient of
    the batch-balance term inside the regularizer.
    """

    d: int = 13
    inv_temperature: float = 100.0
    entropy_weight: float = 0.1
    diversity_weight: float = 1.0

    def __post_init__(self):
        if not 1 <= self.d <= 24:
            raise InputError(f"code dimension d must be in [1, 24], got {self.d}")
        if self.inv_temperature <= 0:
            raise InputError("inv_temperature must be positive")
        if self.entropy_weight < 0 or self.diversity_weight < 0:
            raise InputError("entropy_weight and diversity_weight must be nonnegative")


@dataclass
class QuantizedSlot:
    """One quantized slot: its +-1/sqrt(d) code vector and packed index."""

    code: np.ndarray
    index: int


def project_sphere(z: np.ndarray) -> np.ndarray:
    """Project onto the unit sphere; near-zero input maps to e_1."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("non-finite input to project_sphere")
    norm = float(np.linalg.norm(z))
    if norm > PROJECT_EPS:
        return z / norm
    u = np.zeros_like(z)
    u[0] = 1.0
    return u


def pack_bits(signs_nonneg: np.ndarray) -> np.ndarray:
    """Pack boolean sign bits (coordinate i -> bit i) into u64 indices."""
    signs_nonneg = np.asarray(signs_nonneg, dtype=bool)
    d = signs_nonneg.shape[-1]
    weights = (1 << np.arange(d, dtype=np.uint64))
    return (signs_nonneg.astype(np.uint64) * weights).sum(axis=-1)


def unpack_bits(index: np.ndarray | int, d: int) -> np.ndarray:
    """Inverse of pack_bits; returns boolean arrays of shape (..., d)."""
    idx = np.asarray(index, dtype=np.uint64)
    shifts = np.arange(d, dtype=np.uint64)
    return ((idx[..., None] >> shifts) & np.uint64(1)).astype(bool)


def quantize(u: np.ndarray) -> QuantizedSlot:
    """Quantize a unit vector to its sign code and packed index.

    sign(0) maps to +, so quantization is total on the sphere.
    """
    u = np.asarray(u, dtype=np.float64)
    d = u.shape[-1]
    norm = float(np.linalg.norm(u))
    if abs(norm - 1.0) > 1e-6:
        raise InputError(f"quantize expects a unit vector, got norm {norm:.3g}")
    nonneg = u >= 0.0
    code = np.where(nonneg, 1.0, -1.0) / np.sqrt(d)
    return QuantizedSlot(code=code, index=int(pack_bits(nonneg)))


def quantize_rows(U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized quantize over the rows of an N x d matrix."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2:
        raise InputError("quantize_rows expects an N x d matrix")
    nonneg = U >= 0.0
    codes = np.where(nonneg, 1.0, -1.0) / np.sqrt(U.shape[1])
    return codes, pack_bits(nonneg)


def dequantize(index: int, d: int) -> np.ndarray:
    """Exact inverse of the code <-> index mapping."""
    if not 0 <= int(index) < (1 << d):
        raise InputError(f"index {index} out of range [0, 2^{d})")
    bits = unpack_bits(int(index), d)
    return np.where(bits, 1.0, -1.0) / np.sqrt(d)


def dequantize_rows(indices: np.ndarray, d: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.uint64)
    if indices.size and int(indices.max()) >= (1 << d):
        raise InputError(f"index out of range [0, 2^{d})")
    return np.where(unpack_bits(indices, d), 1.0, -1.0) / np.sqrt(d)


def soft_bits(u: np.ndarray, inv_temperature: float) -> np.ndarray:
    """Per-coordinate bit probabilities logistic(inv_temperature * u)."""
    if inv_temperature <= 0:
        raise InputError("inv_temperature must be positive")
    a = inv_temperature * np.asarray(u, dtype=np.float64)
    p = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))), np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))
    # keep the contract p in (0, 1) even where the logistic saturates
    return np.clip(p, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def _binary_entropy_from_logits(a: np.ndarray) -> np.ndarray:
    # H_b(sigmoid(a)) = p*softplus(-a) + (1-p)*softplus(a), stable in a
    p = 1.0 / (1.0 + np.exp(-np.clip(a, -60, 60)))
    sp_pos = np.logaddexp(0.0, a)
    sp_neg = np.logaddexp(0.0, -a)
    return p * sp_neg + (1.0 - p) * sp_pos


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(p > 0, -p * np.log(p), 0.0)
        t2 = np.where(p < 1, -(1.0 - p) * np.log1p(-p), 0.0)
    return t1 + t2


def entropy_loss(batch_u: np.ndarray, cfg: BsqConfig) -> float:
    """Quantization regularizer over a batch of unit vectors, in nats.

    mean_n sum_i H_b(p_ni) - diversity_weight * sum_i H_b(mean_n p_ni):
    the first term rewards confident per-sample bits, the second rewards
    balanced bit usage across the batch.
    """
    U = np.asarray(batch_u, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < 1:
        raise InputError("entropy_loss expects an N x d batch with N >= 1")
    a = cfg.inv_temperature * U
    per_sample = _binary_entropy_from_logits(a).sum(axis=1).mean()
    p_mean = (1.0 / (1.0 + np.exp(-np.clip(a, -60, 60)))).mean(axis=0)
    batch_term = _binary_entropy(p_mean).sum()
    return float(per_sample - cfg.diversity_weight * batch_term)


# Torch-side quantization used inside the differentiable model. The numpy
# functions above define the contract; tests pin both paths to each other.


def sphere_project_t(z: torch.Tensor) -> torch.Tensor:
    """Differentiable sphere projection with the same e_1 fallback."""
    norm = z.norm(dim=-1, keepdim=True)
    safe = norm.clamp_min(PROJECT_EPS)
    u = z / safe
    fallback = torch.zeros_like(z)
    fallback[..., 0] = 1.0
    return torch.where(norm > PROJECT_EPS, u, fallback)


def quantize_ste_t(u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard sign codes with a straight-through gradient, plus indices.

    The backward Jacobian of codes w.r.t. u is the identity; the sphere
    projection upstream is differentiated exactly.
    """
    d = u.shape[-1]
    scale = 1.0 / (d**0.5)
    hard = torch.where(u >= 0, scale, -scale).to(u.dtype)
    codes = u + (hard - u).detach()
    weights = torch.pow(2, torch.arange(d, device=u.device, dtype=torch.long))
    indices = ((u >= 0).long() * weights).sum(dim=-1)
    return codes, indices


def entropy_loss_t(batch_u: torch.Tensor, cfg: BsqConfig) -> torch.Tensor:
    """Torch twin of entropy_loss; accumulates in float64."""
    a = (cfg.inv_temperature * batch_u).double()
    p = torch.sigmoid(a)
    per_sample = (p * torch.nn.functional.softplus(-a) + (1 - p) * torch.nn.functional.softplus(a)).sum(dim=-1).mean()
    p_mean = p.mean(dim=0).clamp(1e-12, 1 - 1e-12)
    batch_term = (-p_mean * p_mean.log() - (1 - p_mean) * (1 - p_mean).log()).sum()
    return per_sample - cfg.diversity_weight * batch_term


def write_codes(codes: np.ndarray, indices: np.ndarray, path: str | Path) -> None:
    """Write one chunk's L x d codes and L indices in the LATC layout."""
    C = np.ascontiguousarray(codes, dtype="<f4")
    k = np.ascontiguousarray(indices, dtype="<u8")
    if C.ndim != 2 or k.ndim != 1 or C.shape[0] != k.shape[0]:
        raise InputError("codes must be L x d with matching L indices")
    header = LATC_MAGIC + struct.pack("<III", LATC_VERSION, C.shape[0], C.shape[1])
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(C.tobytes())
            f.write(k.tobytes())
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def read_codes(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"codes file not found: {p}")
    try:
        blob = p.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {p}: {e}") from e
    if len(blob) < 16 or blob[:4] != LATC_MAGIC:
        raise FormatError(f"{p}: bad magic, not a LATC file")
    version, L, d = struct.unpack("<III", blob[4:16])
    if version != LATC_VERSION:
        raise FormatError(f"{p}: unsupported LATC version {version}")
    expected = 16 + 4 * L * d + 8 * L
    if len(blob) != expected:
        raise FormatError(f"{p}: payload length {len(blob)} does not match header ({expected} expected)")
    codes = np.frombuffer(blob, dtype="<f4", offset=16, count=L * d).reshape(L, d).copy()
    indices = np.frombuffer(blob, dtype="<u8", offset=16 + 4 * L * d, count=L).copy()
    if not np.isfinite(codes).all():
        raise FormatError(f"{p}: non-finite code entries")
    return codes, indices
