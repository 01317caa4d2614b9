"""Slot autoencoder: compressor and decompressor around the quantizer.

The compressor concatenates projected input frames (with positional
embeddings) and L learned query tokens, runs pre-norm self-attention
blocks over the joint sequence, and keeps only the query positions,
projected to the code dimension. The decompressor starts from a learned
mask token repeated T times plus the positionally-embedded codes, runs
its own blocks, and reads the first T positions back out at feature
dimension. All information between the two halves flows through the
quantized codes.

Checkpoint container (LATM v1, little-endian): magic "LATM", u32
version, u32 header length, JSON header {model, bsq, meta}, u32 tensor
count, then per tensor: u16 name length, name, u32 rank, u32 dims,
float32 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .bsq import BsqConfig, entropy_loss_t, quantize_ste_t, sphere_project_t
from .corpus import FeatureSequence
from .errors import CapacityError, FormatError, InputError, StorageError

LATM_MAGIC = b"LATM"
LATM_VERSION = 1

POSITIONAL_CAPACITY = 10_000
INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The slot count is derived from the token rate and chunk duration:
    L = round(token_rate * chunk_duration). The decoder is kept wider
    than the encoder by default; reconstruction is the harder direction.
    """

    H: int = 1024
    d: int = 13
    token_rate: float = 50.0
    chunk_duration: float = 5.0
    T_max: int = 512
    layers_enc: int = 2
    layers_dec: int = 3
    width_enc: int = 64
    width_dec: int = 96
    heads: int = 4

    def __post_init__(self):
        if self.H < 1 or self.d < 1:
            raise InputError("H and d must be positive")
        if self.token_rate <= 0 or self.chunk_duration <= 0:
            raise InputError("token_rate and chunk_duration must be positive")
        if self.L < 1:
            raise InputError("token_rate * chunk_duration must round to at least one slot")
        if self.T_max < 1 or self.T_max > POSITIONAL_CAPACITY:
            raise InputError(f"T_max must be in [1, {POSITIONAL_CAPACITY}]")
        if self.width_enc % self.heads or self.width_dec % self.heads:
            raise InputError("widths must be divisible by the head count")
        if self.layers_enc < 1 or self.layers_dec < 1:
            raise InputError("need at least one block on each side")

    @property
    def L(self) -> int:
        return int(round(self.token_rate * self.chunk_duration))

    def chunk_frames(self, frame_rate: float = 50.0) -> int:
        """Frames per training chunk at the given feature frame rate."""
        return int(round(frame_rate * self.chunk_duration))

    def bitrate(self) -> float:
        """Token bitrate in bits per second: rate times bits per token."""
        return self.token_rate * self.d


class SelfAttention(nn.Module):
    """Multi-head self-attention with full (unmasked) attention."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        B, N, W = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = torch.softmax(q @ k.transpose(-2, -1) / (self.head_dim**0.5), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, N, W)
        y = self.proj(y)
        if return_weights:
            return y, att
        return y


class Block(nn.Module):
    """Pre-norm attention + MLP block with residual connections."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class ForwardResult:
    features_hat: np.ndarray  # T x H reconstruction
    codes: np.ndarray  # L x d quantized codes
    indices: np.ndarray  # L packed token indices
    bsq_loss: float


class SlotAutoencoder(nn.Module):
    """Compressor, quantizer, and decompressor over feature chunks."""

    def __init__(self, cfg: ModelConfig, bsq_cfg: BsqConfig | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if bsq_cfg is None:
            bsq_cfg = BsqConfig(d=cfg.d)
        if bsq_cfg.d != cfg.d:
            raise InputError(f"model d={cfg.d} disagrees with quantizer d={bsq_cfg.d}")
        self.cfg = cfg
        self.bsq_cfg = bsq_cfg

        L, We, Wd = cfg.L, cfg.width_enc, cfg.width_dec
        self.in_proj = nn.Linear(cfg.H, We)
        self.queries = nn.Parameter(torch.empty(L, We))
        self.pos_feat = nn.Parameter(torch.empty(cfg.T_max, We))
        self.pos_lat = nn.Parameter(torch.empty(L, We))
        self.enc_blocks = nn.ModuleList(Block(We, cfg.heads) for _ in range(cfg.layers_enc))
        self.enc_norm = nn.LayerNorm(We)
        self.to_code = nn.Linear(We, cfg.d)

        self.code_proj = nn.Linear(cfg.d, Wd)
        self.mask_embed = nn.Parameter(torch.empty(Wd))
        self.pos_mask = nn.Parameter(torch.empty(cfg.T_max, Wd))
        self.pos_code = nn.Parameter(torch.empty(L, Wd))
        self.dec_blocks = nn.ModuleList(Block(Wd, cfg.heads) for _ in range(cfg.layers_dec))
        self.dec_norm = nn.LayerNorm(Wd)
        self.out_proj = nn.Linear(Wd, cfg.H)

        self._init_params(seed)
        self.to(dtype)

    def _init_params(self, seed: int) -> None:
        # Gaussian std 0.02 for weights and embeddings, zero biases,
        # default unit LayerNorm gains; fixed iteration order plus an
        # explicit generator keeps initialization reproducible per seed.
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                parent = name.rsplit(".", 2)[-2] if "." in name else name
                if "norm" in parent:
                    continue
                if name.endswith(".bias"):
                    p.zero_()
                else:
                    p.normal_(0.0, INIT_STD, generator=g)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    def _check_capacity(self, T: int) -> None:
        if T < 1:
            raise InputError("need at least one frame")
        if T > self.cfg.T_max:
            raise CapacityError(f"T={T} exceeds positional capacity T_max={self.cfg.T_max}")

    def compress_t(self, frames: torch.Tensor) -> torch.Tensor:
        """Batched differentiable compression: (B, T, H) -> (B, L, d)."""
        B, T, _ = frames.shape
        self._check_capacity(T)
        x = self.in_proj(frames) + self.pos_feat[:T]
        q = (self.queries + self.pos_lat).unsqueeze(0).expand(B, -1, -1)
        y = torch.cat([x, q], dim=1)
        for blk in self.enc_blocks:
            y = blk(y)
        y = self.enc_norm(y)
        return self.to_code(y[:, T:, :])

    def decompress_t(self, codes: torch.Tensor, T: int) -> torch.Tensor:
        """Batched differentiable decoding: (B, L, d), T -> (B, T, H)."""
        B = codes.shape[0]
        self._check_capacity(T)
        masks = self.mask_embed.unsqueeze(0) + self.pos_mask[:T]
        u = torch.cat([masks.unsqueeze(0).expand(B, -1, -1), self.code_proj(codes) + self.pos_code], dim=1)
        for blk in self.dec_blocks:
            u = blk(u)
        u = self.dec_norm(u)
        return self.out_proj(u[:, :T, :])

    def forward_t(self, frames: torch.Tensor, smooth_surrogate: bool = False):
        """Full differentiable chain on a batch of chunks.

        Returns (features_hat, codes, indices, bsq_loss). The regularizer
        is computed per chunk over its L slots and averaged over the
        batch. With smooth_surrogate=True the hard quantizer is replaced
        by the identity on the sphere (the gradient-check path).
        """
        Z = self.compress_t(frames)
        u = sphere_project_t(Z)
        if smooth_surrogate:
            codes, indices = u, None
        else:
            codes, indices = quantize_ste_t(u)
        bsq = torch.stack([entropy_loss_t(u[b], self.bsq_cfg) for b in range(u.shape[0])]).mean()
        f_hat = self.decompress_t(codes, frames.shape[1])
        return f_hat, codes, indices, bsq

    # numpy-facing single-sequence API

    def _to_t(self, frames: np.ndarray) -> torch.Tensor:
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2:
            raise InputError("expected a T x H matrix")
        if frames.shape[1] != self.cfg.H:
            raise InputError(f"feature dim {frames.shape[1]} does not match H={self.cfg.H}")
        return torch.from_numpy(frames).to(self.dtype).unsqueeze(0)

    def compress(self, frames: np.ndarray) -> np.ndarray:
        """T x H features -> L x d latent matrix."""
        with torch.no_grad():
            return self.compress_t(self._to_t(frames))[0].double().numpy()

    def decompress(self, codes: np.ndarray, T: int) -> np.ndarray:
        """L x d codes -> T x H reconstruction."""
        codes = np.asarray(codes, dtype=np.float64)
        if codes.shape != (self.cfg.L, self.cfg.d):
            raise InputError(f"codes must be {self.cfg.L} x {self.cfg.d}, got {codes.shape}")
        with torch.no_grad():
            t = torch.from_numpy(codes).to(self.dtype).unsqueeze(0)
            return self.decompress_t(t, T)[0].double().numpy().astype(np.float32)

    def forward(self, frames: np.ndarray) -> ForwardResult:
        """Single-sequence compress -> quantize -> decompress."""
        with torch.no_grad():
            f_hat, codes, indices, bsq = self.forward_t(self._to_t(frames))
        return ForwardResult(
            features_hat=f_hat[0].double().numpy().astype(np.float32),
            codes=codes[0].double().numpy(),
            indices=indices[0].numpy().astype(np.uint64),
            bsq_loss=float(bsq),
        )

    def reconstruct(self, seq: FeatureSequence) -> FeatureSequence:
        out = self.forward(seq.frames)
        return FeatureSequence(out.features_hat, utterance_id=seq.utterance_id,
                               sample_rate_hint=seq.sample_rate_hint)


def save_checkpoint(path: str | Path, model: SlotAutoencoder, meta: dict | None = None) -> None:
    """Serialize config and parameters into the LATM container."""
    header = {
        "version": LATM_VERSION,
        "model": asdict(model.cfg),
        "bsq": asdict(model.bsq_cfg),
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    state = model.state_dict()
    try:
        with open(path, "wb") as f:
            f.write(LATM_MAGIC)
            f.write(struct.pack("<II", LATM_VERSION, len(header_bytes)))
            f.write(header_bytes)
            f.write(struct.pack("<I", len(state)))
            for name, tensor in state.items():
                payload = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
                name_b = name.encode()
                f.write(struct.pack("<H", len(name_b)))
                f.write(name_b)
                f.write(struct.pack("<I", payload.ndim))
                f.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
                f.write(payload.tobytes())
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str | Path) -> tuple[SlotAutoencoder, dict]:
    """Rebuild a model from a LATM container; returns (model, meta)."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"checkpoint not found: {p}")
    try:
        blob = p.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {p}: {e}") from e
    if len(blob) < 12 or blob[:4] != LATM_MAGIC:
        raise FormatError(f"{p}: bad magic, not a LATM checkpoint")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != LATM_VERSION:
        raise FormatError(f"{p}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12:12 + hlen])
        cfg = ModelConfig(**header["model"])
        bsq_cfg = BsqConfig(**header["bsq"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{p}: malformed checkpoint header: {e}") from e

    off = 12 + hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", offset=off, count=n).reshape(dims)
            off += 4 * n
            state[name] = torch.from_numpy(arr.copy())
    except (struct.error, ValueError) as e:
        raise FormatError(f"{p}: truncated checkpoint payload: {e}") from e

    model = SlotAutoencoder(cfg, bsq_cfg)
    model.load_state_dict(state)
    model.eval()
    return model, header.get("meta", {})
