"""Training loop for the slot autoencoder.

Objective: mean squared reconstruction error over all frame entries plus
the weighted quantization regularizer. Optimization uses AdamW with
decoupled weight decay, global-norm gradient clipping, and a
reduce-on-plateau learning-rate schedule. Loss values, gradient norms,
and Adam moments are accumulated in float64 even though activations and
parameters are float32, which keeps the finite-difference gradient
oracle meaningful.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bsq import BsqConfig
from .corpus import FeatureSequence
from .errors import InputError, NumericError
from .model import ModelConfig, SlotAutoencoder

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.01
    grad_clip_max_norm: float = 5.0
    lam: float = 0.1  # weight of the quantization regularizer
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.lr <= 0:
            raise InputError("lr must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise InputError("betas must lie in [0, 1)")
        if self.grad_clip_max_norm <= 0:
            raise InputError("grad_clip_max_norm must be positive")
        if self.lam < 0:
            raise InputError("lam must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.val_fraction < 1:
            raise InputError("val_fraction must be in [0, 1)")


@dataclass
class PlateauSchedule:
    """Reduce-on-plateau: shrink lr whenever validation fails to improve.

    An epoch counts as improving when val_loss <= best * (1 - threshold)
    (relative threshold). With patience 0 every non-improving epoch
    triggers a reduction; lr never drops below min_lr.
    """

    factor: float = 0.9
    patience: int = 0
    threshold: float = 0.0025
    min_lr: float = 1e-6
    best_so_far: float = math.inf
    bad_epochs: int = field(default=0, repr=False)

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise InputError("factor must be in (0, 1)")
        if self.min_lr <= 0:
            raise InputError("min_lr must be positive")

    def step(self, val_loss: float, lr: float) -> float:
        if not math.isfinite(val_loss):
            raise NumericError("non-finite validation loss")
        if val_loss <= self.best_so_far * (1.0 - self.threshold):
            self.best_so_far = val_loss
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.bad_epochs = 0
            return max(lr * self.factor, self.min_lr)
        return lr


def loss_value(F: torch.Tensor, F_hat: torch.Tensor, bsq_loss: torch.Tensor | float, lam: float) -> torch.Tensor:
    """MSE over all entries plus lam times the quantization regularizer."""
    if F.shape != F_hat.shape:
        raise InputError(f"shape mismatch: {tuple(F.shape)} vs {tuple(F_hat.shape)}")
    mse = (F_hat.double() - F.double()).pow(2).mean()
    if isinstance(bsq_loss, torch.Tensor):
        return mse + lam * bsq_loss.double()
    return mse + lam * float(bsq_loss)


def clip_gradients(grads: list[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most max_norm.

    Returns the pre-clip norm. Raises on non-finite gradients.
    """
    total = 0.0
    for g in grads:
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient; aborting step")
        total += float(g.double().pow(2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            if g is not None:
                g.mul_(scale)
    return norm


class AdamW:
    """AdamW with float64 moment buffers and built-in global-norm clipping."""

    def __init__(self, params: list[torch.Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self.m = [torch.zeros_like(p, dtype=torch.float64) for p in self.params]
        self.v = [torch.zeros_like(p, dtype=torch.float64) for p in self.params]

    @torch.no_grad()
    def step(self, grads: list[torch.Tensor], t: int | None = None) -> None:
        if len(grads) != len(self.params):
            raise InputError("one gradient per parameter expected")
        self.t = self.t + 1 if t is None else t
        if self.t < 1:
            raise InputError("step count t must be >= 1")
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)]
        clip_gradients(grads, self.cfg.grad_clip_max_norm)
        b1, b2 = self.cfg.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g64 = g.double()
            m.mul_(b1).add_(g64, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g64, g64, value=1.0 - b2)
            update = (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS)
            p.add_((-self.lr * update - self.lr * self.cfg.weight_decay * p.double()).to(p.dtype))


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    model: SlotAutoencoder
    trace: list[TraceRow]
    best_epoch: int
    best_val: float


def write_trace(trace: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in trace:
            w.writerow([row.epoch, f"{row.train_loss:.10g}", f"{row.val_loss:.10g}", f"{row.lr:.10g}"])


def make_chunks(sequences: list[FeatureSequence], chunk_frames: int) -> list[tuple[int, np.ndarray]]:
    """Split each sequence into consecutive exact-length chunks.

    Trailing remainders shorter than chunk_frames are dropped; sequences
    shorter than one chunk contribute nothing.
    """
    chunks = []
    for i, seq in enumerate(sequences):
        for c in range(seq.T // chunk_frames):
            chunks.append((i, seq.frames[c * chunk_frames:(c + 1) * chunk_frames]))
    return chunks


def _epoch_eval(model: SlotAutoencoder, data: torch.Tensor, lam: float, batch_size: int) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for s in range(0, data.shape[0], batch_size):
            batch = data[s:s + batch_size]
            f_hat, _, _, bsq = model.forward_t(batch)
            total += float(loss_value(batch, f_hat, bsq, lam)) * batch.shape[0]
            n += batch.shape[0]
    return total / n


def fit(
    sequences: list[FeatureSequence],
    model_cfg: ModelConfig,
    bsq_cfg: BsqConfig,
    train_cfg: TrainConfig,
    schedule: PlateauSchedule | None = None,
) -> FitResult:
    """Train a slot autoencoder on feature sequences, deterministically.

    The per-epoch batch order, the train/validation split, and the model
    initialization are all derived from train_cfg.seed. Epoch 0 of the
    trace records the untrained losses; the best-validation parameters
    are restored into the returned model.
    """
    if not sequences:
        raise InputError("empty corpus")
    frame_rate = sequences[0].sample_rate_hint
    chunk_frames = model_cfg.chunk_frames(frame_rate)
    all_chunks = make_chunks(sequences, chunk_frames)
    if not all_chunks:
        raise InputError(f"no sequence provides a full chunk of {chunk_frames} frames")
    if schedule is None:
        schedule = PlateauSchedule()

    rng = np.random.default_rng(train_cfg.seed)
    n_utts = len(sequences)
    n_val = int(round(train_cfg.val_fraction * n_utts))
    order = rng.permutation(n_utts)
    val_utts = set(order[:n_val].tolist())
    train_chunks = [fr for i, fr in all_chunks if i not in val_utts]
    if not train_chunks:
        raise InputError("validation split leaves no training chunks")
    train_data = np.stack(train_chunks)
    val_chunks = [fr for i, fr in all_chunks if i in val_utts]
    val_data = np.stack(val_chunks) if val_chunks else train_data

    model = SlotAutoencoder(model_cfg, bsq_cfg, seed=train_cfg.seed)
    opt = AdamW(list(model.parameters()), train_cfg)
    train_t = torch.from_numpy(train_data)
    val_t = torch.from_numpy(val_data)

    lam, bs = train_cfg.lam, train_cfg.batch_size
    trace = [TraceRow(0, _epoch_eval(model, train_t, lam, bs), _epoch_eval(model, val_t, lam, bs), opt.lr)]
    best_val, best_epoch = trace[0].val_loss, 0
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, train_cfg.epochs + 1):
        perm = rng.permutation(train_t.shape[0])
        total, seen = 0.0, 0
        for s in range(0, len(perm), bs):
            batch = train_t[torch.from_numpy(perm[s:s + bs])]
            f_hat, _, _, bsq = model.forward_t(batch)
            loss = loss_value(batch, f_hat, bsq, lam)
            if not torch.isfinite(loss):
                err = NumericError(f"non-finite training loss at epoch {epoch}")
                err.trace = trace
                raise err
            for p in model.parameters():
                p.grad = None
            loss.backward()
            opt.step([p.grad for p in model.parameters()])
            total += float(loss.detach()) * batch.shape[0]
            seen += batch.shape[0]
        val_loss = _epoch_eval(model, val_t, lam, bs)
        trace.append(TraceRow(epoch, total / seen, val_loss, opt.lr))
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        opt.lr = schedule.step(val_loss, opt.lr)

    model.load_state_dict(best_state)
    model.eval()
    return FitResult(model=model, trace=trace, best_epoch=best_epoch, best_val=best_val)


def smooth_surrogate_loss(model: SlotAutoencoder, frames: torch.Tensor, lam: float) -> torch.Tensor:
    """Full objective with the hard quantizer replaced by the identity.

    Every operation on this path is smooth, so central finite
    differences of this scalar are a valid oracle for the analytic
    gradients.
    """
    f_hat, _, _, bsq = model.forward_t(frames, smooth_surrogate=True)
    return loss_value(frames, f_hat, bsq, lam)


def grad_check(model: SlotAutoencoder, frames: np.ndarray, lam: float, step: float = 1e-5) -> dict:
    """Compare analytic gradients with central finite differences.

    The model must be float64. Returns the worst relative error
    (denominator floored at 1e-6) plus bookkeeping counts.
    """
    if model.dtype != torch.float64:
        raise InputError("grad_check requires a float64 model")
    frames_t = torch.from_numpy(np.asarray(frames, dtype=np.float64)).unsqueeze(0)

    loss = smooth_surrogate_loss(model, frames_t, lam)
    params = list(model.parameters())
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]

    max_rel, n_coords = 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + step
                lp = float(smooth_surrogate_loss(model, frames_t, lam))
                flat[j] = orig - step
                lm = float(smooth_surrogate_loss(model, frames_t, lam))
                flat[j] = orig
                fd = (lp - lm) / (2 * step)
                a = float(gflat[j])
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                if rel > max_rel:
                    max_rel = rel
                n_coords += 1
    return {"max_rel_err": max_rel, "n_coords": n_coords}
