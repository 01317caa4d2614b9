"""Importance-guided token-space editing.

A swap plan selects slot positions, either the smallest top-ranked set
whose normalized importance reaches a mass fraction gamma, or a
matched-budget control (uniform random, or the least-important slots).
Swapping splices the selected rows of the target's code matrix into the
source's and recomputes the packed indices; decoding the spliced codes
transfers the corresponding factor content.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bsq import pack_bits
from .corpus import FeatureSequence
from .errors import FormatError, InputError, StorageError
from .importance import normalize
from .ola import ChunkCodes, OlaConfig, decode_chunks, tokenize_sequence

POLICIES = ("importance", "random", "least")

# Tolerance for the cumulative-mass threshold: protects the gamma=1.0
# edge from float accumulation falling an ulp short of the target.
MASS_TOL = 1e-12


@dataclass
class SwapPlan:
    policy: str
    slots: list[int]
    gamma: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise InputError(f"unknown policy {self.policy!r}")
        if len(set(self.slots)) != len(self.slots) or not self.slots:
            raise InputError("slot selection must be non-empty without duplicates")

    @property
    def m(self) -> int:
        return len(self.slots)

    def as_dict(self) -> dict:
        return {"policy": self.policy, "gamma": self.gamma, "m": self.m,
                "slots": [int(s) for s in self.slots], "seed": self.seed}


def select_slots(g_norm: np.ndarray, gamma: float) -> SwapPlan:
    """Smallest set of top-ranked slots reaching cumulative mass gamma.

    Slots are ranked by descending importance with ties broken toward
    the lower index; at least one slot is always selected.
    """
    if not 0 < gamma <= 1:
        raise InputError(f"gamma must be in (0, 1], got {gamma}")
    g = np.asarray(g_norm, dtype=np.float64)
    if abs(g.sum() - 1.0) > 1e-6 or (g < 0).any():
        raise InputError("select_slots expects a normalized profile")
    order = sorted(range(g.shape[0]), key=lambda i: (-g[i], i))
    total = 0.0
    slots = []
    for idx in order:
        slots.append(idx)
        total += g[idx]
        if total >= gamma - MASS_TOL:
            break
    return SwapPlan(policy="importance", slots=slots, gamma=gamma)


def select_random(L: int, m: int, seed: int) -> SwapPlan:
    """m distinct slots drawn uniformly without replacement."""
    if not 1 <= m <= L:
        raise InputError(f"m must be in [1, {L}], got {m}")
    rng = np.random.default_rng(seed)
    slots = rng.choice(L, size=m, replace=False).tolist()
    return SwapPlan(policy="random", slots=[int(s) for s in slots], seed=seed)


def select_least(g_norm: np.ndarray, m: int) -> SwapPlan:
    """The m slots with the lowest importance (ties toward lower index)."""
    g = np.asarray(g_norm, dtype=np.float64)
    if not 1 <= m <= g.shape[0]:
        raise InputError(f"m must be in [1, {g.shape[0]}], got {m}")
    order = sorted(range(g.shape[0]), key=lambda i: (g[i], i))
    return SwapPlan(policy="least", slots=order[:m])


def make_plan(g: np.ndarray, gamma: float, policy: str, seed: int = 0) -> SwapPlan:
    """Build a plan for any policy at the budget implied by gamma.

    Controls always select exactly as many slots as the importance
    selection would, so comparisons are at matched budget.
    """
    base = select_slots(normalize(g), gamma)
    if policy == "importance":
        return base
    if policy == "random":
        plan = select_random(len(g), base.m, seed)
    elif policy == "least":
        plan = select_least(normalize(g), base.m)
    else:
        raise InputError(f"unknown policy {policy!r}")
    plan.gamma = gamma
    return plan


def swap_codes(C_src: np.ndarray, C_tgt: np.ndarray, plan: SwapPlan) -> tuple[np.ndarray, np.ndarray]:
    """Splice the plan's rows from target into source; repack indices.

    Rows outside the plan are bit-identical to the source rows.
    """
    C_src = np.asarray(C_src)
    C_tgt = np.asarray(C_tgt)
    if C_src.shape != C_tgt.shape or C_src.ndim != 2:
        raise InputError(f"code matrices must share an L x d shape, got {C_src.shape} vs {C_tgt.shape}")
    L = C_src.shape[0]
    for s in plan.slots:
        if not 0 <= s < L:
            raise InputError(f"slot {s} out of range [0, {L})")
    out = C_src.copy()
    out[plan.slots] = C_tgt[plan.slots]
    return out, pack_bits(out >= 0)


def swap_chunks(src: list[ChunkCodes], tgt: list[ChunkCodes], plan: SwapPlan) -> list[ChunkCodes]:
    """Apply one plan to every aligned chunk pair.

    Trailing source chunks without a target counterpart keep their codes.
    """
    out = []
    for i, sc in enumerate(src):
        if i < len(tgt):
            codes, indices = swap_codes(sc.codes, tgt[i].codes, plan)
            out.append(ChunkCodes(codes=codes, indices=indices, start=sc.start, end=sc.end))
        else:
            out.append(sc)
    return out


def edit_and_decode(
    source: FeatureSequence,
    target: FeatureSequence,
    model,
    g: np.ndarray,
    gamma: float,
    policy: str = "importance",
    seed: int = 0,
    ola_cfg: OlaConfig | None = None,
) -> tuple[FeatureSequence, SwapPlan]:
    """Tokenize both utterances, swap planned slots, decode at source length."""
    if ola_cfg is None:
        ola_cfg = OlaConfig(chunk_frames=model.cfg.chunk_frames(source.sample_rate_hint))
    plan = make_plan(g, gamma, policy, seed)
    src_chunks = tokenize_sequence(source, model, ola_cfg)
    tgt_chunks = tokenize_sequence(target, model, ola_cfg)
    edited = swap_chunks(src_chunks, tgt_chunks, plan)
    frames = decode_chunks(edited, model, ola_cfg, source.T)
    out = FeatureSequence(frames, utterance_id=f"{source.utterance_id}__to__{target.utterance_id}",
                          sample_rate_hint=source.sample_rate_hint)
    return out, plan


def cyclic_pairs(
    source_ids: list[str],
    pool_ids: list[str],
    labels: dict[str, dict],
    factor: str | None = None,
    shift: int = 1,
) -> list[tuple[str, str]]:
    """Deterministic source/target pairing by cyclic shift over a pool.

    For source i the target is pool[(i + shift) mod P], advancing past
    the source itself and, when a factor is given, past targets sharing
    the source's class on that factor.
    """
    if not pool_ids:
        raise InputError("empty target pool")
    pairs = []
    P = len(pool_ids)
    for i, sid in enumerate(source_ids):
        chosen = None
        for step in range(P):
            tid = pool_ids[(i + shift + step) % P]
            if tid == sid:
                continue
            if factor is not None and labels[tid]["labels"].get(factor) == labels[sid]["labels"].get(factor):
                continue
            chosen = tid
            break
        if chosen is None:
            raise InputError(f"no valid target for source {sid!r} in the pool")
        pairs.append((sid, chosen))
    return pairs


def write_edit_manifest(entries: list[dict], path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write edit manifest {path}: {e}") from e


def read_edit_manifest(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"edit manifest not found: {p}")
    try:
        entries = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot parse edit manifest {p}: {e}") from e
    needed = {"source_id", "target_id", "policy", "gamma", "m", "slots", "output_path"}
    for e in entries:
        missing = needed - set(e)
        if missing:
            raise FormatError(f"edit manifest {p}: entry missing {sorted(missing)}")
    return entries
