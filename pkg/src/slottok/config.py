"""Run configuration: JSON documents with strict key checking.

A config has sections corpus / model / bsq / train / ola / analysis;
every field is optional and falls back to a documented default. Unknown
sections or fields are rejected outright, since silently ignored typos
in hyperparameters are the dominant failure mode for reproduction.
Values set to null inherit from their linked field (model.H from
corpus.H, bsq.d from model.d, train.lam from bsq.entropy_weight,
ola.chunk_frames from the model chunk duration at 50 frames/s).
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .bsq import BsqConfig
from .corpus import CorpusSpec
from .errors import ConfigError
from .model import ModelConfig
from .ola import OlaConfig
from .trainer import PlateauSchedule, TrainConfig

FRAME_RATE = 50.0  # feature frames per second of the synthetic corpus

DEFAULTS = {
    "corpus": {
        "num_utterances": 48,
        "T": 250,
        "H": 1024,
        "num_speakers": 4,
        "num_contents": 2,
        "snr_grid_db": ["clean", 0.0, 5.0, 10.0, 20.0, 40.0],
        "master_seed": 0,
    },
    "model": {
        "H": None,  # inherits corpus.H
        "d": 13,
        "token_rate": 50.0,
        "chunk_duration": 5.0,
        "T_max": 512,
        "layers_enc": 2,
        "layers_dec": 3,
        "width_enc": 64,
        "width_dec": 96,
        "heads": 4,
    },
    "bsq": {
        "d": None,  # inherits model.d
        "inv_temperature": 100.0,
        "entropy_weight": 0.1,
        "diversity_weight": 1.0,
    },
    "train": {
        "lr": 5e-4,
        "betas": [0.9, 0.98],
        "weight_decay": 0.01,
        "grad_clip_max_norm": 5.0,
        "lam": None,  # inherits bsq.entropy_weight
        "batch_size": 4,
        "epochs": 50,
        "seed": 0,
        "val_fraction": 0.25,
        "plateau_factor": 0.9,
        "plateau_patience": 0,
        "plateau_threshold": 0.0025,
        "min_lr": 1e-6,
    },
    "ola": {
        "chunk_frames": None,  # inherits round(FRAME_RATE * model.chunk_duration)
        "overlap": None,  # inherits max(1, chunk_frames // 5): 50 at the 250-frame default
        "clamp_eps": 1e-8,
    },
    "analysis": {
        "factors": ["speaker", "content", "noise"],
        "topk": [5, 10],
        "gamma": 0.1,
        "policy": "importance",
        "seed": 0,
        "shift": 1,
        "figures": True,
    },
}


def resolve(doc: dict | None) -> dict:
    """Overlay a config document on the defaults, rejecting unknown keys."""
    cfg = copy.deepcopy(DEFAULTS)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for section, fields in doc.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r} (expected one of {sorted(cfg)})")
        if not isinstance(fields, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in fields.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key} (expected one of {sorted(cfg[section])})")
            cfg[section][key] = value

    # resolve inherited fields
    if cfg["model"]["H"] is None:
        cfg["model"]["H"] = cfg["corpus"]["H"]
    if cfg["bsq"]["d"] is None:
        cfg["bsq"]["d"] = cfg["model"]["d"]
    elif cfg["bsq"]["d"] != cfg["model"]["d"]:
        raise ConfigError(f"bsq.d={cfg['bsq']['d']} disagrees with model.d={cfg['model']['d']}")
    if cfg["train"]["lam"] is None:
        cfg["train"]["lam"] = cfg["bsq"]["entropy_weight"]
    if cfg["ola"]["chunk_frames"] is None:
        cfg["ola"]["chunk_frames"] = int(round(FRAME_RATE * cfg["model"]["chunk_duration"]))
    if cfg["ola"]["overlap"] is None:
        cfg["ola"]["overlap"] = max(1, cfg["ola"]["chunk_frames"] // 5)

    # re-validate through the component dataclasses
    try:
        corpus_spec(cfg)
        model_config(cfg)
        bsq_config(cfg)
        train_config(cfg)
        plateau_schedule(cfg)
        ola_config(cfg)
    except Exception as e:
        raise ConfigError(str(e)) from e
    if cfg["analysis"]["policy"] not in ("importance", "random", "least"):
        raise ConfigError(f"analysis.policy must be importance|random|least, got {cfg['analysis']['policy']!r}")
    return cfg


def apply_overrides(cfg_doc: dict, overrides: list[str]) -> dict:
    """Apply --set section.key=value overrides (values parsed as JSON)."""
    doc = copy.deepcopy(cfg_doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        parts = path.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {path!r} must be section.key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(parts[0], {})[parts[1]] = value
    return doc


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"cannot parse config {p}: {e}") from e
    if overrides:
        doc = apply_overrides(doc, overrides)
    return resolve(doc)


def write_resolved(cfg: dict, out_dir: str | Path) -> Path:
    """Echo the fully resolved config beside a run's outputs."""
    out = Path(out_dir) / "config.resolved.json"
    out.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def corpus_spec(cfg: dict) -> CorpusSpec:
    c = cfg["corpus"]
    return CorpusSpec(
        num_utterances=c["num_utterances"], T=c["T"], H=c["H"],
        num_speakers=c["num_speakers"], num_contents=c["num_contents"],
        snr_grid_db=list(c["snr_grid_db"]), master_seed=c["master_seed"],
    )


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        H=m["H"], d=m["d"], token_rate=m["token_rate"], chunk_duration=m["chunk_duration"],
        T_max=m["T_max"], layers_enc=m["layers_enc"], layers_dec=m["layers_dec"],
        width_enc=m["width_enc"], width_dec=m["width_dec"], heads=m["heads"],
    )


def bsq_config(cfg: dict) -> BsqConfig:
    b = cfg["bsq"]
    return BsqConfig(d=b["d"], inv_temperature=b["inv_temperature"],
                     entropy_weight=b["entropy_weight"], diversity_weight=b["diversity_weight"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=t["lr"], betas=tuple(t["betas"]), weight_decay=t["weight_decay"],
        grad_clip_max_norm=t["grad_clip_max_norm"], lam=t["lam"], batch_size=t["batch_size"],
        epochs=t["epochs"], seed=t["seed"], val_fraction=t["val_fraction"],
    )


def plateau_schedule(cfg: dict) -> PlateauSchedule:
    t = cfg["train"]
    return PlateauSchedule(factor=t["plateau_factor"], patience=t["plateau_patience"],
                           threshold=t["plateau_threshold"], min_lr=t["min_lr"])


def ola_config(cfg: dict) -> OlaConfig:
    o = cfg["ola"]
    return OlaConfig(chunk_frames=o["chunk_frames"], overlap=o["overlap"], clamp_eps=o["clamp_eps"])
