"""Shared fixtures: toy corpora and session-trained toy models."""

import pytest
import torch

from slottok.bsq import BsqConfig
from slottok.corpus import CorpusSpec, build_corpus, load_corpus
from slottok.model import ModelConfig
from slottok.ola import OlaConfig
from slottok.trainer import PlateauSchedule, TrainConfig, fit

torch.set_num_threads(1)

# Toy scale shared by the end-to-end fixtures: 20-frame chunks of
# 12-dim features, 8 slots of 6 bits each.
TOY_MODEL = dict(H=12, d=6, token_rate=20.0, chunk_duration=0.4, T_max=32,
                 layers_enc=1, layers_dec=2, width_enc=32, width_dec=48, heads=4)
TOY_OLA = dict(chunk_frames=20, overlap=5)


def toy_model_config(**overrides) -> ModelConfig:
    kw = dict(TOY_MODEL)
    kw.update(overrides)
    return ModelConfig(**kw)


def toy_train(sequences, epochs, seed=0, lr=1e-3, d=None):
    cfg = toy_model_config(**({"d": d} if d else {}))
    tc = TrainConfig(lr=lr, epochs=epochs, batch_size=8, seed=seed, val_fraction=0.0)
    return fit(sequences, cfg, BsqConfig(d=cfg.d), tc, schedule=PlateauSchedule(patience=10**6))


@pytest.fixture(scope="session")
def clean_corpus(tmp_path_factory):
    """4 speakers x 6 contents, clean: the 2-factor editing corpus."""
    root = tmp_path_factory.mktemp("clean_corpus")
    spec = CorpusSpec(num_utterances=24, T=20, H=12, num_speakers=4, num_contents=6,
                      snr_grid_db=["clean"], master_seed=7)
    build_corpus(spec, root)
    manifest, seqs = load_corpus(root / "manifest.json")
    return {"root": root, "spec": spec, "manifest": manifest, "seqs": seqs}


@pytest.fixture(scope="session")
def clean_model(clean_corpus):
    """Toy model trained to near-zero loss on the clean corpus."""
    sequences = [clean_corpus["seqs"][k] for k in sorted(clean_corpus["seqs"])]
    return toy_train(sequences, epochs=400).model


@pytest.fixture(scope="session")
def noisy_corpus(tmp_path_factory):
    """3 speakers x 3 contents x {clean, 0 dB}, two takes."""
    root = tmp_path_factory.mktemp("noisy_corpus")
    spec = CorpusSpec(num_utterances=36, T=20, H=12, num_speakers=3, num_contents=3,
                      snr_grid_db=["clean", 0.0], master_seed=11)
    build_corpus(spec, root)
    manifest, seqs = load_corpus(root / "manifest.json")
    return {"root": root, "spec": spec, "manifest": manifest, "seqs": seqs}


@pytest.fixture(scope="session")
def noisy_model(noisy_corpus):
    sequences = [noisy_corpus["seqs"][k] for k in sorted(noisy_corpus["seqs"])]
    return toy_train(sequences, epochs=400).model


@pytest.fixture()
def toy_ola():
    return OlaConfig(**TOY_OLA)
