"""Shared fixtures: tiny configurations, a small synthetic dataset, and a
quickly trained checkpoint reused by the service and CLI tests.

The hook at the bottom prints one PASS/FAIL line per release criterion
exercised in test_acceptance.py so the gate is readable at a glance.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch

from storygen.config import DataSpec, ModelConfig, TrainConfig
from storygen.data import Vocabulary, generate_synthetic_dataset, save_dataset
from storygen.tokenizer import VqVae, train_vqvae
from storygen.training import Trainer, save_checkpoint
from storygen.transformer import StoryContinuationModel

TINY_MODEL = dict(image_size=16, grid_size=4, code_dim=8, image_vocab=16,
                  vae_channels=8, d_model=32, n_heads=2, n_blocks=2,
                  text_vocab=32, text_len=8, image_len=16, prompt_len=2,
                  retro_every=2, max_frames=5, d_sent=16)

TINY_DATA = dict(n_chars=4, n_unseen_chars=1, n_backgrounds=2, frames_per_story=4,
                 train_count=12, val_count=4, test_count=6, image_size=16,
                 unseen_fraction=0.5, seed=3)


def make_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **overrides})


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return make_model_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic_dataset(DataSpec(**TINY_DATA))


@pytest.fixture(scope="session")
def tiny_data_root(tmp_path_factory, tiny_dataset):
    root = tmp_path_factory.mktemp("dataset")
    save_dataset(tiny_dataset, root)
    return root


@pytest.fixture(scope="session")
def tiny_vocab(tiny_dataset) -> Vocabulary:
    return Vocabulary.build(tiny_dataset.all_captions("train"), TINY_MODEL["text_vocab"])


@pytest.fixture(scope="session")
def tiny_vae(tiny_config, tiny_dataset) -> VqVae:
    frames = np.concatenate([s.frames for s in tiny_dataset.samples("train")])
    torch.manual_seed(0)
    vae = VqVae(tiny_config)
    train_vqvae(vae, frames, steps=40, batch_size=16, lr=2e-3, seed=0)
    vae.eval()
    return vae


@pytest.fixture(scope="session")
def quick_checkpoint(tmp_path_factory, tiny_config, tiny_dataset, tiny_vocab, tiny_vae):
    """A small trained checkpoint with a model card; quality is irrelevant,
    only the loading/serving contracts are exercised against it."""
    cfg = TrainConfig(mode="finetune", epochs=2, batch_size=8,
                      lr_new=2e-3, lr_pretrained=1e-3, warmup_steps=4, seed=0)
    torch.manual_seed(0)
    model = StoryContinuationModel(tiny_config)
    history = Trainer(model, tiny_vae, tiny_vocab, cfg).fit(tiny_dataset.samples("train"))
    card = {
        "model_id": "retro-finetune",
        "config": dataclasses.asdict(tiny_config),
        "dataset": "synthetic-tiny",
        "seeds": {"train": cfg.seed, "vae": 0},
        "intended_use": "test fixture for the serving and CLI contracts",
        "metrics": {},
    }
    path = tmp_path_factory.mktemp("ckpt") / "model.pt"
    save_checkpoint(path, model, tiny_vae, tiny_vocab, cfg, history, model_card=card)
    return path


_CRITERION_OUTCOMES: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call":
        _CRITERION_OUTCOMES[name] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        _CRITERION_OUTCOMES[name] = "error" if report.failed else report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERION_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERION_OUTCOMES):
        tag = name.removeprefix("test_criterion_")
        num, _, slug = tag.partition("_")
        outcome = _CRITERION_OUTCOMES[name]
        status = {"passed": "PASS", "failed": "FAIL",
                  "skipped": "SKIP"}.get(outcome, outcome.upper())
        label = f"criterion {num} ({slug.replace('_', ' ')})"
        terminalreporter.write_line(f"{label:<60s} {status}")
