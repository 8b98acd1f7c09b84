"""Optimization: schedules, freezing regimes, the train loop and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, RunConfig, TrainConfig
from .data import StorySample, Vocabulary
from .tokenizer import VqVae, tokenize_frames
from .transformer import (StoryContinuationModel, group_of_parameter,
                          lm_loss_batch)

CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss; continuing would corrupt weights."""


def lr_multiplier(step: int, total_steps: int, warmup_steps: int,
                  schedule: str, floor_frac: float = 0.1) -> float:
    """Fraction of the peak learning rate at a given optimizer step.

    Linear warmup from zero over warmup_steps, then decay to floor_frac of
    the peak at total_steps. The two pieces meet at exactly 1.0, so the
    schedule is continuous at the boundary.
    """
    if warmup_steps < 1 or total_steps <= warmup_steps:
        raise ValueError(
            f"need 1 <= warmup_steps < total_steps, got {warmup_steps}/{total_steps}")
    if schedule not in ("cosine", "linear"):
        raise ValueError(f"unknown schedule {schedule!r}")
    if step < warmup_steps:
        return step / warmup_steps
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    if schedule == "cosine":
        shape = 0.5 * (1.0 + math.cos(math.pi * progress))
    else:
        shape = 1.0 - progress
    return floor_frac + (1.0 - floor_frac) * shape


def set_trainable(model: StoryContinuationModel, mode: str) -> dict[str, bool]:
    """Apply the freezing contract for a training mode.

    finetune: everything trains. prompt: the backbone is frozen except the
    two token-embedding tables; prompt, story and retro parameters always
    train. Returns the per-group trainability actually applied.
    """
    if mode == "finetune":
        plan = {"prompt": True, "story": True, "retro": True,
                "embeddings": True, "backbone": True}
    elif mode == "prompt":
        plan = {"prompt": True, "story": True, "retro": True,
                "embeddings": True, "backbone": False}
    else:
        raise ValueError(f"unknown training mode {mode!r}")
    for name, param in model.named_parameters():
        param.requires_grad_(plan[group_of_parameter(name)])
    return plan


def trainable_fraction(model: nn.Module) -> float:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return trainable / total if total else 0.0


def build_optimizer(model: StoryContinuationModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over the trainable parameters.

    In finetune mode the original backbone (including embeddings) gets its
    own smaller rate; newly added modules train at the full rate. Prompt mode
    uses one rate for everything still trainable.
    """
    if cfg.mode == "finetune":
        slow, fast = [], []
        for name, param in model.named_parameters():
            if not param.requires_grad:
                continue
            group = group_of_parameter(name)
            (slow if group in ("backbone", "embeddings") else fast).append(param)
        groups = [{"params": fast, "lr": cfg.lr_new, "name": "new"},
                  {"params": slow, "lr": cfg.lr_pretrained, "name": "pretrained"}]
    else:
        params = [p for p in model.parameters() if p.requires_grad]
        groups = [{"params": params, "lr": cfg.lr_prompt, "name": "prompt"}]
    return torch.optim.AdamW(groups, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def build_scheduler(optimizer: torch.optim.Optimizer, cfg: TrainConfig,
                    total_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: lr_multiplier(step, total_steps, cfg.warmup_steps,
                                   cfg.schedule, cfg.min_lr_frac))


@dataclass
class FrameBatch:
    """Teacher-forced batch: one target frame per row.

    story_tokens carries every caption of the row's story so the story
    encoder can attend across time; frame_index selects the target.
    """

    story_tokens: torch.Tensor  # (B, T, N_text) int64
    frame_index: torch.Tensor  # (B,) int64, >= 1
    image_targets: torch.Tensor  # (B, image_len) int64
    source_tokens: torch.Tensor  # (B, image_len) int64


def prepare_frame_examples(samples: list[StorySample], vae: VqVae, vocab: Vocabulary,
                           config: ModelConfig) -> list[dict]:
    """Tokenize stories once up front; returns one example per target frame."""
    examples = []
    for s in samples:
        if s.n_frames > config.max_frames:
            raise ValueError(f"{s.id}: {s.n_frames} frames exceeds max_frames")
        tokens = np.stack([vocab.encode(c, config.text_len) for c in s.captions])
        grids = tokenize_frames(vae, s.frames)
        source = grids[0].reshape(-1)
        for t in range(1, s.n_frames):
            examples.append({"story_tokens": tokens, "frame_index": t,
                             "image_targets": grids[t].reshape(-1), "source": source})
    return examples


def collate_frame_batch(examples: list[dict]) -> FrameBatch:
    return FrameBatch(
        story_tokens=torch.tensor(np.stack([e["story_tokens"] for e in examples])),
        frame_index=torch.tensor([e["frame_index"] for e in examples], dtype=torch.int64),
        image_targets=torch.tensor(np.stack([e["image_targets"] for e in examples])),
        source_tokens=torch.tensor(np.stack([e["source"] for e in examples])),
    )


def frame_batch_loss(model: StoryContinuationModel,
                     batch: FrameBatch) -> tuple[torch.Tensor, dict[str, float]]:
    """Forward one batch and return the language-model loss."""
    b = batch.story_tokens.shape[0]
    rows = torch.arange(b)
    story_vecs = model.encode_story(batch.story_tokens)[rows, batch.frame_index]
    caption_tokens = batch.story_tokens[rows, batch.frame_index]
    c_img = model.source_embedding(batch.source_tokens) if model.has_retro_layers else None
    logits, spec = model(story_vecs, caption_tokens, batch.image_targets, c_img)
    return lm_loss_batch(logits, caption_tokens, batch.image_targets, spec, model.config)


def train_step(model: StoryContinuationModel, batch: FrameBatch,
               optimizer: torch.optim.Optimizer,
               scheduler: torch.optim.lr_scheduler.LambdaLR,
               cfg: TrainConfig, step: int) -> tuple[float, dict[str, float]]:
    optimizer.zero_grad(set_to_none=True)
    loss, parts = frame_batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise TrainingAborted(
            f"non-finite loss at step {step}: total={loss.item()} parts={parts}")
    loss.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for p in model.parameters() if p.requires_grad], cfg.grad_clip)
    optimizer.step()
    scheduler.step()
    return loss.item(), parts


class Trainer:
    """Epoch loop over teacher-forced frame batches with seeded shuffling."""

    def __init__(self, model: StoryContinuationModel, vae: VqVae,
                 vocab: Vocabulary, cfg: TrainConfig):
        self.model = model
        self.vae = vae
        self.vocab = vocab
        self.cfg = cfg
        set_trainable(model, cfg.mode)
        self.optimizer = build_optimizer(model, cfg)
        self.scheduler = None

    def fit(self, samples: list[StorySample],
            log_every: int = 0) -> dict[str, list[float]]:
        cfg = self.cfg
        examples = prepare_frame_examples(samples, self.vae, self.vocab, self.model.config)
        if not examples:
            raise ValueError("no training examples")
        steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
        total_steps = steps_per_epoch * cfg.epochs
        self.scheduler = build_scheduler(self.optimizer, cfg, total_steps)
        rng = np.random.default_rng(cfg.seed)
        history: dict[str, list[float]] = {"epoch_loss": [], "epoch_text_loss": [],
                                           "epoch_image_loss": [], "lr": []}
        step = 0
        self.model.train()
        for _ in range(cfg.epochs):
            order = rng.permutation(len(examples))
            sums = {"total": 0.0, "text": 0.0, "image": 0.0}
            for start in range(0, len(examples), cfg.batch_size):
                rows = [examples[i] for i in order[start:start + cfg.batch_size]]
                batch = collate_frame_batch(rows)
                loss, parts = train_step(self.model, batch, self.optimizer,
                                         self.scheduler, cfg, step)
                sums["total"] += loss * len(rows)
                sums["text"] += parts["text"] * len(rows)
                sums["image"] += parts["image"] * len(rows)
                if log_every and step % log_every == 0:
                    print(f"step {step} loss {loss:.4f} lr {self.scheduler.get_last_lr()[0]:.2e}")
                step += 1
            n = len(examples)
            history["epoch_loss"].append(sums["total"] / n)
            history["epoch_text_loss"].append(sums["text"] / n)
            history["epoch_image_loss"].append(sums["image"] / n)
            history["lr"].append(self.scheduler.get_last_lr()[0])
        return history


def save_checkpoint(path: str | Path, model: StoryContinuationModel, vae: VqVae,
                    vocab: Vocabulary, train_cfg: TrainConfig | None = None,
                    history: dict | None = None, model_card: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "train_config": dataclasses.asdict(train_cfg) if train_cfg else None,
        "model_state": model.state_dict(),
        "vae_state": vae.state_dict(),
        "vocab": vocab.to_list(),
        "history": history or {},
        "model_card": model_card,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path,
                    expect_config: ModelConfig | None = None
                    ) -> tuple[StoryContinuationModel, VqVae, Vocabulary, dict]:
    """Rebuild model, tokenizer and vocabulary from a checkpoint file.

    If expect_config is given, every differing field is listed in the error
    rather than silently loading a different architecture.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version} unsupported "
                         f"(expected {CHECKPOINT_VERSION})")
    config = ModelConfig(**payload["model_config"])
    if expect_config is not None:
        stored, wanted = dataclasses.asdict(config), dataclasses.asdict(expect_config)
        diffs = [f"{k}: checkpoint={stored[k]} requested={wanted[k]}"
                 for k in sorted(stored) if stored[k] != wanted[k]]
        if diffs:
            raise ValueError("checkpoint config mismatch: " + "; ".join(diffs))
    model = StoryContinuationModel(config)
    model.load_state_dict(payload["model_state"])
    vae = VqVae(config)
    vae.load_state_dict(payload["vae_state"])
    vocab = Vocabulary.from_list(payload["vocab"])
    meta = {"train_config": payload.get("train_config"),
            "history": payload.get("history", {}),
            "model_card": payload.get("model_card")}
    model.eval()
    vae.eval()
    return model, vae, vocab, meta


def write_run_record(run_dir: str | Path, run_config: RunConfig,
                     history: dict | None = None, extra: dict | None = None) -> Path:
    """Drop a run.json next to the artifacts so runs are reproducible."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {"config": run_config.to_dict(),
              "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
              "history": history or {}}
    if extra:
        record.update(extra)
    out = run_dir / "run.json"
    out.write_text(json.dumps(record, indent=2))
    return out
