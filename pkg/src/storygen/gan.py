"""GAN story-continuation baseline.

A conditional GAN alternative to the transformer: captions are encoded by a
small transformer encoder with a marker on the frame being generated, the
source frame is folded in through contextual attention over feature patches,
and a recurrent generator emits one frame per caption. An image discriminator
judges frames independently; a story discriminator judges the whole sequence
through 3D convolution.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import GanConfig
from .conditioning import sinusoid_table
from .data import StorySample, Vocabulary
from .layers import FeedForward, MultiHeadAttention

GAN_CHECKPOINT_VERSION = 1


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL divergence of N(mu, diag(exp(logvar))) from the standard Gaussian.

    Summed over latent dimensions, averaged over the batch. Zero exactly when
    mu=0 and logvar=0.
    """
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)} vs logvar {tuple(logvar.shape)}")
    per_sample = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)
    return per_sample.mean()


def contextual_attention_batch(target: torch.Tensor, source: torch.Tensor,
                               patch: int = 3) -> tuple[torch.Tensor, torch.Tensor]:
    """Patch-matching attention between two feature grids, batched.

    target, source: (B, C, H, W) with shared C. Every target patch is scored
    against every source patch by cosine similarity of the flattened patches;
    scores are softmaxed over source locations and the matched source patches
    are overlap-added back onto the target grid. Returns (fused grid,
    similarity (B, H*W, H*W) before softmax).
    """
    if target.shape[1] != source.shape[1]:
        raise ValueError("target and source must share channel depth")
    if patch % 2 == 0 or patch < 1:
        raise ValueError(f"patch size must be odd and positive, got {patch}")
    b, c, h, w = target.shape
    if min(h, w, source.shape[2], source.shape[3]) < patch:
        raise ValueError(f"grid smaller than patch size {patch}")
    pad = patch // 2
    t_patches = F.unfold(target, patch, padding=pad)  # (B, C*p*p, H*W)
    s_patches = F.unfold(source, patch, padding=pad)
    t_norm = t_patches / (t_patches.norm(dim=1, keepdim=True) + 1e-8)
    s_norm = s_patches / (s_patches.norm(dim=1, keepdim=True) + 1e-8)
    similarity = t_norm.transpose(1, 2) @ s_norm  # (B, HW_t, HW_s)
    attn = torch.softmax(similarity, dim=-1)
    matched = attn @ s_patches.transpose(1, 2)  # (B, HW_t, C*p*p)
    composite = F.fold(matched.transpose(1, 2), (h, w), patch, padding=pad)
    counts = F.fold(F.unfold(torch.ones(1, 1, h, w), patch, padding=pad),
                    (h, w), patch, padding=pad)
    fused = target + composite / counts
    return fused, similarity


def contextual_attention(target: torch.Tensor, source: torch.Tensor,
                         patch: int = 3) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-grid wrapper: (C, H, W) inputs, similarity (H*W, H*W)."""
    fused, sim = contextual_attention_batch(target.unsqueeze(0), source.unsqueeze(0), patch)
    return fused.squeeze(0), sim.squeeze(0)


class _EncoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = FeedForward(d)

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.ln2(x))


class CaptionEncoder(nn.Module):
    """Bidirectional encoder over all captions of a story, concatenated.

    Token ids vocab_size and vocab_size+1 are reserved for the leading
    summary slot and the marker inserted before the caption currently being
    generated; the output is the contextualized vector at the summary slot.
    """

    def __init__(self, vocab_size: int, text_len: int, max_frames: int,
                 d_txt: int = 64, n_layers: int = 2, n_heads: int = 4):
        super().__init__()
        self.vocab_size = vocab_size
        self.text_len = text_len
        self.cls_id = vocab_size
        self.marker_id = vocab_size + 1
        self.embed = nn.Embedding(vocab_size + 2, d_txt)
        max_len = 2 + max_frames * text_len
        self.register_buffer("pos", sinusoid_table(max_len, d_txt), persistent=False)
        self.blocks = nn.ModuleList(_EncoderBlock(d_txt, n_heads) for _ in range(n_layers))
        self.ln_out = nn.LayerNorm(d_txt)

    def build_sequence(self, caption_tokens: torch.Tensor, t: int) -> torch.Tensor:
        """Concatenate captions (T, N) with the marker before caption t."""
        n_frames = caption_tokens.shape[0]
        if n_frames == 0:
            raise ValueError("caption list is empty")
        if not 0 <= t < n_frames:
            raise ValueError(f"marker index {t} outside [0, {n_frames})")
        parts = [torch.tensor([self.cls_id])]
        for k in range(n_frames):
            if k == t:
                parts.append(torch.tensor([self.marker_id]))
            parts.append(caption_tokens[k])
        return torch.cat(parts)

    def forward(self, sequences: torch.Tensor) -> torch.Tensor:
        """Marked sequences (B, L) -> summary vectors (B, d_txt)."""
        x = self.embed(sequences) + self.pos[: sequences.shape[1]]
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x[:, 0])

    def encode_story(self, caption_tokens: torch.Tensor, t: int) -> torch.Tensor:
        """One story (T, N) and a marker position -> summary vector (d_txt)."""
        seq = self.build_sequence(caption_tokens, t).unsqueeze(0)
        return self.forward(seq).squeeze(0)


class SourceEncoder(nn.Module):
    """Source frame (B, 3, H, W) -> feature grid (B, base, H/8, W/8)."""

    def __init__(self, base: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, base, 4, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class FrameGenerator(nn.Module):
    """Recurrent frame decoder: caption context plus fused source features to pixels."""

    def __init__(self, cfg: GanConfig, image_size: int):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image size must be divisible by 8, got {image_size}")
        base = cfg.base_channels
        self.g0 = image_size // 8
        self.base = base
        self.cond_head = nn.Linear(cfg.d_txt, 2 * cfg.d_cond)
        self.gru = nn.GRUCell(cfg.d_cond, cfg.d_cond)
        self.text_grid = nn.Linear(cfg.d_cond, base * self.g0 * self.g0)
        self.latent_in = nn.Linear(cfg.d_cond + cfg.z_dim, 2 * base * self.g0 * self.g0)
        self.up = nn.Sequential(
            nn.Conv2d(3 * base, 2 * base, 3, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(2 * base, 2 * base, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(2 * base, base, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(base, base, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(base, 3, 3, padding=1),
        )

    def condition(self, h0: torch.Tensor,
                  gen: torch.Generator | None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Caption summary -> (sampled conditioning, mu, logvar)."""
        mu, logvar = self.cond_head(h0).chunk(2, dim=-1)
        eps = torch.randn(mu.shape, generator=gen)
        return mu + torch.exp(0.5 * logvar) * eps, mu, logvar

    def frame(self, context: torch.Tensor, source_feat: torch.Tensor,
              z: torch.Tensor, patch: int) -> torch.Tensor:
        b = context.shape[0]
        grid = self.text_grid(context).view(b, self.base, self.g0, self.g0)
        fused, _ = contextual_attention_batch(grid, source_feat, patch)
        x0 = self.latent_in(torch.cat([context, z], dim=-1))
        x0 = x0.view(b, 2 * self.base, self.g0, self.g0)
        return torch.sigmoid(self.up(torch.cat([x0, fused], dim=1)))


class ImageDiscriminator(nn.Module):
    """Scores single frames as real or fake, conditioned on the caption vector."""

    def __init__(self, base: int, d_cond: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, 2 * base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * base, 4 * base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.judge = nn.Sequential(
            nn.Conv2d(4 * base + d_cond, 2 * base, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * base, 1, 1),
        )

    def forward(self, frames: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """frames (N, 3, H, W), cond (N, d_cond) -> scores (N,) in (0, 1)."""
        feat = self.conv(frames)
        tiled = cond[:, :, None, None].expand(-1, -1, feat.shape[2], feat.shape[3])
        score = self.judge(torch.cat([feat, tiled], dim=1))
        return torch.sigmoid(score.mean(dim=(1, 2, 3)))


class StoryDiscriminator(nn.Module):
    """Scores whole target sequences through 3D convolution over time."""

    def __init__(self, base: int, d_cond: int, image_size: int, n_targets: int):
        super().__init__()
        if n_targets < 2:
            raise ValueError(f"story discriminator needs >= 2 target frames, got {n_targets}")
        self.conv = nn.Sequential(
            nn.Conv3d(3, base, (2, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1)),
            nn.LeakyReLU(0.2),
            nn.Conv3d(base, 2 * base, (1, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1)),
            nn.LeakyReLU(0.2),
        )
        flat = 2 * base * (n_targets - 1) * (image_size // 4) ** 2
        self.judge = nn.Sequential(
            nn.Linear(flat + d_cond, 4 * base), nn.LeakyReLU(0.2),
            nn.Linear(4 * base, 1),
        )

    def forward(self, stories: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """stories (B, 3, T-1, H, W), cond (B, d_cond) -> scores (B,) in (0, 1)."""
        feat = self.conv(stories).flatten(1)
        score = self.judge(torch.cat([feat, cond], dim=1))
        return torch.sigmoid(score.squeeze(-1))


class GanModel(nn.Module):
    """Caption encoder, generator and both discriminators under one roof."""

    def __init__(self, cfg: GanConfig, vocab_size: int, text_len: int,
                 max_frames: int, image_size: int, n_targets: int):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.n_targets = n_targets
        self.captions = CaptionEncoder(vocab_size, text_len, max_frames,
                                       cfg.d_txt, cfg.text_layers)
        self.source_encoder = SourceEncoder(cfg.base_channels)
        self.generator = FrameGenerator(cfg, image_size)
        self.d_image = ImageDiscriminator(cfg.base_channels, cfg.d_cond)
        self.d_story = StoryDiscriminator(cfg.base_channels, cfg.d_cond,
                                          image_size, n_targets)

    def generator_parameters(self):
        mods = [self.captions, self.source_encoder, self.generator]
        return [p for m in mods for p in m.parameters()]

    def discriminator_parameters(self):
        mods = [self.d_image, self.d_story]
        return [p for m in mods for p in m.parameters()]

    def encode_batch(self, caption_tokens: torch.Tensor) -> torch.Tensor:
        """caption_tokens (B, T, N) -> summary vectors (B, T-1, d_txt) for targets."""
        b, t_frames, _ = caption_tokens.shape
        seqs = [self.captions.build_sequence(caption_tokens[i], t)
                for i in range(b) for t in range(1, t_frames)]
        out = self.captions(torch.stack(seqs))
        return out.view(b, t_frames - 1, -1)

    def generate(self, caption_tokens: torch.Tensor, source_frames: torch.Tensor,
                 gen: torch.Generator | None = None
                 ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Produce target frames (B, T-1, 3, H, W) plus (cond, mu, logvar stack).

        source_frames (B, 3, H, W) in [0, 1].
        """
        h0 = self.encode_batch(caption_tokens)
        b, n_targets, _ = h0.shape
        cond, mu, logvar = self.generator.condition(h0, gen)
        source_feat = self.source_encoder(source_frames)
        hidden = torch.zeros(b, self.cfg.d_cond)
        frames = []
        for t in range(n_targets):
            hidden = self.generator.gru(cond[:, t], hidden)
            z = torch.randn(b, self.cfg.z_dim, generator=gen)
            frames.append(self.generator.frame(hidden, source_feat, z, self.cfg.patch_size))
        return torch.stack(frames, dim=1), cond, (mu, logvar)


@dataclass
class GanLosses:
    kl: float
    d_total: float
    g_total: float
    d_image: float
    d_story: float
    g_image: float
    g_story: float
    fake_std: float  # mode-collapse indicator, reporting only


def discriminator_losses(model: GanModel, real: torch.Tensor, fake: torch.Tensor,
                         cond: torch.Tensor) -> tuple[torch.Tensor, dict[str, float]]:
    """BCE terms for both discriminators; real scored toward 1, fake toward 0.

    real/fake (B, T-1, 3, H, W), cond (B, T-1, d_cond).
    """
    b, n, _, h, w = real.shape
    flat_cond = cond.reshape(b * n, -1)
    ones = torch.ones(b * n)
    zeros = torch.zeros(b * n)
    img_real = F.binary_cross_entropy(model.d_image(real.reshape(b * n, 3, h, w), flat_cond), ones)
    img_fake = F.binary_cross_entropy(model.d_image(fake.reshape(b * n, 3, h, w), flat_cond), zeros)
    story_cond = cond.mean(dim=1)
    story_real = F.binary_cross_entropy(
        model.d_story(real.transpose(1, 2), story_cond), torch.ones(b))
    story_fake = F.binary_cross_entropy(
        model.d_story(fake.transpose(1, 2), story_cond), torch.zeros(b))
    image_term = img_real + img_fake
    story_term = story_real + story_fake
    total = image_term + story_term
    return total, {"image": image_term.item(), "story": story_term.item()}


class GanTrainer:
    """Alternating discriminator/generator updates with strict isolation."""

    def __init__(self, model: GanModel, cfg: GanConfig):
        self.model = model
        self.cfg = cfg
        self.opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.g_lr,
                                      betas=(0.5, 0.999))
        self.opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.d_lr,
                                      betas=(0.5, 0.999))
        self.gen = torch.Generator().manual_seed(cfg.seed)

    def train_step(self, caption_tokens: torch.Tensor,
                   frames: torch.Tensor) -> GanLosses:
        """One alternating update. frames (B, T, 3, H, W) in [0, 1]."""
        model = self.model
        real = frames[:, 1:]
        source = frames[:, 0]
        fake, cond, (mu, logvar) = model.generate(caption_tokens, source, self.gen)

        self.opt_d.zero_grad(set_to_none=True)
        d_loss, d_parts = discriminator_losses(model, real, fake.detach(), cond.detach())
        d_loss.backward()
        self.opt_d.step()

        self.opt_g.zero_grad(set_to_none=True)
        b, n, _, h, w = fake.shape
        flat_cond = cond.reshape(b * n, -1)
        g_img = F.binary_cross_entropy(
            model.d_image(fake.reshape(b * n, 3, h, w), flat_cond), torch.ones(b * n))
        g_story = F.binary_cross_entropy(
            model.d_story(fake.transpose(1, 2), cond.mean(dim=1)), torch.ones(b))
        kl = kl_loss(mu.reshape(-1, mu.shape[-1]), logvar.reshape(-1, logvar.shape[-1]))
        g_loss = kl + g_img + g_story
        g_loss.backward()
        self.opt_g.step()

        return GanLosses(kl=kl.item(), d_total=d_loss.item(), g_total=g_loss.item(),
                         d_image=d_parts["image"], d_story=d_parts["story"],
                         g_image=g_img.item(), g_story=g_story.item(),
                         fake_std=fake.detach().std().item())

    def fit(self, samples: list[StorySample], vocab: Vocabulary, text_len: int,
            checkpoint_dir: str | Path | None = None,
            eval_fn=None) -> dict[str, list[float]]:
        """Epoch loop; checkpoints every cfg.checkpoint_every epochs.

        eval_fn, when given, is called with the model at every checkpoint and
        its scalar result is recorded (used for FID-vs-epoch curves).
        """
        cfg = self.cfg
        tokens = torch.tensor(np.stack([
            np.stack([vocab.encode(c, text_len) for c in s.captions]) for s in samples]))
        frames = torch.tensor(np.stack([s.frames for s in samples])).permute(0, 1, 4, 2, 3)
        rng = np.random.default_rng(cfg.seed)
        history: dict[str, list[float]] = {"g_loss": [], "d_loss": [], "kl": [],
                                           "checkpoint_epochs": [], "eval": []}
        n = len(samples)
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            g_sum = d_sum = kl_sum = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                losses = self.train_step(tokens[idx], frames[idx])
                g_sum += losses.g_total * len(idx)
                d_sum += losses.d_total * len(idx)
                kl_sum += losses.kl * len(idx)
            history["g_loss"].append(g_sum / n)
            history["d_loss"].append(d_sum / n)
            history["kl"].append(kl_sum / n)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                history["checkpoint_epochs"].append(epoch + 1)
                if eval_fn is not None:
                    history["eval"].append(float(eval_fn(self.model)))
                if checkpoint_dir is not None:
                    save_gan_checkpoint(Path(checkpoint_dir) / f"gan_ep{epoch + 1:03d}.pt",
                                        self.model, vocab)
        return history


def gan_generate_stories(model: GanModel, samples: list[StorySample], vocab: Vocabulary,
                         text_len: int, seed: int = 0) -> np.ndarray:
    """Generate target frames for evaluation; (B, T-1, h, w, 3) in [0, 1]."""
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.tensor(np.stack([
        np.stack([vocab.encode(c, text_len) for c in s.captions]) for s in samples]))
    frames = torch.tensor(np.stack([s.frames for s in samples])).permute(0, 1, 4, 2, 3)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fake, _, _ = model.generate(tokens, frames[:, 0], gen)
    finally:
        model.train(was_training)
    return fake.permute(0, 1, 3, 4, 2).numpy()


def save_gan_checkpoint(path: str | Path, model: GanModel, vocab: Vocabulary) -> None:
    payload = {
        "version": GAN_CHECKPOINT_VERSION,
        "gan_config": dataclasses.asdict(model.cfg),
        "shape": {"vocab_size": model.captions.vocab_size,
                  "text_len": model.captions.text_len,
                  "max_frames": (model.captions.pos.shape[0] - 2) // model.captions.text_len,
                  "image_size": model.image_size,
                  "n_targets": model.n_targets},
        "state": model.state_dict(),
        "vocab": vocab.to_list(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_gan_checkpoint(path: str | Path) -> tuple[GanModel, Vocabulary]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != GAN_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported gan checkpoint version {payload.get('version')}")
    cfg = GanConfig(**payload["gan_config"])
    model = GanModel(cfg, **payload["shape"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model, Vocabulary.from_list(payload["vocab"])
