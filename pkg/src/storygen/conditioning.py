"""Conditioning pathways: story encoding, tuned prompts and sequence layout.

Everything the transformer consumes besides plain token embeddings is built
here: the per-story global summary vector, the trainable prompt rows that
prefix every sequence, and the concatenation of all segments into the layout
the decoder actually sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .layers import MultiHeadAttention


def sinusoid_table(max_len: int, dim: int) -> torch.Tensor:
    """Fixed sin/cos positional table of shape (max_len, dim).

    Parameter-free and deterministic; even channels carry sin, odd carry cos.
    """
    if max_len < 1 or dim < 2:
        raise ValueError(f"invalid sinusoid table size ({max_len}, {dim})")
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(max_len, dim)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: dim // 2])
    return table


class SentenceEncoder(nn.Module):
    """Caption tokens -> fixed-size sentence vector by masked mean pooling.

    Padding tokens (id 0) are excluded from the mean. An all-padding caption
    maps to the zero vector.
    """

    def __init__(self, vocab_size: int, d_sent: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d_sent)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens (..., N) int64 -> (..., d_sent)."""
        if tokens.dtype != torch.int64:
            raise TypeError(f"caption tokens must be int64, got {tokens.dtype}")
        mask = (tokens != 0).float().unsqueeze(-1)
        emb = self.embed(tokens) * mask
        count = mask.sum(dim=-2).clamp(min=1.0)
        return emb.sum(dim=-2) / count


class StoryEncoder(nn.Module):
    """Summarizes all frame captions of a story into one vector per frame.

    A single unmasked attention layer mixes the sentence vectors across
    time, so the summary for frame t reflects every caption in the story,
    then a linear bridge lifts the result to the transformer width.
    """

    def __init__(self, d_sent: int, d_model: int, max_frames: int, n_heads: int = 4):
        super().__init__()
        self.max_frames = max_frames
        self.attn = MultiHeadAttention(d_sent, n_heads)
        self.bridge = nn.Linear(d_sent, d_model)
        self.register_buffer("pos", sinusoid_table(max_frames, d_sent), persistent=False)

    def forward(self, sentences: torch.Tensor) -> torch.Tensor:
        """sentences (T, d_sent) or (B, T, d_sent) -> same leading shape, d_model."""
        squeeze = sentences.dim() == 2
        if squeeze:
            sentences = sentences.unsqueeze(0)
        t = sentences.shape[1]
        if t > self.max_frames:
            raise ValueError(f"story has {t} frames, encoder supports {self.max_frames}")
        x = sentences + self.pos[:t]
        x = x + self.attn(x, x)
        out = self.bridge(x)
        return out.squeeze(0) if squeeze else out


class PromptGenerator(nn.Module):
    """Trainable prompt rows prefixed to every sequence.

    The output is a raw embedding table plus a small reparameterization MLP
    applied residually. The last MLP layer starts at zero so the module is
    exactly the raw table at initialization; the MLP only reshapes gradients
    during tuning. Input-agnostic: same rows for every story.
    """

    def __init__(self, prompt_len: int, d_model: int, hidden_mult: int = 4):
        super().__init__()
        self.prompt_len = prompt_len
        self.raw = nn.Parameter(torch.randn(prompt_len, d_model) * 0.02)
        self.fc1 = nn.Linear(d_model, hidden_mult * d_model)
        self.fc2 = nn.Linear(hidden_mult * d_model, d_model)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self) -> torch.Tensor:
        if self.prompt_len == 0:
            return self.raw
        return self.raw + self.fc2(torch.tanh(self.fc1(self.raw)))


class TokenEmbedder(nn.Module):
    """Token and positional embedding tables for both modalities.

    Image logits live in a joint vocabulary after the text ids, so the image
    embedding table is separate but image targets are offset by text_vocab
    when scoring. Source-frame tokens reuse the image table but get their own
    positional rows, keeping generated-frame and source-frame positions
    distinguishable to the cross-attention layers.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.text_emb = nn.Embedding(config.text_vocab, config.d_model)
        self.image_emb = nn.Embedding(config.image_vocab, config.d_model)
        self.pos_text = nn.Parameter(torch.randn(config.text_len, config.d_model) * 0.02)
        self.pos_image = nn.Parameter(torch.randn(config.image_len, config.d_model) * 0.02)
        self.pos_source = nn.Parameter(torch.randn(config.image_len, config.d_model) * 0.02)

    def embed_text(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens (B, N_text) -> (B, N_text, d_model) with positions added."""
        if tokens.shape[-1] != self.config.text_len:
            raise ValueError(
                f"caption segment must have {self.config.text_len} tokens, got {tokens.shape[-1]}")
        self._check_range(tokens, self.config.text_vocab, "text")
        return self.text_emb(tokens) + self.pos_text

    def embed_image(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens (B, n) with n <= image_len -> (B, n, d_model)."""
        n = tokens.shape[-1]
        if n > self.config.image_len:
            raise ValueError(f"image segment overflow: {n} > {self.config.image_len}")
        self._check_range(tokens, self.config.image_vocab, "image")
        if n == 0:
            b = tokens.shape[0]
            return torch.zeros(b, 0, self.config.d_model, device=tokens.device)
        return self.image_emb(tokens) + self.pos_image[:n]

    def embed_source(self, tokens: torch.Tensor) -> torch.Tensor:
        """Source-frame tokens (B, image_len) -> (B, image_len, d_model)."""
        if tokens.shape[-1] != self.config.image_len:
            raise ValueError(
                f"source frame must have {self.config.image_len} tokens, got {tokens.shape[-1]}")
        self._check_range(tokens, self.config.image_vocab, "image")
        return self.image_emb(tokens) + self.pos_source

    @staticmethod
    def _check_range(tokens: torch.Tensor, vocab: int, kind: str) -> None:
        if tokens.numel() == 0:
            return
        lo, hi = int(tokens.min()), int(tokens.max())
        if lo < 0 or hi >= vocab:
            raise ValueError(f"{kind} token id out of range [0, {vocab}): saw [{lo}, {hi}]")


@dataclass(frozen=True)
class LayoutSpec:
    """Segment boundaries of one laid-out sequence.

    Order is fixed: prompt rows, one story vector, caption tokens, then
    however many image tokens are present so far.
    """

    prompt_len: int
    text_len: int
    image_len: int

    @property
    def story_index(self) -> int:
        return self.prompt_len

    @property
    def text_start(self) -> int:
        return self.prompt_len + 1

    @property
    def image_start(self) -> int:
        return self.text_start + self.text_len

    @property
    def total(self) -> int:
        return self.image_start + self.image_len

    def segment_of(self, pos: int) -> tuple[str, int]:
        """Map an absolute position to (segment name, offset within segment)."""
        if pos < 0 or pos >= self.total:
            raise IndexError(f"position {pos} outside layout of length {self.total}")
        if pos < self.prompt_len:
            return "prompt", pos
        if pos == self.story_index:
            return "story", 0
        if pos < self.image_start:
            return "text", pos - self.text_start
        return "image", pos - self.image_start


def build_layout_batch(prompt: torch.Tensor, story_vecs: torch.Tensor,
                       caption_tokens: torch.Tensor, image_tokens: torch.Tensor,
                       embedder: TokenEmbedder) -> tuple[torch.Tensor, LayoutSpec]:
    """Concatenate all segments into the decoder input.

    prompt (P, d) shared across the batch, story_vecs (B, d),
    caption_tokens (B, N_text) int64, image_tokens (B, n) int64 with
    n <= image_len. Returns ((B, L, d), LayoutSpec).
    """
    b = story_vecs.shape[0]
    if caption_tokens.shape[0] != b or image_tokens.shape[0] != b:
        raise ValueError("batch size mismatch between story, caption and image inputs")
    parts = []
    if prompt.shape[0] > 0:
        parts.append(prompt.unsqueeze(0).expand(b, -1, -1))
    parts.append(story_vecs.unsqueeze(1))
    parts.append(embedder.embed_text(caption_tokens))
    parts.append(embedder.embed_image(image_tokens))
    x = torch.cat(parts, dim=1)
    spec = LayoutSpec(prompt.shape[0], caption_tokens.shape[1], image_tokens.shape[1])
    return x, spec


def layout_sequence(prompt: torch.Tensor, story_vec: torch.Tensor,
                    caption_tokens: torch.Tensor, image_tokens: torch.Tensor,
                    embedder: TokenEmbedder) -> tuple[torch.Tensor, LayoutSpec]:
    """Single-sequence wrapper around build_layout_batch.

    story_vec (d,), caption_tokens (N_text,), image_tokens (n,).
    Returns ((L, d), LayoutSpec).
    """
    x, spec = build_layout_batch(prompt, story_vec.unsqueeze(0),
                                 caption_tokens.unsqueeze(0), image_tokens.unsqueeze(0),
                                 embedder)
    return x.squeeze(0), spec
