"""Decoder-only transformer over caption and image tokens.

The backbone is a standard pre-norm GPT stack. Two retrofits turn it into a
story continuation model: an unmasked cross-attention sublayer over the
tokenized source frame in every k-th block, and a story summary vector spliced
into the input layout. Cross-attention output projections start at zero, so a
freshly built model computes exactly what the plain backbone would.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .conditioning import (LayoutSpec, PromptGenerator, SentenceEncoder,
                           StoryEncoder, TokenEmbedder, build_layout_batch)
from .layers import FeedForward, MultiHeadAttention
from .tokenizer import ImageTokenGrid


def causal_mask(length: int) -> torch.Tensor:
    """Boolean (L, L) mask, True where attention is allowed."""
    if length < 1:
        raise ValueError(f"mask length must be positive, got {length}")
    return torch.ones(length, length, dtype=torch.bool).tril_()


class DecoderBlock(nn.Module):
    """Pre-norm block: masked self-attention, optional source cross-attention, MLP.

    Cross-attention is attached separately (see attach_cross_attention) so that
    backbone parameter initialization draws the same random values whether or
    not the block ends up carrying one.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = FeedForward(d_model)
        self.ln_cross: nn.LayerNorm | None = None
        self.cross_attn: MultiHeadAttention | None = None

    def attach_cross_attention(self, n_heads: int) -> None:
        d_model = self.ln1.normalized_shape[0]
        self.ln_cross = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn.zero_output_projection()

    @property
    def has_cross_attention(self) -> bool:
        return self.cross_attn is not None

    def forward(self, x: torch.Tensor, c_img: torch.Tensor | None,
                mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        if self.cross_attn is not None:
            if c_img is None:
                raise ValueError("block carries cross-attention but no source embedding given")
            x = x + self.cross_attn(self.ln_cross(x), c_img)
        x = x + self.mlp(self.ln2(x))
        return x


@dataclass
class TokenSequence:
    """Targets for one training frame: full caption and full image token rows."""

    text_tokens: torch.Tensor
    image_tokens: torch.Tensor

    def __post_init__(self):
        if self.text_tokens.dtype != torch.int64 or self.image_tokens.dtype != torch.int64:
            raise TypeError("token sequences must be int64")


class StoryContinuationModel(nn.Module):
    """Transformer with story conditioning, tuned prompts and source cross-attention."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embedder = TokenEmbedder(config)
        self.sentence_encoder = SentenceEncoder(config.text_vocab, config.d_sent)
        self.story_encoder = StoryEncoder(config.d_sent, config.d_model, config.max_frames)
        self.prompt = PromptGenerator(config.prompt_len, config.d_model)
        self.blocks = nn.ModuleList(
            DecoderBlock(config.d_model, config.n_heads) for _ in range(config.n_blocks))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.text_vocab + config.image_vocab, bias=False)
        for i in config.retro_blocks():
            self.blocks[i].attach_cross_attention(config.n_heads)

    @property
    def has_retro_layers(self) -> bool:
        return any(b.has_cross_attention for b in self.blocks)

    def encode_story(self, caption_tokens: torch.Tensor) -> torch.Tensor:
        """Caption tokens (T, N_text) or (B, T, N_text) -> story vectors (.., T, d_model).

        With use_story disabled (ablation) the slot stays in the layout but
        carries zeros, so sequence geometry is unchanged.
        """
        if not self.config.use_story:
            shape = caption_tokens.shape[:-1] + (self.config.d_model,)
            return torch.zeros(shape)
        sentences = self.sentence_encoder(caption_tokens)
        return self.story_encoder(sentences)

    def source_embedding(self, source_tokens: torch.Tensor) -> torch.Tensor:
        """Flattened source-frame tokens (B, image_len) -> (B, image_len, d_model)."""
        return self.embedder.embed_source(source_tokens)

    def forward(self, story_vecs: torch.Tensor, caption_tokens: torch.Tensor,
                image_tokens: torch.Tensor,
                c_img: torch.Tensor | None = None) -> tuple[torch.Tensor, LayoutSpec]:
        """Run the stack over one frame layout per batch row.

        story_vecs (B, d_model), caption_tokens (B, N_text) int64,
        image_tokens (B, n) int64 with n <= image_len, c_img (B, image_len,
        d_model) or None. Returns logits (B, L, text_vocab + image_vocab) over
        the joint vocabulary and the layout used.
        """
        x, spec = build_layout_batch(self.prompt(), story_vecs, caption_tokens,
                                     image_tokens, self.embedder)
        mask = causal_mask(x.shape[1]).to(x.device)
        for block in self.blocks:
            x = block(x, c_img, mask)
        logits = self.head(self.ln_f(x))
        if not torch.isfinite(logits).all():
            bad = (~torch.isfinite(logits)).sum().item()
            raise RuntimeError(f"non-finite activations in {bad} logit entries")
        return logits, spec


def embed_source(model: StoryContinuationModel, grid: ImageTokenGrid) -> torch.Tensor:
    """Tokenized source frame -> (image_len, d_model) cross-attention memory."""
    flat = torch.from_numpy(grid.flat()).unsqueeze(0)
    return model.source_embedding(flat).squeeze(0)


def forward_logits(model: StoryContinuationModel, story_vec: torch.Tensor,
                   caption_tokens: torch.Tensor, image_tokens: torch.Tensor,
                   c_img: torch.Tensor | None = None) -> tuple[torch.Tensor, LayoutSpec]:
    """Single-sequence forward: unbatched inputs, logits (L, V)."""
    logits, spec = model(story_vec.unsqueeze(0), caption_tokens.unsqueeze(0),
                         image_tokens.unsqueeze(0),
                         None if c_img is None else c_img.unsqueeze(0))
    return logits.squeeze(0), spec


def lm_loss_batch(logits: torch.Tensor, text_tokens: torch.Tensor,
                  image_tokens: torch.Tensor, spec: LayoutSpec,
                  config: ModelConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Next-token cross-entropy, text and image parts weighted equally.

    Every position predicts its successor; prompt rows and the story vector
    are never targets. Text positions are scored against the text slice of
    the joint vocabulary and image positions against the image slice, each
    averaged over its own token count, then summed.
    """
    if spec.image_len != config.image_len:
        raise ValueError("loss requires a full layout with all image tokens present")
    if text_tokens.min() < 0 or text_tokens.max() >= config.text_vocab:
        raise ValueError("text target id out of vocabulary")
    if image_tokens.min() < 0 or image_tokens.max() >= config.image_vocab:
        raise ValueError("image target id out of vocabulary")
    n_text, n_img = config.text_len, config.image_len
    text_logits = logits[:, spec.story_index:spec.story_index + n_text, :config.text_vocab]
    image_logits = logits[:, spec.image_start - 1:spec.image_start - 1 + n_img, config.text_vocab:]
    text_loss = F.cross_entropy(text_logits.reshape(-1, config.text_vocab),
                                text_tokens.reshape(-1))
    image_loss = F.cross_entropy(image_logits.reshape(-1, config.image_vocab),
                                 image_tokens.reshape(-1))
    total = text_loss + image_loss
    return total, {"text": text_loss.item(), "image": image_loss.item()}


def lm_loss(logits: torch.Tensor, targets: TokenSequence, spec: LayoutSpec,
            config: ModelConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Single-sequence wrapper: logits (L, V), targets for one frame."""
    return lm_loss_batch(logits.unsqueeze(0), targets.text_tokens.unsqueeze(0),
                         targets.image_tokens.unsqueeze(0), spec, config)


def group_of_parameter(name: str) -> str:
    """Map a parameter name to its census/freezing group."""
    if name.startswith("prompt."):
        return "prompt"
    if name.startswith(("sentence_encoder.", "story_encoder.")):
        return "story"
    if ".cross_attn." in name or ".ln_cross." in name or name.startswith("embedder.pos_source"):
        return "retro"
    if name.startswith(("embedder.text_emb", "embedder.image_emb")):
        return "embeddings"
    return "backbone"


def parameter_census(model: StoryContinuationModel) -> dict[str, int]:
    """Parameter counts per group plus the overall total."""
    census = {"prompt": 0, "story": 0, "retro": 0, "embeddings": 0, "backbone": 0}
    for name, param in model.named_parameters():
        census[group_of_parameter(name)] += param.numel()
    census["total"] = sum(census.values())
    return census


@dataclass(frozen=True)
class SamplerConfig:
    """Decoding controls. temperature 0 means greedy argmax."""

    temperature: float = 1.0
    top_k: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")


def _filter_top_k(logits: torch.Tensor, k: int) -> torch.Tensor:
    if k <= 0 or k >= logits.shape[-1]:
        return logits
    cutoff = torch.topk(logits, k, dim=-1).values[..., -1:]
    return logits.masked_fill(logits < cutoff, float("-inf"))


def sample_frames(model: StoryContinuationModel, story_vecs: torch.Tensor,
                  caption_tokens: torch.Tensor, c_img: torch.Tensor | None,
                  sampler: SamplerConfig) -> torch.Tensor:
    """Sample image token rows (B, image_len) autoregressively.

    Deterministic for a fixed sampler seed and batch composition. Each step
    re-runs the full stack over the grown layout; at these sequence lengths a
    key/value cache is not worth the bookkeeping.
    """
    config = model.config
    b = story_vecs.shape[0]
    device = story_vecs.device
    gen = torch.Generator().manual_seed(sampler.seed)
    tokens = torch.zeros(b, 0, dtype=torch.int64, device=device)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for _ in range(config.image_len):
                logits, _ = model(story_vecs, caption_tokens, tokens, c_img)
                step = logits[:, -1, config.text_vocab:]
                if sampler.temperature == 0:
                    nxt = step.argmax(dim=-1, keepdim=True)
                else:
                    step = _filter_top_k(step, sampler.top_k) / sampler.temperature
                    probs = torch.softmax(step, dim=-1)
                    nxt = torch.multinomial(probs.cpu(), 1, generator=gen).to(device)
                tokens = torch.cat([tokens, nxt], dim=1)
    finally:
        model.train(was_training)
    return tokens


def sample_frame(model: StoryContinuationModel, story_vec: torch.Tensor,
                 caption_tokens: torch.Tensor, c_img: torch.Tensor | None,
                 sampler: SamplerConfig) -> ImageTokenGrid:
    """Sample one frame; unbatched wrapper around sample_frames."""
    tokens = sample_frames(model, story_vec.unsqueeze(0), caption_tokens.unsqueeze(0),
                           None if c_img is None else c_img.unsqueeze(0), sampler)
    g = model.config.grid_size
    return ImageTokenGrid(tokens.squeeze(0).view(g, g).cpu().numpy())


def _caption_token_batch(captions: list[str], vocab, config: ModelConfig) -> torch.Tensor:
    rows = [vocab.encode(c, config.text_len) for c in captions]
    return torch.tensor(np.stack(rows), dtype=torch.int64)


def generate_story(model: StoryContinuationModel, vae, captions: list[str],
                   source_frame: np.ndarray, vocab, sampler: SamplerConfig,
                   sample_id: str = "generated") -> "GeneratedStory":
    """Continue a story: captions plus a source frame -> the remaining frames.

    captions covers every frame including the source (length T >= 2); frames
    1..T-1 are sampled. All target frames condition on the same source frame
    and are decoded in one batch since generation never feeds a generated
    frame back in.
    """
    from .data import GeneratedStory
    from .tokenizer import decode_token_grids, tokenize_frames

    if len(captions) < 2:
        raise ValueError(f"need at least 2 captions (source + targets), got {len(captions)}")
    if len(captions) > model.config.max_frames:
        raise ValueError(
            f"story has {len(captions)} frames, model supports {model.config.max_frames}")
    config = model.config
    tokens = _caption_token_batch(captions, vocab, config)
    with torch.no_grad():
        story_vecs = model.encode_story(tokens)
        grid = tokenize_frames(vae, source_frame[None])[0]
        flat = torch.from_numpy(grid.reshape(-1)).unsqueeze(0)
        c_img = model.source_embedding(flat) if model.has_retro_layers else None
    n_targets = len(captions) - 1
    if c_img is not None:
        c_img = c_img.expand(n_targets, -1, -1)
    sampled = sample_frames(model, story_vecs[1:], tokens[1:], c_img, sampler)
    g = config.grid_size
    grids = sampled.view(n_targets, g, g).cpu().numpy()
    frames = decode_token_grids(vae, grids)
    return GeneratedStory(sample_id=sample_id, frames=frames, token_grids=grids,
                          seed=sampler.seed, temperature=sampler.temperature,
                          top_k=sampler.top_k)


def generate_stories(model: StoryContinuationModel, vae, samples: list,
                     vocab, sampler: SamplerConfig) -> list["GeneratedStory"]:
    """Batched generation across whole stories for evaluation throughput.

    All samples must have the same frame count. Every (story, target frame)
    pair becomes one batch row; outputs are regrouped per story.
    """
    from .data import GeneratedStory
    from .tokenizer import decode_token_grids, tokenize_frames

    if not samples:
        return []
    t = samples[0].n_frames
    if any(s.n_frames != t for s in samples):
        raise ValueError("batched generation requires a uniform frame count")
    config = model.config
    n_targets = t - 1
    story_rows, caption_rows, source_rows = [], [], []
    with torch.no_grad():
        for s in samples:
            tokens = _caption_token_batch(list(s.captions), vocab, config)
            vecs = model.encode_story(tokens)
            story_rows.append(vecs[1:])
            caption_rows.append(tokens[1:])
            grid = tokenize_frames(vae, s.frames[:1])[0]
            source_rows.append(torch.from_numpy(grid.reshape(-1)))
        story_vecs = torch.cat(story_rows)
        captions = torch.cat(caption_rows)
        c_img = None
        if model.has_retro_layers:
            src = torch.stack(source_rows)
            c_img = model.source_embedding(src).repeat_interleave(n_targets, dim=0)
    sampled = sample_frames(model, story_vecs, captions, c_img, sampler)
    g = config.grid_size
    grids = sampled.view(len(samples), n_targets, g, g).cpu().numpy()
    out = []
    for i, s in enumerate(samples):
        frames = decode_token_grids(vae, grids[i])
        out.append(GeneratedStory(sample_id=s.id, frames=frames, token_grids=grids[i],
                                  seed=sampler.seed, temperature=sampler.temperature,
                                  top_k=sampler.top_k))
    return out
