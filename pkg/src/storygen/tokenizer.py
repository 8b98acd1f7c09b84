"""Vector-quantized autoencoder mapping RGB images to discrete token grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig


@dataclass
class ImageTokenGrid:
    """A (g, g) grid of codebook indices for one image."""

    indices: np.ndarray  # (g, g) int64

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[0] != self.indices.shape[1]:
            raise ValueError(f"token grid must be square 2-D, got {self.indices.shape}")
        if (self.indices < 0).any():
            raise ValueError("token indices must be non-negative")

    @property
    def grid_size(self) -> int:
        return self.indices.shape[0]

    def flat(self) -> np.ndarray:
        """Row-major flattened token sequence of length g*g."""
        return self.indices.reshape(-1)


class Codebook(nn.Module):
    """Discrete latent vocabulary; row index is the token id."""

    def __init__(self, size: int, dim: int):
        super().__init__()
        if size < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {size}")
        entries = torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size)
        self.entries = nn.Parameter(entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def nearest(self, latents: torch.Tensor) -> torch.Tensor:
        """Nearest entry per vector under Euclidean distance; (..., d) -> (...)."""
        flat = latents.reshape(-1, self.entries.shape[1])
        dist = torch.cdist(flat.unsqueeze(0), self.entries.unsqueeze(0)).squeeze(0)
        return dist.argmin(dim=1).reshape(latents.shape[:-1])

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.size):
            raise ValueError(
                f"token index out of range [0, {self.size}): "
                f"[{int(indices.min())}, {int(indices.max())}]")
        return self.entries[indices]


def quantize(latents: torch.Tensor, codebook: Codebook) -> ImageTokenGrid:
    """Map a (g, g, d) latent grid to its nearest codebook rows."""
    if latents.shape[-1] != codebook.entries.shape[1]:
        raise ValueError(
            f"latent dim {latents.shape[-1]} != codebook dim {codebook.entries.shape[1]}")
    with torch.no_grad():
        idx = codebook.nearest(latents)
    return ImageTokenGrid(idx.cpu().numpy())


def vqvae_loss(image: torch.Tensor, reconstruction: torch.Tensor,
               latents: torch.Tensor, codes: torch.Tensor,
               beta: float = 0.25) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction + codebook + commitment terms (each a mean over elements).

    The codebook term stops gradients into the encoder and the commitment term
    stops gradients into the codebook.
    """
    for name, t in (("image", image), ("reconstruction", reconstruction),
                    ("latents", latents), ("codes", codes)):
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite values in {name}")
    if image.shape != reconstruction.shape or latents.shape != codes.shape:
        raise ValueError("shape mismatch between inputs")
    recon = F.mse_loss(reconstruction, image)
    codebook_term = F.mse_loss(codes, latents.detach())
    commitment = F.mse_loss(latents, codes.detach())
    total = recon + codebook_term + beta * commitment
    return total, {"reconstruction": recon, "codebook": codebook_term,
                   "commitment": commitment}


class VqVae(nn.Module):
    """Conv encoder, codebook quantizer and conv decoder.

    Trained with a straight-through estimator through the quantization step;
    the codebook learns by gradient descent on the codebook term.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ch = config.vae_channels
        n_down = (config.image_size // config.grid_size).bit_length() - 1

        enc = []
        c_in = 3
        for _ in range(n_down):
            enc += [nn.Conv2d(c_in, ch, 4, stride=2, padding=1), nn.ReLU()]
            c_in = ch
        if n_down == 0:
            enc += [nn.Conv2d(c_in, ch, 3, padding=1), nn.ReLU()]
            c_in = ch
        self.enc_backbone = nn.Sequential(*enc)
        self.to_code = nn.Conv2d(c_in, config.code_dim, 3, padding=1)

        self.from_code = nn.Conv2d(config.code_dim, ch, 3, padding=1)
        dec = [nn.ReLU()]
        for _ in range(n_down):
            dec += [nn.ConvTranspose2d(ch, ch, 4, stride=2, padding=1), nn.ReLU()]
        dec += [nn.Conv2d(ch, 3, 3, padding=1)]
        self.dec_backbone = nn.Sequential(*dec)

        self.codebook = Codebook(config.image_vocab, config.code_dim)

    # -- spec-shaped single-image API ---------------------------------------

    def encode(self, image: np.ndarray | torch.Tensor) -> torch.Tensor:
        """RGB (h, w, 3) in [0, 1] -> continuous latent grid (g, g, d_code)."""
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        expected = (self.config.image_size, self.config.image_size, 3)
        if tuple(x.shape) != expected:
            raise ValueError(f"expected image of shape {expected}, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in image")
        latents = self.encode_batch(x.unsqueeze(0))
        return latents.squeeze(0)

    def quantize(self, latents: torch.Tensor) -> ImageTokenGrid:
        return quantize(latents, self.codebook)

    def decode(self, tokens: ImageTokenGrid | np.ndarray) -> np.ndarray:
        """Token grid -> RGB (h, w, 3); values lie in [0, 1]."""
        grid = tokens if isinstance(tokens, ImageTokenGrid) else ImageTokenGrid(tokens)
        if grid.grid_size != self.config.grid_size:
            raise ValueError(
                f"expected a {self.config.grid_size}x{self.config.grid_size} grid, "
                f"got {grid.grid_size}x{grid.grid_size}")
        idx = torch.as_tensor(grid.indices)
        with torch.no_grad():
            z = self.codebook.lookup(idx)  # (g, g, d)
            out = self.decode_latents(z.unsqueeze(0)).squeeze(0)
        return out.numpy()

    # -- batched internals ---------------------------------------------------

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        """(B, h, w, 3) -> (B, g, g, d_code)."""
        x = images.permute(0, 3, 1, 2)
        z = self.to_code(self.enc_backbone(x))
        return z.permute(0, 2, 3, 1)

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor:
        """(B, g, g, d_code) -> (B, h, w, 3) in [0, 1]."""
        x = self.dec_backbone(self.from_code(z.permute(0, 3, 1, 2)))
        return torch.sigmoid(x).permute(0, 2, 3, 1)

    def forward(self, images: torch.Tensor):
        """Training pass with the straight-through estimator.

        Returns (reconstruction, latents, codes, indices); the reconstruction
        is decoded from ``latents + (codes - latents).detach()`` so encoder
        gradients bypass the quantization step unchanged.
        """
        latents = self.encode_batch(images)
        with torch.no_grad():
            indices = self.codebook.nearest(latents)
        codes = self.codebook.lookup(indices)
        quantized = latents + (codes - latents).detach()
        recon = self.decode_latents(quantized)
        return recon, latents, codes, indices

    def codebook_usage(self, indices: torch.Tensor) -> float:
        """Fraction of codebook rows referenced at least once (reported only)."""
        return indices.unique().numel() / self.codebook.size


def tokenize_frames(vae: VqVae, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Encode+quantize (N, h, w, 3) frames to (N, g, g) token grids."""
    vae.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            x = torch.as_tensor(frames[i:i + batch_size], dtype=torch.float32)
            out.append(vae.codebook.nearest(vae.encode_batch(x)).numpy())
    return np.concatenate(out) if out else np.empty((0,), dtype=np.int64)


def decode_token_grids(vae: VqVae, grids: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """(N, g, g) token grids -> (N, h, w, 3) images."""
    vae.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(grids), batch_size):
            idx = torch.as_tensor(grids[i:i + batch_size], dtype=torch.int64)
            z = vae.codebook.lookup(idx)
            out.append(vae.decode_latents(z).numpy())
    return np.concatenate(out)


def train_vqvae(vae: VqVae, frames: np.ndarray, steps: int = 2000, batch_size: int = 32,
                lr: float = 2e-3, seed: int = 0, log_every: int = 0) -> list[dict]:
    """Fit the autoencoder on (N, h, w, 3) frames; returns per-step metrics."""
    vae.train()
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    data = torch.as_tensor(frames, dtype=torch.float32)
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(data), (min(batch_size, len(data)),), generator=gen)
        batch = data[idx]
        recon, latents, codes, _ = vae(batch)
        total, parts = vqvae_loss(batch, recon, latents, codes, vae.config.commitment_beta)
        opt.zero_grad()
        total.backward()
        opt.step()
        record = {"step": step, "total": total.item(),
                  **{k: v.item() for k, v in parts.items()}}
        history.append(record)
        if log_every and step % log_every == 0:
            print(f"vqvae step {step}: total={record['total']:.5f} "
                  f"recon={record['reconstruction']:.5f}")
    vae.eval()
    return history


def reconstruction_mse(vae: VqVae, frames: np.ndarray, batch_size: int = 64) -> float:
    """Mean squared error of decode(quantize(encode(x))) over a frame set."""
    vae.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            x = torch.as_tensor(frames[i:i + batch_size], dtype=torch.float32)
            latents = vae.encode_batch(x)
            codes = vae.codebook.lookup(vae.codebook.nearest(latents))
            recon = vae.decode_latents(codes)
            total += float(((recon - x) ** 2).sum())
            n += x.numel()
    return total / n
