"""Vector-quantized image codec and the dense-latent VAE baseline.

The VQ-VAE maps (N, 1, H, W) images to a discrete (N, H/2^B, W/2^B) grid of
codebook indices and back. Nearest-neighbour assignment uses squared L2
distance with the lowest index winning exact ties; gradients flow through
the quantization bottleneck via the straight-through estimator.

The training objective combines a mean absolute reconstruction error, a
codebook term pulling selected embeddings toward the (frozen) encoder
output, and a commitment term pulling the encoder toward the (frozen)
selected embeddings. The VAE baseline shares the convolutional trunk but
reparameterizes a dense gaussian latent and adds the closed-form KL.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import CodecConfig
from .errors import NonFiniteError, ShapeError

QUANTIZE_CHUNK = 512   # positions per distance-matrix chunk (memory bound)


def quantize(values: torch.Tensor, codebook: torch.Tensor
             ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Nearest codebook row (squared L2) for each D-vector in ``values``.

    ``values`` is (..., D), ``codebook`` is (K, D). Returns
    ``(indices, quantized, distances)`` with shapes (...), (..., D) and
    (...). Exact distance ties resolve to the lowest index. The returned
    ``quantized`` rows are differentiable w.r.t. the codebook; ``indices``
    carry no gradient.
    """
    values = torch.as_tensor(values)
    codebook = torch.as_tensor(codebook)
    if codebook.ndim != 2:
        raise ShapeError(f"codebook must be (K, D), got {tuple(codebook.shape)}")
    if values.shape[-1] != codebook.shape[1]:
        raise ShapeError(
            f"vector dim {values.shape[-1]} != codebook dim {codebook.shape[1]}")
    lead = values.shape[:-1]
    flat = values.reshape(-1, values.shape[-1])
    k = codebook.shape[0]
    arange_k = torch.arange(k, device=flat.device)
    idx_chunks, dist_chunks = [], []
    with torch.no_grad():
        for start in range(0, flat.shape[0], QUANTIZE_CHUNK):
            chunk = flat[start:start + QUANTIZE_CHUNK]
            diff = chunk.unsqueeze(1) - codebook          # (n, K, D)
            dist = (diff * diff).sum(-1)                  # (n, K)
            dmin = dist.min(dim=1, keepdim=True).values
            # lowest index among exact minima
            idx = torch.where(dist == dmin, arange_k, k).min(dim=1).values
            idx_chunks.append(idx)
            dist_chunks.append(dmin.squeeze(1))
    indices = torch.cat(idx_chunks).reshape(lead)
    distances = torch.cat(dist_chunks).reshape(lead)
    return indices, codebook[indices], distances


class VectorQuantizer(nn.Module):
    """Learned codebook of K embeddings of dimension D."""

    def __init__(self, codebook_size: int, embedding_dim: int):
        super().__init__()
        self.codebook = nn.Parameter(
            torch.empty(codebook_size, embedding_dim))
        nn.init.uniform_(self.codebook, -1.0 / codebook_size,
                         1.0 / codebook_size)

    def forward(self, features: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, D, h, w) features -> (indices (N, h, w), quantized like input)."""
        if features.ndim != 4 or features.shape[1] != self.codebook.shape[1]:
            raise ShapeError(
                f"expected (N, {self.codebook.shape[1]}, h, w) features, got "
                f"{tuple(features.shape)}")
        moved = features.permute(0, 2, 3, 1)
        indices, quantized, _ = quantize(moved, self.codebook)
        return indices, quantized.permute(0, 3, 1, 2)

    def embed(self, indices: torch.Tensor) -> torch.Tensor:
        """(N, h, w) indices -> (N, D, h, w) embedding vectors."""
        if indices.min() < 0 or indices.max() >= self.codebook.shape[0]:
            raise ShapeError("codebook index out of range")
        return self.codebook[indices].permute(0, 3, 1, 2)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, dropout: float):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.project = nn.Conv2d(channels, channels, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.conv(F.relu(x))
        h = self.drop(F.relu(h))
        return x + self.project(h)


class Encoder(nn.Module):
    """Conv trunk: B stride-2 stages of R residual blocks, then a 1x1 head."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.stem = nn.Conv2d(1, cfg.channels, 3, padding=1)
        stages = []
        for _ in range(cfg.blocks):
            for _ in range(cfg.res_blocks):
                stages.append(ResidualBlock(cfg.channels, cfg.dropout))
            stages.append(nn.Conv2d(cfg.channels, cfg.channels, 4,
                                    stride=2, padding=1))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(cfg.channels, cfg.embedding_dim, 1)

    def forward(self, x):
        return self.head(self.stages(self.stem(x)))


class Decoder(nn.Module):
    """Mirror of the encoder with transposed-conv upsampling."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.stem = nn.Conv2d(cfg.embedding_dim, cfg.channels, 1)
        stages = []
        for _ in range(cfg.blocks):
            for _ in range(cfg.res_blocks):
                stages.append(ResidualBlock(cfg.channels, cfg.dropout))
            stages.append(nn.ConvTranspose2d(cfg.channels, cfg.channels, 4,
                                             stride=2, padding=1))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(cfg.channels, 1, 3, padding=1)

    def forward(self, z):
        return self.head(self.stages(self.stem(z)))


class VqVae(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.quantizer = VectorQuantizer(cfg.codebook_size, cfg.embedding_dim)

    def _check_images(self, images: torch.Tensor):
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(
                f"expected (N, 1, H, W) images, got {tuple(images.shape)}")
        factor = self.cfg.downsample_factor
        if images.shape[2] % factor or images.shape[3] % factor:
            raise ShapeError(
                f"image size {tuple(images.shape[2:])} not divisible by "
                f"downsampling factor {factor}")
        if not torch.isfinite(images).all():
            raise NonFiniteError("non-finite values in input images")

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 1, H, W) -> continuous latent features (N, D, h, w)."""
        self._check_images(images)
        return self.encoder(images)

    def encode_indices(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 1, H, W) -> discrete latent grid (N, h, w) int64."""
        indices, _ = self.quantizer(self.encode(images))
        return indices

    def decode(self, quantized: torch.Tensor) -> torch.Tensor:
        """(N, D, h, w) quantized features -> (N, 1, H, W) reconstruction."""
        if quantized.ndim != 4 or quantized.shape[1] != self.cfg.embedding_dim:
            raise ShapeError(
                f"expected (N, {self.cfg.embedding_dim}, h, w) latents, got "
                f"{tuple(quantized.shape)}")
        return self.decoder(quantized)

    def decode_indices(self, indices: torch.Tensor) -> torch.Tensor:
        """(N, h, w) latent grid -> (N, 1, H, W) reconstruction."""
        return self.decode(self.quantizer.embed(indices))

    def forward(self, images: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """Full autoencoding pass; returns (reconstruction, indices)."""
        features = self.encode(images)
        indices, quantized = self.quantizer(features)
        bridged = features + (quantized - features).detach()
        return self.decode(bridged), indices

    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        recon, _ = self.forward(images)
        return recon


@dataclass
class VqVaeLoss:
    reconstruction: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict:
        return {"reconstruction": float(self.reconstruction.detach()),
                "codebook": float(self.codebook.detach()),
                "commitment": float(self.commitment.detach()),
                "total": float(self.total.detach())}


def vqvae_terms(model: VqVae, images: torch.Tensor,
                frozen_indices: Optional[torch.Tensor] = None) -> VqVaeLoss:
    """Three-term VQ-VAE objective on a batch.

    ``total = mean|x - x_hat| + mean ||sg(z_e) - e||^2
            + beta * mean ||sg(e) - z_e||^2``

    where the squared norms are over the embedding dimension and the means
    over batch and grid positions. Codebook rows receive gradient only from
    the codebook term, the encoder only from reconstruction (straight-
    through) and commitment. ``frozen_indices`` pins the assignment (used by
    finite-difference checks, where a perturbation must not flip an argmin).
    """
    features = model.encode(images)
    if frozen_indices is None:
        indices, _, _ = quantize(features.permute(0, 2, 3, 1).detach(),
                                 model.quantizer.codebook.detach())
    else:
        indices = frozen_indices
    chosen = model.quantizer.codebook[indices].permute(0, 3, 1, 2)
    bridged = features + (chosen - features).detach()
    recon = model.decode(bridged)
    reconstruction = (recon - images).abs().mean()
    codebook_term = ((features.detach() - chosen) ** 2).sum(dim=1).mean()
    commitment = ((chosen.detach() - features) ** 2).sum(dim=1).mean()
    total = (reconstruction + codebook_term
             + model.cfg.commitment_beta * commitment)
    if not torch.isfinite(total):
        raise NonFiniteError("VQ-VAE loss is not finite")
    return VqVaeLoss(reconstruction, codebook_term, commitment, total)


class ConvVae(nn.Module):
    """Dense-latent gaussian VAE sharing the codec's conv trunk.

    Needs the image side at construction time because the latent head is a
    dense layer over the flattened feature map.
    """

    def __init__(self, cfg: CodecConfig, side: int):
        super().__init__()
        if side % cfg.downsample_factor:
            raise ShapeError(
                f"side {side} not divisible by factor {cfg.downsample_factor}")
        self.cfg = cfg
        self.side = side
        self.feature_side = side // cfg.downsample_factor
        flat = cfg.embedding_dim * self.feature_side ** 2
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.to_stats = nn.Linear(flat, 2 * cfg.vae_latent_dim)
        self.expand = nn.Linear(cfg.vae_latent_dim, flat)

    def _check_images(self, images: torch.Tensor):
        if images.ndim != 4 or images.shape[1] != 1 or \
                images.shape[2] != self.side or images.shape[3] != self.side:
            raise ShapeError(
                f"expected (N, 1, {self.side}, {self.side}) images, got "
                f"{tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise NonFiniteError("non-finite values in input images")

    def encode_stats(self, images: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, 1, H, W) -> posterior (mu, logvar), each (N, latent_dim)."""
        self._check_images(images)
        features = self.encoder(images).flatten(1)
        stats = self.to_stats(features)
        return stats.chunk(2, dim=1)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        """(N, latent_dim) -> (N, 1, H, W) reconstruction."""
        if z.ndim != 2 or z.shape[1] != self.cfg.vae_latent_dim:
            raise ShapeError(
                f"expected (N, {self.cfg.vae_latent_dim}) latents, got "
                f"{tuple(z.shape)}")
        grid = self.expand(z).reshape(-1, self.cfg.embedding_dim,
                                      self.feature_side, self.feature_side)
        return self.decoder(grid)

    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        """Deterministic reconstruction from the posterior mean."""
        mu, _ = self.encode_stats(images)
        return self.decode_latent(mu)


@dataclass
class VaeLoss:
    reconstruction: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict:
        return {"reconstruction": float(self.reconstruction.detach()),
                "kl": float(self.kl.detach()),
                "total": float(self.total.detach())}


def vae_terms(model: ConvVae, images: torch.Tensor,
              noise: Optional[torch.Tensor] = None,
              generator: Optional[torch.Generator] = None) -> VaeLoss:
    """Reparameterized VAE objective: mean-L1 reconstruction + KL.

    KL is the closed form 0.5 * sum(mu^2 + sigma^2 - logvar - 1) per sample,
    averaged over the batch. ``noise`` pins the reparameterization draw
    (finite-difference checks); otherwise it is sampled standard normal.
    """
    mu, logvar = model.encode_stats(images)
    if noise is None:
        noise = torch.empty_like(mu).normal_(generator=generator)
    elif noise.shape != mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != {tuple(mu.shape)}")
    z = mu + torch.exp(0.5 * logvar) * noise
    recon = model.decode_latent(z)
    reconstruction = (recon - images).abs().mean()
    kl = 0.5 * (mu ** 2 + torch.exp(logvar) - logvar - 1.0).sum(dim=1).mean()
    total = reconstruction + kl
    if not torch.isfinite(total):
        raise NonFiniteError("VAE loss is not finite")
    return VaeLoss(reconstruction, kl, total)
