"""Anomaly scoring: thresholded latent NLL and restoration-based maps.

Sample level: a slice's score is the sum of latent NLL entries above
``lambda_s``; a healthy grid contributes nothing, so the score isolates the
unlikely part of the latent code.

Pixel level: latent positions with NLL above ``lambda_p`` are resampled
from the prior (conditioning on the already-restored raster prefix) S times,
each restoration is decoded, and the S absolute residuals are consolidated
with softmax weights favouring restorations close to the input. The
consolidated map is smoothed by a 3x3 minimum filter followed by a 7x7
average filter (both with replicate padding).

The dense VAE baseline scores a slice by its full objective at the
posterior mean and localizes with the smoothed reconstruction residual.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import minimum_filter, uniform_filter
from scipy.special import softmax

from .codec import ConvVae, VqVae
from .config import ScoringConfig
from .errors import NonFiniteError, ShapeError
from .prior import AutoregressivePrior, nll_map, restore_latents_batch
from .rng import torch_generator


def sample_score(nll_values, lambda_s: float) -> float:
    """Sum of NLL entries strictly above ``lambda_s`` (0.0 if none)."""
    values = np.asarray(nll_values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise NonFiniteError("NLL map contains non-finite values")
    return float(values[values > lambda_s].sum())


def restoration_mask(nll_values, lambda_p: float) -> np.ndarray:
    """Boolean mask of latent positions whose NLL exceeds ``lambda_p``."""
    values = np.asarray(nll_values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise NonFiniteError("NLL map contains non-finite values")
    return values > lambda_p


def calibrate_thresholds(nll_maps, percentile_s: float = 98.0,
                         percentile_p: float = 90.0) -> tuple[float, float]:
    """(lambda_s, lambda_p) as percentiles of pooled per-position NLLs.

    ``nll_maps`` is an iterable of per-slice NLL arrays from healthy
    validation data; all entries are pooled into one population.
    """
    pooled = np.concatenate([np.asarray(m, dtype=np.float64).ravel()
                             for m in nll_maps] or [np.empty(0)])
    if pooled.size == 0:
        raise ShapeError("cannot calibrate thresholds on an empty population")
    if not np.isfinite(pooled).all():
        raise NonFiniteError("NLL population contains non-finite values")
    lambda_s = float(np.percentile(pooled, percentile_s))
    lambda_p = float(np.percentile(pooled, percentile_p))
    return lambda_s, lambda_p


def consolidate(original, restorations, cfg: ScoringConfig) -> np.ndarray:
    """Softmax-weighted mean of absolute restoration residuals.

    Restoration j gets weight softmax_j(k_temp / sum|original - x_j|): the
    closer a restoration stays to the input overall, the more its residual
    counts. The denominator is floored at ``eps_denom``.
    """
    original = np.asarray(original, dtype=np.float64)
    stack = np.asarray(restorations, dtype=np.float64)
    if stack.ndim != original.ndim + 1 or stack.shape[1:] != original.shape:
        raise ShapeError(
            f"restorations {stack.shape} do not stack over {original.shape}")
    if stack.shape[0] != cfg.restorations:
        raise ShapeError(
            f"expected {cfg.restorations} restorations, got {stack.shape[0]}")
    residuals = np.abs(original[None] - stack)
    sums = residuals.reshape(stack.shape[0], -1).sum(axis=1)
    weights = softmax(cfg.k_temp / np.maximum(sums, cfg.eps_denom))
    return np.tensordot(weights, residuals, axes=1)


def smooth(anomaly_map) -> np.ndarray:
    """3x3 min-pool then 7x7 average-pool, both with replicate padding."""
    arr = np.asarray(anomaly_map, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got {arr.shape}")
    return uniform_filter(minimum_filter(arr, size=3, mode="nearest"),
                          size=7, mode="nearest")


def _encode_grid(vqvae: VqVae, image: np.ndarray) -> torch.Tensor:
    tensor = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if tensor.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got {tuple(tensor.shape)}")
    return vqvae.encode_indices(tensor[None, None])[0]


def restore_image(image, vqvae: VqVae, prior: AutoregressivePrior,
                  position: float, cfg: ScoringConfig,
                  generator: torch.Generator = None,
                  temperature: float = 1.0) -> np.ndarray:
    """One restoration: resample unlikely latents, decode back to image."""
    vqvae.eval()
    prior.eval()
    with torch.no_grad():
        grid = _encode_grid(vqvae, image)
        nll = nll_map(prior, grid, position)
        mask = torch.as_tensor(restoration_mask(nll.numpy(), cfg.lambda_p))
        positions = torch.tensor([float(position)])
        gens = [generator] if generator is not None else None
        restored = restore_latents_batch(prior, grid[None], mask, positions,
                                         gens, temperature)
        return vqvae.decode_indices(restored)[0, 0].numpy().astype(np.float64)


def method_scores(image, vqvae: VqVae, prior: AutoregressivePrior,
                  position: float, cfg: ScoringConfig, *, seed: int,
                  image_id: str = "", temperature: float = 1.0
                  ) -> tuple[float, np.ndarray]:
    """Sample score and smoothed pixel anomaly map for one slice.

    The S restoration draws use independent generators derived from
    ``(seed, "restore", image_id, draw)``, so scores do not depend on
    scoring order or batch composition.
    """
    image = np.asarray(image, dtype=np.float64)
    vqvae.eval()
    prior.eval()
    with torch.no_grad():
        grid = _encode_grid(vqvae, image)
        nll = nll_map(prior, grid, position).numpy().astype(np.float64)
        score = sample_score(nll, cfg.lambda_s)
        mask = torch.as_tensor(restoration_mask(nll, cfg.lambda_p))
        s = cfg.restorations
        generators = [torch_generator(seed, "restore", image_id, j)
                      for j in range(s)]
        grids = grid[None].expand(s, -1, -1).contiguous()
        positions = torch.full((s,), float(position))
        restored = restore_latents_batch(prior, grids, mask, positions,
                                         generators, temperature)
        decoded = vqvae.decode_indices(restored)[:, 0].numpy()
    anomaly_map = smooth(consolidate(image, decoded.astype(np.float64), cfg))
    return score, anomaly_map


def vae_scores(image, vae: ConvVae) -> tuple[float, np.ndarray]:
    """Baseline: posterior-mean objective value and smoothed |residual| map."""
    image = np.asarray(image, dtype=np.float64)
    tensor = torch.as_tensor(image.astype(np.float32))[None, None]
    vae.eval()
    with torch.no_grad():
        mu, logvar = vae.encode_stats(tensor)
        recon = vae.decode_latent(mu)[0, 0]
        reconstruction = (recon - tensor[0, 0]).abs().mean()
        kl = 0.5 * (mu ** 2 + torch.exp(logvar) - logvar - 1.0).sum()
        score = float(reconstruction + kl)
        residual = (tensor[0, 0] - recon).abs().numpy().astype(np.float64)
    if not np.isfinite(score):
        raise NonFiniteError("VAE score is not finite")
    return score, smooth(residual)
