"""Causal autoregressive prior over discrete latent grids.

The model factorizes p(grid | slice_position) in raster-scan order (row by
row, left to right). Causality is structural: the token embedding map is
shifted one step in raster order before any mixing, the 3x3 convolutions
mask out strictly-future taps (inclusive of the current, already-shifted
position), and the self-attention uses a strictly lower-triangular mask over
flattened positions. Position 0 therefore always sees only the start token
and the conditioning.

Conditioning on the through-axis coordinate is a learned affine map of the
scalar slice position, added to the input of every block; a learned
positional embedding over the grid is added once at the input.

Exact per-position NLLs come straight from the chain rule: one forward pass
yields every conditional, and log-probabilities are floored at log(1e-12).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import PriorConfig
from .errors import DataError, NonFiniteError, ShapeError

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)
NEG_INF = -1e9


def shift_raster(x: torch.Tensor) -> torch.Tensor:
    """Shift (N, C, H, W) one step forward in raster order, zero-filling.

    Output position i holds input position i-1; position 0 becomes zero, so
    a model reading shifted input can only ever see strictly-past tokens.
    """
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    return F.pad(flat, (1, 0))[..., :-1].reshape(n, c, h, w)


class CausalConv2d(nn.Module):
    """3x3 convolution whose kernel covers only raster-past positions.

    On shifted input, "past" is inclusive of the center tap: rows above,
    plus the current row up to and including the center column.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        mask = torch.zeros(1, 1, 3, 3)
        mask[..., 0, :] = 1.0
        mask[..., 1, :2] = 1.0
        self.register_buffer("mask", mask)

    def forward(self, x):
        return F.conv2d(x, self.conv.weight * self.mask, self.conv.bias,
                        padding=1)


class CausalSelfAttention(nn.Module):
    """Single-head self-attention over flattened grid positions.

    The mask is strict (position i attends to j < i only); row 0 has no
    context and its attention output is forced to zero rather than left to
    a degenerate softmax.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        self.scale = channels ** -0.5

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(N, L, L) post-mask weights; row i sums to 1 for i > 0, 0 at i=0."""
        n, c, h, w = x.shape
        length = h * w
        q = self.to_q(x).reshape(n, c, length).transpose(1, 2)
        k = self.to_k(x).reshape(n, c, length).transpose(1, 2)
        scores = q @ k.transpose(1, 2) * self.scale
        disallowed = torch.ones(length, length, dtype=torch.bool,
                                device=x.device).triu(0)
        scores = scores.masked_fill(disallowed, NEG_INF)
        weights = scores.softmax(dim=-1)
        row_valid = (torch.arange(length, device=x.device) > 0).to(x.dtype)
        return weights * row_valid.reshape(1, length, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        length = h * w
        weights = self.attention_weights(x)
        v = self.to_v(x).reshape(n, c, length).transpose(1, 2)
        mixed = (weights @ v).transpose(1, 2).reshape(n, c, h, w)
        return x + self.out(mixed)


class CausalResidual(nn.Module):
    def __init__(self, channels: int, dropout: float):
        super().__init__()
        self.conv = CausalConv2d(channels, channels)
        self.project = nn.Conv2d(channels, channels, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.conv(F.relu(x))
        h = self.drop(F.relu(h))
        return x + self.project(h)


class PriorBlock(nn.Module):
    """R causal conv residuals followed by causal self-attention."""

    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.residuals = nn.ModuleList(
            [CausalResidual(cfg.channels, cfg.dropout)
             for _ in range(cfg.res_blocks)])
        self.attention = CausalSelfAttention(cfg.channels)

    def forward(self, x, condition):
        x = x + condition[:, :, None, None]
        for block in self.residuals:
            x = block(x)
        return self.attention(x)


class AutoregressivePrior(nn.Module):
    def __init__(self, num_tokens: int, height: int, width: int,
                 cfg: PriorConfig):
        super().__init__()
        if num_tokens < 2 or height < 1 or width < 1:
            raise ShapeError("prior needs num_tokens >= 2 and a nonempty grid")
        self.cfg = cfg
        self.num_tokens = num_tokens
        self.height = height
        self.width = width
        self.embed = nn.Embedding(num_tokens, cfg.channels)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.channels, height, width))
        self.condition = nn.Linear(1, cfg.channels)
        self.blocks = nn.ModuleList(
            [PriorBlock(cfg) for _ in range(cfg.blocks)])
        self.head = nn.Conv2d(cfg.channels, num_tokens, 1)

    def _check_inputs(self, grids: torch.Tensor, positions: torch.Tensor):
        if grids.ndim != 3 or grids.shape[1] != self.height or \
                grids.shape[2] != self.width:
            raise ShapeError(
                f"expected (N, {self.height}, {self.width}) grids, got "
                f"{tuple(grids.shape)}")
        if positions.shape != grids.shape[:1]:
            raise ShapeError(
                f"expected ({grids.shape[0]},) positions, got "
                f"{tuple(positions.shape)}")
        if grids.min() < 0 or grids.max() >= self.num_tokens:
            raise DataError(
                f"token index out of range [0, {self.num_tokens})")

    def forward(self, grids: torch.Tensor, positions: torch.Tensor
                ) -> torch.Tensor:
        """(N, H, W) int grids + (N,) positions -> logits (N, K, H, W).

        logits[n, :, i, j] parameterize p(x_ij | raster-past of x, position);
        they never depend on x_ij itself or any later token.
        """
        grids = torch.as_tensor(grids, dtype=torch.long)
        positions = torch.as_tensor(positions,
                                    dtype=self.condition.weight.dtype)
        self._check_inputs(grids, positions)
        x = self.embed(grids).permute(0, 3, 1, 2)
        x = shift_raster(x)
        x = x + self.pos_embed
        condition = self.condition(positions.unsqueeze(1))
        for block in self.blocks:
            x = block(x, condition)
        return self.head(F.relu(x))


def token_log_probs(model: AutoregressivePrior, grids: torch.Tensor,
                    positions: torch.Tensor) -> torch.Tensor:
    """Floored log p(token = k | past) for all k: (N, K, H, W)."""
    logits = model(grids, positions)
    return F.log_softmax(logits, dim=1).clamp(min=LOG_PROB_FLOOR)


def nll_maps(model: AutoregressivePrior, grids: torch.Tensor,
             positions: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood of the observed tokens: (N, H, W)."""
    grids = torch.as_tensor(grids, dtype=torch.long)
    log_probs = token_log_probs(model, grids, positions)
    return -log_probs.gather(1, grids.unsqueeze(1)).squeeze(1)


def nll_map(model: AutoregressivePrior, grid: torch.Tensor,
            position: float) -> torch.Tensor:
    """Single-grid convenience wrapper around :func:`nll_maps`."""
    grid = torch.as_tensor(grid, dtype=torch.long)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2-D grid, got {tuple(grid.shape)}")
    positions = torch.tensor([float(position)])
    return nll_maps(model, grid.unsqueeze(0), positions)[0]


def ar_loss(model: AutoregressivePrior, grids: torch.Tensor,
            positions: torch.Tensor) -> torch.Tensor:
    """Mean NLL per grid position (nats/token) over the batch."""
    loss = nll_maps(model, grids, positions).mean()
    if not torch.isfinite(loss):
        raise NonFiniteError("autoregressive loss is not finite")
    return loss


def _draw_tokens(logits: torch.Tensor, temperature: float,
                 generators: Optional[Sequence[Optional[torch.Generator]]]
                 ) -> torch.Tensor:
    """Sample one token per row of (S, K) logits; temperature 0 is argmax."""
    if temperature < 0:
        raise ShapeError("temperature must be >= 0")
    if temperature == 0:
        best = logits.max(dim=1, keepdim=True).values
        k = logits.shape[1]
        first = torch.where(logits == best,
                            torch.arange(k, device=logits.device), k)
        return first.min(dim=1).values
    probs = (logits / temperature).softmax(dim=1)
    out = torch.empty(logits.shape[0], dtype=torch.long, device=logits.device)
    for s in range(logits.shape[0]):
        gen = generators[s] if generators is not None else None
        out[s] = torch.multinomial(probs[s], 1, generator=gen)[0]
    return out


def restore_latents_batch(model: AutoregressivePrior, grids: torch.Tensor,
                          mask: torch.Tensor, positions: torch.Tensor,
                          generators: Optional[Sequence] = None,
                          temperature: float = 1.0) -> torch.Tensor:
    """Resample the masked positions of S grids in raster order.

    All grids share one (H, W) boolean mask (computed from the original
    grid's NLL map) but are resampled independently, each row drawing from
    its own generator. Unmasked positions keep their original tokens;
    resampled positions condition on the current (partially restored)
    prefix.
    """
    grids = torch.as_tensor(grids, dtype=torch.long)
    mask = torch.as_tensor(mask)
    if mask.dtype != torch.bool:
        raise ShapeError("restoration mask must be boolean")
    if mask.shape != grids.shape[1:]:
        raise ShapeError(
            f"mask shape {tuple(mask.shape)} != grid shape "
            f"{tuple(grids.shape[1:])}")
    if generators is not None and len(generators) != grids.shape[0]:
        raise ShapeError("need one generator per grid")
    out = grids.clone()
    targets = [(i, j) for i in range(model.height)
               for j in range(model.width) if mask[i, j]]
    with torch.no_grad():
        for i, j in targets:
            logits = model(out, positions)[:, :, i, j]
            out[:, i, j] = _draw_tokens(logits, temperature, generators)
    return out


def restore_latents(model: AutoregressivePrior, grid: torch.Tensor,
                    mask: torch.Tensor, position: float,
                    generator: Optional[torch.Generator] = None,
                    temperature: float = 1.0) -> torch.Tensor:
    """Single-grid restoration; an all-False mask returns the grid unchanged."""
    grid = torch.as_tensor(grid, dtype=torch.long)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2-D grid, got {tuple(grid.shape)}")
    positions = torch.tensor([float(position)])
    gens = [generator] if generator is not None else None
    return restore_latents_batch(model, grid.unsqueeze(0), mask, positions,
                                 gens, temperature)[0]


def sample(model: AutoregressivePrior, position: float,
           generator: Optional[torch.Generator] = None,
           temperature: float = 1.0) -> torch.Tensor:
    """Draw a full (H, W) grid from the prior at the given slice position."""
    start = torch.zeros(model.height, model.width, dtype=torch.long)
    mask = torch.ones(model.height, model.width, dtype=torch.bool)
    return restore_latents(model, start, mask, position, generator,
                           temperature)
