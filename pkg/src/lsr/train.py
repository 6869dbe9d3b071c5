"""Three-stage training: VQ codec, latent prior, VAE baseline.

Optimization is a hand-rolled functional Adam whose state is plain tensors,
so checkpoints serialize exactly and resume is bitwise: every step re-seeds
batch selection, augmentation and torch's global RNG (dropout, VAE noise)
from ``(run seed, purpose, stage, step)``, which makes step N identical
whether reached in one run or across a resume.

The prior trains on a frozen codec's latent grids (see ``encode_corpus``);
training it straight on images is refused.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .codec import ConvVae, VqVae, vae_terms, vqvae_terms
from .config import RunConfig, TrainConfig
from .data import SliceCorpus, augment
from .errors import (ConfigError, DataError, DivergenceError,
                     MissingDependencyError, NonFiniteError, ShapeError)
from .formats import read_checkpoint, write_checkpoint
from .prior import AutoregressivePrior, ar_loss
from .rng import derive_seed, numpy_rng

STAGES = ("vqvae", "prior", "vae")


# ---------------------------------------------------------------------------
# Model factories (seeded initialization)
# ---------------------------------------------------------------------------

def build_vqvae(cfg: RunConfig) -> VqVae:
    torch.manual_seed(derive_seed(cfg.seed, "init", "vqvae"))
    return VqVae(cfg.codec)


def build_prior(cfg: RunConfig) -> AutoregressivePrior:
    torch.manual_seed(derive_seed(cfg.seed, "init", "prior"))
    grid_side = cfg.data.side // cfg.codec.downsample_factor
    return AutoregressivePrior(cfg.codec.codebook_size, grid_side, grid_side,
                               cfg.prior)


def build_vae(cfg: RunConfig) -> ConvVae:
    torch.manual_seed(derive_seed(cfg.seed, "init", "vae"))
    return ConvVae(cfg.codec, cfg.data.side)


# ---------------------------------------------------------------------------
# Functional Adam
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class AdamState:
    """First/second moment estimates, aligned with the parameter list."""

    step: int
    exp_avg: list
    exp_avg_sq: list


def init_adam_state(params) -> AdamState:
    params = list(params)
    return AdamState(step=0,
                     exp_avg=[torch.zeros_like(p) for p in params],
                     exp_avg_sq=[torch.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``p -= lr * m_hat / (sqrt(v_hat) + eps)`` with
    ``m_hat = m / (1 - beta1^t)`` and ``v_hat = v / (1 - beta2^t)``.
    Raises on shape disagreements and non-finite gradients.
    """
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(state.exp_avg)
            == len(state.exp_avg_sq)):
        raise ShapeError("params, grads and Adam state lengths disagree")
    with torch.no_grad():
        state.step += 1
        correct1 = 1.0 - cfg.adam_beta1 ** state.step
        correct2 = 1.0 - cfg.adam_beta2 ** state.step
        for p, g, m, v in zip(params, grads, state.exp_avg,
                              state.exp_avg_sq):
            if g.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {tuple(g.shape)} != parameter shape "
                    f"{tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise NonFiniteError("non-finite gradient")
            m.mul_(cfg.adam_beta1).add_(g, alpha=1.0 - cfg.adam_beta1)
            v.mul_(cfg.adam_beta2).addcmul_(g, g, value=1.0 - cfg.adam_beta2)
            denom = (v / correct2).sqrt_().add_(cfg.adam_eps)
            p.addcdiv_(m / correct1, denom, value=-cfg.learning_rate)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: torch.nn.Module, state: AdamState,
                    meta: dict) -> str:
    """Serialize model + optimizer state; floats are stored float32."""
    tensors = {f"model.{name}": value.detach().numpy()
               for name, value in model.state_dict().items()}
    names = [name for name, p in model.named_parameters() if p.requires_grad]
    if len(names) != len(state.exp_avg):
        raise ShapeError("Adam state does not match the model's parameters")
    for name, m, v in zip(names, state.exp_avg, state.exp_avg_sq):
        tensors[f"adam.m.{name}"] = m.numpy()
        tensors[f"adam.v.{name}"] = v.numpy()
    merged = {"kind": "checkpoint", "step": state.step, **meta}
    return str(write_checkpoint(path, tensors, merged))


def load_checkpoint(path: str, model: torch.nn.Module
                    ) -> tuple[dict, AdamState]:
    """Restore model + optimizer state saved by :func:`save_checkpoint`."""
    tensors, meta = read_checkpoint(path)
    model_state = {name[len("model."):]: torch.as_tensor(value)
                   for name, value in tensors.items()
                   if name.startswith("model.")}
    try:
        model.load_state_dict(model_state, strict=True)
    except RuntimeError as exc:
        raise DataError(f"checkpoint does not fit the model: {exc}") from exc
    exp_avg, exp_avg_sq = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        for prefix, store in (("adam.m.", exp_avg), ("adam.v.", exp_avg_sq)):
            key = prefix + name
            if key not in tensors:
                raise DataError(f"checkpoint misses optimizer slot {key}")
            value = torch.as_tensor(tensors[key])
            if value.shape != p.shape:
                raise ShapeError(f"optimizer slot {key} has shape "
                                 f"{tuple(value.shape)}, expected "
                                 f"{tuple(p.shape)}")
            store.append(value)
    return meta, AdamState(int(meta.get("step", 0)), exp_avg, exp_avg_sq)


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GridCorpus:
    """Discrete latent grids produced by a frozen codec."""

    grids: np.ndarray          # (M, h, w) int64
    positions: np.ndarray      # (M,) float32
    subject_ids: np.ndarray    # (M,) int64

    def __len__(self) -> int:
        return self.grids.shape[0]


def encode_corpus(vqvae: VqVae, corpus: SliceCorpus,
                  batch_size: int = 64) -> GridCorpus:
    """Encode every slice to its latent grid with the codec frozen."""
    vqvae.eval()
    grids = []
    with torch.no_grad():
        for start in range(0, len(corpus), batch_size):
            block = torch.from_numpy(
                corpus.images[start:start + batch_size])[:, None]
            grids.append(vqvae.encode_indices(block).numpy())
    return GridCorpus(np.concatenate(grids).astype(np.int64),
                      corpus.positions.copy(), corpus.subject_ids.copy())


def _subject_groups(subject_ids: np.ndarray) -> list:
    order = []
    groups = {}
    for i, sid in enumerate(subject_ids):
        if sid not in groups:
            groups[sid] = []
            order.append(sid)
        groups[sid].append(i)
    return [np.asarray(groups[sid]) for sid in order]


def _batch_indices(groups: list, rng: np.random.Generator,
                   batch_size: int) -> np.ndarray:
    """One slice per subject; subjects distinct while enough are available."""
    n = len(groups)
    if n >= batch_size:
        chosen = rng.choice(n, size=batch_size, replace=False)
    else:
        chosen = rng.integers(0, n, size=batch_size)
    return np.asarray([groups[s][rng.integers(len(groups[s]))]
                       for s in chosen])


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    curve: list                       # [{"step": n, "total": ..., ...}, ...]
    steps: int
    checkpoint_path: Optional[str]


def train_stage(model: torch.nn.Module, corpus, stage: str, cfg: TrainConfig,
                *, seed: int, augment_cfg=None, out_dir: Optional[str] = None,
                meta: Optional[dict] = None,
                resume_from: Optional[str] = None) -> StageResult:
    """Run (or resume) one training stage to ``cfg.max_steps``.

    ``corpus`` is a :class:`SliceCorpus` for the image stages and a
    :class:`GridCorpus` for the prior. Checkpoints land in ``out_dir`` as
    ``<stage>_stepNNNNNN.lsrc`` every ``checkpoint_interval`` steps plus a
    final ``<stage>.lsrc``; ``meta`` is merged into their sidecars.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage == "prior" and not isinstance(corpus, GridCorpus):
        raise MissingDependencyError(
            "the prior trains on latent grids; encode the corpus with a "
            "trained codec first")
    if stage != "prior" and not isinstance(corpus, SliceCorpus):
        raise MissingDependencyError(f"stage {stage!r} trains on image slices")
    if len(corpus) == 0:
        raise DataError("training corpus is empty")
    params = [p for p in model.parameters() if p.requires_grad]
    state = init_adam_state(params)
    start = 0
    if resume_from is not None:
        ckpt_meta, state = load_checkpoint(resume_from, model)
        if ckpt_meta.get("stage") not in (None, stage):
            raise ConfigError(
                f"checkpoint is for stage {ckpt_meta.get('stage')!r}, "
                f"not {stage!r}")
        start = state.step
        if start > cfg.max_steps:
            raise ConfigError(
                f"checkpoint step {start} is beyond max_steps {cfg.max_steps}")
    groups = _subject_groups(corpus.subject_ids)
    meta = dict(meta or {})
    meta["stage"] = stage
    curve = []
    model.train()
    for step in range(start, cfg.max_steps):
        torch.manual_seed(derive_seed(seed, "step", stage, step))
        rng = numpy_rng(seed, "batch", stage, step)
        idx = _batch_indices(groups, rng, cfg.batch_size)
        try:
            if stage == "prior":
                grids = torch.from_numpy(corpus.grids[idx])
                positions = torch.from_numpy(corpus.positions[idx])
                total = ar_loss(model, grids, positions)
                record = {"total": float(total.detach())}
            else:
                images = corpus.images[idx]
                if augment_cfg is not None and augment_cfg.enabled:
                    arng = numpy_rng(seed, "augment", stage, step)
                    images = np.stack([augment(im, arng, augment_cfg)
                                       for im in images]).astype(np.float32)
                batch = torch.from_numpy(images)[:, None]
                terms = (vqvae_terms(model, batch) if stage == "vqvae"
                         else vae_terms(model, batch))
                total = terms.total
                record = terms.to_dict()
            model.zero_grad(set_to_none=True)
            total.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p)
                     for p in params]
            adam_step(params, grads, state, cfg)
        except NonFiniteError as exc:
            raise DivergenceError(
                f"stage {stage} diverged at step {step + 1}: {exc}") from exc
        done = step + 1
        if done % cfg.log_interval == 0 or done == cfg.max_steps:
            curve.append({"step": done, **record})
        if out_dir is not None and done % cfg.checkpoint_interval == 0 \
                and done < cfg.max_steps:
            save_checkpoint(
                os.path.join(out_dir, f"{stage}_step{done:06d}.lsrc"),
                model, state, meta)
    final_path = None
    if out_dir is not None:
        final_path = save_checkpoint(os.path.join(out_dir, f"{stage}.lsrc"),
                                     model, state, meta)
    return StageResult(curve, cfg.max_steps, final_path)
