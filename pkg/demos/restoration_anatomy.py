"""
Anatomy of one restoration-based anomaly map
============================================

The pipeline scores a slice in four moves: quantize it to a latent grid,
ask the autoregressive prior how surprising each latent is, resample the
suspicious ones and decode the "healthy" alternatives, then distill the
decoded candidates into a single pixel map. This script walks one slice
through all four moves with small models trained on the spot (about a
minute of CPU), printing each intermediate as text.
"""

import numpy as np
import torch

from lsr.config import config_from_dict
from lsr.data import (AnomalySpec, SliceCorpus, generate_volume,
                      inject_anomaly, normalize)
from lsr.prior import nll_map, restore_latents
from lsr.scoring import (calibrate_thresholds, consolidate, restoration_mask,
                         sample_score, smooth)
from lsr.seeding import torch_generator
from lsr.train import build_prior, build_vqvae, encode_corpus, train_stage

cfg = config_from_dict({
    "seed": 5,
    "data": {"side": 16, "slices_per_volume": 4, "train_volumes": 10},
    "codec": {"blocks": 2, "res_blocks": 1, "channels": 16,
              "codebook_size": 8, "embedding_dim": 8},
    "prior": {"blocks": 1, "res_blocks": 2, "channels": 24},
    # Overfitting a 40-slice corpus is exactly what we want here: the demo
    # needs a prior with firm opinions, not one that generalizes.
    "train": {"learning_rate": 1e-3, "batch_size": 8, "max_steps": 600,
              "checkpoint_interval": 10_000, "log_interval": 200},
})

volumes = [normalize(generate_volume(cfg.seed, sid,
                                     cfg.data.slices_per_volume,
                                     cfg.data.side))
           for sid in range(cfg.data.train_volumes)]
corpus = SliceCorpus(
    images=np.concatenate([v.slices for v in volumes]).astype(np.float32),
    positions=np.concatenate([v.slice_positions
                              for v in volumes]).astype(np.float32),
    subject_ids=np.repeat([v.subject_id for v in volumes],
                          cfg.data.slices_per_volume),
    records=[{} for _ in range(40)],
)

print("training the codec and the prior on 40 healthy slices ...")
vqvae = build_vqvae(cfg)
train_stage(vqvae, corpus, "vqvae", cfg.train, seed=cfg.seed)
prior = build_prior(cfg)
train_stage(prior, encode_corpus(vqvae, corpus), "prior", cfg.train,
            seed=cfg.seed)
vqvae.eval()
prior.eval()


def ascii_map(arr, fmt="{:5.2f}"):
    return "\n".join("  " + " ".join(fmt.format(v) for v in row)
                     for row in np.asarray(arr, dtype=np.float64))


def ascii_image(img, lo=None, hi=None):
    chars = " .:-=+*#%@"
    img = np.asarray(img, dtype=np.float64)
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    q = np.clip((img - lo) / (hi - lo + 1e-12) * (len(chars) - 1), 0,
                len(chars) - 1).astype(int)
    return "\n".join("  " + "".join(chars[v] for v in row) for row in q)


# Thresholds come from the healthy corpus itself: pool every latent's NLL
# and read off the 98th / 90th percentiles.
grids = encode_corpus(vqvae, corpus)
with torch.no_grad():
    healthy_nll = [nll_map(prior, torch.as_tensor(g)[None][0], float(p)).numpy()
                   for g, p in zip(grids.grids, grids.positions)]
lambda_s, lambda_p = calibrate_thresholds(healthy_nll)
print(f"calibrated thresholds: lambda_s={lambda_s:.2f} "
      f"lambda_p={lambda_p:.2f}")

# Take a held-out subject and burn a bright disk into one slice.
victim = normalize(generate_volume(cfg.seed, 77, cfg.data.slices_per_volume,
                                   cfg.data.side))
spec = AnomalySpec("disk", radius=3, intensity_delta=1.8, slice_index=2,
                   center=(8, 8))
injected, mask, _ = inject_anomaly(victim, spec)
clean_img = victim.slices[2]
anom_img = injected.slices[2]
position = float(victim.slice_positions[2])
print("\nthe clean slice, and the same slice with a lesion injected:")
print(ascii_image(clean_img), "\n")
print(ascii_image(anom_img, lo=clean_img.min(), hi=clean_img.max()))

# Move 1+2: quantize, then ask the prior for per-latent surprise.
with torch.no_grad():
    grid = vqvae.encode_indices(
        torch.as_tensor(anom_img, dtype=torch.float32)[None, None])[0]
    nll = nll_map(prior, grid, position).numpy()
print(f"\nlatent grid ({grid.shape[0]}x{grid.shape[1]} codes):")
print(ascii_map(grid.numpy(), fmt="{:5d}"))
print("\nper-latent NLL (nats); the lesion sits in the middle:")
print(ascii_map(nll))
score = sample_score(nll, lambda_s)
print(f"\nsample score = sum of NLL above lambda_s = {score:.2f} "
      f"(0 means nothing suspicious)")

# Move 3: resample every latent above lambda_p, decode each restoration.
resample = restoration_mask(nll, lambda_p)
print(f"\nlatents to resample (NLL > lambda_p): {int(resample.sum())} "
      f"of {resample.size}")
print(ascii_map(resample.astype(int), fmt="{:2d}"))
restorations = []
with torch.no_grad():
    for j in range(4):
        restored = restore_latents(prior, grid,
                                   torch.as_tensor(resample), position,
                                   torch_generator(cfg.seed, "demo", j))
        decoded = vqvae.decode_indices(restored[None])[0, 0].numpy()
        restorations.append(decoded.astype(np.float64))
print("\none decoded restoration (the lesion replaced by plausible tissue):")
print(ascii_image(restorations[0], lo=clean_img.min(), hi=clean_img.max()))

# Move 4: weight each restoration by how close it stays to the input
# elsewhere, average the residuals, then smooth away single-pixel spikes.
raw = consolidate(anom_img, np.stack(restorations), cfg.scoring)
final = smooth(raw)
print("\nconsolidated + smoothed anomaly map:")
print(ascii_image(final))
inside = final[mask].mean()
outside = final[~mask].mean()
print(f"\nmean map value inside the true mask {inside:.3f} vs outside "
      f"{outside:.3f}")
