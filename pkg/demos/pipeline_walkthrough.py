"""
End-to-end pipeline on a miniature corpus
=========================================

Runs every CLI stage — generate, the three training stages, calibrate,
score, evaluate — on a deliberately tiny configuration (16x16 slices,
8 steps per stage) so the whole walkthrough finishes in a few seconds.
Artifacts land in ./demo_artifacts; the printed lines are each command's
JSON summary.

The numbers are NOT meant to be good: with 8 optimization steps the models
are barely past initialization. The point is the shape of the workflow and
of the artifacts it leaves behind. For a real run, drop the overrides and
use the defaults (32x32, 3000 steps, ~20 minutes on one core).
"""

import json
import os
import shutil

from lsr import cli

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                    "demo_artifacts")
shutil.rmtree(ROOT, ignore_errors=True)
os.makedirs(ROOT)

# A miniature run configuration. Anything omitted keeps its default; the
# config hash stamped into every artifact is computed over the full,
# merged configuration.
config = {
    "seed": 123,
    "data": {"side": 16, "slices_per_volume": 4, "train_volumes": 6,
             "val_volumes": 3, "val_clean_volumes": 1,
             "anomaly_radius_min": 2, "anomaly_radius_max": 4,
             "anomaly_magnitudes": [0.8, 1.6],
             "augment": {"enabled": False}},
    "codec": {"blocks": 2, "res_blocks": 1, "channels": 12,
              "codebook_size": 8, "embedding_dim": 6, "vae_latent_dim": 16},
    "prior": {"blocks": 1, "res_blocks": 1, "channels": 12},
    "scoring": {"restorations": 3},
    "train": {"batch_size": 4, "max_steps": 8, "checkpoint_interval": 4,
              "log_interval": 2},
}
cfg_path = os.path.join(ROOT, "config.json")
with open(cfg_path, "w") as fh:
    json.dump(config, fh, indent=2)

data = os.path.join(ROOT, "data")
ckpt = os.path.join(ROOT, "ckpt")
scores = os.path.join(ROOT, "scores")
thresholds = os.path.join(ROOT, "thresholds.json")
report = os.path.join(ROOT, "report.json")

# Each stage is one CLI invocation. Later stages refuse artifacts whose
# config hash does not match the config they are given, so a stale corpus
# or checkpoint fails loudly instead of skewing the evaluation.
stages = [
    ("synthesize the corpus",
     ["generate", "--config", cfg_path, "--out", data]),
    ("train the VQ codec",
     ["train", "--config", cfg_path, "--stage", "vqvae",
      "--data", data, "--out", ckpt]),
    ("train the latent prior (on grids from the frozen codec)",
     ["train", "--config", cfg_path, "--stage", "prior",
      "--data", data, "--out", ckpt]),
    ("train the dense-latent baseline",
     ["train", "--config", cfg_path, "--stage", "vae",
      "--data", data, "--out", ckpt]),
    ("calibrate thresholds on healthy validation slices",
     ["calibrate", "--config", cfg_path, "--data", data,
      "--codec", os.path.join(ckpt, "vqvae.lsrc"),
      "--prior", os.path.join(ckpt, "prior.lsrc"),
      "--out", thresholds]),
    ("score every validation slice with both models",
     ["score", "--config", cfg_path, "--data", data,
      "--codec", os.path.join(ckpt, "vqvae.lsrc"),
      "--prior", os.path.join(ckpt, "prior.lsrc"),
      "--vae", os.path.join(ckpt, "vae.lsrc"),
      "--out", scores, "--thresholds", thresholds]),
    ("turn scores plus ground truth into one report",
     ["evaluate", "--data", data, "--scores", scores, "--out", report]),
]

for description, argv in stages:
    print(f"\n== {description}\n   $ lsr {' '.join(argv)}")
    rc = cli.main(argv)
    if rc != 0:
        raise SystemExit(f"stage failed with exit code {rc}")

with open(report) as fh:
    result = json.load(fh)
print("\n== headline numbers from the report")
print("   method slice AUROC  ", round(result["method"]["slice"]["auroc"], 3))
print("   baseline slice AUROC",
      round(result["baseline"]["slice"]["auroc"], 3))
print("   method pixel AUROC  ", round(result["method"]["pixel"]["auroc"], 3))
print(f"\nartifacts left in {ROOT}")
