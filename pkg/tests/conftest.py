"""Shared fixtures: tiny configs and a session-scoped miniature pipeline run.

Everything here is sized for a single CPU core; unit tests use untrained
models wherever the contract allows it, and the slow, fully trained runs
live only in the acceptance suite.
"""

import json
import os

import pytest
import torch

from lsr.config import config_from_dict

torch.set_num_threads(1)


MINI_CONFIG = {
    "seed": 123,
    "data": {
        "side": 16,
        "slices_per_volume": 4,
        "train_volumes": 6,
        "val_volumes": 3,
        "val_clean_volumes": 1,
        "anomaly_radius_min": 2,
        "anomaly_radius_max": 4,
        "anomaly_magnitudes": [0.8, 1.6],
        "augment": {"enabled": False},
    },
    "codec": {
        "blocks": 2,
        "res_blocks": 1,
        "channels": 12,
        "codebook_size": 8,
        "embedding_dim": 6,
        "vae_latent_dim": 16,
    },
    "prior": {"blocks": 1, "res_blocks": 1, "channels": 12},
    "scoring": {"restorations": 3},
    "train": {
        "batch_size": 4,
        "max_steps": 8,
        "checkpoint_interval": 4,
        "log_interval": 2,
    },
}


def mini_config_dict(**overrides):
    merged = json.loads(json.dumps(MINI_CONFIG))
    for key, value in overrides.items():
        if isinstance(value, dict):
            merged.setdefault(key, {}).update(value)
        else:
            merged[key] = value
    return merged


@pytest.fixture
def mini_cfg():
    return config_from_dict(mini_config_dict())


@pytest.fixture(scope="session")
def mini_pipeline(tmp_path_factory):
    """One full CLI pipeline on the miniature config, shared across tests."""
    from lsr import cli

    root = tmp_path_factory.mktemp("mini_pipeline")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(mini_config_dict()))
    data_dir = str(root / "data")
    ckpt_dir = str(root / "ckpt")
    scores_dir = str(root / "scores")
    thresholds = str(root / "thresholds.json")
    report = str(root / "report.json")
    steps = [
        ["generate", "--config", str(cfg_path), "--out", data_dir],
        ["train", "--config", str(cfg_path), "--stage", "vqvae",
         "--data", data_dir, "--out", ckpt_dir],
        ["train", "--config", str(cfg_path), "--stage", "prior",
         "--data", data_dir, "--out", ckpt_dir],
        ["train", "--config", str(cfg_path), "--stage", "vae",
         "--data", data_dir, "--out", ckpt_dir],
        ["calibrate", "--config", str(cfg_path), "--data", data_dir,
         "--codec", os.path.join(ckpt_dir, "vqvae.lsrc"),
         "--prior", os.path.join(ckpt_dir, "prior.lsrc"),
         "--out", thresholds],
        ["score", "--config", str(cfg_path), "--data", data_dir,
         "--codec", os.path.join(ckpt_dir, "vqvae.lsrc"),
         "--prior", os.path.join(ckpt_dir, "prior.lsrc"),
         "--vae", os.path.join(ckpt_dir, "vae.lsrc"),
         "--out", scores_dir, "--thresholds", thresholds],
        ["evaluate", "--data", data_dir, "--scores", scores_dir,
         "--out", report],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, f"pipeline step failed: {argv[0]}"
    return {"root": root, "config": str(cfg_path), "data": data_dir,
            "ckpt": ckpt_dir, "scores": scores_dir,
            "thresholds": thresholds, "report": report}
