"""Evaluation: turn score artifacts plus ground truth into one report.

``evaluate`` cross-checks that the score files were produced against the
exact manifest being evaluated (by content hash), then computes slice-wise
ranking metrics from sample scores, pixel-wise metrics from pooled anomaly
maps, a per-image localization check (mean map value inside vs outside the
true mask), and a contrast probe grouping anomalous slices by injected
|intensity delta|.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .data import load_manifest, load_mask, manifest_sha256
from .errors import ConfigError, DataError, MetricError
from .formats import read_tensor
from .metrics import auroc, average_precision, best_dice, dice  # noqa: F401
# (dice is re-exported: evaluation is the public home of the metric suite)


def load_scores(scores_dir: str, model: str) -> dict:
    path = os.path.join(scores_dir, f"{model}_scores.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            scores = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing score file {path}") from exc
    if scores.get("kind") != "score_report":
        raise DataError(f"{path} is not a score report")
    return scores


def _val_entries(manifest: dict) -> list:
    entries = []
    for volume in manifest["volumes"]:
        if volume["split"] == "val":
            entries.extend(volume["slices"])
    if not entries:
        raise DataError("manifest has no validation slices")
    return entries


def _pixel_pool(entries, score_entries, manifest_path, scores_dir):
    """Pooled (map values, mask values) over all validation slices."""
    maps, masks = [], []
    for entry in entries:
        score_entry = score_entries[entry["id"]]
        arr = read_tensor(os.path.join(scores_dir, score_entry["map"]))
        arr = arr.astype(np.float64)
        mask = load_mask(manifest_path, entry)
        if mask is None:
            mask = np.zeros(arr.shape, dtype=bool)
        if mask.shape != arr.shape:
            raise DataError(f"map/mask shape mismatch on slice {entry['id']}")
        maps.append(arr)
        masks.append(mask)
    return maps, masks


def _ranking(scores, labels) -> dict:
    return {"auroc": auroc(scores, labels),
            "ap": average_precision(scores, labels)}


def evaluate(manifest_path: str, scores_dir: str) -> dict:
    """Build the evaluation report for one corpus + one set of score files."""
    manifest = load_manifest(manifest_path)
    digest = manifest_sha256(manifest_path)
    entries = _val_entries(manifest)
    report = {
        "schema_version": 1,
        "kind": "evaluation_report",
        "manifest_sha256": digest,
        "n_val_slices": len(entries),
        "n_anomalous": sum(1 for e in entries if e["anomalies"]),
    }
    labels = [1 if e["anomalies"] else 0 for e in entries]
    for model in ("method", "baseline"):
        scores = load_scores(scores_dir, model)
        if scores.get("manifest_sha256") != digest:
            raise ConfigError(
                f"{model} scores were computed against a different manifest; "
                "regenerate the scores")
        report.setdefault("config_hash", scores.get("config_hash"))
        report.setdefault("seed", scores.get("seed"))
        if scores.get("config_hash") != report["config_hash"]:
            raise ConfigError("score files disagree on the config hash")
        by_id = {e["id"]: e for e in scores["entries"]}
        missing = [e["id"] for e in entries if e["id"] not in by_id]
        if missing:
            raise DataError(f"{model} scores miss slices {missing[:4]}")
        sample_scores = [by_id[e["id"]]["sample_score"] for e in entries]
        maps, masks = _pixel_pool(entries, by_id, manifest_path, scores_dir)
        pooled_map = np.concatenate([m.ravel() for m in maps])
        pooled_mask = np.concatenate([m.ravel() for m in masks])
        threshold, overlap = best_dice(pooled_map, pooled_mask)
        section = {
            "slice": _ranking(sample_scores, labels),
            "pixel": {**_ranking(pooled_map, pooled_mask.astype(int)),
                      "best_dice": overlap, "best_dice_threshold": threshold},
        }
        if model == "method":
            section["localization"] = _localization(entries, maps, masks)
            section["contrast"] = _contrast_probe(entries, maps, masks)
        report[model] = section
    return report


def _localization(entries, maps, masks) -> dict:
    """Mean map value inside vs outside the true mask, per anomalous image."""
    per_image = []
    for entry, arr, mask in zip(entries, maps, masks):
        if not entry["anomalies"]:
            continue
        inside = float(arr[mask].mean())
        outside = float(arr[~mask].mean())
        per_image.append({"id": entry["id"], "inside_mean": inside,
                          "outside_mean": outside,
                          "inside_greater": bool(inside > outside)})
    return {"per_image": per_image,
            "n_inside_greater": sum(e["inside_greater"] for e in per_image),
            "n_anomalous": len(per_image)}


def _contrast_probe(entries, maps, masks) -> dict:
    """Pixel AUROC per injected |intensity delta|, over that group's slices."""
    groups: dict[float, list[int]] = {}
    for i, entry in enumerate(entries):
        if not entry["anomalies"]:
            continue
        magnitude = round(abs(entry["anomalies"][0]["intensity_delta"]), 6)
        groups.setdefault(magnitude, []).append(i)
    out = []
    for magnitude in sorted(groups):
        idx = groups[magnitude]
        pooled_map = np.concatenate([maps[i].ravel() for i in idx])
        pooled_mask = np.concatenate([masks[i].ravel() for i in idx])
        try:
            value = auroc(pooled_map, pooled_mask.astype(int))
        except MetricError:
            value = None
        out.append({"magnitude": magnitude, "n_slices": len(idx),
                    "pixel_auroc": value})
    return {"groups": out}
