"""Command-line entry point: generate / train / calibrate / score / evaluate.

Every command takes a JSON config (``--config``), an optional ``--seed``
override, and writes artifacts stamped with the config hash; downstream
commands refuse artifacts whose hash does not match the config they were
invoked with, so a stale corpus or checkpoint cannot silently leak into an
evaluation. Pipeline failures print a structured JSON error to stderr and
exit 1; success prints a one-line JSON summary to stdout and exits 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from .config import RunConfig, config_hash, load_config
from .data import load_manifest, load_slices, manifest_sha256, write_corpus
from .errors import (ConfigError, DataError, MissingDependencyError,
                     PipelineError)
from .evaluation import evaluate
from .formats import write_tensor
from .prior import nll_map
from .scoring import calibrate_thresholds, method_scores, vae_scores
from .train import (build_prior, build_vae, build_vqvae, encode_corpus,
                    load_checkpoint, train_stage)

PERCENTILE_S = 98.0
PERCENTILE_P = 90.0


def _write_json(path: str, payload: dict) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _read_json(path: str, kind: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingDependencyError(f"missing {kind} file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    if payload.get("kind") != kind:
        raise DataError(f"{path} is not a {kind} document")
    return payload


def _manifest_path(data_dir: str) -> str:
    if os.path.isdir(data_dir):
        return os.path.join(data_dir, "manifest.json")
    return data_dir


def _check_hash(recorded, cfg: RunConfig, what: str):
    if recorded != config_hash(cfg):
        raise ConfigError(
            f"{what} was produced with a different config "
            f"(hash {str(recorded)[:12]}..., current "
            f"{config_hash(cfg)[:12]}...); regenerate it or fix the config")


def _load_stage_model(path: str, cfg: RunConfig, stage: str):
    if not os.path.exists(path):
        raise MissingDependencyError(
            f"missing {stage} checkpoint: {path}; train that stage first")
    model = {"vqvae": build_vqvae, "prior": build_prior,
             "vae": build_vae}[stage](cfg)
    meta, _ = load_checkpoint(path, model)
    if meta.get("stage") != stage:
        raise ConfigError(
            f"{path} holds a {meta.get('stage')!r} checkpoint, expected "
            f"{stage!r}")
    _check_hash(meta.get("config_hash"), cfg, f"checkpoint {path}")
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Commands (importable; the argparse layer is a thin shell around these)
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out_dir: str) -> dict:
    manifest_path = write_corpus(out_dir, cfg)
    manifest = load_manifest(manifest_path)
    n_slices = sum(len(v["slices"]) for v in manifest["volumes"])
    return {"command": "generate", "manifest": manifest_path,
            "volumes": len(manifest["volumes"]), "slices": n_slices,
            "config_hash": config_hash(cfg)}


def cmd_train(cfg: RunConfig, stage: str, data_dir: str, out_dir: str,
              resume: str = None, codec: str = None) -> dict:
    manifest_path = _manifest_path(data_dir)
    manifest = load_manifest(manifest_path)
    _check_hash(manifest.get("config_hash"), cfg, "dataset manifest")
    slices = load_slices(manifest_path, "train")
    os.makedirs(out_dir, exist_ok=True)
    meta = {"seed": cfg.seed, "config_hash": config_hash(cfg)}
    if stage == "prior":
        codec_path = codec or os.path.join(out_dir, "vqvae.lsrc")
        vqvae = _load_stage_model(codec_path, cfg, "vqvae")
        corpus = encode_corpus(vqvae, slices)
        model = build_prior(cfg)
        augment_cfg = None
    elif stage in ("vqvae", "vae"):
        corpus = slices
        model = build_vqvae(cfg) if stage == "vqvae" else build_vae(cfg)
        augment_cfg = cfg.data.augment
    else:
        raise ConfigError(f"unknown training stage {stage!r}")
    result = train_stage(model, corpus, stage, cfg.train, seed=cfg.seed,
                         augment_cfg=augment_cfg, out_dir=out_dir, meta=meta,
                         resume_from=resume)
    curve_path = _write_json(
        os.path.join(out_dir, f"{stage}_loss.json"),
        {"schema_version": 1, "kind": "loss_curve", "stage": stage,
         "seed": cfg.seed, "config_hash": config_hash(cfg),
         "curve": result.curve})
    final = result.curve[-1] if result.curve else {}
    return {"command": "train", "stage": stage, "steps": result.steps,
            "checkpoint": result.checkpoint_path, "loss_curve": curve_path,
            "final_loss": final.get("total"), "config_hash": config_hash(cfg)}


def _clean_val_nll_maps(manifest_path: str, vqvae, prior):
    """NLL maps of anomaly-free validation slices (the healthy population)."""
    corpus = load_slices(manifest_path, "val")
    maps = []
    with torch.no_grad():
        for image, position, record in zip(corpus.images, corpus.positions,
                                           corpus.records):
            if record["anomalies"]:
                continue
            grid = vqvae.encode_indices(
                torch.as_tensor(image)[None, None])[0]
            maps.append(nll_map(prior, grid, float(position)).numpy())
    if not maps:
        raise DataError("validation split has no anomaly-free slices")
    return maps


def cmd_calibrate(cfg: RunConfig, data_dir: str, codec: str, prior_path: str,
                  out_path: str) -> dict:
    manifest_path = _manifest_path(data_dir)
    manifest = load_manifest(manifest_path)
    _check_hash(manifest.get("config_hash"), cfg, "dataset manifest")
    vqvae = _load_stage_model(codec, cfg, "vqvae")
    prior = _load_stage_model(prior_path, cfg, "prior")
    maps = _clean_val_nll_maps(manifest_path, vqvae, prior)
    lambda_s, lambda_p = calibrate_thresholds(maps, PERCENTILE_S,
                                              PERCENTILE_P)
    payload = {"schema_version": 1, "kind": "thresholds",
               "config_hash": config_hash(cfg), "seed": cfg.seed,
               "manifest_sha256": manifest_sha256(manifest_path),
               "lambda_s": lambda_s, "lambda_p": lambda_p,
               "percentile_s": PERCENTILE_S, "percentile_p": PERCENTILE_P,
               "population_size": int(sum(m.size for m in maps))}
    _write_json(out_path, payload)
    return {"command": "calibrate", "thresholds": out_path,
            "lambda_s": lambda_s, "lambda_p": lambda_p,
            "config_hash": config_hash(cfg)}


def cmd_score(cfg: RunConfig, data_dir: str, codec: str, prior_path: str,
              vae_path: str, out_dir: str, thresholds: str = None) -> dict:
    manifest_path = _manifest_path(data_dir)
    manifest = load_manifest(manifest_path)
    _check_hash(manifest.get("config_hash"), cfg, "dataset manifest")
    digest = manifest_sha256(manifest_path)
    scoring_cfg = cfg.scoring
    if thresholds is not None:
        doc = _read_json(thresholds, "thresholds")
        _check_hash(doc.get("config_hash"), cfg, f"thresholds {thresholds}")
        scoring_cfg = dataclasses.replace(cfg.scoring,
                                          lambda_s=float(doc["lambda_s"]),
                                          lambda_p=float(doc["lambda_p"]))
    vqvae = _load_stage_model(codec, cfg, "vqvae")
    prior = _load_stage_model(prior_path, cfg, "prior")
    vae = _load_stage_model(vae_path, cfg, "vae")
    corpus = load_slices(manifest_path, "val")
    reports = {"method": [], "baseline": []}
    for image, position, record in zip(corpus.images, corpus.positions,
                                       corpus.records):
        image = image.astype(np.float64)
        sid = record["id"]
        score, amap = method_scores(image, vqvae, prior, float(position),
                                    scoring_cfg, seed=cfg.seed, image_id=sid)
        base_score, base_map = vae_scores(image, vae)
        for model, value, arr in (("method", score, amap),
                                  ("baseline", base_score, base_map)):
            rel = f"maps/{model}/{sid}.lsrt"
            path = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            write_tensor(path, arr.astype(np.float32),
                         {"kind": "anomaly_map", "model": model, "id": sid})
            reports[model].append({"id": sid, "sample_score": float(value),
                                   "map": rel,
                                   "slice_position": float(position)})
    paths = {}
    for model, entries in reports.items():
        paths[model] = _write_json(
            os.path.join(out_dir, f"{model}_scores.json"),
            {"schema_version": 1, "kind": "score_report", "model": model,
             "seed": cfg.seed, "config_hash": config_hash(cfg),
             "manifest_sha256": digest, "split": "val",
             "lambda_s": scoring_cfg.lambda_s,
             "lambda_p": scoring_cfg.lambda_p, "entries": entries})
    return {"command": "score", "slices": len(corpus.records),
            "method_scores": paths["method"],
            "baseline_scores": paths["baseline"],
            "config_hash": config_hash(cfg)}


def cmd_evaluate(data_dir: str, scores_dir: str, out_path: str) -> dict:
    report = evaluate(_manifest_path(data_dir), scores_dir)
    _write_json(out_path, report)
    return {"command": "evaluate", "report": out_path,
            "slice_auroc": report["method"]["slice"]["auroc"],
            "pixel_auroc": report["method"]["pixel"]["auroc"]}


# ---------------------------------------------------------------------------
# argparse shell
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config's master seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic torch kernels")
    common.add_argument("--threads", type=int, default=None,
                        help="torch thread count (ignored with "
                             "--deterministic)")
    parser = argparse.ArgumentParser(
        prog="lsr",
        description="latent-space restoration anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="synthesize a pseudo-volume corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="corpus output directory")

    p = sub.add_parser("train", parents=[common],
                       help="train one pipeline stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True,
                   choices=["vqvae", "prior", "vae"])
    p.add_argument("--data", required=True,
                   help="corpus directory or manifest path")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", default=None,
                   help="checkpoint to resume this stage from")
    p.add_argument("--codec", default=None,
                   help="codec checkpoint (prior stage; defaults to "
                        "OUT/vqvae.lsrc)")

    p = sub.add_parser("calibrate", parents=[common],
                       help="fit score thresholds on healthy validation data")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True, help="thresholds JSON path")

    p = sub.add_parser("score", parents=[common],
                       help="score validation slices with both models")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True, help="scores output directory")
    p.add_argument("--thresholds", default=None,
                   help="thresholds JSON from the calibrate command")

    p = sub.add_parser("evaluate", parents=[common],
                       help="compute metrics from score artifacts")
    p.add_argument("--data", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    return parser


def _apply_runtime(args):
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_runtime(args)
        if args.command == "generate":
            summary = cmd_generate(_load_cfg(args), args.out)
        elif args.command == "train":
            summary = cmd_train(_load_cfg(args), args.stage, args.data,
                                args.out, resume=args.resume,
                                codec=args.codec)
        elif args.command == "calibrate":
            summary = cmd_calibrate(_load_cfg(args), args.data, args.codec,
                                    args.prior, args.out)
        elif args.command == "score":
            summary = cmd_score(_load_cfg(args), args.data, args.codec,
                                args.prior, args.vae, args.out,
                                thresholds=args.thresholds)
        else:
            summary = cmd_evaluate(args.data, args.scores, args.out)
    except PipelineError as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
