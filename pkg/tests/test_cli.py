"""CLI pipeline: artifacts, summaries, and stale-artifact rejection."""

import json
import os
import shutil

import numpy as np
import pytest

from lsr import cli
from lsr.config import config_from_dict, config_hash
from lsr.data import load_manifest, manifest_sha256
from lsr.errors import ConfigError
from lsr.formats import read_checkpoint, read_tensor

from conftest import mini_config_dict


def run_cli(capsys, argv):
    rc = cli.main(argv)
    captured = capsys.readouterr()
    out = json.loads(captured.out) if captured.out.strip() else None
    err = json.loads(captured.err) if captured.err.strip() else None
    return rc, out, err


def val_records(data_dir):
    manifest = load_manifest(os.path.join(data_dir, "manifest.json"))
    records = []
    for volume in manifest["volumes"]:
        if volume["split"] == "val":
            records.extend(volume["slices"])
    return manifest, records


class TestPipelineArtifacts:
    def test_generate_wrote_the_full_corpus(self, mini_pipeline):
        manifest, records = val_records(mini_pipeline["data"])
        assert manifest["kind"] == "dataset_manifest"
        splits = {}
        for volume in manifest["volumes"]:
            splits[volume["split"]] = splits.get(volume["split"], 0) + 1
        assert splits == {"train": 6, "val": 3}
        assert len(records) == 12
        assert any(r["anomalies"] for r in records)
        assert any(not r["anomalies"] for r in records)

    def test_all_stages_left_checkpoints_and_curves(self, mini_pipeline):
        ckpt = mini_pipeline["ckpt"]
        for stage in ("vqvae", "prior", "vae"):
            tensors, meta = read_checkpoint(os.path.join(ckpt,
                                                         f"{stage}.lsrc"))
            assert meta["stage"] == stage
            assert meta["step"] == 8
            assert any(k.startswith("model.") for k in tensors)
            with open(os.path.join(ckpt, f"{stage}_loss.json")) as fh:
                curve = json.load(fh)
            assert curve["kind"] == "loss_curve"
            assert [c["step"] for c in curve["curve"]] == [2, 4, 6, 8]
        assert os.path.exists(os.path.join(ckpt, "vqvae_step000004.lsrc"))
        assert not os.path.exists(os.path.join(ckpt, "vqvae_step000008.lsrc"))

    def test_thresholds_document(self, mini_pipeline):
        with open(mini_pipeline["thresholds"]) as fh:
            doc = json.load(fh)
        assert doc["kind"] == "thresholds"
        assert doc["lambda_s"] >= doc["lambda_p"]
        assert doc["percentile_s"] == 98.0
        assert doc["percentile_p"] == 90.0
        cfg = config_from_dict(mini_config_dict())
        assert doc["config_hash"] == config_hash(cfg)
        manifest, records = val_records(mini_pipeline["data"])
        clean = sum(1 for r in records if not r["anomalies"])
        assert doc["population_size"] == clean * 4 * 4

    def test_scores_cover_every_validation_slice(self, mini_pipeline):
        _, records = val_records(mini_pipeline["data"])
        ids = {r["id"] for r in records}
        for model in ("method", "baseline"):
            path = os.path.join(mini_pipeline["scores"],
                                f"{model}_scores.json")
            with open(path) as fh:
                doc = json.load(fh)
            assert doc["kind"] == "score_report"
            assert {e["id"] for e in doc["entries"]} == ids
            for entry in doc["entries"]:
                arr = read_tensor(os.path.join(mini_pipeline["scores"],
                                               entry["map"]))
                assert arr.shape == (16, 16)
                assert np.isfinite(arr).all()
                assert entry["sample_score"] >= 0.0

    def test_score_used_the_calibrated_thresholds(self, mini_pipeline):
        with open(mini_pipeline["thresholds"]) as fh:
            thresholds = json.load(fh)
        with open(os.path.join(mini_pipeline["scores"],
                               "method_scores.json")) as fh:
            doc = json.load(fh)
        assert doc["lambda_s"] == thresholds["lambda_s"]
        assert doc["lambda_p"] == thresholds["lambda_p"]

    def test_evaluation_report_contents(self, mini_pipeline):
        with open(mini_pipeline["report"]) as fh:
            report = json.load(fh)
        assert report["kind"] == "evaluation_report"
        assert report["manifest_sha256"] == manifest_sha256(
            os.path.join(mini_pipeline["data"], "manifest.json"))
        assert report["n_val_slices"] == 12
        assert report["n_anomalous"] > 0
        for model in ("method", "baseline"):
            section = report[model]
            for level in ("slice", "pixel"):
                assert 0.0 <= section[level]["auroc"] <= 1.0
                assert 0.0 < section[level]["ap"] <= 1.0
            assert 0.0 <= section["pixel"]["best_dice"] <= 1.0
        localization = report["method"]["localization"]
        assert localization["n_anomalous"] == report["n_anomalous"]
        assert len(localization["per_image"]) == report["n_anomalous"]
        magnitudes = [g["magnitude"]
                      for g in report["method"]["contrast"]["groups"]]
        assert magnitudes == [0.8, 1.6]


class TestCommandSummaries:
    def test_generate_summary_and_determinism(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_config_dict()))
        rc, out, _ = run_cli(capsys, ["generate", "--config", str(cfg_path),
                                      "--out", str(tmp_path / "a")])
        assert rc == 0
        assert out["command"] == "generate"
        assert out["volumes"] == 9
        assert out["slices"] == 36
        rc, _, _ = run_cli(capsys, ["generate", "--config", str(cfg_path),
                                    "--out", str(tmp_path / "b")])
        assert rc == 0
        assert manifest_sha256(str(tmp_path / "a" / "manifest.json")) == \
            manifest_sha256(str(tmp_path / "b" / "manifest.json"))

    def test_seed_override_changes_the_corpus(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_config_dict()))
        rc, out, _ = run_cli(capsys, ["generate", "--config", str(cfg_path),
                                      "--seed", "999",
                                      "--out", str(tmp_path / "c")])
        assert rc == 0
        base_hash = config_hash(config_from_dict(mini_config_dict()))
        assert out["config_hash"] != base_hash
        manifest = load_manifest(str(tmp_path / "c" / "manifest.json"))
        assert manifest["seed"] == 999

    def test_resume_from_intermediate_checkpoint(self, mini_pipeline,
                                                 tmp_path, capsys):
        ckpt = mini_pipeline["ckpt"]
        rc, out, _ = run_cli(capsys, [
            "train", "--config", mini_pipeline["config"], "--stage", "vqvae",
            "--data", mini_pipeline["data"], "--out", str(tmp_path),
            "--resume", os.path.join(ckpt, "vqvae_step000004.lsrc")])
        assert rc == 0
        assert out["steps"] == 8
        resumed, _ = read_checkpoint(str(tmp_path / "vqvae.lsrc"))
        original, _ = read_checkpoint(os.path.join(ckpt, "vqvae.lsrc"))
        assert set(resumed) == set(original)
        for key in original:
            np.testing.assert_array_equal(resumed[key], original[key], key)

    def test_evaluate_summary_points_at_report(self, mini_pipeline, tmp_path,
                                               capsys):
        out_path = str(tmp_path / "report.json")
        rc, out, _ = run_cli(capsys, ["evaluate",
                                      "--data", mini_pipeline["data"],
                                      "--scores", mini_pipeline["scores"],
                                      "--out", out_path])
        assert rc == 0
        assert out["report"] == out_path
        assert 0.0 <= out["slice_auroc"] <= 1.0
        with open(out_path) as fh:
            with open(mini_pipeline["report"]) as fh2:
                assert json.load(fh) == json.load(fh2)


class TestErrorPaths:
    def test_missing_config_file(self, tmp_path, capsys):
        rc, out, err = run_cli(capsys, ["generate", "--config",
                                        str(tmp_path / "nope.json"),
                                        "--out", str(tmp_path / "out")])
        assert rc == 1 and out is None
        assert "message" in err

    def test_stale_manifest_hash_rejected(self, mini_pipeline, tmp_path,
                                          capsys):
        other = tmp_path / "other.json"
        other.write_text(json.dumps(mini_config_dict(seed=321)))
        rc, _, err = run_cli(capsys, ["train", "--config", str(other),
                                      "--stage", "vqvae",
                                      "--data", mini_pipeline["data"],
                                      "--out", str(tmp_path / "ckpt")])
        assert rc == 1
        assert err["error"] == "ConfigError"
        assert "different config" in err["message"]

    def test_missing_checkpoint(self, mini_pipeline, tmp_path, capsys):
        rc, _, err = run_cli(capsys, [
            "calibrate", "--config", mini_pipeline["config"],
            "--data", mini_pipeline["data"],
            "--codec", str(tmp_path / "missing.lsrc"),
            "--prior", os.path.join(mini_pipeline["ckpt"], "prior.lsrc"),
            "--out", str(tmp_path / "thresholds.json")])
        assert rc == 1
        assert err["error"] == "MissingDependencyError"

    def test_wrong_checkpoint_for_stage(self, mini_pipeline, tmp_path,
                                        capsys):
        rc, _, err = run_cli(capsys, [
            "calibrate", "--config", mini_pipeline["config"],
            "--data", mini_pipeline["data"],
            "--codec", os.path.join(mini_pipeline["ckpt"], "prior.lsrc"),
            "--prior", os.path.join(mini_pipeline["ckpt"], "prior.lsrc"),
            "--out", str(tmp_path / "thresholds.json")])
        assert rc == 1
        # A prior checkpoint cannot restore the codec: either the stage tag
        # or the tensor shapes give it away first.
        assert err["error"] in ("ConfigError", "DataError")

    def test_bad_thresholds_document(self, mini_pipeline, tmp_path, capsys):
        ckpt = mini_pipeline["ckpt"]
        rc, _, err = run_cli(capsys, [
            "score", "--config", mini_pipeline["config"],
            "--data", mini_pipeline["data"],
            "--codec", os.path.join(ckpt, "vqvae.lsrc"),
            "--prior", os.path.join(ckpt, "prior.lsrc"),
            "--vae", os.path.join(ckpt, "vae.lsrc"),
            "--out", str(tmp_path / "scores"),
            "--thresholds", mini_pipeline["report"]])
        assert rc == 1
        assert err["error"] == "DataError"

    def test_evaluate_rejects_foreign_manifest(self, mini_pipeline, tmp_path,
                                               capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_config_dict(seed=777)))
        rc, _, _ = run_cli(capsys, ["generate", "--config", str(cfg_path),
                                    "--out", str(tmp_path / "data")])
        assert rc == 0
        rc, _, err = run_cli(capsys, ["evaluate",
                                      "--data", str(tmp_path / "data"),
                                      "--scores", mini_pipeline["scores"],
                                      "--out", str(tmp_path / "report.json")])
        assert rc == 1
        assert err["error"] == "ConfigError"
        assert "manifest" in err["message"]

    def test_evaluate_rejects_inconsistent_score_hashes(self, mini_pipeline,
                                                        tmp_path, capsys):
        tampered = tmp_path / "scores"
        shutil.copytree(mini_pipeline["scores"], tampered)
        path = tampered / "baseline_scores.json"
        doc = json.loads(path.read_text())
        doc["config_hash"] = "0" * 64
        path.write_text(json.dumps(doc))
        rc, _, err = run_cli(capsys, ["evaluate",
                                      "--data", mini_pipeline["data"],
                                      "--scores", str(tampered),
                                      "--out", str(tmp_path / "report.json")])
        assert rc == 1
        assert err["error"] == "ConfigError"
        assert "config hash" in err["message"]

    def test_evaluate_requires_both_score_files(self, mini_pipeline,
                                                tmp_path, capsys):
        partial = tmp_path / "scores"
        shutil.copytree(mini_pipeline["scores"], partial)
        os.remove(partial / "baseline_scores.json")
        rc, _, err = run_cli(capsys, ["evaluate",
                                      "--data", mini_pipeline["data"],
                                      "--scores", str(partial),
                                      "--out", str(tmp_path / "report.json")])
        assert rc == 1
        assert err["error"] == "DataError"

    def test_usage_errors_exit_2(self, capsys):
        assert cli.main([]) == 2
        capsys.readouterr()
        assert cli.main(["train", "--config", "x"]) == 2
        capsys.readouterr()

    def test_invalid_thread_count(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_config_dict()))
        rc, _, err = run_cli(capsys, ["generate", "--config", str(cfg_path),
                                      "--threads", "0",
                                      "--out", str(tmp_path / "out")])
        assert rc == 1
        assert err["error"] == "ConfigError"

    def test_unknown_stage_via_api(self, mini_pipeline, mini_cfg, tmp_path):
        with pytest.raises(ConfigError, match="stage"):
            cli.cmd_train(mini_cfg, "gan", mini_pipeline["data"],
                          str(tmp_path))

    def test_missing_manifest_is_a_pipeline_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_config_dict()))
        rc, _, err = run_cli(capsys, ["train", "--config", str(cfg_path),
                                      "--stage", "vqvae",
                                      "--data", str(tmp_path / "nowhere"),
                                      "--out", str(tmp_path / "ckpt")])
        assert rc == 1
        assert err["error"] == "MissingDependencyError"
