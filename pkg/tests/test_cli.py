import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from alphalatent.checkpoint import load_checkpoint
from alphalatent.cli import evaluate_codec, load_base_model, load_codec_models, main
from alphalatent.config import RunConfig, apply_values, parse_kv_lines
from alphalatent.metrics import read_metrics_csv
from alphalatent.pixels import pad_undefined
from alphalatent.shards import read_dataset
from alphalatent.transparency import decode_adjusted, encode_adjusted


def run(*args) -> int:
    return main([str(a) for a in args])


def run_pipeline(out: Path) -> None:
    """Tiny end-to-end pipeline: datasets, then all four stages in order."""
    common = ("--out", out, "--batch-size", 4)
    assert run("gen-data", *common, "--name", "d1", "--count", 20,
               "--image-size", 32, "--master-seed", 5) == 0
    assert run("gen-data", *common, "--name", "pairs", "--kind", "layers",
               "--count", 10, "--image-size", 32, "--master-seed", 9) == 0
    assert run("train", "base", *common, "--name", "d1", "--steps", 50,
               "--base-channels", 8) == 0
    assert run("train", "codec", *common, "--name", "d1", "--steps", 30,
               "--base-channels", 8, "--disc-warmup", 15) == 0
    assert run("train", "diffusion", *common, "--name", "d1", "--steps", 20,
               "--model-channels", 12, "--timesteps", 16) == 0
    assert run("train", "layers", *common, "--dataset", out / "data" / "pairs",
               "--steps", 10, "--rank", 4) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_pipeline")
    run_pipeline(out)
    snapshots = {
        stage: (out / "checkpoints" / f"{stage}.ckpt").read_bytes()
        for stage in ("base", "codec", "diffusion")
    }
    return out, snapshots


class TestGenData:
    def test_outputs_and_manifest_count(self, pipeline):
        out, _ = pipeline
        d = out / "data" / "d1"
        assert (d / "dataset.json").exists()
        assert (d / "resolved.config").exists()
        meta = json.loads((d / "dataset.json").read_text())
        assert meta["count"] == 20
        assert len((d / "manifest.jsonl").read_text().splitlines()) == 20

    def test_layers_kind_recorded(self, pipeline):
        out, _ = pipeline
        meta = json.loads((out / "data" / "pairs" / "dataset.json").read_text())
        assert meta["kind"] == "layers"

    def test_rerun_reproduces_bytes(self, pipeline, tmp_path):
        out, _ = pipeline
        assert run("gen-data", "--out", tmp_path, "--name", "d1", "--count", 20,
                   "--image-size", 32, "--master-seed", 5) == 0
        for name in ("manifest.jsonl", "dataset.json", "shard-0000.bin"):
            assert (tmp_path / "data" / "d1" / name).read_bytes() == \
                (out / "data" / "d1" / name).read_bytes()


class TestTrainCommand:
    def test_artifacts_exist_per_stage(self, pipeline):
        out, _ = pipeline
        for stage in ("base", "codec", "diffusion", "layers"):
            assert (out / "checkpoints" / f"{stage}.ckpt").exists()
            assert (out / "checkpoints" / f"{stage}.config").exists()
            rows = read_metrics_csv(out / "metrics" / f"{stage}.csv")
            assert len(rows) > 0

    def test_resolved_config_records_effective_steps(self, pipeline):
        out, _ = pipeline
        values = parse_kv_lines((out / "checkpoints" / "base.config").read_text())
        assert values["steps"] == "50"
        assert values["stage"] == "base"
        # the resolved file is itself a valid config file
        apply_values(RunConfig(), values)

    def test_prerequisite_error_names_missing_stage(self, pipeline, tmp_path, capsys):
        out, _ = pipeline
        rc = run("train", "codec", "--out", tmp_path, "--dataset", out / "data" / "d1",
                 "--steps", 5)
        assert rc == 2
        err = capsys.readouterr().err
        assert "base" in err and "train base" in err

    def test_missing_dataset_error_is_actionable(self, tmp_path, capsys):
        rc = run("train", "base", "--out", tmp_path, "--steps", 5)
        assert rc == 2
        assert "gen-data" in capsys.readouterr().err

    def test_dataset_kind_mismatch_rejected(self, pipeline, capsys):
        out, _ = pipeline
        rc = run("train", "layers", "--out", out, "--name", "d1", "--steps", 5)
        assert rc == 2
        assert "layers" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.config"
        bad.write_text("not_a_real_key=1\n")
        assert run("train", "base", "--out", tmp_path, "--config", bad) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_prerequisites_never_mutated(self, pipeline):
        out, snapshots = pipeline
        # codec, diffusion, and layers training all ran after these snapshots
        for stage in ("base", "codec"):
            current = (out / "checkpoints" / f"{stage}.ckpt").read_bytes()
            assert current == snapshots[stage]

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        out, _ = pipeline
        args = ("--out", tmp_path, "--name", "d1", "--batch-size", 4)
        assert run("gen-data", *args, "--count", 20, "--image-size", 32,
                   "--master-seed", 5) == 0
        assert run("train", "base", *args, "--steps", 50, "--base-channels", 8) == 0
        assert (tmp_path / "checkpoints" / "base.ckpt").read_bytes() == \
            (out / "checkpoints" / "base.ckpt").read_bytes()
        assert (tmp_path / "metrics" / "base.csv").read_bytes() == \
            (out / "metrics" / "base.csv").read_bytes()

    def test_resume_continues_step_counter(self, pipeline, tmp_path):
        out, _ = pipeline
        args = ("--out", tmp_path, "--name", "d1", "--batch-size", 4, "--base-channels", 8)
        assert run("gen-data", "--out", tmp_path, "--name", "d1", "--count", 20,
                   "--image-size", 32, "--master-seed", 5) == 0
        assert run("train", "base", *args, "--steps", 25) == 0
        assert load_checkpoint(tmp_path / "checkpoints" / "base.ckpt").meta["step"] == 25
        assert run("train", "base", *args, "--steps", 50, "--resume") == 0
        resumed = load_checkpoint(tmp_path / "checkpoints" / "base.ckpt")
        assert resumed.meta["step"] == 50
        # the resumed weights match the uninterrupted 50-step run bit for bit
        straight = load_checkpoint(out / "checkpoints" / "base.ckpt")
        assert set(resumed.blobs) == set(straight.blobs)
        for key in straight.blobs:
            assert np.array_equal(resumed.blobs[key], straight.blobs[key]), key

    def test_resume_without_checkpoint_exits_2(self, pipeline, tmp_path, capsys):
        out, _ = pipeline
        rc = run("train", "base", "--out", tmp_path, "--dataset", out / "data" / "d1",
                 "--steps", 5, "--resume")
        assert rc == 2

    def test_resume_past_end_exits_2(self, pipeline, capsys):
        out, _ = pipeline
        rc = run("train", "diffusion", "--out", out, "--name", "d1", "--batch-size", 4,
                 "--model-channels", 12, "--timesteps", 16, "--steps", 20, "--resume")
        assert rc == 2
        assert "raise --steps" in capsys.readouterr().err


class TestGenerateCommand:
    def test_single_mode_outputs(self, pipeline):
        out, _ = pipeline
        assert run("generate", "--out", out, "--name", "g1", "--n-samples", 2,
                   "--sample-steps", 4) == 0
        d = out / "samples" / "g1"
        for i in range(2):
            for suffix in ("rgb", "alpha", "rgba", "composite"):
                assert (d / f"sample_{i:03d}.{suffix}.png").exists()
        assert (d / "resolved.config").exists()

    def test_alpha_png_is_grayscale(self, pipeline):
        out, _ = pipeline
        with Image.open(out / "samples" / "g1" / "sample_000.alpha.png") as im:
            assert im.mode == "L"
            assert im.size == (32, 32)

    def test_rerun_byte_identical(self, pipeline):
        out, _ = pipeline
        d = out / "samples" / "g1"
        before = {p.name: p.read_bytes() for p in d.iterdir()}
        assert run("generate", "--out", out, "--name", "g1", "--n-samples", 2,
                   "--sample-steps", 4) == 0
        after = {p.name: p.read_bytes() for p in d.iterdir()}
        assert before == after

    def test_seed_changes_output(self, pipeline):
        out, _ = pipeline
        assert run("generate", "--out", out, "--name", "g_seed", "--n-samples", 1,
                   "--sample-steps", 4, "--seed", 99) == 0
        a = (out / "samples" / "g1" / "sample_000.rgba.png").read_bytes()
        b = (out / "samples" / "g_seed" / "sample_000.rgba.png").read_bytes()
        assert a != b

    def test_joint_mode_outputs(self, pipeline):
        out, _ = pipeline
        assert run("generate", "--out", out, "--name", "gj", "--gen-mode", "joint",
                   "--n-samples", 1, "--sample-steps", 4) == 0
        d = out / "samples" / "gj"
        assert (d / "sample_000.rgba.png").exists()
        assert (d / "sample_000.bg.png").exists()
        assert (d / "sample_000.composite.png").exists()

    def test_iterate_mode_outputs(self, pipeline):
        out, _ = pipeline
        assert run("generate", "--out", out, "--name", "gi", "--gen-mode", "iterate",
                   "--prompts", "disk,glow", "--sample-steps", 4) == 0
        d = out / "samples" / "gi"
        for j in range(2):
            assert (d / f"layer_{j:02d}.rgba.png").exists()
            assert (d / f"condition_{j:02d}.png").exists()
        assert (d / "final.png").exists()

    def test_conditional_mode_outputs(self, pipeline):
        out, _ = pipeline
        assert run("generate", "--out", out, "--name", "gc", "--gen-mode", "bg-cond",
                   "--dataset", out / "data" / "pairs", "--n-samples", 1,
                   "--sample-steps", 4) == 0
        d = out / "samples" / "gc"
        assert (d / "sample_000.rgba.png").exists()
        assert (d / "sample_000.composite.png").exists()

    def test_cond_index_out_of_range_exits_2(self, pipeline, capsys):
        out, _ = pipeline
        rc = run("generate", "--out", out, "--name", "gx", "--gen-mode", "fg-cond",
                 "--dataset", out / "data" / "pairs", "--cond-index", 999,
                 "--sample-steps", 4)
        assert rc == 2

    def test_unknown_label_exits_2(self, pipeline, capsys):
        out, _ = pipeline
        rc = run("generate", "--out", out, "--name", "gx", "--label", "unicorn",
                 "--sample-steps", 4)
        assert rc == 2
        assert "unknown label" in capsys.readouterr().err

    def test_missing_diffusion_checkpoint_exits_2(self, tmp_path, capsys):
        rc = run("generate", "--out", tmp_path, "--sample-steps", 4)
        assert rc == 2
        err = capsys.readouterr().err
        assert "base" in err


class TestEvalCommand:
    def test_report_fields_and_recompute(self, pipeline):
        out, _ = pipeline
        assert run("eval", "--out", out, "--name", "e1", "--dataset", out / "data" / "d1",
                   "--eval-count", 6) == 0
        report = json.loads((out / "eval" / "e1.json").read_text())
        for key in ("count", "alpha_mae", "rgb_mse", "psnr_base", "psnr_adjusted", "psnr_delta"):
            assert key in report
        assert report["count"] == 6

        # independent recompute straight from the library primitives
        config = apply_values(RunConfig(), {"out": str(out), "name": "d1"})
        ae, _ = load_base_model(config)
        (enc, dec, _), codec_meta = load_codec_models(config)
        data = read_dataset(out / "data" / "d1")
        images = [s.image for s in data.items[:6]]
        alpha_err, rgb_err = [], []
        for img in images:
            bundle = encode_adjusted(img, ae, enc, lambda_offset=codec_meta["lambda_offset"])
            rec = decode_adjusted(bundle.x_a, ae, dec)
            alpha_err.append(float(np.abs(rec.alpha - img.alpha).mean()))
            rgb_err.append(float(((rec.rgb - pad_undefined(img).rgb) ** 2).mean()))
        assert abs(report["alpha_mae"] - float(np.mean(alpha_err))) <= 1e-6
        assert abs(report["rgb_mse"] - float(np.mean(rgb_err))) <= 1e-6
        helper = evaluate_codec(images, ae, enc, dec, codec_meta["lambda_offset"])
        assert abs(report["psnr_delta"] - helper["psnr_delta"]) <= 1e-6

    def test_gate_failure_exits_3(self, pipeline, capsys):
        out, _ = pipeline
        rc = run("eval", "--out", out, "--name", "e_fail", "--dataset", out / "data" / "d1",
                 "--eval-count", 4, "--gate-alpha-mae", "1e-9")
        assert rc == 3
        assert "alpha_mae" in capsys.readouterr().err
        report = json.loads((out / "eval" / "e_fail.json").read_text())
        assert report["gates"]["alpha_mae"]["passed"] is False

    def test_gate_pass_exits_0(self, pipeline):
        out, _ = pipeline
        rc = run("eval", "--out", out, "--name", "e_pass", "--dataset", out / "data" / "d1",
                 "--eval-count", 4, "--gate-alpha-mae", "1.0")
        assert rc == 0
        report = json.loads((out / "eval" / "e_pass.json").read_text())
        assert report["gates"]["alpha_mae"]["passed"] is True


class TestEnvironment:
    def test_ltl_out_overrides_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LTL_OUT", str(tmp_path / "envroot"))
        assert run("gen-data", "--count", 4, "--image-size", 32) == 0
        assert (tmp_path / "envroot" / "data" / "default" / "dataset.json").exists()

    def test_paper_defaults_recorded(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--paper-defaults", "--count", 2) == 0
        values = parse_kv_lines((tmp_path / "data" / "default" / "resolved.config").read_text())
        assert values["lr"] == "1e-05"
        assert values["rank"] == "256"
        assert values["image_size"] == "512"
        meta = json.loads((tmp_path / "data" / "default" / "dataset.json").read_text())
        assert meta["image_size"] == 512
