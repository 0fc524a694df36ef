"""Command-line pipeline: the seven commands, artifact formats, exit codes.

A module-scoped workspace runs train/capture/schedule/quantize/correct/
sample/report once with small settings; individual tests then assert on
the artifacts and on targeted failure modes.
"""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from cacheq.cli import main

TRAIN_CFG = {"iterations": 600, "batch_size": 64}
CAPTURE_CFG = {"capture_seeds": [101, 102], "batch_size": 32}
QUANT_CFG = {"calib_seeds": [101], "batch_size": 32}
SAMPLE_CFG = {"batch_size": 64}
REPORT_CFG = {
    "calib_seeds": [101, 102],
    "calib_batch": 64,
    "eval_batch": 128,
    "errors_batch": 64,
    "n_projections": 300,
}


def invoke(args, env=None):
    return CliRunner().invoke(main, args, env=env, catch_exceptions=False)


def run_ok(args, env=None):
    result = invoke(args, env=env)
    assert result.exit_code == 0, f"{args} failed:\n{result.output}"
    return result


def write_cfg(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Artifacts of one full pipeline run."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "root": root,
        "model": root / "model.bin",
        "traj": root / "features.traj",
        "sched": root / "schedule.json",
        "uniform": root / "uniform.json",
        "pack": root / "pack.json",
        "corr": root / "corrections.json",
        "samples": root / "samples.json",
        "report": root / "report",
    }
    outputs = {}
    outputs["train"] = run_ok([
        "train", "--out", str(paths["model"]), "--seed", "0",
        "--config", write_cfg(root / "train.json", TRAIN_CFG),
    ]).output
    outputs["capture"] = run_ok([
        "capture", "--model", str(paths["model"]), "--out", str(paths["traj"]),
        "--config", write_cfg(root / "capture.json", CAPTURE_CFG),
    ]).output
    outputs["schedule"] = run_ok([
        "schedule", "--trajectory", str(paths["traj"]), "--N", "5",
        "--out", str(paths["sched"]),
    ]).output
    run_ok([
        "schedule", "--trajectory", str(paths["traj"]), "--N", "5", "--uniform",
        "--out", str(paths["uniform"]),
    ])
    outputs["quantize"] = run_ok([
        "quantize", "--model", str(paths["model"]), "--schedule", str(paths["sched"]),
        "--wbits", "8", "--abits", "8", "--out", str(paths["pack"]),
        "--config", write_cfg(root / "quant.json", QUANT_CFG),
    ]).output
    outputs["correct"] = run_ok([
        "correct", "--model", str(paths["model"]), "--schedule", str(paths["sched"]),
        "--quant-pack", str(paths["pack"]), "--out", str(paths["corr"]),
        "--config", write_cfg(root / "corr.json", QUANT_CFG),
    ]).output
    outputs["sample"] = run_ok([
        "sample", "--model", str(paths["model"]), "--schedule", str(paths["sched"]),
        "--quant-pack", str(paths["pack"]), "--corrections", str(paths["corr"]),
        "--seed", "7", "--out", str(paths["samples"]),
        "--config", write_cfg(root / "sample.json", SAMPLE_CFG),
    ]).output
    outputs["report"] = run_ok([
        "report", "--model", str(paths["model"]), "--N", "5", "--seed", "7",
        "--out", str(paths["report"]),
        "--config", write_cfg(root / "report.json", REPORT_CFG),
    ]).output
    paths["outputs"] = outputs
    return paths


class TestArtifacts:
    def test_every_command_logs_the_config_hash(self, ws):
        for name, output in ws["outputs"].items():
            assert f"{name}: wrote" in output
            assert "config=" in output

    def test_model_file_retrains_the_configured_iterations(self, ws):
        from cacheq.pipeline import load_model

        model = load_model(ws["model"])
        assert model.lineage["training"]["iterations"] == 600
        assert model.lineage["train_seed"] == 0

    def test_schedule_artifact_shape(self, ws):
        payload = json.loads(ws["sched"].read_text())
        assert payload["T"] == 100 and payload["N"] == 5 and payload["K"] == 20
        points = payload["dividing_points"]
        assert points[0] == 0 and points == sorted(points)
        assert payload["limits"] == {"min": 3, "max": 10}
        assert payload["tie_break"] == "smallest_s"
        assert len(payload["config_hash"]) == 64

    def test_uniform_schedule_artifact(self, ws):
        payload = json.loads(ws["uniform"].read_text())
        assert payload["dividing_points"] == list(range(0, 100, 5))
        assert payload["limits"] is None
        assert np.isfinite(payload["total_cost"])

    def test_pack_artifact_names_the_site_layer(self, ws):
        payload = json.loads(ws["pack"].read_text())
        assert "config_hash" in payload
        from cacheq.pipeline import pack_from_dict

        pack = pack_from_dict(payload)
        assert set(pack.layers) == {"f3a"}
        assert pack.act_policy == "per_group"

    def test_corrections_artifact_spans_every_step(self, ws):
        payload = json.loads(ws["corr"].read_text())
        sched = json.loads(ws["sched"].read_text())
        assert len(payload["per_step"]) == 100
        entry = payload["per_step"][3]
        assert set(entry) == {"t", "a1", "b1", "a2", "b2",
                              "degenerate_in", "degenerate_out"}
        assert len(entry["a1"]) == 64 and len(entry["a2"]) == 48
        # bound to the schedule it was fitted under
        from cacheq.dps import schedule_digest, schedule_from_dict

        sched.pop("config_hash")
        assert payload["schedule_hash"] == schedule_digest(schedule_from_dict(sched))

    def test_sample_artifact(self, ws):
        payload = json.loads(ws["samples"].read_text())
        assert payload["seed"] == 7
        assert payload["kind"] == "deterministic"
        assert payload["count"] == 64
        assert len(payload["samples"]) == 64
        assert len(payload["samples"][0]) == 2
        assert payload["cost"]["macs"] > 0
        assert payload["cost"]["bops"] < payload["cost"]["macs"] * 32 * 32


class TestReportOutputs:
    def test_table_covers_all_five_configurations(self, ws):
        payload = json.loads((ws["report"] / "report.json").read_text())
        assert set(payload["table"]) == {
            "baseline", "quant_only", "cache_only", "combined_naive", "combined_ours",
        }
        assert payload["table"]["baseline"]["distance"] == 0.0
        for row in payload["table"].values():
            assert row["macs"] > 0 and np.isfinite(row["distance"])

    def test_orderings_and_monotonicity_reported(self, ws):
        payload = json.loads((ws["report"] / "report.json").read_text())
        assert set(payload["orderings"]) == {"ours_beats_naive", "naive_worse_than_parts"}
        assert 0.0 <= payload["monotonic_fraction"]["combined_naive"] <= 1.0

    def test_error_csvs_written_for_cached_configs(self, ws):
        for name in ("cache_only", "combined_naive", "combined_ours"):
            csv = ws["report"] / f"errors_{name}.csv"
            assert csv.read_text().splitlines()[0] == "step,E_o,E_c,E_q"

    def test_figures_rendered(self, ws):
        for fig in ("quadrant.png", "samples.png", "errors_combined_ours.png"):
            png = ws["report"] / fig
            assert png.stat().st_size > 1000
            assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class TestDeterminism:
    def test_schedule_rerun_is_byte_identical(self, ws):
        out = ws["root"] / "schedule_again.json"
        run_ok(["schedule", "--trajectory", str(ws["traj"]), "--N", "5",
                "--out", str(out)])
        assert out.read_bytes() == ws["sched"].read_bytes()

    def test_sample_rerun_is_byte_identical(self, ws):
        out = ws["root"] / "samples_again.json"
        run_ok([
            "sample", "--model", str(ws["model"]), "--schedule", str(ws["sched"]),
            "--quant-pack", str(ws["pack"]), "--corrections", str(ws["corr"]),
            "--seed", "7", "--out", str(out),
            "--config", write_cfg(ws["root"] / "sample2.json", SAMPLE_CFG),
        ])
        assert out.read_bytes() == ws["samples"].read_bytes()

    def test_report_rerun_is_byte_identical(self, ws):
        out = ws["root"] / "report_again"
        run_ok([
            "report", "--model", str(ws["model"]), "--N", "5", "--seed", "7",
            "--out", str(out),
            "--config", write_cfg(ws["root"] / "report2.json", REPORT_CFG),
        ])
        for artifact in sorted(p.name for p in ws["report"].iterdir()):
            assert (out / artifact).read_bytes() == (ws["report"] / artifact).read_bytes(), artifact

    def test_env_seed_overrides_the_flag(self, ws):
        out = ws["root"] / "samples_env.json"
        run_ok(
            [
                "sample", "--model", str(ws["model"]), "--schedule", str(ws["sched"]),
                "--quant-pack", str(ws["pack"]), "--corrections", str(ws["corr"]),
                "--seed", "9", "--out", str(out),
                "--config", write_cfg(ws["root"] / "sample3.json", SAMPLE_CFG),
            ],
            env={"CQ_SEED": "7"},
        )
        assert json.loads(out.read_text())["seed"] == 7
        assert out.read_bytes() == ws["samples"].read_bytes()

    def test_malformed_env_seed_rejected(self, ws):
        result = invoke(
            ["sample", "--model", str(ws["model"]), "--out",
             str(ws["root"] / "x.json")],
            env={"CQ_SEED": "lucky"},
        )
        assert result.exit_code == 2


class TestExitCodes:
    def test_missing_input_exits_2(self, ws):
        result = invoke(["sample", "--model", str(ws["root"] / "nope.bin"),
                         "--out", str(ws["root"] / "x.json")])
        assert result.exit_code == 2
        assert "missing input" in result.output

    def test_corrections_without_schedule_exit_2(self, ws):
        result = invoke([
            "sample", "--model", str(ws["model"]),
            "--corrections", str(ws["corr"]),
            "--out", str(ws["root"] / "x.json"),
        ])
        assert result.exit_code == 2
        assert "corrections require a cache schedule" in result.output

    def test_stale_corrections_exit_3(self, ws):
        result = invoke([
            "sample", "--model", str(ws["model"]), "--schedule", str(ws["uniform"]),
            "--corrections", str(ws["corr"]),
            "--out", str(ws["root"] / "x.json"),
        ])
        assert result.exit_code == 3

    def test_corrupt_trajectory_exits_4(self, ws):
        bad = ws["root"] / "bad.traj"
        raw = bytearray(ws["traj"].read_bytes())
        raw[0] ^= 0xFF
        bad.write_bytes(bytes(raw))
        result = invoke(["schedule", "--trajectory", str(bad), "--N", "5",
                         "--out", str(ws["root"] / "x.json")])
        assert result.exit_code == 4

    def test_corrupt_model_exits_4(self, ws):
        bad = ws["root"] / "bad.bin"
        raw = bytearray(ws["model"].read_bytes())
        raw[0] ^= 0xFF
        bad.write_bytes(bytes(raw))
        result = invoke(["sample", "--model", str(bad),
                         "--out", str(ws["root"] / "x.json")])
        assert result.exit_code == 4

    def test_step_count_mismatch_is_a_usage_error(self, ws):
        result = invoke(["schedule", "--trajectory", str(ws["traj"]), "--N", "5",
                         "--T", "50", "--out", str(ws["root"] / "x.json")])
        assert result.exit_code == 2
        assert "does not match" in result.output
