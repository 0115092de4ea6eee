"""End-to-end exercises of the command-line shell via subprocess."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ssdistill.bundle import read_pnm, save_tree


def run_cli(*argv, env_log="info", check=True):
    import os

    env = dict(os.environ, SSDISTILL_LOG=env_log)
    proc = subprocess.run(
        [sys.executable, "-m", "ssdistill", *map(str, argv)],
        capture_output=True,
        text=True,
        env=env,
    )
    if check and proc.returncode != 0:
        raise AssertionError(
            f"cli failed ({proc.returncode}): {argv}\n{proc.stdout}\n{proc.stderr}"
        )
    return proc


def tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny pass through every command, shared across tests."""
    root = tmp_path_factory.mktemp("pipeline")
    small = ("--depth", 2, "--width", 8, "--dtype", "f32")
    run_cli("gen-data", "--out", root / "data", "--image-size", 8,
            "--n-source", 64, "--n-train", 32, "--n-test", 32, "--seed", 3)
    run_cli("train-target", "--out", root / "tgt", "--data", root / "data/source",
            "--epochs", 2, "--batch-size", 32, "--seed", 1, *small)
    run_cli("embed", "--out", root / "emb", "--model", root / "tgt/model",
            "--data", root / "data/source")
    run_cli("distill", "--out", root / "dst", "--data", root / "data/source",
            "--embeds", root / "emb", "--distilled-size", 8, "--pool-size", 2,
            "--inner-steps-max", 10, "--iterations", 4, "--batch-size", 16,
            "--seed", 0, "--log-every", 2, *small)
    run_cli("pretrain", "--out", root / "pre", "--distilled", root / "dst/distilled",
            "--epochs", 10, "--seed", 0, *small)
    run_cli("finetune", "--out", root / "ft", "--task", root / "data/shapes",
            "--pretrained", root / "pre", "--steps", 20, "--seed", 0, *small)
    return root


def test_pipeline_outputs_exist(pipeline):
    assert (pipeline / "data/source/state.json").is_file()
    assert (pipeline / "tgt/model/backbone/state.json").is_file()
    assert (pipeline / "emb/embeds/manifest.json").is_file()
    assert (pipeline / "dst/distilled/xs/tensor.bin").is_file()
    assert (pipeline / "dst/log.jsonl").is_file()
    assert (pipeline / "pre/extractor/state.json").is_file()
    result = json.loads((pipeline / "ft/result.json").read_text())
    assert 0.0 <= result["accuracy"] <= 1.0


def test_manifest_written_with_resolved_config(pipeline):
    doc = json.loads((pipeline / "dst/manifest.json").read_text())
    assert doc["command"] == "distill"
    assert doc["build"]
    conf = doc["config"]
    # flag values and untouched defaults are both present and concrete
    assert conf["distilled_size"] == 8
    assert conf["meta_lr"] == 1e-3
    assert conf["arch"]["in_shape"] == [3, 8, 8]


def test_gen_data_same_seed_byte_identical(tmp_path):
    for name in ("a", "b"):
        run_cli("gen-data", "--out", tmp_path / name, "--image-size", 8,
                "--n-source", 16, "--n-train", 16, "--n-test", 16, "--seed", 7)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_rerun_from_manifest_reproduces_distillation(pipeline, tmp_path):
    run_cli("distill", "--out", tmp_path / "redo",
            "--config", pipeline / "dst/manifest.json",
            "--data", pipeline / "data/source", "--embeds", pipeline / "emb")
    a = tree_bytes(pipeline / "dst/distilled")
    b = tree_bytes(tmp_path / "redo/distilled")
    assert a == b
    assert (pipeline / "dst/log.jsonl").read_bytes() == (
        tmp_path / "redo/log.jsonl"
    ).read_bytes()


def test_flag_overrides_config_file(tmp_path):
    conf_path = tmp_path / "conf.json"
    conf_path.write_text(json.dumps({"n_source": 64, "image_size": 8, "seed": 2,
                                     "n_train": 16, "n_test": 16}))
    run_cli("gen-data", "--out", tmp_path / "d", "--config", conf_path,
            "--n-source", 16)
    doc = json.loads((tmp_path / "d/manifest.json").read_text())
    assert doc["config"]["n_source"] == 16  # flag wins
    assert doc["config"]["image_size"] == 8  # file wins over default


def test_random_subset_pretrain_and_probe(pipeline, tmp_path):
    run_cli("pretrain", "--out", tmp_path / "pr", "--random-subset", 8,
            "--data", pipeline / "data/source", "--embeds", pipeline / "emb",
            "--epochs", 5, "--seed", 0, "--depth", 2, "--width", 8, "--dtype", "f32")
    run_cli("finetune", "--out", tmp_path / "probe", "--task", pipeline / "data/hues",
            "--pretrained", tmp_path / "pr", "--probe", "--steps", 10, "--seed", 0,
            "--depth", 2, "--width", 8, "--dtype", "f32")
    meta = json.loads((tmp_path / "probe/result.json").read_text())
    assert meta["probe"] is True


def test_scratch_finetune_and_kd(pipeline, tmp_path):
    run_cli("kd", "--out", tmp_path / "kd", "--teacher", pipeline / "ft",
            "--pretrained", pipeline / "pre", "--distilled", pipeline / "dst/distilled",
            "--task", pipeline / "data/shapes", "--epochs", 5, "--seed", 0)
    meta = json.loads((tmp_path / "kd/result.json").read_text())
    assert meta["kl_first"] > 0
    trace = [json.loads(l) for l in (tmp_path / "kd/kl_trace.jsonl").read_text().splitlines()]
    assert len(trace) == 5


def test_bias_demo_report(tmp_path):
    run_cli("bias-demo", "--out", tmp_path / "bd", "--r", 2, "--trials", 300,
            "--seed", 0)
    rep = json.loads((tmp_path / "bd/report.json").read_text())
    assert rep["n_flagged"] >= 1
    assert rep["control_unbiased"] is True
    assert rep["decomp_within_4se"] is True


def test_quiet_mode_silences_stdout(tmp_path):
    proc = run_cli("gen-data", "--out", tmp_path / "q", "--image-size", 8,
                   "--n-source", 16, "--n-train", 16, "--n-test", 16,
                   env_log="quiet")
    assert proc.stdout == ""


def test_version_flag():
    proc = run_cli("--version")
    assert proc.stdout.strip()


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        proc = run_cli("gen-data", "--out", tmp_path / "x", "--image-size", 7,
                       check=False)
        assert proc.returncode == 2

    def test_unknown_config_key_is_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"bogus": 1}')
        proc = run_cli("gen-data", "--out", tmp_path / "x", "--config", bad,
                       check=False)
        assert proc.returncode == 2

    def test_missing_config_file_is_2(self, tmp_path):
        proc = run_cli("gen-data", "--out", tmp_path / "x", "--config",
                       tmp_path / "nope.json", check=False)
        assert proc.returncode == 2

    def test_invalid_json_is_3(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"seed": ')
        proc = run_cli("gen-data", "--out", tmp_path / "x", "--config", bad,
                       check=False)
        assert proc.returncode == 3

    def test_wrong_tree_kind_is_3(self, pipeline, tmp_path):
        proc = run_cli("pretrain", "--out", tmp_path / "x", "--distilled",
                       pipeline / "data/shapes", check=False)
        assert proc.returncode == 3

    def test_divergence_is_4(self, pipeline, tmp_path):
        proc = run_cli("pretrain", "--out", tmp_path / "x", "--distilled",
                       pipeline / "dst/distilled", "--epochs", 5, "--lr", 1e18,
                       "--depth", 2, "--width", 8, "--dtype", "f32", check=False)
        assert proc.returncode == 4

    def test_error_event_names_the_problem(self, tmp_path):
        proc = run_cli("gen-data", "--out", tmp_path / "x", "--image-size", 7,
                       check=False)
        event = json.loads(proc.stdout.strip().splitlines()[-1])
        assert event["event"] == "error"
        assert "image_size" in event["message"]


class TestExportImages:
    def _tree(self, path, rows, shape, mean, std):
        save_tree(path, {"xs": rows.astype(np.float64)},
                  {"mean": list(mean), "std": list(std),
                   "image_shape": list(shape)})

    def test_midgray_bytes(self, tmp_path):
        # normalized zeros with mean .5/std .5 de-normalize to exactly 0.5
        rows = np.zeros((2, 3 * 8 * 8))
        self._tree(tmp_path / "t", rows, (3, 8, 8), [0.5] * 3, [0.5] * 3)
        run_cli("export-images", "--out", tmp_path / "o", "--data", tmp_path / "t")
        img = read_pnm(tmp_path / "o/img_000.ppm")
        assert img.dtype == np.uint8
        assert set(np.unique(img)) <= {127, 128}

    def test_clamps_to_255_and_0(self, tmp_path):
        rows = np.full((1, 3 * 8 * 8), 10.0)
        rows[0, : 3 * 8 * 8 // 2] = -10.0
        self._tree(tmp_path / "t", rows, (3, 8, 8), [0.5] * 3, [0.5] * 3)
        run_cli("export-images", "--out", tmp_path / "o", "--data", tmp_path / "t")
        img = read_pnm(tmp_path / "o/img_000.ppm")
        assert set(np.unique(img)) == {0, 255}

    def test_file_count_matches_rows(self, tmp_path):
        rows = np.zeros((5, 3 * 8 * 8))
        self._tree(tmp_path / "t", rows, (3, 8, 8), [0.0] * 3, [1.0] * 3)
        run_cli("export-images", "--out", tmp_path / "o", "--data", tmp_path / "t")
        assert len(list((tmp_path / "o").glob("img_*.ppm"))) == 5

    def test_single_channel_writes_pgm(self, tmp_path):
        rows = np.zeros((1, 8 * 8))
        self._tree(tmp_path / "t", rows, (1, 8, 8), [0.0], [1.0])
        run_cli("export-images", "--out", tmp_path / "o", "--data", tmp_path / "t")
        img = read_pnm(tmp_path / "o/img_000.pgm")
        assert img.shape == (8, 8)

    def test_bad_channel_count_is_3(self, tmp_path):
        rows = np.zeros((1, 2 * 8 * 8))
        self._tree(tmp_path / "t", rows, (2, 8, 8), [0.0] * 2, [1.0] * 2)
        proc = run_cli("export-images", "--out", tmp_path / "o",
                       "--data", tmp_path / "t", check=False)
        assert proc.returncode == 3

    def test_raw_mode_skips_denormalization(self, tmp_path):
        rows = np.full((1, 3 * 4 * 4), 1.0)
        self._tree(tmp_path / "t", rows, (3, 4, 4), [0.5] * 3, [0.5] * 3)
        run_cli("export-images", "--out", tmp_path / "o", "--data", tmp_path / "t",
                "--raw")
        img = read_pnm(tmp_path / "o/img_000.ppm")
        assert set(np.unique(img)) == {255}
