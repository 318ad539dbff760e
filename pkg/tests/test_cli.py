import json
from pathlib import Path

import numpy as np
import pytest

from conceptmap.cli import main, parse_config_file
from conceptmap.data import read_ppm
from conceptmap.model import patchify
from conceptmap.trainer import load_checkpoint


def run_cli(*argv):
    return main([str(a) for a in argv])


def dir_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert run_cli("gen-data", "--n", 8, "--seed", 7, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run") / "train"
    code = run_cli("train", "--data", dataset_dir, "--out", out,
                   "--epochs", 2, "--batch-size", 4, "--mask-ratio", 0.25)
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("gen-data", "--n", 6, "--seed", 7, "--out", a) == 0
    assert run_cli("gen-data", "--n", 6, "--seed", 7, "--out", b) == 0
    assert dir_bytes(a) == dir_bytes(b)


def test_gen_data_manifest_records_seed(dataset_dir):
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["n"] == 8


def test_gen_data_zero_count_is_usage_error(tmp_path):
    assert run_cli("gen-data", "--n", 0, "--out", tmp_path / "x") == 2


def test_gen_data_refuses_nonempty_dir_without_force(tmp_path):
    out = tmp_path / "ds"
    assert run_cli("gen-data", "--n", 2, "--seed", 1, "--out", out) == 0
    assert run_cli("gen-data", "--n", 2, "--seed", 1, "--out", out) == 2
    assert run_cli("gen-data", "--n", 2, "--seed", 1, "--out", out, "--force") == 0


# ---------------------------------------------------------------------------
# train


def test_train_outputs_and_config_echo(trained_dir):
    for name in ("model.ckpt", "train_log.csv", "bank.txt", "config.txt"):
        assert (trained_dir / name).exists(), name
    echo = (trained_dir / "config.txt").read_text()
    assert "mask_ratio=0.25" in echo
    ckpt = load_checkpoint(trained_dir / "model.ckpt")
    assert ckpt.extra["run_config"]["mask_ratio"] == 0.25


def test_train_invalid_ratio_exits_2(dataset_dir, tmp_path):
    assert run_cli("train", "--data", dataset_dir, "--out", tmp_path / "x",
                   "--mask-ratio", 1.5) == 2


def test_train_rejects_unknown_config_key(dataset_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=1\nnot_a_key=3\n")
    assert run_cli("train", "--data", dataset_dir, "--out", tmp_path / "x",
                   "--config", cfg) == 2


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\nepochs=3\nmask_ratio=0.5  # trailing\n\nlr=0.002\n")
    parsed = parse_config_file(cfg)
    assert parsed == {"epochs": 3, "mask_ratio": 0.5, "lr": 0.002}


def test_train_paper_small_reports_64_patches(tmp_path, capsys):
    data = tmp_path / "ds48"
    assert run_cli("gen-data", "--n", 4, "--seed", 3, "--out", data,
                   "--image-size", 48) == 0
    out = tmp_path / "run48"
    assert run_cli("train", "--data", data, "--out", out, "--preset", "paper-small",
                   "--epochs", 0) == 0
    assert "64 patches" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# reconstruct


def test_reconstruct_zero_ratio_is_passthrough(trained_dir, dataset_dir, tmp_path):
    out = tmp_path / "rec"
    image = dataset_dir / "img_00000.ppm"
    assert run_cli("reconstruct", "--ckpt", trained_dir / "model.ckpt",
                   "--image", image, "--out", out, "--test-mask-ratio", 0.0) == 0
    assert (out / "recon.ppm").read_bytes() == image.read_bytes()


def test_reconstruct_masked_visualization_gray_count(trained_dir, dataset_dir, tmp_path):
    out = tmp_path / "rec75"
    assert run_cli("reconstruct", "--ckpt", trained_dir / "model.ckpt",
                   "--image", dataset_dir / "img_00001.ppm", "--out", out,
                   "--test-mask-ratio", 0.75, "--seed", 3) == 0
    masked = read_ppm(out / "masked.ppm")
    patches = patchify(masked, 6)
    gray = np.full(108, 128 / 255.0)
    count = sum(bool(np.allclose(p, gray, atol=0)) for p in patches)
    assert count == 12  # floor(0.75 * 16)


def test_reconstruct_same_seed_identical_outputs(trained_dir, dataset_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("reconstruct", "--ckpt", trained_dir / "model.ckpt",
                       "--image", dataset_dir / "img_00002.ppm", "--out", out,
                       "--test-mask-ratio", 0.5, "--seed", 9) == 0
    assert dir_bytes(a) == dir_bytes(b)


def test_reconstruct_square_mask_shape(trained_dir, dataset_dir, tmp_path):
    out = tmp_path / "sq"
    assert run_cli("reconstruct", "--ckpt", trained_dir / "model.ckpt",
                   "--image", dataset_dir / "img_00003.ppm", "--out", out,
                   "--test-mask-ratio", 0.25, "--mask-shape", "square") == 0
    masked = read_ppm(out / "masked.ppm")
    patches = patchify(masked, 6)
    gray = np.full(108, 128 / 255.0)
    grayed = {i for i, p in enumerate(patches) if np.allclose(p, gray, atol=0)}
    assert grayed == {5, 6, 9, 10}


def test_reconstruct_geometry_mismatch_exits_3(trained_dir, tmp_path):
    big = tmp_path / "big.ppm"
    big.write_bytes(b"P6\n48 48\n255\n" + bytes(48 * 48 * 3))
    assert run_cli("reconstruct", "--ckpt", trained_dir / "model.ckpt",
                   "--image", big, "--out", tmp_path / "x") == 3


def test_reconstruct_invalid_test_ratio_exits_2(trained_dir, dataset_dir, tmp_path):
    assert run_cli("reconstruct", "--ckpt", trained_dir / "model.ckpt",
                   "--image", dataset_dir / "img_00000.ppm",
                   "--out", tmp_path / "x", "--test-mask-ratio", 1.5) == 2


# ---------------------------------------------------------------------------
# edit


def test_edit_without_set_equals_reconstruct(trained_dir, dataset_dir, tmp_path):
    rec, ed = tmp_path / "rec", tmp_path / "ed"
    image = dataset_dir / "img_00004.ppm"
    assert run_cli("reconstruct", "--ckpt", trained_dir / "model.ckpt",
                   "--image", image, "--out", rec,
                   "--test-mask-ratio", 0.75, "--seed", 4) == 0
    assert run_cli("edit", "--ckpt", trained_dir / "model.ckpt",
                   "--image", image, "--out", ed,
                   "--test-mask-ratio", 0.75, "--seed", 4) == 0
    assert (ed / "edited.ppm").read_bytes() == (rec / "recon.ppm").read_bytes()


def test_edit_applies_concepts(trained_dir, dataset_dir, tmp_path):
    out = tmp_path / "ed2"
    assert run_cli("edit", "--ckpt", trained_dir / "model.ckpt",
                   "--image", dataset_dir / "img_00004.ppm", "--out", out,
                   "--set", "bright_background=pos", "--set", "center_circle=neg",
                   "--test-mask-ratio", 0.75, "--seed", 4) == 0
    assert (out / "edited.ppm").exists()


def test_edit_duplicate_set_is_usage_error(trained_dir, dataset_dir, tmp_path):
    assert run_cli("edit", "--ckpt", trained_dir / "model.ckpt",
                   "--image", dataset_dir / "img_00000.ppm", "--out", tmp_path / "x",
                   "--set", "h_stripes=pos", "--set", "h_stripes=pos") == 2


def test_edit_unknown_concept_lists_bank_names(trained_dir, dataset_dir, tmp_path, capsys):
    code = run_cli("edit", "--ckpt", trained_dir / "model.ckpt",
                   "--image", dataset_dir / "img_00000.ppm", "--out", tmp_path / "x",
                   "--set", "moustache=pos")
    assert code == 2
    assert "bright_background" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval and sweep


def test_eval_writes_reports(trained_dir, dataset_dir, tmp_path):
    out = tmp_path / "eval"
    assert run_cli("eval", "--ckpt", trained_dir / "model.ckpt",
                   "--data", dataset_dir, "--out", out,
                   "--test-mask-ratio", 0.25) == 0
    text = (out / "report.txt").read_text()
    assert "masked_psnr" in text and "fid" not in text.lower()
    csv_text = (out / "report.csv").read_text()
    assert csv_text.splitlines()[0].startswith("test_mask_ratio,accuracy")


def test_sweep_three_ratios(dataset_dir, tmp_path):
    out = tmp_path / "sweep"
    assert run_cli("sweep", "--data", dataset_dir, "--out", out,
                   "--ratios", "0,0.5,0.9", "--epochs", 1, "--batch-size", 4) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split(",")[0] == "ratio"


def test_sweep_bad_ratio_exits_2(dataset_dir, tmp_path):
    assert run_cli("sweep", "--data", dataset_dir, "--out", tmp_path / "x",
                   "--ratios", "0,2.0", "--epochs", 1) == 2
