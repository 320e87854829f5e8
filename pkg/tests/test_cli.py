import os
import subprocess
import sys

import numpy as np
import pytest

from pcdreid.cli import main
from pcdreid.data import read_ppm

TINY = ["--image-h", "32", "--image-w", "16", "--patch", "8", "--dim", "32", "--depth", "2",
        "--heads", "4", "--epochs", "2", "--p", "4", "--k", "2"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = root / "data", root / "m.pcdn"
    assert main(["synth", "--seed", "7", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--log",
                 str(root / "loss.csv"), *TINY]) == 0
    for split in ("query", "gallery"):
        assert main(["extract", "--ckpt", str(ckpt), "--data", str(data), "--split", split,
                     "--out", str(root / f"{split}.pcdf")]) == 0
    return root


def test_synth_layout(tmp_path, capsys):
    code, _, _ = run(["synth", "--seed", "7", "--ids", "8", "--per-id", "6", "--out", tmp_path], capsys)
    assert code == 0
    assert len(os.listdir(tmp_path / "query")) == 8
    assert sorted(os.listdir(tmp_path)) == ["bounding_box_test", "bounding_box_train", "query"]


def test_k_one_is_a_config_error(pipeline, tmp_path, capsys):
    code, _, err = run(["train", "--data", pipeline / "data", "--out", tmp_path / "m",
                        "--k", "1", "--w-triplet", "1", *TINY[:-4]], capsys)
    assert code == 1
    assert "CONFIG_ERROR" in err and "K_DEGENERATE" in err
    assert not (tmp_path / "m").exists()


@pytest.mark.parametrize("argv", [[], ["train"], ["bogus"], ["eval", "--query", "q"],
                                  ["synth", "--out", "x", "--ids", "many"]])
def test_usage_errors_exit_two(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and err


def test_missing_input_is_a_domain_error(tmp_path, capsys):
    code, _, err = run(["extract", "--ckpt", tmp_path / "none.pcdn", "--data", tmp_path,
                        "--out", tmp_path / "f"], capsys)
    assert code == 1 and err.startswith("error: ")


def test_loss_log_and_eval_report(pipeline, tmp_path, capsys):
    lines = (pipeline / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,ce,triplet,circle,cosface,total" and len(lines) == 3
    out_csv = tmp_path / "report.csv"
    code, out, _ = run(["eval", "--query", pipeline / "query.pcdf", "--gallery",
                        pipeline / "gallery.pcdf", "--out", out_csv], capsys)
    assert code == 0
    rows = [ln.split(",") for ln in out_csv.read_text().splitlines()]
    assert rows[0] == ["metric", "value"]
    assert [r[0] for r in rows[1:]] == ["rank_1", "rank_5", "rank_10", "map", "minp"]
    assert all(0 <= float(r[1]) <= 1 for r in rows[1:])
    assert (tmp_path / "report.txt").read_text() == out


def test_extract_preserves_manifest_order(pipeline):
    manifest = (pipeline / "query.pcdf.manifest").read_text().splitlines()
    names = [ln.split(",", 3)[3] for ln in manifest]
    assert [int(ln.split(",")[0]) for ln in manifest] == list(range(len(manifest)))
    assert names == sorted(names)


@pytest.mark.parametrize("top_k", [3, 100])
def test_retrieve_row_count_and_order(pipeline, capsys, top_k):
    code, out, _ = run(["retrieve", "--query", pipeline / "query.pcdf", "--gallery",
                        pipeline / "gallery.pcdf", "--index", "2", "--top-k", top_k], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "rank,path,similarity,match,pid"
    gallery = len((pipeline / "gallery.pcdf.manifest").read_text().splitlines())
    assert 1 <= len(lines) - 1 <= min(top_k, gallery)
    sims = [float(ln.split(",")[-3]) for ln in lines[1:]]
    assert sims == sorted(sims, reverse=True)


def test_retrieve_bad_index(pipeline, capsys):
    code, _, err = run(["retrieve", "--query", pipeline / "query.pcdf", "--gallery",
                        pipeline / "gallery.pcdf", "--index", "99"], capsys)
    assert code == 1 and "CONFIG_ERROR" in err


def test_explain_writes_csv_and_upscaled_ppm(pipeline, tmp_path, capsys):
    image = sorted((pipeline / "data" / "query").iterdir())[0]
    code, _, _ = run(["explain", "--ckpt", pipeline / "m.pcdn", "--image", image,
                      "--out", tmp_path / "sal"], capsys)
    assert code == 0
    heat = np.loadtxt(tmp_path / "sal.csv", delimiter=",")
    assert heat.shape == (4, 2) and heat.max() == 1.0
    img = read_ppm(tmp_path / "sal.ppm", raw=True)
    assert img.shape == (3, 32, 16)
    assert (img[0] == img[1]).all() and (img[1] == img[2]).all()
    assert (img[0, :8, :8] == img[0, 0, 0]).all()


def test_augment_command_is_seeded(pipeline, tmp_path, capsys):
    image = sorted((pipeline / "data" / "query").iterdir())[0]
    for sub in ("a", "b"):
        assert run(["augment", image, "--out", tmp_path / sub, "--p", "0.8", "--copies", "2",
                    "--seed", "5"], capsys)[0] == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == [f"{image.stem}_aug0.ppm", f"{image.stem}_aug1.ppm"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_config_file_with_command_line_precedence(pipeline, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nepochs = 1\nw-circle = 0\nk = 1\n")
    code, _, err = run(["train", "--config", cfg, "--data", pipeline / "data",
                        "--out", tmp_path / "m", *TINY[:-6]], capsys)
    assert code == 1 and "K_DEGENERATE" in err            # the file's k=1 applies
    code, out, _ = run(["train", "--config", cfg, "--data", pipeline / "data",
                        "--out", tmp_path / "m", *TINY[:-6], "--k", "2"], capsys)
    assert code == 0
    assert len(out.splitlines()) == 2                      # header plus one epoch
    cfg.write_text("warp = 9\n")
    code, _, err = run(["train", "--config", cfg, "--data", pipeline / "data",
                        "--out", tmp_path / "m"], capsys)
    assert code == 1 and "warp" in err


def test_seeded_pipeline_is_byte_reproducible(pipeline, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--seed", "7", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "m.pcdn"), "--log",
                 str(tmp_path / "loss.csv"), *TINY]) == 0
    assert main(["extract", "--ckpt", str(tmp_path / "m.pcdn"), "--data", str(data),
                 "--split", "query", "--out", str(tmp_path / "query.pcdf")]) == 0
    for name in ("m.pcdn", "loss.csv", "query.pcdf", "query.pcdf.manifest"):
        a, b = (pipeline / name).read_bytes(), (tmp_path / name).read_bytes()
        if name.endswith("manifest"):
            a, b = a.replace(str(pipeline).encode(), b""), b.replace(str(tmp_path).encode(), b"")
        assert a == b, name


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = run(["gradcheck", "--trials", "1", "--out", tmp_path / "g.csv"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "name,max_rel_error,status"
    assert len(lines) > 30 and all(ln.endswith(",pass") for ln in lines[1:])
    assert (tmp_path / "g.csv").read_text() == out


def test_help_lists_defaults_and_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pcdreid", "train", "--help"],
                         capture_output=True, text=True, check=True)
    flat = " ".join(res.stdout.split())
    assert "--lr0 LR0 initial learning rate (default: 0.008; published setting)" in flat
    assert "(default: 120; published setting)" in flat
    top = subprocess.run([sys.executable, "-m", "pcdreid", "--help"], capture_output=True, text=True)
    for cmd in ("synth", "augment", "train", "extract", "eval", "retrieve", "gradcheck", "explain"):
        assert cmd in top.stdout
