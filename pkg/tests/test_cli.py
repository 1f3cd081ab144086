import csv
import os

import numpy as np
import pytest

from smoothlab.cli import main
from smoothlab.imagecore import Image, load_image, make_rng, save_image
from smoothlab.network import build_network, model_bytes, save_model
from smoothlab.synthetic import piecewise_scene, write_corpus


@pytest.fixture()
def image(tmp_path):
    path = str(tmp_path / "in.png")
    save_image(piecewise_scene(12, 12, make_rng(3)), path)
    return path


def test_gd_constant_image(tmp_path):
    src = str(tmp_path / "flat.png")
    save_image(Image(np.full((3, 8, 8), 0.4)), src)
    out = str(tmp_path / "out.png")
    assert main(["smooth", "--input", src, "--output", out, "--solver", "gd"]) == 0
    assert np.array_equal(load_image(out).data, load_image(src).data)


def test_gd_writes_trace(image, tmp_path):
    trace = tmp_path / "t.csv"
    cfg = tmp_path / "c.json"
    cfg.write_text('{"gd": {"iterations": 3}, "energy": {"h": 5}}')
    assert main(["smooth", "--input", image, "--output", str(tmp_path / "o.png"), "--config", str(cfg),
                 "--trace", str(trace)]) == 0
    rows = trace.read_text().strip().splitlines()
    assert rows[0] == "iter,total,data,flatten,edge,ms" and len(rows) == 5


def test_cnn_zero_model_is_identity(image, tmp_path):
    model = str(tmp_path / "m.usis")
    save_model(build_network("TOY8"), model)
    out = str(tmp_path / "o.png")
    assert main(["smooth", "--input", image, "--output", out, "--solver", "cnn", "--model", model]) == 0
    assert np.array_equal(load_image(out).data, load_image(image).data)


def test_cnn_needs_model(image, tmp_path):
    assert main(["smooth", "--input", image, "--output", str(tmp_path / "o.png"), "--solver", "cnn"]) == 2


def test_irls_detail_rejected(image, tmp_path, capsys):
    code = main(["smooth", "--input", image, "--output", str(tmp_path / "o.png"), "--solver", "irls",
                 "--preset", "detail"])
    assert code == 2
    assert "detail" in capsys.readouterr().err
    assert not os.path.exists(tmp_path / "o.png")


def test_exit_codes(image, tmp_path):
    assert main(["smooth", "--bogus"]) == 2
    assert main(["smooth", "--input", str(tmp_path / "missing.png"), "--output", str(tmp_path / "o.png")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"energy": {"alpah": 1}}')
    assert main(["smooth", "--input", image, "--output", str(tmp_path / "o.png"), "--config", str(bad)]) == 2
    assert main(["--threads", "0", "smooth", "--input", image, "--output", str(tmp_path / "o.png")]) == 2


def test_solver_failure_exit_code(image, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"gd": {"learning_rate": 1e308, "iterations": 3}, "energy": {"h": 3}}')
    assert main(["smooth", "--input", image, "--output", str(tmp_path / "o.png"), "--config", str(cfg)]) == 4


def test_threads_env_fallback(image, tmp_path, monkeypatch):
    monkeypatch.setenv("SMOOTHLAB_THREADS", "x")
    assert main(["smooth", "--input", image, "--output", str(tmp_path / "o.png")]) == 2


def test_resolved_config_printed(image, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"gd": {"iterations": 1}}')
    main(["smooth", "--input", image, "--output", str(tmp_path / "o.png"), "--config", str(cfg)])
    err = capsys.readouterr().err
    assert '"iterations": 1' in err and '"sigma_s": 7.0' in err


def test_train_eval_precompute(tmp_path, capsys):
    corpus = str(tmp_path / "corpus")
    write_corpus(corpus, 2, 12, seed=4)
    ck = str(tmp_path / "ck")
    assert main(["train", "--corpus", corpus, "--out", ck, "--epochs", "0"]) == 0
    assert model_bytes(build_network("TOY8", seed=0)) == open(os.path.join(ck, "latest.usis"), "rb").read()
    assert main(["precompute", "--corpus", corpus]) == 0
    assert "2 cache hits" in capsys.readouterr().out
    table = str(tmp_path / "eval.csv")
    assert main(["eval", "--model", os.path.join(ck, "final.usis"), "--images", corpus, "--out", table]) == 0
    with open(table) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(float(r["data"]) == 0.0 for r in rows)
    os.makedirs(tmp_path / "empty")
    assert main(["eval", "--model", os.path.join(ck, "final.usis"), "--images", str(tmp_path / "empty")]) == 2


def test_compare_solvers(tmp_path):
    images = str(tmp_path / "imgs")
    write_corpus(images, 1, 8, seed=6)
    cfg = tmp_path / "c.json"
    cfg.write_text('{"gd": {"iterations": 5}, "irls": {"outer_iterations": 2}, "energy": {"h": 3}}')
    out = tmp_path / "out"
    assert main(["compare-solvers", "--images", images, "--out", str(out), "--config", str(cfg),
                 "--overfit-steps", "2"]) == 0
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 3 - 1
    skipped = (out / "skipped.csv").read_text().strip().splitlines()
    assert skipped[1].startswith("dynamic,irls")
    assert (out / "all_large_gd_img_000.csv").exists()
    os.makedirs(tmp_path / "none")
    assert main(["compare-solvers", "--images", str(tmp_path / "none"), "--out", str(out)]) == 2
