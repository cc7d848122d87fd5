import json

import numpy as np
import pytest

from diffit.harness import DatasetConfig, OptimizerConfig, RunConfig
from diffit.harness.cli import main
from diffit.networks import config_to_dict, toy_image_config, toy_latent_config


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def run_cfg(tmp_path):
    cfg = RunConfig(model=toy_image_config(resolution=8, widths=(8, 16), windows=(4, 0), groups=4, heads=2),
                    optimizer=OptimizerConfig(steps=3, batch_size=4), dataset=DatasetConfig("shapes16", 16, 0),
                    output_dir=str(tmp_path / "run"))
    return cfg.save(tmp_path / "run.json")


def test_train_then_sample_then_attn_dump(capsys, tmp_path, run_cfg):
    code, out, err = _run(capsys, "train", "--config", str(run_cfg), "--steps", "2")
    assert code == 0, err
    res = json.loads(out)
    assert res["steps"] == 2 and (tmp_path / "run/loss.csv").exists()
    ckpt = res["checkpoint"]

    code, out, err = _run(capsys, "sample", "--ckpt", ckpt, "--n", "3", "--steps", "4",
                          "--out", str(tmp_path / "s"))
    assert code == 0, err
    x = np.load(tmp_path / "s/samples.npy")
    assert x.shape == (3, 8, 8, 1)
    assert (tmp_path / "s/grid.pgm").exists() and (tmp_path / "s/sample_0002.pgm").exists()

    code, out, err = _run(capsys, "attn-dump", "--ckpt", ckpt, "--layer", "1", "--steps", "3",
                          "--out", str(tmp_path / "a"))
    assert code == 0, err
    assert json.loads(out)["steps"] == 3
    assert len(list((tmp_path / "a").glob("attn_step_*.pgm"))) == 3


def test_sample_from_config_with_sde(capsys, tmp_path, run_cfg):
    code, out, err = _run(capsys, "sample", "--config", str(run_cfg), "--n", "2", "--steps", "4",
                          "--sampler", "sde", "--beta", "0.2", "--out", str(tmp_path / "o"))
    assert code == 0, err
    assert np.isfinite(np.load(tmp_path / "o/samples.npy")).all()


def test_count_params_and_flops(capsys, tmp_path):
    code, out, _ = _run(capsys, "count-params", "--preset", "latent_xl")
    assert code == 0 and abs(json.loads(out)["total"] / 561e6 - 1) < 0.1
    code, out, _ = _run(capsys, "flops", "--preset", "latent_xl")
    assert code == 0 and abs(json.loads(out)["total"] / 114e9 - 1) < 0.1
    model = tmp_path / "m.json"
    model.write_text(json.dumps(config_to_dict(toy_latent_config())))
    code, out, _ = _run(capsys, "count-params", "--config", str(model), "--depth", "2")
    assert code == 0 and json.loads(out)["total"] > 0


def test_oracle_check(capsys):
    code, out, err = _run(capsys, "oracle-check", "--draws", "2000")
    assert code == 0, err
    assert json.loads(out)["passed"] is True


def _one_error_line(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")
    return lines[0]


@pytest.mark.parametrize("argv,kind,code", [
    ([], "usage", 2),
    (["frobnicate"], "usage", 2),
    (["count-params"], "usage", 2),
    (["sample", "--n", "2"], "usage", 2),
    (["count-params", "--preset", "huge"], "config", 1),
    (["sample", "--ckpt", "/nonexistent/x.ckpt"], "io", 1),
])
def test_error_lines_and_exit_codes(capsys, argv, kind, code):
    got, out, err = _run(capsys, *argv)
    assert got == code and out == ""
    assert _one_error_line(err).startswith(f"error: {kind}:")


def test_bad_config_and_corrupt_checkpoint(capsys, tmp_path, run_cfg):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {"lr": 1e-3, "momentum": 0.9}}))
    code, _, err = _run(capsys, "train", "--config", str(bad))
    assert code == 1 and "momentum" in _one_error_line(err)

    code, out, _ = _run(capsys, "train", "--config", str(run_cfg), "--steps", "1")
    ckpt = tmp_path / "run/final.ckpt"
    raw = bytearray(ckpt.read_bytes())
    raw[-5] ^= 1
    ckpt.write_bytes(bytes(raw))
    code, _, err = _run(capsys, "sample", "--ckpt", str(ckpt))
    assert code == 1 and _one_error_line(err).startswith("error: checkpoint:")


def test_layer_out_of_range_is_invariant_error(capsys, tmp_path, run_cfg):
    code, _, err = _run(capsys, "attn-dump", "--config", str(run_cfg), "--layer", "99", "--out", str(tmp_path / "z"))
    assert code == 1 and _one_error_line(err).startswith("error: invariant:")


def test_threads_env(capsys, monkeypatch):
    monkeypatch.setenv("DIFFIT_THREADS", "1")
    code, _, _ = _run(capsys, "flops", "--preset", "toy_latent")
    assert code == 0
    monkeypatch.setenv("DIFFIT_THREADS", "zero")
    code, _, err = _run(capsys, "flops", "--preset", "toy_latent")
    assert code == 2 and "DIFFIT_THREADS" in _one_error_line(err)
