import json

import numpy as np
import pytest

from diffit.checkpoint import load_checkpoint
from diffit.diffusion import VE, SamplerConfig
from diffit.harness import (
    KINDS,
    DatasetConfig,
    OptimizerConfig,
    RunConfig,
    TrainingAborted,
    attention_logit_macs,
    attn_dump,
    collect_attention,
    energy_distance,
    flops,
    make_dataset,
    metrics,
    train,
    train_network,
)
from diffit.harness.images import read_pnm, save_samples, tile, to_uint8, write_image, write_pgm, write_ppm
from diffit.networks import ConfigError, build_network, toy_image_config, toy_latent_config
from diffit.tensor import ContractError, Rng, count_macs, Tensor


# -- datasets

@pytest.mark.parametrize("kind", KINDS)
def test_dataset_shapes_range_and_determinism(kind):
    a = make_dataset(kind, 64, seed=3)
    b = make_dataset(kind, 64, seed=3)
    assert a.data.shape == (64, 16, 16, 1) and a.data.dtype == np.float64
    assert a.data.min() >= -1 and a.data.max() <= 1
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.labels.max() < max(a.num_classes, 1)


def test_dirac_dataset_is_a_point_mass():
    ds = make_dataset("dirac", 10)
    assert np.ptp(ds.data, axis=0).max() == 0
    np.testing.assert_allclose(ds.data.mean(0), ds.expected_mean)


def test_checkerboard_values_are_binary():
    ds = make_dataset("checkerboard16", 20, seed=1)
    assert set(np.unique(ds.data)) <= {-1.0, 1.0}


def test_blobs_mean_matches_expectation():
    ds = make_dataset("gaussian_blobs", 4000, seed=0)
    # per-pixel mean error well inside a CLT bound
    sd = ds.data.std(0)
    assert np.all(np.abs(ds.data.mean(0) - ds.expected_mean) <= 5 * sd / np.sqrt(4000) + 1e-9)


def test_dataset_channels_and_unknown_kind():
    ds = make_dataset("shapes16", 8, resolution=8, channels=3)
    assert ds.data.shape == (8, 8, 8, 3)
    np.testing.assert_array_equal(ds.data[..., 0], ds.data[..., 2])
    with pytest.raises(ContractError):
        make_dataset("mnist", 8)


# -- config

def test_run_config_json_roundtrip(tmp_path):
    cfg = RunConfig(optimizer=OptimizerConfig(steps=7, ema=True), dataset=DatasetConfig("shapes16", 32, 1),
                    sampler=SamplerConfig(kind="sde", steps=20, beta=0.2), seed=4)
    assert RunConfig.from_json(cfg.to_json()) == cfg
    path = cfg.save(tmp_path / "c.json")
    assert RunConfig.load(path) == cfg


@pytest.mark.parametrize("doc", [
    {"colour": 1},
    {"optimizer": {"learning_rate": 1}},
    {"model": {"family": "image", "depth": 3}},
    {"dataset": {"kind": "gaussian_blobs", "n": 3}},
    {"sampler": {"kind": "heun_ode", "order": 2}},
    {"schedule": {"kind": "VE", "tau": 1}},
    {"precision": "float16"},
    {"optimizer": {"lr": -1}},
    {"dataset": {"kind": "cifar10"}},
])
def test_run_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_run_config_rejects_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


# -- metrics

def test_energy_distance_basic_values():
    x = Rng(0).normal((50, 4, 4, 1))
    assert energy_distance(x, x) == pytest.approx(0, abs=1e-9)
    a, b = -np.ones((5, 4, 4, 1)), np.ones((7, 4, 4, 1))
    # 2 E|X-Y| with |X-Y| = 2 sqrt(D)
    assert energy_distance(a, b) == pytest.approx(2 * 2 * np.sqrt(16))
    y = Rng(1).normal((50, 4, 4, 1)) + 0.5
    assert energy_distance(x, y) > energy_distance(x, Rng(2).normal((50, 4, 4, 1)))


def test_metrics_report_and_errors():
    x = Rng(0).normal((20, 2, 2, 1))
    r = metrics(x, x + 1.0)
    assert r.mean_error == pytest.approx(1.0) and r.var_error == pytest.approx(0, abs=1e-12)
    assert r.n_samples == 20 and "energy" in r.as_dict()
    with pytest.raises(ContractError):
        metrics(x[:1], x)
    with pytest.raises(ContractError):
        metrics(np.zeros((0, 2, 2, 1)), x)


# -- images

def test_pnm_roundtrip(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    np.testing.assert_array_equal(read_pnm(write_pgm(tmp_path / "a.pgm", g)), g)
    c = np.arange(36, dtype=np.uint8).reshape(3, 4, 3) * 7
    np.testing.assert_array_equal(read_pnm(write_ppm(tmp_path / "a.ppm", c)), c)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")


def test_to_uint8_tile_and_write_image(tmp_path):
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0, 3.0])), [0, 128, 255, 255])
    grid = tile(np.zeros((5, 4, 4, 1)), pad=1)
    assert grid.shape[:2] == (2 * 5 + 1, 3 * 5 + 1)
    assert [p.suffix for p in write_image(tmp_path / "x", np.zeros((4, 4, 3), np.uint8))] == [".ppm"]
    assert len(write_image(tmp_path / "y", np.zeros((4, 4, 4), np.uint8))) == 4
    files = save_samples(tmp_path / "s", np.zeros((3, 4, 4, 1)))
    assert len(files) == 4 and all(f.exists() for f in files)


# -- flops

@pytest.mark.parametrize("cfg", [
    toy_image_config(),
    toy_image_config(time_mode="separate_token", block_kind="adaln", bias_mode="none"),
    toy_latent_config(num_classes=3, time_injection="bias"),
    toy_latent_config(block_kind="adaln"),
])
def test_analytic_flops_equal_counted_macs(cfg):
    net = build_network(cfg, Rng(0))
    ch = cfg.in_channels if cfg.family == "image" else cfg.channels
    z = Tensor(np.zeros((1, cfg.resolution, cfg.resolution, ch), dtype=np.float32))
    labels = np.array([0]) if getattr(cfg, "num_classes", 0) else None
    with count_macs() as box:
        net(z, np.array([3.0]), labels)
    assert flops(cfg)["total"] == box[0]


def test_window_logit_ratio_is_exact():
    for h, w in [(16, 8), (32, 4), (8, 2)]:
        full = attention_logit_macs(h, h, 64)
        win = attention_logit_macs(h, h, 64, window=w)
        assert win * h * h == full * w * w
    assert attention_logit_macs(4, 4, 8, extra_keys=1) == 16 * 17 * 8


def test_flops_components_sum_to_total():
    f = flops(toy_image_config())
    assert sum(v for k, v in f.items() if k != "total") == f["total"]


# -- training

def _small_run(tmp_path, **opt):
    cfg = RunConfig(model=toy_image_config(resolution=8, widths=(8, 16), windows=(4, 0), groups=4, heads=2),
                    optimizer=OptimizerConfig(steps=opt.pop("steps", 6), batch_size=4, **opt),
                    dataset=DatasetConfig("shapes16", 32, 0), log_wall_time=False)
    return train(cfg, tmp_path)


def test_train_writes_csv_checkpoints_and_config(tmp_path):
    res = _small_run(tmp_path, checkpoint_every=2, ema=True, ema_decay=0.9)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,ema_loss,wall_ms" and len(lines) == 7
    step, loss, ema_loss, wall = lines[1].split(",")
    assert step == "1" and float(loss) == pytest.approx(float(ema_loss)) and float(wall) == 0
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["final.ckpt", "step_000002.ckpt", "step_000004.ckpt"]
    ck = load_checkpoint(res.checkpoint)
    assert ck.step == 6 and ck.ema is not None and "schedule" in ck.meta
    assert RunConfig.load(tmp_path / "config.json").optimizer.steps == 6
    assert len(res.losses) == 6 and np.all(np.isfinite(res.smoothed))


def test_training_is_deterministic(tmp_path):
    a = _small_run(tmp_path / "a")
    b = _small_run(tmp_path / "b")
    assert (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
    sa, sb = a.network.state_dict(), b.network.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_nan_aborts_with_last_good_checkpoint(tmp_path):
    net = build_network(toy_latent_config(), Rng(0))
    data = Rng(1).normal((16, 8, 8, 4))

    def poison(step, loss, ema_loss):
        if step == 3:
            data[:] = np.nan

    with pytest.raises(TrainingAborted) as info:
        train_network(net, data, None, VE, OptimizerConfig(steps=10, batch_size=4), out_dir=tmp_path,
                      on_step=poison)
    err = info.value
    assert err.step == 4 and err.checkpoint.name == "last_good.ckpt"
    ck = load_checkpoint(err.checkpoint)
    assert ck.step == 3
    assert all(np.isfinite(v).all() for v in ck.network.state_dict().values())


# -- attention traces

@pytest.mark.parametrize("cfg", [toy_image_config(), toy_latent_config()])
def test_attention_trace_every_layer(cfg):
    net = build_network(cfg, Rng(0))
    n_layers = len(net.tmsa_layers())
    for layer in range(n_layers):
        trace = collect_attention(net, VE, SamplerConfig(steps=4), layer)
        assert trace.steps == 4
        for m in trace.maps.values():
            assert abs(m.sum() - 1) <= 1e-6 and m.min() >= 0
    with pytest.raises(ContractError):
        collect_attention(net, VE, SamplerConfig(steps=4), n_layers)


def test_attn_dump_files(tmp_path):
    net = build_network(toy_latent_config(), Rng(0))
    trace = attn_dump(net, VE, SamplerConfig(steps=3), 1, tmp_path)
    rows = (tmp_path / "attention.csv").read_text().splitlines()
    assert rows[0] == "step,row,col,value" and len(rows) == 1 + 3 * 16
    assert sorted(p.name for p in tmp_path.glob("*.pgm")) == [f"attn_step_{i:04d}.pgm" for i in range(3)]
    assert read_pnm(tmp_path / "attn_step_0000.pgm").shape == (4, 4)
    assert trace.samples.shape == (1, 8, 8, 4)
    # network forward restored afterwards
    assert "forward" not in vars(net.tmsa_layers()[1])
    json.dumps({"steps": trace.steps})
