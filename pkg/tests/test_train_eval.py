import math

import numpy as np
import pytest

from catgen import train_eval as te
from catgen.density import ArgmaxFlow
from catgen.diffusion import DiffusionModel


def small(model, **kw):
    base = dict(model=model, n_train=512, n_val=256, epochs=1, batch_size=128, lr=3e-3, T=20,
                hidden=32, depth=1, flow_layers=2, posterior="gumbel", iwbo_samples=20)
    base.update(kw)
    return te.TrainConfig(**base)


@pytest.mark.parametrize("kind", te.MODEL_KINDS)
def test_one_epoch_improves_on_untrained(kind):
    config = small(kind, epochs=3)
    _, val = te.load_data(config)
    before = te.evaluate(te.build_model(config) if kind == "multinomial-diffusion" else _initialized(config), val, "elbo", seed=1)
    ckpt = te.train(config)
    after = te.evaluate(ckpt, val, "elbo", seed=1)
    assert after.nll_nats < before.nll_nats
    assert len(ckpt.losses) == 3 and all(math.isfinite(v) for v in ckpt.losses)


def _initialized(config):
    model = te.build_model(config)
    model.initialize(te.load_data(config)[0][: config.batch_size])
    return model


@pytest.mark.parametrize("kind", te.MODEL_KINDS)
def test_training_is_deterministic(kind, tmp_path):
    config = small(kind, n_train=256)
    a, b = te.train(config), te.train(config)
    assert a.losses == b.losses
    pa, pb = te.model_params(a.model), te.model_params(b.model)
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("kind", te.MODEL_KINDS)
def test_checkpoint_roundtrip_preserves_model(kind, tmp_path):
    ckpt = te.train(small(kind, n_train=256))
    path = tmp_path / "m.ckpt"
    ckpt.save(path)
    back = te.Checkpoint.load(path)
    assert back.config == ckpt.config and back.losses == ckpt.losses
    x = te.load_data(ckpt.config)[1][:50]
    assert te.evaluate(back, x, seed=3).nll_nats == te.evaluate(ckpt, x, seed=3).nll_nats
    back.save(tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_op_name():
    config = small("multinomial-diffusion", n_train=128)
    model = te.build_model(config)
    first = model.parameters()[0]
    first.value = np.full_like(first.value, np.nan)
    with pytest.raises(te.TrainingDiverged, match="op"):
        te.train(config, model=model)


def test_config_text_roundtrip_and_errors(tmp_path):
    config = small("argmax-flow", lr=0.00123, shuffle_patterns=False)
    text = config.to_text()
    assert te.TrainConfig.from_text(text) == config
    assert te.TrainConfig.from_text(text).to_text() == text
    path = tmp_path / "c.txt"
    path.write_text("# comment\nmodel = argmax-flow  # trailing\nT = 7\n")
    assert te.TrainConfig.load(path).T == 7
    with pytest.raises(te.ConfigError, match="unknown key"):
        te.TrainConfig.from_text("learning_rate = 1\n")
    with pytest.raises(te.ConfigError):
        te.TrainConfig.from_text("T = 0\n")
    with pytest.raises(te.ConfigError):
        te.TrainConfig.from_text("model = gan\n")
    with pytest.raises(te.ConfigError):
        te.TrainConfig.from_text("just words\n")
    assert te.TrainConfig(posterior="softplus-threshold").posterior == "softplus"


def test_data_mismatch_rejected():
    config = small("multinomial-diffusion")
    with pytest.raises(te.ConfigError):
        te.train(config, data=(np.zeros((10, 3), dtype=int), np.zeros((2, 3), dtype=int)))
    with pytest.raises(te.ConfigError):
        te.train(config, data=(np.full((10, 2), 9), np.zeros((2, 2), dtype=int)))


def test_uniform_baseline_and_bpd():
    x = np.random.default_rng(0).integers(0, 8, (100, 2))
    report = te.evaluate(te.UniformCategorical(2, 8), x)
    assert report.nll_nats == pytest.approx(2 * math.log(8))
    assert report.bpd == pytest.approx(3.0)
    assert report.se_nats == 0.0
    assert "bpd" in str(report)


def test_eval_validation():
    model = DiffusionModel(2, 4, T=5, hidden=8, depth=1)
    with pytest.raises(ValueError):
        te.evaluate(model, np.zeros((3, 3), dtype=int))
    with pytest.raises(ValueError):
        te.evaluate(model, np.full((3, 2), 4))
    with pytest.raises(ValueError, match="iwbo"):
        te.evaluate(model, np.zeros((3, 2), dtype=int), "iwbo")


def test_iwbo_tighter_than_elbo():
    config = small("argmax-flow", n_train=256)
    ckpt = te.train(config)
    x = te.load_data(config)[1][:100]
    elbo = te.evaluate(ckpt, x, "elbo")
    iw = te.evaluate(ckpt, x, "iwbo", S=50)
    assert iw.nll_nats <= elbo.nll_nats


def test_pmf_outputs(tmp_path):
    x = np.random.default_rng(0).integers(0, 4, (1000, 2))
    grid = te.pmf_report(x, 4)
    assert grid.shape == (4, 4) and grid.sum() == pytest.approx(1.0)
    diff = DiffusionModel(2, 4, T=5, hidden=8, depth=1)
    g = te.pmf_report(diff, n_samples=2000)
    assert g.sum() == pytest.approx(1.0)
    flow = ArgmaxFlow(2, 3, "gumbel", n_layers=1, hidden=8)
    flow.initialize(np.random.default_rng(0).integers(0, 3, (50, 2)))
    fg = te.pmf_report(flow, S=200)
    assert fg.shape == (3, 3) and 0.8 < fg.sum() < 1.2
    te.write_pmf_csv(tmp_path / "p.csv", grid)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert len(rows) == 4 and all(len(r.split(",")) == 4 for r in rows)
    blob = te.pgm_bytes(grid, scale=2)
    assert blob.startswith(b"P5\n8 8\n255\n") and len(blob) == len(b"P5\n8 8\n255\n") + 64


def test_metrics_csv_and_flagging(tmp_path):
    path = tmp_path / "m.csv"
    te.train(small("multinomial-diffusion", n_train=128, epochs=2), metrics_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,split,metric,value" and len(lines) == 3
    assert not te.is_flagged([3.0, 2.9, 2.8, 2.7], 0.05)
    assert te.is_flagged([1.0, 1.0, 5.0], 0.05)
    np.testing.assert_allclose(te.smoothed([1.0, 3.0, 5.0], window=2), [1.0, 2.0, 4.0])


def test_float32_training_runs():
    ckpt = te.train(small("multinomial-diffusion", dtype="float32", n_train=256, T=200))
    assert all(p.dtype == np.float32 for p in ckpt.model.parameters())
    assert all(math.isfinite(v) for v in ckpt.losses)
