import json

import numpy as np
import pytest

from oracles import TINY, constant_oracle
from ldlmoe.experts import ConfigError
from ldlmoe.series import SeriesError, TimeSeries, make_windows
from ldlmoe.synth import suite_spec, synth
from ldlmoe.trainer import (TrainConfig, TrainingError, evaluate, held_out, load_checkpoint,
                            params_sha256, prepare, save_checkpoint, train)


def series(seed=0, T=200):
    return [synth(suite_spec(seed, T=T)).as_series()]


def tiny(**kw):
    return TrainConfig(**{"max_epochs": 3, "test_len": 30, "expert": dict(TINY), **kw})


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError):
        TrainConfig(model="pattern_aware", expert={"mode": "discrete"})
    cfg = tiny(seed=5)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_zero_epochs():
    ckpt, rep = train(series(), tiny(max_epochs=0))
    assert rep.train_loss == [] and rep.val_loss == [] and rep.stopped_epoch == 0
    assert rep.test_metrics["rmse"] > 0


def test_deterministic_report():
    a = train(series(), tiny())[1].to_json()
    b = train(series(), tiny())[1].to_json()
    assert a == b


def test_best_params_restored():
    ckpt, rep = train(series(), tiny(max_epochs=6))
    assert rep.best_params_sha256 == params_sha256(ckpt.model.params)
    assert rep.best_val == min(rep.val_loss)
    assert rep.val_loss[rep.best_epoch - 1] == rep.best_val


def test_runs_all_epochs_without_stall():
    _, rep = train(series(), tiny(max_epochs=4, patience=100))
    assert rep.stopped_epoch == 4 and len(rep.train_loss) == 4


def test_early_stopping_respects_patience():
    _, rep = train(series(), tiny(max_epochs=40, patience=1, lr=0.05))
    assert rep.stopped_epoch == len(rep.val_loss)
    if rep.stopped_epoch < 40:
        assert rep.val_loss[-1] >= rep.best_val


@pytest.mark.parametrize("model", ["pattern_aware", "point_lstm"])
def test_other_models_train(model):
    cfg = tiny(model=model, pattern=dict(hidden_dim=3, n_layers=1, head_dim=3, gate_hidden=3))
    ckpt, rep = train(series(), cfg)
    assert np.isfinite(rep.train_loss).all()
    assert (rep.test_metrics["coverage90"] is None) == (model == "point_lstm")


def test_discrete_mode_trains():
    cfg = tiny(expert={**TINY, "mode": "discrete", "n_bins": 12})
    _, rep = train(series(), cfg)
    assert np.isfinite(rep.train_loss).all()
    assert 0 <= rep.test_metrics["coverage90"] <= 1


def test_checkpoint_roundtrip(tmp_path):
    ckpt, rep = train(series(), tiny())
    path = tmp_path / "m.json"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert params_sha256(back.model.params) == params_sha256(ckpt.model.params)
    for k in ckpt.optimizer.m:
        np.testing.assert_array_equal(back.optimizer.m[k], ckpt.optimizer.m[k])
    test = held_out(series(), ckpt.train_config)
    assert evaluate(back, test) == rep.test_metrics
    save_checkpoint(back, tmp_path / "m2.json")
    assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_oracle_evaluates_to_zero():
    ckpt = constant_oracle(3.5)
    ds = make_windows(TimeSeries("c", np.full(40, 3.5)), 10, 5)
    m = evaluate(ckpt, ds)
    assert m["rmse"] == m["mae"] == m["mape"] == 0.0
    assert m["coverage90"] == 1.0


def test_evaluate_errors():
    ckpt = constant_oracle(1.0)
    ds = make_windows(TimeSeries("c", np.ones(40)), 10, 5)
    with pytest.raises(SeriesError):
        evaluate(ckpt, ds.subset([]))
    with pytest.raises(SeriesError):
        evaluate(ckpt, make_windows(TimeSeries("c", np.ones(40)), 10, 6))


def test_non_finite_data_rejected():
    vals = series()[0].values.copy()
    vals[5] = np.nan
    with pytest.raises(SeriesError):
        TimeSeries("s", vals)


def test_nan_loss_aborts_with_diagnostic(monkeypatch):
    import ldlmoe.trainer as tr
    real = tr.composite_loss
    calls = []

    def poisoned(*args, **kw):
        loss, parts, gates = real(*args, **kw)
        calls.append(1)
        if kw.get("training") and len(calls) == 3:
            return loss * np.nan, {**parts, "distance": float("nan")}, gates
        return loss, parts, gates
    monkeypatch.setattr(tr, "composite_loss", poisoned)
    with pytest.raises(TrainingError, match=r"epoch 1, batch 2: distance=nan"):
        train(series(), tiny())


def test_enhancement_runs_once_and_finds_period():
    prep = prepare(series(T=300), tiny())
    assert prep.period == 12
    assert np.all(prep.train_var > 0)


@pytest.mark.slow
def test_train_loss_decreases():
    cfg = TrainConfig(max_epochs=50, patience=50, seed=0,
                      expert=dict(hidden_dim=16, n_layers=1, head_dim=32, gate_hidden=32))
    _, rep = train([synth(suite_spec(0)).as_series()], cfg)
    assert rep.train_loss[49] < rep.train_loss[0]
