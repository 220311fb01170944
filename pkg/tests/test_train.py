import csv

import numpy as np
import pytest
import torch

from semforecast.model import PredictorConfig, collate
from semforecast.scene import GeneratorConfig, generate_synthetic
from semforecast.train import (
    CheckpointError,
    TrainConfig,
    load_checkpoint,
    manifest_for,
    parameter_counts,
    predict,
    read_manifest,
    save_checkpoint,
    train,
)


def _cfg(sc, **kw):
    return PredictorConfig(d_model=16, n_heads=2, n_layers=1, n_decoder_layers=1, ffn_dim=32, n_modes=3,
                           gain_hidden=8, history_len=sc.t0, future_len=sc.future_len, **kw)


@pytest.fixture(scope="module")
def trained(nusc_scenarios):
    return train(nusc_scenarios, None, _cfg(nusc_scenarios[0]), TrainConfig(steps=60, batch_size=4, log_every=10))


def test_loss_descends(trained):
    assert trained.final_loss < trained.initial_loss
    assert [r["step"] for r in trained.log] == [1, 10, 20, 30, 40, 50, 60]


def test_training_is_deterministic(nusc_scenarios, trained):
    again = train(nusc_scenarios, None, _cfg(nusc_scenarios[0]), TrainConfig(steps=60, batch_size=4, log_every=10))
    for (n, a), (_, b) in zip(trained.model.named_parameters(), again.model.named_parameters()):
        assert torch.equal(a, b), n
    assert again.log == trained.log


def test_empty_training_set():
    with pytest.raises(ValueError):
        train([], None, PredictorConfig(), TrainConfig(steps=1))


def test_log_csv(tmp_path, nusc_scenarios):
    path = tmp_path / "log.csv"
    train(nusc_scenarios, None, _cfg(nusc_scenarios[0]), TrainConfig(steps=5, log_every=2), log_path=path,
          log_comment="config_hash=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    rows = list(csv.DictReader(lines[1:]))
    assert list(rows[0]) == ["step", "loss", "grad_norm", "mean_abs_alpha", "mean_abs_alpha_scene"]
    assert [r["step"] for r in rows] == ["1", "2", "4", "5"]


def test_periodic_checkpoints(tmp_path, nusc_scenarios):
    train(nusc_scenarios, None, _cfg(nusc_scenarios[0]), TrainConfig(steps=4, checkpoint_every=2),
          checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000002.ckpt", "step_000004.ckpt"]


def test_checkpoint_round_trip(tmp_path, trained, nusc_scenarios):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.model, path, extra={"variant": "x"})
    model, manifest = load_checkpoint(path)
    assert manifest["extra"] == {"variant": "x"}
    for (n, a), (_, b) in zip(trained.model.named_parameters(), model.named_parameters()):
        assert torch.equal(a, b), n
    batch = collate(nusc_scenarios)
    with torch.no_grad():
        assert torch.equal(trained.model(batch.tensors)["mean"], model(batch.tensors)["mean"])
    # writing the same model twice gives the same bytes
    save_checkpoint(model, tmp_path / "m2.ckpt", extra={"variant": "x"})
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path, trained):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_manifest(bad)


def test_parameter_counts_from_manifest(tmp_path, trained):
    m = save_checkpoint(trained.model, tmp_path / "m.ckpt")
    counts = parameter_counts(m)
    assert counts["total"] == sum(p.numel() for p in trained.model.parameters())
    assert counts == parameter_counts(manifest_for(trained.model))
    assert counts["semantic"] == 58 * 16 + 19 * 16 + 2 * (16 * 8 + 8)


def test_predictions_cover_valid_agents(trained, nusc_scenarios):
    preds = predict(trained.model, collate(nusc_scenarios), nusc_scenarios, k_prime=2)
    n_valid = sum(1 for sc in nusc_scenarios for tr in sc.agents.values() if tr.valid[sc.t0 - 1:].all())
    assert len(preds) == n_valid
    for p in preds:
        assert p.trajs.shape[0] <= 2 and abs(p.probs.sum() - 1) < 1e-9


def test_parked_vehicle_forecast_stays_put():
    cfg = GeneratorConfig(n_scenarios=40, family_mix={"parked_vehicle": 1.0}, agents_min=1, agents_max=1,
                          profile="nusc")
    scs = generate_synthetic(cfg, seed=0)
    res = train(scs, None, _cfg(scs[0]), TrainConfig(steps=300, batch_size=16))
    test = generate_synthetic(GeneratorConfig(n_scenarios=1, family_mix={"parked_vehicle": 1.0}, agents_min=1,
                                              agents_max=1, profile="nusc"), seed=7)
    (p,) = predict(res.model, collate(test), test, k_prime=3, threshold_m=1.0)
    top = p.trajs[int(np.argmax(p.probs))]
    assert np.linalg.norm(top[-1]) < 0.5
