import csv
import json

import numpy as np
import pytest

from imf import tensor as T
from imf.model import IMFModel, ModelConfig
from imf.synthetic import make_synthetic_kg
from imf.trainer import TrainConfig, TrainingDiverged, train, training_queries
from conftest import toy_kg


def small_kg():
    return make_synthetic_kg(num_entities=8, seed=3, groups=2, joint_groups=2, heads_per_relation=4, noise_dims=2)


def small_model(kg, mode="S+V+T", seed=0, **kw):
    return IMFModel(ModelConfig(dim=6, rel_dim=3, mode=mode, **kw), kg.features, kg.num_relations, seed=seed)


def test_training_queries_cover_both_directions():
    _, store = toy_kg()
    anchors, rels, answers = training_queries(store, 2)
    assert len(anchors) == len({(h, r) for h, r, _ in store.train}) + len({(t, r) for _, r, t in store.train})
    assert rels.max() >= 2  # head queries use offset ids


def test_zero_epochs_checkpoint_equals_initialisation(tmp_path):
    kg = small_kg()
    model = small_model(kg)
    init = model.state_dict()
    train(model, kg.store, TrainConfig(epochs=0), tmp_path)
    _, saved = IMFModel.read_checkpoint(tmp_path / "checkpoint.npz")
    assert set(saved) == set(init)
    for name, value in init.items():
        np.testing.assert_array_equal(saved[name], value)


def test_loss_halves_on_eight_entity_kg():
    kg = small_kg()
    assert kg.num_entities == 8
    model = small_model(kg)
    store = type(kg.store)(train=kg.store.train)
    result = train(model, store, TrainConfig(epochs=200, batch_size=8, lr=0.01, seed=0))
    assert result.epoch_losses[-1] <= 0.5 * result.initial_loss
    assert all(g > 0 for g in model.gammas().values())


def test_logs_schema_and_curves(tmp_path):
    kg = small_kg()
    result = train(small_model(kg), kg.store, TrainConfig(epochs=4, batch_size=4, lr=0.01, eval_every=2), tmp_path)
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["split"] for r in records] == ["train", "train", "valid", "train", "train", "valid"]
    for r in records:
        if r["split"] == "valid":
            assert set(r) == {"epoch", "split", "loss", "MR", "MRR", "H@1", "H@10"}
    with open(tmp_path / "curves.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
    assert rows[0]["valid_mrr"] == "" and float(rows[1]["valid_mrr"]) == pytest.approx(records[2]["MRR"])
    assert result.best_epoch in (2, 4)


def test_runs_are_deterministic(tmp_path):
    kg = small_kg()
    for name in ("a", "b"):
        train(small_model(kg, seed=1), kg.store, TrainConfig(epochs=3, batch_size=4, lr=0.01, seed=5), tmp_path / name)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_best_validation_parameters_are_kept(tmp_path):
    kg = small_kg()
    model = small_model(kg)
    result = train(model, kg.store, TrainConfig(epochs=6, batch_size=4, lr=0.05), tmp_path)
    meta, saved = IMFModel.read_checkpoint(tmp_path / "checkpoint.npz")
    assert meta["extra"]["epoch"] == result.best_epoch
    for name, p in model.params.items():
        np.testing.assert_array_equal(saved[name], p.data)
    valid_mrrs = [r["MRR"] for r in result.history if r["split"] == "valid"]
    assert result.best_mrr == max(valid_mrrs)


def test_early_stopping():
    kg = small_kg()
    result = train(small_model(kg), kg.store, TrainConfig(epochs=50, batch_size=4, lr=1e-9, patience=2))
    assert len(result.epoch_losses) < 50


class FailingModel(IMFModel):
    """Returns a NaN loss once ``fail_after`` forward passes have run."""

    fail_after = 0
    calls = 0

    def forward(self, batch, params=None):
        out = super().forward(batch, params)
        self.calls += 1
        if self.calls > self.fail_after:
            out.loss = T.constant(np.nan)
        return out


def test_nan_loss_aborts_and_keeps_last_good_checkpoint(tmp_path):
    kg = small_kg()
    model = FailingModel(ModelConfig(dim=6, rel_dim=3), kg.features, kg.num_relations)
    per_epoch = -(-len(training_queries(kg.store, kg.num_relations)[0]) // 16)
    model.fail_after = 1 + 2 * per_epoch  # probe pass plus two clean epochs
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(model, kg.store, TrainConfig(epochs=20, batch_size=16, lr=0.01), tmp_path)
    meta, saved = IMFModel.read_checkpoint(tmp_path / "checkpoint.npz")
    assert 1 <= meta["extra"]["epoch"] <= 2
    assert all(np.all(np.isfinite(v)) for v in saved.values())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
