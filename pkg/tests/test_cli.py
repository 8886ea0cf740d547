import json
import subprocess
import sys

import numpy as np
import pytest

from imf.cli import RunConfig, compare_known, main, resolve_config, UsageError
from imf.data import Vocab, load_dataset, load_features, write_feature_file, write_triples
from imf.model import IMFModel
from imf.synthetic import make_synthetic_kg, write_synthetic


@pytest.fixture(scope="module")
def raw(tmp_path_factory):
    d = tmp_path_factory.mktemp("raw")
    kg = make_synthetic_kg(num_entities=12, seed=2, groups=3, joint_groups=2, heads_per_relation=6, noise_dims=2)
    paths = write_synthetic(kg, d)
    return d, paths, kg


@pytest.fixture(scope="module")
def prepared(raw, tmp_path_factory):
    d, paths, _ = raw
    out = tmp_path_factory.mktemp("prepared")
    code = main(["prepare", "--dataset", str(d), "--out", str(out),
                 "--features-struct", str(paths["s"]), "--features-visual", str(paths["v"]),
                 "--features-text", str(paths["t"])])
    assert code == 0
    return out


def _train(prepared, out, *extra):
    return main(["train", "--dataset", str(prepared), "--out", str(out), "--dim", "6", "--rel-dim", "3",
                 "--epochs", "3", "--batch", "16", "--lr", "0.01", *extra])


@pytest.fixture(scope="module")
def trained(prepared, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert _train(prepared, out) == 0
    return out


# prepare ---------------------------------------------------------------------


def test_prepare_writes_indexed_dataset(prepared, raw):
    _, _, kg = raw
    vocab, store = load_dataset(prepared)
    assert vocab.entities == kg.vocab.entities
    for split in ("train", "valid", "test"):
        np.testing.assert_array_equal(store[split], kg.store[split])
    stats = json.loads((prepared / "stats.json").read_text())
    assert stats == {"entities": 12, "relations": 6, "train": len(kg.store.train),
                     "valid": len(kg.store.valid), "test": len(kg.store.test)}
    for name in ("struct.mmft", "visual.mmft", "text.mmft", "config.json"):
        assert (prepared / name).is_file()


def test_prepare_splits_unsplit_file_70_10_20(tmp_path, capsys):
    lines = [f"e{i}\tr{i % 3}\te{(i * 7 + 1) % 50}\n" for i in range(100)]
    (tmp_path / "raw").mkdir()
    (tmp_path / "raw" / "triples.txt").write_text("".join(lines))
    assert main(["prepare", "--dataset", str(tmp_path / "raw"), "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert "train=70 valid=10 test=20" in capsys.readouterr().out
    _, a = load_dataset(tmp_path / "a")
    assert main(["prepare", "--dataset", str(tmp_path / "raw"), "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    _, b = load_dataset(tmp_path / "b")
    np.testing.assert_array_equal(a.test, b.test)
    assert len(np.unique(np.concatenate([a.train, a.valid, a.test]), axis=0)) == 100


def test_prepare_missing_feature_names_modality(raw, tmp_path, capsys):
    d, paths, _ = raw
    code = main(["prepare", "--dataset", str(d), "--out", str(tmp_path),
                 "--features-struct", str(paths["s"]), "--features-visual", str(tmp_path / "nope.bin")])
    assert code == 1
    err = capsys.readouterr().err
    assert "visual" in err and "nope.bin" in err and "--features-visual" in err


def test_prepare_reports_every_problem(raw, tmp_path, capsys):
    d, _, _ = raw
    code = main(["prepare", "--dataset", str(d), "--out", str(tmp_path),
                 "--features-visual", str(tmp_path / "v.bin"), "--features-text", str(tmp_path / "t.bin")])
    assert code == 1
    err = capsys.readouterr().err
    assert "visual" in err and "textual" in err


def test_prepare_compares_known_dataset(raw, tmp_path, capsys):
    d, _, _ = raw
    assert main(["prepare", "--dataset", str(d), "--out", str(tmp_path), "--name", "FB15K-237"]) == 0
    out = capsys.readouterr().out
    assert "reference sizes for FB15K-237" in out and "14541" in out and "MISMATCH" in out
    stats = {"entities": 14541, "relations": 237, "train": 272115, "valid": 17535, "test": 20466}
    lines = compare_known("fb15k-237", stats)
    assert len(lines) == 6 and all(line.endswith("ok") for line in lines[1:])
    assert compare_known("my-own-graph", stats) == []


# train -----------------------------------------------------------------------


def test_train_smoke_writes_parseable_logs(trained):
    records = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records if r["split"] == "train"] == [1, 2, 3]
    assert all(set(r) == {"epoch", "split", "loss", "MR", "MRR", "H@1", "H@10"} for r in records if r["split"] == "valid")
    config = json.loads((trained / "config.json").read_text())
    assert config["dim"] == 6 and config["epochs"] == 3 and config["command"] == "train"
    assert (trained / "curves.csv").read_text().startswith("epoch,loss,valid_mrr")


def test_train_zero_epochs_saves_initialisation(prepared, tmp_path, raw):
    assert _train(prepared, tmp_path, "--epochs", "0", "--seed", "3") == 0
    meta, params = IMFModel.read_checkpoint(tmp_path / "checkpoint.npz")
    features = {k: load_features(prepared / f, load_dataset(prepared)[0]).matrix
                for k, f in (("s", "struct.mmft"), ("v", "visual.mmft"), ("t", "text.mmft"))}
    fresh = IMFModel(IMFModel.load(tmp_path / "checkpoint.npz", features).config, features, 6, seed=3)
    for name, value in fresh.state_dict().items():
        np.testing.assert_array_equal(params[name], value)


def test_train_is_reproducible_and_config_replays(prepared, trained, tmp_path):
    assert main(["train", "--config", str(trained / "config.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_environment_overrides_config_and_flags_override_environment(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dim": 8, "lr": 0.5, "epochs": 7}))
    c = resolve_config("train", {"epochs": 2}, str(cfg), environ={"IMF_LR": "0.25", "IMF_EPOCHS": "9"})
    assert (c.dim, c.lr, c.epochs) == (8, 0.25, 2)
    with pytest.raises(UsageError):
        resolve_config("train", {}, None, environ={"IMF_DIM": "many"})
    with pytest.raises(UsageError):
        resolve_config("train", {"ablation": "S+X"}, None, environ={})


def test_train_ablation_needs_only_its_features(prepared, tmp_path):
    assert _train(prepared, tmp_path, "--ablation", "S", "--epochs", "1") == 0
    meta, params = IMFModel.read_checkpoint(tmp_path / "checkpoint.npz")
    assert meta["config"]["mode"] == "S" and set(meta["feature_dims"]) == {"s"}
    assert not any(n.startswith("proj_") for n in params)


def test_train_missing_feature_for_ablation(raw, tmp_path, capsys):
    d, _, _ = raw
    prep = tmp_path / "p"
    assert main(["prepare", "--dataset", str(d), "--out", str(prep)]) == 0
    assert _train(prep, tmp_path / "r", "--ablation", "S+V") == 1
    err = capsys.readouterr().err
    assert "structural" in err and "visual" in err and "textual" not in err


# eval ------------------------------------------------------------------------


def test_eval_report_schema_and_rank_dump(trained, raw):
    _, _, kg = raw
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.npz"), "--dump-ranks"]) == 0
    report = json.loads((trained / "test_report.json").read_text())
    assert set(report) == {"head", "tail", "both"}
    assert all(set(v) == {"MR", "MRR", "H@1", "H@10"} for v in report.values())
    rows = (trained / "test_ranks.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["anchor", "relation", "direction", "answer", "rank"]
    assert len(rows) - 1 == 2 * len(kg.store.test)
    assert (trained / "test_report.txt").is_file()
    assert json.loads((trained / "config.json").read_text())["command"] == "train"


def test_eval_checkpoint_mismatch(trained, tmp_path, capsys):
    other = tmp_path / "other"
    kg = make_synthetic_kg(num_entities=10, seed=5, groups=2, joint_groups=2, heads_per_relation=5, noise_dims=2)
    paths = write_synthetic(kg, tmp_path / "raw")
    assert main(["prepare", "--dataset", str(tmp_path / "raw"), "--out", str(other),
                 "--features-struct", str(paths["s"]), "--features-visual", str(paths["v"]),
                 "--features-text", str(paths["t"])]) == 0
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.npz"), "--dataset", str(other),
                 "--out", str(tmp_path / "e")])
    assert code == 1
    assert "checkpoint" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.npz")]) == 1


def test_perfect_model_checkpoint_scores_mrr_one(tmp_path):
    # a 4-cycle with one-hot features: trivially memorisable; test repeats train
    raw = tmp_path / "raw"
    raw.mkdir()
    vocab = Vocab.from_names([f"n{i}" for i in range(4)], ["next"])
    triples = np.array([[i, 0, (i + 1) % 4] for i in range(4)])
    vocab.save(raw)
    for split in ("train", "valid", "test"):
        write_triples(raw / f"{split}.txt", triples, vocab)
    write_feature_file(raw / "s.bin", np.eye(4))
    assert main(["prepare", "--dataset", str(raw), "--out", str(tmp_path / "p"),
                 "--features-struct", str(raw / "s.bin")]) == 0
    assert main(["train", "--dataset", str(tmp_path / "p"), "--out", str(tmp_path / "r"), "--ablation", "S",
                 "--dim", "8", "--rel-dim", "4", "--epochs", "150", "--lr", "0.05", "--batch", "8",
                 "--patience", "1000"]) == 0
    assert main(["eval", "--out", str(tmp_path / "r")]) == 0
    report = json.loads((tmp_path / "r" / "test_report.json").read_text())
    assert report["both"]["MRR"] == 1.0 and report["both"]["MR"] == 1.0


# export ----------------------------------------------------------------------


def test_export_fused_round_trips(trained, tmp_path, prepared):
    out = tmp_path / "m.bin"
    assert main(["export", "--checkpoint", str(trained / "checkpoint.npz"), "--modality", "m",
                 "--output", str(out)]) == 0
    vocab, _ = load_dataset(prepared)
    matrix = load_features(out, vocab, "fused").matrix
    assert matrix.shape == (12, 6)
    features = {k: load_features(prepared / f, vocab).matrix
                for k, f in (("s", "struct.mmft"), ("v", "visual.mmft"), ("t", "text.mmft"))}
    model = IMFModel.load(trained / "checkpoint.npz", features)
    # the file format stores float32
    np.testing.assert_array_equal(matrix, model.entity_matrices()[0]["m"].data.astype(np.float32))
    assert (tmp_path / "m.bin.config.json").is_file()


@pytest.mark.parametrize("relation", ["visual_0", "inverse:visual_0", "3"])
def test_export_contextual(trained, tmp_path, prepared, relation):
    out = tmp_path / "c.bin"
    assert main(["export", "--checkpoint", str(trained / "checkpoint.npz"), "--modality", "contextual",
                 "--relation", relation, "--output", str(out)]) == 0
    vocab, _ = load_dataset(prepared)
    assert load_features(out, vocab, "contextual").matrix.shape == (12, 6)


def test_export_errors(trained, tmp_path, capsys):
    ckpt = str(trained / "checkpoint.npz")
    assert main(["export", "--checkpoint", ckpt, "--modality", "q", "--output", str(tmp_path / "x")]) == 1
    assert "modality" in capsys.readouterr().err
    assert main(["export", "--checkpoint", ckpt, "--modality", "contextual", "--output", str(tmp_path / "x")]) == 1
    assert main(["export", "--checkpoint", ckpt, "--modality", "contextual", "--relation", "99",
                 "--output", str(tmp_path / "x")]) == 1


# process-level behaviour -----------------------------------------------------


def test_exit_codes_via_subprocess(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "imf", *a], capture_output=True, text=True)
    assert run("--help").returncode == 0
    assert run("frobnicate").returncode == 1
    assert run("train", "--epochs", "x").returncode == 1
    assert run("train", "--dataset", str(tmp_path)).returncode == 1


def test_runtime_failure_exits_2(prepared, tmp_path, capsys):
    code = _train(prepared, tmp_path, "--lr", "1e308", "--epochs", "5")
    err = capsys.readouterr().err
    assert code == 2, err
    assert "runtime error" in err and str(tmp_path) in err


def test_run_config_is_serialisable():
    c = RunConfig(command="train", dataset="d")
    assert json.loads(json.dumps(c.__dict__))["dataset"] == "d"
