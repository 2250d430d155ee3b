import hashlib
import json

import pytest
import torch

from countlab.cli import EXIT_CONFIG, EXIT_OK, main
from countlab.dataset import read_jsonl
from countlab.model import CountingTransformer, load_checkpoint

from conftest import tiny_config

TRAIN_YAML = """
seed: 3
model: {d_model: 16, n_layers: 2, n_heads: 2, d_mlp: 32}
train:
  batch_size: 4
  steps: 5
  eval_every: 0
  checkpoint_every: 0
  eval_samples_per_cell: 1
  curriculum: text
eval: {samples_per_cell: 1, counts: [1, 2]}
"""


@pytest.fixture
def out_env(tmp_path, monkeypatch):
    monkeypatch.setenv("COUNTLAB_OUT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.glob("*.jsonl"))}


def test_gen_writes_per_count_files_deterministically(tmp_path, out_env, capsys):
    cfg = tmp_path / "d.yaml"
    cfg.write_text("samples_per_cell: 2\norders: [question-first]\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert len(a) == 9 and a == b
    samples = read_jsonl(tmp_path / "a" / "text_monotypic_question-first_general_normal_count4.jsonl")
    assert [s.ground_truth for s in samples] == [4, 4]
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["seed"] == 0 and "config_hash" in run


def test_gen_default_out_uses_env(out_env):
    assert main(["gen"]) == EXIT_OK
    assert len(list((out_env / "gen").glob("*.jsonl"))) == 9


def test_malformed_yaml_exits_2_with_location(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nmodel: [unclosed\n")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line" in err and str(bad) in err


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train: {stepz: 3}\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    assert "stepz" in capsys.readouterr().err


def test_train_zero_steps_saves_initialization(tmp_path, out_env):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TRAIN_YAML)
    assert main(["train", "--config", str(cfg), "--steps", "0"]) == EXIT_OK
    model, header = load_checkpoint(out_env / "train" / "model.ckpt")
    fresh = CountingTransformer(tiny_config(seed=3))
    for (n, a), (_, b) in zip(model.named_weights(), fresh.named_weights()):
        assert torch.equal(a, b), n
    assert json.loads((out_env / "train" / "run.json").read_text())["seed"] == 3


def test_train_eval_default_checkpoint_flags_chance(tmp_path, out_env, capsys):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TRAIN_YAML)
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    ev = tmp_path / "e.yaml"
    ev.write_text("samples_per_cell: 1\ncounts: [1, 5, 9]\n")
    assert main(["eval", "--config", str(ev)]) == EXIT_OK
    assert "near chance" in capsys.readouterr().out
    acc = json.loads((out_env / "eval" / "accuracy.json").read_text())
    assert "flag" in acc and (out_env / "eval" / "accuracy.csv").exists()


def test_eval_missing_checkpoint_exits_2(out_env, capsys):
    assert main(["eval"]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_experiment_list_and_unknown(tiny_checkpoints, capsys):
    assert main(["experiment", "list"]) == EXIT_OK
    listed = capsys.readouterr().out.split()
    assert "continued_counting" in listed and len(listed) >= 10
    assert main(["experiment", "run", "nonsense", "--checkpoint", tiny_checkpoints[0]]) == EXIT_CONFIG
    assert "continued_counting" in capsys.readouterr().err


def test_experiment_run_with_k(tmp_path, tiny_checkpoints, capsys):
    text, vis = tiny_checkpoints
    cfg = tmp_path / "s.yaml"
    cfg.write_text("pair_counts: [2, 3]\norders: [question-first]\n")
    rc = main(["experiment", "run", "continued_counting", "--k", "2", "--n-samples", "1", "--config", str(cfg),
               "--checkpoint", text, "--visual-checkpoint", vis, "--out", str(tmp_path / "x")])
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "x" / "continued_counting" / "report.json").read_text())
    assert rep["config"]["k"] == [2]
    assert (tmp_path / "x" / "continued_counting" / "expected_k2.csv").exists()


def test_patch_and_scope(tmp_path, tiny_checkpoints, capsys):
    text, _ = tiny_checkpoints
    data = tmp_path / "data"
    cfg = tmp_path / "d.yaml"
    cfg.write_text("samples_per_cell: 1\ncounts: [3, 5]\n")
    assert main(["gen", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    tgt = data / "text_monotypic_question-last_general_normal_count3.jsonl"
    src = data / "text_monotypic_question-last_general_normal_count5.jsonl"
    t, s = read_jsonl(tgt)[0], read_jsonl(src)[0]
    spec = tmp_path / "spec.yaml"
    spec.write_text(f"mode: interchange\nfamily: resid_post\nposition_map: [[{s.list_positions[-1]}, {t.list_positions[-1]}]]\n")
    capsys.readouterr()
    assert main(["patch", "--checkpoint", text, "--target", str(tgt), "--source", str(src), "--spec", str(spec),
                 "--out", str(tmp_path / "p")]) == EXIT_OK
    assert "CI" in capsys.readouterr().out
    assert (tmp_path / "p" / "metrics.csv").read_text().count("\n") == 3
    assert main(["scope", "--checkpoint", text, "--source", str(src), "--item", "2", "--out", str(tmp_path / "s")]) == EXIT_OK
    dec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(dec["renormalized"]) == 9 and abs(sum(dec["renormalized"]) - 1) < 1e-6
    assert 1 <= dec["argmax"] <= 9
    assert main(["scope", "--checkpoint", text, "--source", str(src), "--item", "9"]) == EXIT_CONFIG


def test_analyze(tmp_path, tiny_checkpoints, capsys):
    assert main(["analyze", "--checkpoint", tiny_checkpoints[0], "--layer", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "pca_layer1.csv").exists() and (tmp_path / "cosine_layer1.csv").exists()
