import csv
import json

import numpy as np
import pytest

from dqrise.cli import main
from dqrise.demos import hand_states, load_demos
from dqrise.relaxation import ReindexedCodebook


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Run the file-based pipeline once with tiny settings."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"vq_hidden": 16, "denoiser_hidden": 16, "encoder_hidden": 16,
                               "feature_dim": 8, "n_diffusion_steps": 10}))
    steps = [
        ["gen-demos", "--task", "hooklid", "--n", "6", "--seed", "0", "--out", d / "demos.jsonl"],
        ["train-vqvae", "--config", cfg, "--demos", d / "demos.jsonl", "--epochs", "20",
         "--out", d / "vq.json"],
        ["reindex", "--vqvae", d / "vq.json", "--demos", d / "demos.jsonl", "--out", d / "cb.json"],
        ["relabel", "--demos", d / "demos.jsonl", "--codebook", d / "cb.json",
         "--out", d / "rl.jsonl"],
        ["train-policy", "--config", cfg, "--demos", d / "rl.jsonl", "--codebook", d / "cb.json",
         "--variant", "dq-rise", "--epochs", "2", "--out", d / "m.json"],
        ["eval", "--checkpoint", d / "m.json", "--task", "hooklid", "--trials", "3", "--seed", "1",
         "--out", d / "metrics.json"],
        ["export-plot", "--codebook", d / "cb.json", "--demos", d / "demos.jsonl",
         "--out", d / "plot.csv"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return d


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["eval", "--frobnicate"], ["gen-demos", "--task", "x"],
                                  ["gen-demos", "--n", "many"], ["gen-demos"]])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_pipeline_outputs_validate(workdir):
    demos, manifest = load_demos(workdir / "demos.jsonl")
    assert len(demos) == 6 and manifest["seed"] == 0
    rl, m2 = load_demos(workdir / "rl.jsonl")
    assert m2["relabeled"] and rl[0].rank is not None
    cb = ReindexedCodebook.load(workdir / "cb.json")
    assert len(cb.source_model_hash) == 64
    metrics = json.loads((workdir / "metrics.json").read_text())
    (run,) = metrics["runs"]
    assert run["trials"] == 3 and set(run["phases"]) == {"hook", "open"}
    assert run["variant"] == "dq-rise" and run["seed"] == 1


def test_gen_demos_is_byte_identical(workdir, tmp_path):
    out = tmp_path / "again.jsonl"
    assert main(["gen-demos", "--task", "hooklid", "--n", "6", "--seed", "0", "--out", str(out)]) == 0
    assert out.read_bytes() == (workdir / "demos.jsonl").read_bytes()


def test_eval_is_byte_identical(workdir, tmp_path):
    out = tmp_path / "m2.json"
    main(["eval", "--checkpoint", str(workdir / "m.json"), "--task", "hooklid", "--trials", "3",
          "--seed", "1", "--out", str(out)])
    assert out.read_bytes() == (workdir / "metrics.json").read_bytes()


def test_zero_trials_keeps_schema(workdir, tmp_path):
    out = tmp_path / "empty.json"
    assert main(["eval", "--checkpoint", str(workdir / "m.json"), "--trials", "0",
                 "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == {"runs": []}


def test_export_plot_rows(workdir):
    cb = ReindexedCodebook.load(workdir / "cb.json")
    demos, _ = load_demos(workdir / "demos.jsonl")
    H = hand_states(demos)
    with open(workdir / "plot.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["kind", "rank", "pc1", "pc2", "j0", "j1", "j2", "j3", "j4", "j5"]
    codes = sorted((r for r in rows if r["kind"] == "code"), key=lambda r: int(r["rank"]))
    data = [r for r in rows if r["kind"] == "data"]
    assert len(codes) == 16 and len(data) == len(H)
    pc1 = [float(r["pc1"]) for r in codes]
    assert all(a <= b for a, b in zip(pc1, pc1[1:]))
    for r in data[::25]:
        s = np.array([float(r[f"j{i}"]) for i in range(6)])
        exhaustive = int(np.argmin([np.sum((s - c) ** 2) for c in cb.codes]))
        assert int(r["rank"]) == exhaustive


def test_data_errors_exit_two(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format_version": 2}\n')
    assert main(["train-vqvae", "--demos", str(bad), "--out", str(tmp_path / "x.json")]) == 2
    assert main(["eval", "--checkpoint", str(workdir / "demos.jsonl"),
                 "--out", str(tmp_path / "y.json")]) == 2
    assert main(["export-plot", "--codebook", str(workdir / "vq.json"),
                 "--demos", str(workdir / "demos.jsonl"), "--out", str(tmp_path / "p.csv")]) == 2
    assert main(["train-vqvae", "--demos", str(tmp_path / "missing.jsonl"),
                 "--out", str(tmp_path / "x.json")]) == 2


def test_quantized_policy_needs_codebook(workdir, tmp_path):
    assert main(["train-policy", "--demos", str(workdir / "rl.jsonl"), "--variant", "dq-rise",
                 "--out", str(tmp_path / "m.json")]) == 1


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"trials": 7, "seed": 3, "epochs": 11}))
    assert main(["config-dump", "--config", str(cfg), "--seed", "5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["trials"] == 7 and doc["seed"] == 5 and doc["epochs"] == 11
    assert doc["n_demos"] == 50 and doc["vq_epochs"] == 1500
    assert main(["config-dump", "--no-arm-conditioning", "--epochs", "9"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["arm_conditioning"] is False and doc["epochs"] == 9


def test_config_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rat": 0.1}))
    assert main(["config-dump", "--config", str(cfg)]) == 2
    assert "learning_rat" in capsys.readouterr().err


def test_config_dump_defaults(capsys):
    assert main(["config-dump"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["beta"] == 1.67 and doc["gamma"] == 1.67 and doc["learning_rate"] == 3e-4
    assert doc["batch_size"] == 256 and doc["latent_dim"] == 8 and doc["codebook_size"] == 4
