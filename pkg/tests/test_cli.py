import csv
import json
import os
import subprocess
import sys

import pytest

from bnfair.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from bnfair.pipeline import ConfigError, ExperimentConfig, run_experiment

TINY = {
    "dataset": {"n_train": 512, "n_test": 256, "feature_dim": 8, "latent_dim": 4,
                "marginals": [0.2, 0.4, 0.5], "names": ["x", "y", "z"]},
    "backbone": {"input_dim": 8, "width": 8, "embedding_dim": 8,
                 "blocks": [{"width": 8, "skip_kind": "Projection"}, {"width": 8}]},
    "pretrain": {"epochs": 1, "batch_size": 128, "proj_dim": 4},
    "finetune": {"epochs": 2, "batch_size": 128},
    "seeds": {"data": 1, "init": 2, "pretrain": 3, "finetune": 4, "search": 5},
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="dataset"):
        ExperimentConfig.from_dict({"dataset": {"rows": 5}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"colour": "blue"})


def test_semantic_errors_are_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"backbone": {"embedding_dim": 7}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"dataset": {"marginals": [0.2, 0.3], "names": ["a"]}})


def test_config_roundtrip():
    cfg = ExperimentConfig.from_dict(TINY)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert cfg.with_seed(9).seeds == dict.fromkeys(["data", "init", "pretrain", "finetune",
                                                    "search"], 9)


def test_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, {"nope": 1}, "bad.json")
    assert main(["run", "--config", bad, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["finetune", "--policy", "Partial", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    good = _write(tmp_path, TINY)
    assert main(["finetune", "--config", good, "--out", str(tmp_path / "o")]) == EXIT_STAGE
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_schema_and_count_params(capsys):
    assert main(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert schema["additionalProperties"] is False
    assert main(["count-params"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "BNStatsSkip" in out and "12.118%" in out and "0.347%" in out


def test_stepwise_commands(tmp_path, capsys):
    cfg = _write(tmp_path, dict(TINY, policies=["Frozen", "BNStats"]))
    out = str(tmp_path / "o")
    for cmd in ("synth", "pretrain", "finetune", "evaluate", "report"):
        assert main([cmd, "--config", cfg, "--out", out]) == EXIT_OK, cmd
    rows = list(csv.reader(open(os.path.join(out, "table.csv"))))
    assert [r[1] for r in rows[2:]] == ["SSL (Frozen)", "SSL (BN Stats)"] * 2
    for f in ("distribution.svg", "params.svg", "distribution_values.csv",
              "distribution_summary.csv", "comparison.json", "pretrain.ckpt"):
        assert os.path.exists(os.path.join(out, f)), f


def test_single_policy_run(tmp_path):
    cfg = ExperimentConfig.from_dict(dict(TINY, policies=["Frozen"]))
    comparison, summary = run_experiment(cfg, str(tmp_path / "o"))
    assert summary["policies"] == ["Frozen"]
    rows = list(csv.reader(open(tmp_path / "o" / "table.csv")))
    assert len(rows) == 4
    assert summary["num_cells"] == 6


def test_rerun_is_byte_identical_and_isolated(tmp_path):
    cfg = ExperimentConfig.from_dict(dict(TINY, policies=["Frozen", "FullFT"]))
    run_experiment(cfg, str(tmp_path / "a"))
    first = _tree(tmp_path / "a")
    run_experiment(cfg, str(tmp_path / "b"))
    assert _tree(tmp_path / "b") == first
    import shutil
    shutil.rmtree(tmp_path / "a")
    run_experiment(cfg, str(tmp_path / "a"))
    assert _tree(tmp_path / "a") == first


def test_search_command(tmp_path, capsys):
    tiny = dict(TINY, policies=["BNStats"],
                search={"trials": 3, "epochs_range": [1, 2], "enabled": True})
    cfg = _write(tmp_path, tiny)
    out = str(tmp_path / "o")
    assert main(["run", "--config", cfg, "--out", out]) == EXIT_OK
    record = json.load(open(os.path.join(out, "search", "BNStats.json")))
    assert len(record["trials"]) == 3
    assert record["best_score"] >= record["trials"][0]["score"]


def test_external_data(tmp_path):
    from bnfair.data import DatasetSpec, generate_dataset, save_dataset
    spec = DatasetSpec(**{k: v for k, v in TINY["dataset"].items()}, seed=8)
    train, test = generate_dataset(spec)
    paths = {}
    for name, ds in (("train", train), ("test", test)):
        paths[f"{name}_features"] = str(tmp_path / f"{name}.bin")
        paths[f"{name}_attributes"] = str(tmp_path / f"{name}.csv")
        save_dataset(ds, paths[f"{name}_features"], paths[f"{name}_attributes"])
    cfg = ExperimentConfig.from_dict(dict(TINY, dataset={"external": paths}, policies=["Frozen"]))
    _, summary = run_experiment(cfg, str(tmp_path / "o"))
    assert summary["num_attributes"] == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bnfair", "count-params", "--arch", "desk"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "desk-backbone" in res.stdout
