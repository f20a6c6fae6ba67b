import csv
import io
import json
from pathlib import Path

import pytest

from betagnn.attacks import read_diff
from betagnn.cli import main
from betagnn.datasets import load_dataset
from betagnn.graph import apply_edge_diff

FIXTURE = str(Path(__file__).parent / "data" / "fixture150")


def _csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_gen_sbm_writes_loadable_dataset(tmp_path, capsys):
    assert main(["gen-sbm", "--n", "80", "--classes", "2", "--feature-dim", "4", "--seed", "3",
                 "--out", str(tmp_path / "d")]) == 0
    row = _csv(capsys.readouterr().out)[0]
    ds = load_dataset(tmp_path / "d")
    assert int(row["n_nodes"]) == 80 and int(row["n_edges"]) == ds.graph.n_edges


def test_config_file_supplies_options(tmp_path, capsys):
    cfg = tmp_path / "sbm.toml"
    cfg.write_text('n = 60\nclasses = 3\np-in = 0.2\nfeature_dim = 4\n')
    assert main(["gen-sbm", "--config", str(cfg), "--classes", "2", "--out", str(tmp_path / "d")]) == 0
    ds = load_dataset(tmp_path / "d")
    assert ds.graph.n_nodes == 60 and ds.n_classes == 2 and ds.features.shape[1] == 4
    cfg.write_text("nodes = 60\n")
    assert main(["gen-sbm", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 1
    assert "unknown key" in json.loads(capsys.readouterr().err)["message"]


def test_attack_writes_replayable_diff(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["attack", "--data", FIXTURE, "--kind", "random", "--budget", "12", "--seed", "4",
                 "--out", str(out)]) == 0
    row = _csv(capsys.readouterr().out)[0]
    assert int(row["added"]) + int(row["removed"]) == 12
    diff, header = read_diff(out / "attack.diff")
    assert header == {"kind": "random", "seed": "4", "budget": "12", "flips": "12"}
    clean, poisoned = load_dataset(FIXTURE), load_dataset(out)
    assert apply_edge_diff(clean.graph, diff).same_as(poisoned.graph)


def test_targeted_attack_from_cli(tmp_path, capsys):
    assert main(["attack", "--data", FIXTURE, "--kind", "greedy", "--budget", "2", "--targets", "3,90",
                 "--out", str(tmp_path / "t")]) == 0
    diff, _ = read_diff(tmp_path / "t" / "attack.diff")
    assert diff.touching(3) <= 2 and diff.touching(90) <= 2


@pytest.mark.parametrize("method, extra", [("jaccard", ["--tau", "0.3"]), ("svd", ["--k", "6"])])
def test_defend(tmp_path, capsys, method, extra):
    assert main(["defend", "--data", FIXTURE, "--method", method, *extra, "--out", str(tmp_path / "c")]) == 0
    row = _csv(capsys.readouterr().out)[0]
    assert int(row["edges_after"]) == load_dataset(tmp_path / "c").graph.n_edges


def test_train_outputs(tmp_path, capsys):
    out = tmp_path / "m"
    assert main(["train", "--data", FIXTURE, "--model", "beta-gcn", "--epochs", "10", "--hidden", "8",
                 "--out", str(out)]) == 0
    row = _csv(capsys.readouterr().out)[0]
    assert 0.0 <= float(row["test_acc"]) <= 1.0 and 0.0 < float(row["final_beta"]) < 1.0
    assert (out / "trajectory.csv").exists() and (out / "model.ckpt").exists()


def test_run_and_summarize(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(f'dataset_path = "{FIXTURE}"\nmodel = "gcn"\nattack = "heterophily"\n'
                   'attack_budget_frac = 0.1\nepochs = 5\nhidden = 8\nn_seeds = 2\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    printed = _csv(capsys.readouterr().out)
    assert printed[0]["model"] == "gcn" and printed[0]["n_ok"] == "2"
    assert main(["summarize", "--results", str(tmp_path / "r"), "--out", str(tmp_path / "s")]) == 0
    assert _csv(capsys.readouterr().out) == printed
    assert (tmp_path / "s" / "summary.csv").exists()


def test_errors_are_machine_readable(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--model", "gcn", "--out", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "DatasetFormatError" and "meta.json" in err["message"]
    assert main(["attack", "--data", FIXTURE, "--kind", "grad", "--out", str(tmp_path)]) == 1
    assert "--budget" in json.loads(capsys.readouterr().err)["message"]
    assert main(["summarize", "--results", str(tmp_path / "nothing")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--format", "json"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main([])
