import json
import math

import pytest

from fedfed_sim import cli

SMALL = {
    "dataset.num_classes": 3,
    "dataset.dim": 4,
    "dataset.per_class": 20,
    "partition.num_clients": 3,
    "distill.rounds": 1,
    "distill.clients_per_round": 2,
    "distill.generator_hidden": 8,
    "distill.classifier_hidden": 8,
    "federation.rounds": 2,
    "federation.clients_per_round": 2,
    "federation.hidden": 8,
    "experiment.seeds": [3],
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_no_subcommand_prints_help(capsys):
    assert cli.main([]) == cli.EXIT_OK
    assert "usage" in capsys.readouterr().out


def test_overhead(capsys):
    assert cli.main(["overhead", "--clients", "10", "--beta", "0.5"]) == cli.EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["ratio"] == pytest.approx(0.0454, abs=1e-4)
    assert out["percent"] == 4.54


def test_overhead_out_of_domain_is_an_input_error():
    assert cli.main(["overhead", "--clients", "10", "--beta", "0"]) == cli.EXIT_INPUT_ERROR


def test_overhead_takes_gamma_from_the_config(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"experiment.gamma": 0.0}))
    assert cli.main(["overhead", "--clients", "10", "--beta", "0.5", "--config", str(path)]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["ratio"] == pytest.approx(15 / 500)


def test_overhead_from_sizes(capsys):
    argv = ["overhead", "--clients", "10", "--beta", "0.5", "--model-size", "1000", "--data-size", "1400"]
    assert cli.main(argv) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["ratio"] == pytest.approx(0.0454, abs=1e-4)


def test_overhead_sizes_go_together():
    argv = ["overhead", "--clients", "10", "--beta", "0.5", "--model-size", "1000"]
    assert cli.main(argv) == cli.EXIT_INPUT_ERROR


def test_privacy_report(capsys):
    assert cli.main(["privacy", "report", "--sweep", "0.05,0.15"]) == cli.EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["epsilon_single"] == pytest.approx(0.3 * math.sqrt(15 * math.log(1e5)) / math.sqrt(0.15))
    assert [row["sigma_s_sq"] for row in out["sweep"]] == [0.05, 0.15]


def test_bad_config_is_an_input_error(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"distill.rho": 1.5}))
    assert cli.main(["partition-report", "--config", str(path)]) == cli.EXIT_INPUT_ERROR


def test_missing_config_is_an_input_error(tmp_path):
    assert cli.main(["partition-report", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_INPUT_ERROR


def test_partition_report(small_config, capsys):
    assert cli.main(["partition-report", "--config", small_config]) == cli.EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["seed"] == 3
    assert len(out["clients"]) == 3


def test_distill_then_train(small_config, tmp_path, capsys):
    shared = str(tmp_path / "shared.ffd")
    assert cli.main(["distill", "--config", small_config, "--out", shared]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["records"] == 48

    checkpoint = tmp_path / "model.npz"
    args = ["train", "--config", small_config, "--shared", shared, "--checkpoint", str(checkpoint)]
    assert cli.main(args) == cli.EXIT_OK
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [row["round"] for row in rows] == [1, 2]
    assert checkpoint.exists()


def test_attack_mia_needs_inputs(small_config):
    assert cli.main(["attack", "mia", "--config", small_config]) == cli.EXIT_INPUT_ERROR
