from __future__ import annotations

import json

import pytest

from moa_gossip.run_experiment import (
    EXIT_ABORTED,
    EXIT_GROWING,
    EXIT_OK,
    EXIT_USAGE,
    main,
)

SIM_CONFIG = """
n: 4
k: 1
M: 1
lambda: 0.05
alpha: 1.0
horizon: 500
seed: 3
"""

OVERLOAD_CONFIG = """
n: 10
k: 2
M: 2
lambda: 0.5
alpha: 1.0
horizon: 2000
seed: 1
"""


def _error_lines(text: str):
    return [line for line in text.splitlines() if line.startswith("error[")]


class TestStability:
    def test_unstable_table_configuration(self, capsys):
        code = main(["stability", "--n", "10", "--k", "2", "--M", "2", "--lambda", "0.25", "--alpha", "1"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "utilization  1.75" in out
        assert "stable       no" in out
        assert "max_lambda   0.142857" in out

    def test_heterogeneous_alpha_list(self, capsys):
        code = main(["stability", "--n", "4", "--k", "1", "--M", "1", "--lambda", "0.02", "--alpha", "1,2,4,1"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "utilization  0.24" in out
        assert "stable       yes" in out

    def test_k_out_of_range_is_a_single_line_error(self, capsys):
        code = main(["stability", "--n", "4", "--k", "5", "--M", "1", "--lambda", "0.1", "--alpha", "1"])
        errors = _error_lines(capsys.readouterr().err)
        assert code == EXIT_USAGE
        assert len(errors) == 1
        assert errors[0].startswith("error[configuration] k:")

    def test_missing_argument(self, capsys):
        code = main(["stability", "--n", "4"])
        errors = _error_lines(capsys.readouterr().err)
        assert code == EXIT_USAGE
        assert errors[0].startswith("error[usage]")


class TestSimulate:
    def test_csv_output_is_reproducible(self, write_config, tmp_path):
        config = write_config(SIM_CONFIG)
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["simulate", "--config", str(config), "--format", "csv", "--out", str(first)]) == EXIT_OK
        assert main(["simulate", "--config", str(config), "--format", "csv", "--out", str(second)]) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()
        header, row = first.read_text(encoding="utf-8").splitlines()
        assert header.startswith("M,k,lambda,alpha,utilization")
        assert row.startswith("1,1,0.05,1.0,")

    def test_trace_and_replications(self, write_config, tmp_path):
        config = write_config(SIM_CONFIG)
        trace = tmp_path / "trace.jsonl"
        out = tmp_path / "out.jsonl"
        code = main(
            [
                "simulate", "--config", str(config), "--format", "records",
                "--replications", "3", "--trace", str(trace), "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        record = json.loads(out.read_text(encoding="utf-8"))
        assert [r["seed"] for r in record["replications"]] == [3, 4, 5]
        assert record["avg_queue_size_se"] is not None
        first_event = json.loads(trace.read_text(encoding="utf-8").splitlines()[0])
        assert first_event["kind"] == "arrival"

    def test_seed_override(self, write_config, tmp_path):
        config = write_config(SIM_CONFIG)
        out = tmp_path / "out.jsonl"
        main(["simulate", "--config", str(config), "--format", "records", "--seed", "11", "--out", str(out)])
        assert json.loads(out.read_text(encoding="utf-8"))["replications"][0]["seed"] == 11

    def test_overloaded_run_exits_growing(self, write_config, tmp_path):
        config = write_config(OVERLOAD_CONFIG)
        assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "o.txt")]) == EXIT_GROWING

    def test_guard_abort_exit_code(self, write_config, tmp_path):
        config = write_config(OVERLOAD_CONFIG + "queue_guard: 100\n")
        assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "o.txt")]) == EXIT_ABORTED

    def test_missing_config(self, tmp_path, capsys):
        code = main(["simulate", "--config", str(tmp_path / "absent.yaml")])
        errors = _error_lines(capsys.readouterr().err)
        assert code == EXIT_USAGE
        assert errors[0].startswith("error[configuration] config:")

    def test_live_config_rejected_by_simulate(self, write_config, capsys):
        config = write_config(SIM_CONFIG + "mode: live\n")
        assert main(["simulate", "--config", str(config)]) == EXIT_USAGE
        assert _error_lines(capsys.readouterr().err)[0].startswith("error[configuration] mode:")


class TestSweep:
    def test_grid_from_command_line(self, write_config, capsys):
        config = write_config(SIM_CONFIG)
        code = main(["sweep", "--config", str(config), "--grid", "0:0,1:1,2:2"])
        lines = capsys.readouterr().out.splitlines()
        assert code == EXIT_OK
        assert lines[0] == (
            "M,k,lambda,alpha,utilization,stable_theory,mean_latency,mean_latency_se,"
            "avg_queue_size,avg_queue_size_se,verdict,error"
        )
        assert [line.split(",")[:2] for line in lines[1:]] == [["0", "0"], ["1", "1"], ["2", "2"]]

    def test_grid_section_in_config(self, write_config, capsys):
        config = write_config(SIM_CONFIG + "sweep:\n  - {M: 0, k: 0}\n  - {M: 1, k: 2, lambda: 0.01}\n")
        assert main(["sweep", "--config", str(config)]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[2].startswith("1,2,0.01,")

    def test_invalid_grid_point(self, write_config, capsys):
        config = write_config(SIM_CONFIG)
        assert main(["sweep", "--config", str(config), "--grid", "1:7"]) == EXIT_USAGE
        assert _error_lines(capsys.readouterr().err)[0].startswith("error[configuration] grid[M=1,k=7].k:")

    def test_grid_required(self, write_config):
        config = write_config(SIM_CONFIG)
        assert main(["sweep", "--config", str(config)]) == EXIT_USAGE


def test_live_command_against_fixture(fixture_server, write_config, tmp_path):
    config = write_config(
        "mode: live\nn: 2\nk: 1\nM: 1\nlambda: 0.1\nalpha: 1.0\n"
        f"backend: {{kind: http, base_url: '{fixture_server.base_url}', model: fixture-model}}\n"
        "live: {health_check: false}\n"
    )
    prompts = tmp_path / "prompts.jsonl"
    prompts.write_text('{"origin": 0, "text": "What is 2+2?"}\n', encoding="utf-8")
    out = tmp_path / "live.jsonl"
    code = main(["live", "--config", str(config), "--prompts", str(prompts), "--out", str(out)])
    assert code == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert json.loads(lines[0])["response"] == "fixture completion"
    assert json.loads(lines[-1])["completed"] == 1
    assert len(fixture_server.chat_requests()) == 3


@pytest.mark.parametrize("argv", [["live", "--config"], ["unknown"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
