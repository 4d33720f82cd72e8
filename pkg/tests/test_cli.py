import json
import socket
import threading

import pytest

from autolstm.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from autolstm.distributed import make_jobs, replay_result_log, write_jobs
from autolstm.lstm import LstmConfig

from alc_scenarios import INC, params_for
from conftest import small_dataset

SMALL = ["--n", "2", "--k", "4", "--e", "2", "--hidden-units", "4", "--window", "6"]


@pytest.fixture(scope="module")
def synth_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "synth.csv"
    assert main(["gen-synth", "--detectors", "1", "--days", "8", "--seed", "1", "--out", str(path)]) == 0
    return path


def test_policy_table(capsys):
    assert main(["policy", "--n", "2", "--k", "200", "--e", "100", "--alpha", "1", "--beta", "1"]) == 0
    out = capsys.readouterr().out
    assert "662.200" in out and "993.300" in out and "AddLayer" in out


def test_policy_json(capsys):
    assert main(["policy", "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["model"]["n"] == 3 and len(doc["policy"]["states"]) == 15


def test_policy_config_file(tmp_path, capsys):
    cfg = tmp_path / "mdp.conf"
    cfg.write_text("n = 1\nk = 40\ne = 20\nalpha = 1\nepoch_times = 2.0\n")
    assert main(["policy", "--config", str(cfg), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    values = {(s["h"], s["j"]): s["value"] for s in doc["policy"]["states"]}
    assert values[(1, 1)] == pytest.approx(80.0)


def test_usage_errors(capsys):
    assert main(["policy", "--n", "0"]) == EXIT_USAGE
    assert main(["policy", "--n", "6"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["policy", "--format", "yaml"])
    assert err.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == EXIT_USAGE


def test_gen_synth_stdout(capsys):
    assert main(["gen-synth", "--detectors", "1", "--profile", "flat"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "timestamp,detector_id,speed_mph" and len(lines) == 1 + 8 * 288


def test_run(synth_csv, tmp_path, capsys):
    out = tmp_path / "model.json"
    code = main(["run", "--data", str(synth_csv), "--period", "PM", "--out", str(out), *SMALL])
    assert code == EXIT_OK, capsys.readouterr().err
    side = json.loads((tmp_path / "model.alc.json").read_text())
    assert side["dpc"]["period"] == "PM"
    assert side["chosen"]["hidden_layers"] in (1, 2)
    assert json.loads(out.read_text())["config"]["hidden_units"] == 4


def test_run_data_errors(tmp_path, capsys):
    assert main(["run", "--data", str(tmp_path / "missing.csv")]) == EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,detector_id,speed_mph\n2017-10-16T04:00:00,a,0\n")
    assert main(["run", "--data", str(bad)]) == EXIT_DATA
    assert "line 2" in capsys.readouterr().err


def test_calibrate(capsys):
    assert main(["calibrate", "--n", "2", "--hidden-units", "4"]) == 0
    times = json.loads(capsys.readouterr().out)
    assert set(times) == {"1", "2"} and all(t > 0 for t in times.values())


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_coordinator_worker_report(tmp_path, capsys):
    datasets = {ds.dpc: ds for ds in (small_dataset(i, f"d{i}", "AM") for i in range(2))}
    params = params_for(1, 2, 2, INC)
    params.lstm = LstmConfig(hidden_units=3, window_len=4)
    jobs_path = tmp_path / "jobs.jsonl"
    write_jobs(make_jobs(datasets, params), jobs_path)
    log = tmp_path / "results.jsonl"
    port = free_port()
    codes = {}
    coord = threading.Thread(target=lambda: codes.setdefault("coord", main(
        ["coordinator", "--listen", f"127.0.0.1:{port}", "--jobs", str(jobs_path),
         "--result-log", str(log), "--deadline", "60"])))
    coord.start()
    assert main(["worker", "--connect", f"127.0.0.1:{port}", "--worker-id", "cli-w"]) == 0
    coord.join(60)
    assert codes["coord"] == 0
    assert len(replay_result_log(log)) == 2
    capsys.readouterr()
    summary = tmp_path / "summary.csv"
    assert main(["report", "--log", str(log), "--csv", str(summary),
                 "--json", str(tmp_path / "r.json")]) == 0
    assert "customized-lstm" in capsys.readouterr().out
    assert summary.read_text().splitlines()[0] == "approach,count,mean_aare,std_aare,max_aare"


def test_report_empty_log(tmp_path):
    log = tmp_path / "empty.jsonl"
    log.write_text("")
    assert main(["report", "--log", str(log)]) == EXIT_DATA


def test_coordinator_expands_csv(synth_csv, tmp_path):
    log = tmp_path / "results.jsonl"
    port = free_port()
    codes = {}
    coord = threading.Thread(target=lambda: codes.setdefault("coord", main(
        ["coordinator", "--listen", f"127.0.0.1:{port}", "--jobs", str(synth_csv),
         "--result-log", str(log), "--deadline", "120", "--run-tag", "csv", *SMALL])))
    coord.start()
    assert main(["worker", "--connect", f"127.0.0.1:{port}"]) == 0
    coord.join(120)
    assert codes["coord"] == 0
    results = replay_result_log(log)
    assert sorted((r.period, r.job_id.endswith("-csv")) for r in results.values()) == [
        ("AM", True), ("PM", True)]
