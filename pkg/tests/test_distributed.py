import random
import socket
import threading
import time

import pytest

from autolstm.distributed import (Coordinator, ResultLog, WorkerCrash, WorkerError, coordinator_serve,
                                  execute_job, make_jobs, parse_address, read_jobs, replay_result_log,
                                  run_sequential, worker_loop, write_jobs)
from autolstm.protocol import Hello, Job, NoMoreJobs, Result, decode_message, encode_message
from autolstm.report import aggregate

from alc_scenarios import INC, params_for
from conftest import SeededTrainer, small_dataset

trainer = SeededTrainer()


def make_specs(count, tag="t"):
    datasets = {}
    for i in range(count):
        ds = small_dataset(seed=i, detector=f"{i // 2:03d}", period="AM" if i % 2 == 0 else "PM")
        datasets[ds.dpc] = ds
    return make_jobs(datasets, params_for(3, 30, 10, INC), run_tag=tag, run_seed=1)


def key(r):
    return r.job_id, r.chosen_config, r.aare, r.trace_digest


def start_workers(coord, count, **kw):
    out = [None] * count

    def run(i):
        try:
            out[i] = worker_loop(coord.address, trainer, f"w{i}", **kw)
        except Exception as exc:  # surfaced by the test through `out`
            out[i] = exc

    threads = [threading.Thread(target=run, args=(i,), daemon=True) for i in range(count)]
    for t in threads:
        t.start()
    return threads, out


def finish(coord, threads, timeout=60):
    assert coord.wait(timeout)
    for t in threads:
        t.join(timeout)
    report = coord.report()
    coord.stop()
    return report


def test_single_job_single_worker():
    jobs = make_specs(1)
    coord = Coordinator(jobs, heartbeat_timeout=5).start()
    threads, stats = start_workers(coord, 1)
    report = finish(coord, threads)
    assert list(report.results) == [jobs[0].job_id]
    assert stats[0].results[0].worker_id == "w0"
    assert key(report.results[jobs[0].job_id]) == key(execute_job(jobs[0], trainer))


def test_many_jobs_three_workers():
    jobs = make_specs(120)
    coord = Coordinator(jobs, heartbeat_timeout=5).start()
    threads, stats = start_workers(coord, 3)
    report = finish(coord, threads, timeout=120)
    assert sorted(report.results) == sorted(j.job_id for j in jobs)
    assert sum(len(s.results) for s in stats) == 120
    assert not report.duplicates and report.complete
    assert len(report.assignments) == 120


def test_sequential_equivalence():
    jobs = make_specs(10)
    coord = Coordinator(jobs, heartbeat_timeout=5).start()
    threads, _ = start_workers(coord, 3)
    report = finish(coord, threads)
    seq = {r.job_id: key(r) for r in run_sequential(jobs, trainer)}
    assert {j: key(r) for j, r in report.results.items()} == seq


def test_killed_worker_requeues():
    jobs = make_specs(1)
    coord = Coordinator(jobs, heartbeat_timeout=5).start()
    crashed = threading.Event()

    def crash_once(spec):
        if not crashed.is_set():
            crashed.set()
            raise WorkerCrash("simulated kill")

    with pytest.raises(WorkerCrash):
        worker_loop(coord.address, trainer, "doomed", on_job=crash_once)
    threads, _ = start_workers(coord, 1)
    report = finish(coord, threads)
    history = report.history(jobs[0].job_id)
    assert [a.outcome for a in history] == ["disconnected", "result"]
    assert [a.worker_id for a in history] == ["doomed", "w0"]
    assert len(report.results) == 1


def test_no_more_jobs_when_log_complete(tmp_path):
    jobs = make_specs(3)
    path = tmp_path / "results.jsonl"
    log = ResultLog(path)
    for spec in jobs:
        log.append(execute_job(spec, trainer))
    log.close()
    coord = Coordinator(jobs, heartbeat_timeout=5, result_log=path).start()
    stats = worker_loop(coord.address, trainer, "late")
    assert stats.results == []
    report = coord.report()
    coord.stop()
    assert report.complete and not report.assignments


def test_partial_log_resumes(tmp_path):
    jobs = make_specs(4)
    path = tmp_path / "results.jsonl"
    log = ResultLog(path)
    log.append(execute_job(jobs[0], trainer))
    log.close()
    coord = Coordinator(jobs, heartbeat_timeout=5, result_log=path).start()
    threads, stats = start_workers(coord, 1)
    report = finish(coord, threads)
    assert len(stats[0].results) == 3
    assert sorted(replay_result_log(path)) == sorted(j.job_id for j in jobs)
    assert len(report.results) == 4


def test_error_requeues():
    jobs = make_specs(2)
    coord = Coordinator(jobs, heartbeat_timeout=5).start()
    failed = []

    def flaky(config, dataset):
        if not failed:
            failed.append(config)
            raise RuntimeError("transient")
        return trainer(config, dataset)

    stats = worker_loop(coord.address, flaky, "flaky")
    report = coord.report()
    coord.stop()
    assert stats.errors == 1 and len(stats.results) == 2
    outcomes = [a.outcome for a in report.assignments]
    assert outcomes.count("error") == 1 and outcomes.count("result") == 2


def test_persistent_error_gives_up():
    jobs = make_specs(1)
    coord = Coordinator(jobs, heartbeat_timeout=5, max_attempts=3).start()

    def broken(config, dataset):
        raise RuntimeError("always")

    stats = worker_loop(coord.address, broken, "broken")
    report = coord.report()
    coord.stop()
    assert stats.errors == 3
    assert list(report.failed) == [jobs[0].job_id] and not report.results


class RawClient:
    def __init__(self, address):
        self.sock = socket.create_connection(address, timeout=10)
        self.rfile = self.sock.makefile("rb")

    def send(self, msg):
        self.sock.sendall(encode_message(msg))

    def recv(self):
        return decode_message(self.rfile.readline())

    def close(self):
        self.rfile.close()
        self.sock.close()


def wait_for(predicate, timeout=10):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if predicate():
            return True
        time.sleep(0.02)
    return False


def test_heartbeat_timeout_and_late_duplicate():
    jobs = make_specs(1)
    coord = Coordinator(jobs, heartbeat_timeout=0.3).start()
    silent = RawClient(coord.address)
    silent.send(Hello("silent"))
    msg = silent.recv()
    assert isinstance(msg, Job)
    assert wait_for(lambda: coord.report().assignments[0].outcome == "timed-out")
    threads, _ = start_workers(coord, 1)
    assert coord.wait(30)
    late = execute_job(msg.job, trainer, "silent")
    silent.send(Result(late))
    assert wait_for(lambda: len(coord.report().duplicates) == 1)
    assert isinstance(silent.recv(), NoMoreJobs)
    silent.close()
    report = finish(coord, threads)
    assert report.results[jobs[0].job_id].worker_id == "w0"
    assert report.duplicates[0].worker_id == "silent"


def test_protocol_error_closes_connection():
    coord = Coordinator(make_specs(1), heartbeat_timeout=5).start()
    client = RawClient(coord.address)
    client.sock.sendall(b'{"type":"FOO"}\n')
    reply = client.recv()
    assert reply.TYPE == "ERROR" and "type" in reply.reason
    assert client.rfile.readline() == b""
    client.close()
    coord.stop()


def test_log_replay_matches_report(tmp_path):
    jobs = make_specs(6)
    path = tmp_path / "results.jsonl"
    coord = Coordinator(jobs, heartbeat_timeout=5, result_log=path).start()
    threads, _ = start_workers(coord, 2)
    report = finish(coord, threads)
    replayed = replay_result_log(path)
    assert replayed == report.results
    assert aggregate(replayed.values()).to_json() == aggregate(report.results.values()).to_json()


def test_replay_keeps_first_entry(tmp_path):
    jobs = make_specs(1)
    first = execute_job(jobs[0], trainer, "a")
    second = execute_job(jobs[0], trainer, "b")
    path = tmp_path / "r.jsonl"
    log = ResultLog(path)
    log.append(first)
    log.append(second)
    log.close()
    assert replay_result_log(path)[jobs[0].job_id].worker_id == "a"


@pytest.mark.parametrize("seed", range(4))
def test_randomized_exactly_once(seed):
    rng = random.Random(seed)
    jobs = make_specs(rng.randint(5, 25), tag=f"r{seed}")
    coord = Coordinator(jobs, heartbeat_timeout=5).start()
    lock = threading.Lock()
    crash_budget = [rng.randint(1, 4)]

    def maybe_crash(spec):
        with lock:
            if crash_budget[0] > 0 and rng.random() < 0.3:
                crash_budget[0] -= 1
                raise WorkerCrash(spec.job_id)

    def supervised(i):
        while True:
            try:
                return worker_loop(coord.address, trainer, f"w{i}", on_job=maybe_crash)
            except WorkerCrash:
                continue

    threads = [threading.Thread(target=supervised, args=(i,), daemon=True)
               for i in range(rng.randint(1, 4))]
    for t in threads:
        t.start()
    report = finish(coord, threads)
    assert sorted(report.results) == sorted(j.job_id for j in jobs)
    assert not report.duplicates
    for spec in jobs:
        outcomes = [a.outcome for a in report.history(spec.job_id)]
        assert outcomes.count("result") == 1
        assert set(outcomes) <= {"result", "disconnected"}


def test_coordinator_serve_with_deadline():
    jobs = make_specs(2)
    ready = threading.Event()
    box = {}

    def on_ready(addr):
        box["addr"] = addr
        ready.set()

    runner = threading.Thread(target=lambda: box.setdefault(
        "report", coordinator_serve(jobs, "127.0.0.1:0", 5, None, 30, on_ready)))
    runner.start()
    assert ready.wait(10)
    worker_loop(box["addr"], trainer, "w")
    runner.join(30)
    assert box["report"].complete


def test_worker_gives_up_without_coordinator():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(WorkerError, match="could not reach"):
        worker_loop(("127.0.0.1", port), trainer, max_attempts=2, backoff=0.01)


def test_job_file_roundtrip(tmp_path):
    jobs = make_specs(3)
    write_jobs(jobs, tmp_path / "jobs.jsonl")
    assert read_jobs(tmp_path / "jobs.jsonl") == jobs


def test_job_seeds_from_ids():
    jobs = make_specs(4)
    seeds = [j.alc["base_seed"] for j in jobs]
    assert len(set(seeds)) == 4
    assert [j.alc["base_seed"] for j in make_specs(4)] == seeds


def test_parse_address():
    assert parse_address("localhost:9000") == ("localhost", 9000)
    with pytest.raises(ValueError):
        parse_address("9000")
