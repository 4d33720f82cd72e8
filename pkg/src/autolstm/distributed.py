"""Coordinator and pull-model workers for per-DPC customisation jobs.

Workers connect over TCP, announce themselves with HELLO and receive one JOB
at a time.  The coordinator requeues a job when its worker disconnects,
reports an ERROR or stops sending heartbeats, keeps the first RESULT per job
and discards later duplicates, and appends accepted results to a JSON-lines
log that can be replayed into the same report.
"""
import collections
import itertools
import json
import logging
import os
import socket
import socketserver
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .alc import AlcParams, lstm_trainer, run_alc
from .data import DpcDataset
from .errors import AutoLstmError, ProtocolError
from .lstm import derive_seed
from .protocol import (Error, Heartbeat, Hello, Job, JobResult, JobSpec, NoMoreJobs, Result,
                       decode_message, encode_message)
from .report import persistence_baseline

log = logging.getLogger(__name__)

DEFAULT_HEARTBEAT_TIMEOUT = 30.0


class WorkerError(AutoLstmError, RuntimeError):
    pass


class WorkerCrash(Exception):
    """Raised from a worker's ``on_job`` hook to simulate a hard crash."""


# -- jobs ----------------------------------------------------------------------

def make_job_id(dpc, run_tag):
    return f"{dpc.detector_id}-{dpc.period.value}-{run_tag}"


def make_jobs(datasets, params, run_tag="run", run_seed=0):
    """One :class:`JobSpec` per DPC dataset; each job's seed is derived from its id."""
    jobs = []
    for dpc in sorted(datasets):
        job_id = make_job_id(dpc, run_tag)
        alc = params.to_dict()
        alc["base_seed"] = derive_seed(run_seed, job_id)
        jobs.append(JobSpec(job_id, datasets[dpc].to_dict(), alc))
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise ValueError("job ids are not unique")
    return jobs


def execute_job(spec, trainer=lstm_trainer, worker_id="local"):
    dataset = DpcDataset.from_dict(spec.dataset)
    params = AlcParams.from_dict(spec.alc)
    result = run_alc(dataset, params, trainer)
    dpc = dataset.dpc
    return JobResult(
        job_id=spec.job_id,
        detector_id=dpc.detector_id if dpc else "",
        period=dpc.period.value if dpc else "",
        chosen_config=tuple(result.chosen_config),
        aare=float(result.aare),
        baseline_aare=persistence_baseline(dataset),
        total_search_seconds=float(result.total_search_seconds),
        trace_digest=result.trace.digest(),
        worker_id=worker_id,
    )


def run_sequential(jobs, trainer=lstm_trainer):
    return [execute_job(spec, trainer) for spec in jobs]


def write_jobs(jobs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for spec in jobs:
            fh.write(json.dumps(spec.to_dict(), separators=(",", ":")) + "\n")


def read_jobs(path):
    jobs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                jobs.append(JobSpec.from_dict(json.loads(line)))
            except (ValueError, ProtocolError) as exc:
                raise ProtocolError(f"{path}:{lineno}: {exc}") from exc
    return jobs


# -- result log ------------------------------------------------------------------

class ResultLog:
    """Append-only JSON-lines file of accepted results, fsync'ed per line."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, result):
        self._fh.write(json.dumps(result.to_dict(), separators=(",", ":")) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self):
        self._fh.close()


def replay_result_log(path):
    """``job_id -> JobResult`` from a result log; the first entry per job wins."""
    results = {}
    path = Path(path)
    if not path.exists():
        return results
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = JobResult.from_dict(json.loads(line))
            results.setdefault(r.job_id, r)
    return results


# -- coordinator -------------------------------------------------------------------

@dataclass
class Assignment:
    job_id: str
    worker_id: str
    conn_id: int
    assigned_at: float
    last_seen: float
    outcome: str | None = None   # result | disconnected | timed-out | error | superseded


@dataclass
class CoordinatorReport:
    results: dict
    assignments: list
    duplicates: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)
    complete: bool = True

    def history(self, job_id):
        return [a for a in self.assignments if a.job_id == job_id]


class Coordinator:
    """Owns the job queue; one handler thread per worker connection.

    All state changes happen under ``self._cond`` so the queue and result set
    behave as a single serialised authority.
    """

    def __init__(self, jobs, address=("127.0.0.1", 0), heartbeat_timeout=DEFAULT_HEARTBEAT_TIMEOUT,
                 result_log=None, max_attempts=5):
        if not jobs:
            raise ValueError("coordinator needs at least one job")
        ids = [j.job_id for j in jobs]
        if len(set(ids)) != len(ids):
            raise ValueError("job ids are not unique")
        self.specs = {j.job_id: j for j in jobs}
        self.heartbeat_timeout = float(heartbeat_timeout)
        self.max_attempts = max_attempts
        self._cond = threading.Condition()
        self.results = {}
        self.failed = {}
        self.duplicates = []
        self.assignments = []
        self._attempts = collections.Counter()   # ERROR replies per job
        self._live = {}            # conn_id -> Assignment currently held
        self._conn_ids = itertools.count(1)
        self._stopping = False
        self._log = None
        if result_log is not None:
            for job_id, r in replay_result_log(result_log).items():
                if job_id in self.specs:
                    self.results[job_id] = r
            self._log = ResultLog(result_log)
        self.pending = collections.deque(i for i in ids if i not in self.results)
        self._server = _Server(address, _Handler)
        self._server.coordinator = self
        self._threads = []

    @property
    def address(self):
        return self._server.server_address[:2]

    def start(self):
        for target in (self._server.serve_forever, self._monitor):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def done(self):
        return len(self.results) + len(self.failed) == len(self.specs)

    def wait(self, timeout=None):
        """Block until every job has a result (True) or ``timeout`` elapses (False)."""
        end = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self.done():
                remaining = None if end is None else end - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(remaining if remaining is not None else 1.0)
        return True

    def stop(self):
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        self._server.shutdown()
        self._server.server_close()
        if self._log is not None:
            self._log.close()

    def report(self):
        with self._cond:
            return CoordinatorReport(dict(self.results), list(self.assignments),
                                     list(self.duplicates), dict(self.failed), self.done())

    # -- state transitions (call with self._cond held) --

    def _requeue(self, conn_id, outcome):
        a = self._live.pop(conn_id, None)
        if a is None:
            return
        a.outcome = outcome
        if a.job_id in self.results or a.job_id in self.failed:
            return
        if any(x.job_id == a.job_id for x in self._live.values()) or a.job_id in self.pending:
            return
        if outcome == "error":
            self._attempts[a.job_id] += 1
        if self._attempts[a.job_id] >= self.max_attempts:
            self.failed[a.job_id] = f"gave up after {self._attempts[a.job_id]} attempts"
            log.error("job %s failed permanently", a.job_id)
        else:
            log.warning("requeueing job %s (%s on %s)", a.job_id, outcome, a.worker_id)
            self.pending.appendleft(a.job_id)
        self._cond.notify_all()

    def _accept(self, conn_id, result):
        if self._stopping:
            return
        a = self._live.get(conn_id)
        if a is not None and a.job_id == result.job_id:
            del self._live[conn_id]
            a.outcome = "result"
        if result.job_id not in self.specs:
            log.warning("result for unknown job %s from %s ignored", result.job_id, result.worker_id)
            return
        if result.job_id in self.results:
            log.info("duplicate result for %s from %s discarded", result.job_id, result.worker_id)
            self.duplicates.append(result)
            return
        self.results[result.job_id] = result
        if self._log is not None:
            self._log.append(result)
        try:
            self.pending.remove(result.job_id)
        except ValueError:
            pass
        for other in self._live.values():
            if other.job_id == result.job_id:
                other.outcome = "superseded"
        self._cond.notify_all()

    def _next_job(self, conn_id, worker_id):
        """Wait for a job to hand out; None once all jobs are settled."""
        while True:
            if self._stopping or self.done():
                return None
            if self.pending:
                job_id = self.pending.popleft()
                now = time.monotonic()
                a = Assignment(job_id, worker_id, conn_id, now, now)
                self._live[conn_id] = a
                self.assignments.append(a)
                return self.specs[job_id]
            self._cond.wait(0.5)

    def _heartbeat(self, conn_id):
        a = self._live.get(conn_id)
        if a is not None:
            a.last_seen = time.monotonic()

    def _monitor(self):
        period = max(0.01, min(0.5, self.heartbeat_timeout / 4))
        while True:
            with self._cond:
                if self._stopping:
                    return
                now = time.monotonic()
                for conn_id, a in list(self._live.items()):
                    if now - a.last_seen > self.heartbeat_timeout:
                        self._requeue(conn_id, "timed-out")
                self._cond.wait(period)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        self.coord = self.server.coordinator
        self.conn_id = next(self.coord._conn_ids)
        self.worker_id = f"conn-{self.conn_id}"

    def send(self, msg):
        self.wfile.write(encode_message(msg))
        self.wfile.flush()

    def offer_job(self):
        with self.coord._cond:
            spec = self.coord._next_job(self.conn_id, self.worker_id)
        if spec is None:
            self.send(NoMoreJobs())
        else:
            self.send(Job(spec, self.coord.heartbeat_timeout))

    def handle(self):
        coord = self.coord
        try:
            for line in self.rfile:
                try:
                    msg = decode_message(line)
                except ProtocolError as exc:
                    log.warning("protocol error from %s: %s", self.worker_id, exc)
                    self.send(Error("", f"protocol error: {exc}"))
                    return
                if isinstance(msg, Hello):
                    self.worker_id = msg.worker_id
                    with coord._cond:
                        coord._requeue(self.conn_id, "abandoned")
                    self.offer_job()
                elif isinstance(msg, Heartbeat):
                    with coord._cond:
                        coord._heartbeat(self.conn_id)
                elif isinstance(msg, Result):
                    with coord._cond:
                        coord._accept(self.conn_id, msg.result)
                    self.offer_job()
                elif isinstance(msg, Error):
                    log.warning("worker %s failed job %s: %s", self.worker_id, msg.job_id, msg.reason)
                    with coord._cond:
                        a = coord._live.get(self.conn_id)
                        if a is not None and a.job_id == msg.job_id:
                            coord._requeue(self.conn_id, "error")
                else:
                    self.send(Error("", f"unexpected {msg.TYPE} from worker"))
        except (ConnectionError, OSError):
            pass
        finally:
            with coord._cond:
                coord._requeue(self.conn_id, "disconnected")


def parse_address(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host, int(port)


def coordinator_serve(jobs, listen_address, heartbeat_timeout=DEFAULT_HEARTBEAT_TIMEOUT,
                      result_log=None, deadline=None, ready=None):
    """Serve ``jobs`` until all complete or ``deadline`` seconds pass.

    ``ready``, when given, is called with the bound address once listening.
    """
    if isinstance(listen_address, str):
        listen_address = parse_address(listen_address)
    coord = Coordinator(jobs, listen_address, heartbeat_timeout, result_log).start()
    try:
        if ready is not None:
            ready(coord.address)
        coord.wait(deadline)
    finally:
        coord.stop()
    return coord.report()


# -- worker --------------------------------------------------------------------------

class _Connection:
    def __init__(self, sock):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self._wlock = threading.Lock()

    def send(self, msg):
        data = encode_message(msg)
        with self._wlock:
            self.sock.sendall(data)

    def recv(self):
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("coordinator closed the connection")
        return decode_message(line)

    def close(self):
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass

    def abort(self):
        """Drop the connection without a FIN handshake, like a killed process."""
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        except OSError:
            pass
        self.close()


@dataclass
class WorkerStats:
    worker_id: str
    results: list = field(default_factory=list)
    errors: int = 0
    reconnects: int = 0


def _connect(address, attempts, backoff):
    delay = backoff
    last = None
    for i in range(attempts):
        try:
            return socket.create_connection(address, timeout=10)
        except OSError as exc:
            last = exc
            if i + 1 < attempts:
                time.sleep(delay)
                delay = min(delay * 2, 5.0)
    raise WorkerError(f"could not reach coordinator at {address[0]}:{address[1]} "
                      f"after {attempts} attempts: {last}")


def _heartbeats(conn, worker_id, interval, stop):
    while not stop.wait(interval):
        try:
            conn.send(Heartbeat(worker_id))
        except OSError:
            return


def worker_loop(address, trainer=lstm_trainer, worker_id=None, max_attempts=6, backoff=0.1,
                on_job=None):
    """Pull and execute jobs until the coordinator says NO_MORE_JOBS.

    ``on_job(spec)`` runs before each job; raising :class:`WorkerCrash` from
    it drops the connection abruptly and re-raises, which is how tests kill a
    worker mid-job.
    """
    if isinstance(address, str):
        address = parse_address(address)
    worker_id = worker_id or f"worker-{uuid.uuid4().hex[:8]}"
    stats = WorkerStats(worker_id)
    failures = 0
    while True:
        conn = _Connection(_connect(address, max_attempts, backoff))
        conn.sock.settimeout(None)
        try:
            conn.send(Hello(worker_id))
            while True:
                msg = conn.recv()
                if isinstance(msg, NoMoreJobs):
                    return stats
                if isinstance(msg, Error):
                    raise WorkerError(f"coordinator rejected us: {msg.reason}")
                if not isinstance(msg, Job):
                    raise WorkerError(f"unexpected {msg.TYPE} from coordinator")
                spec = msg.job
                if on_job is not None:
                    try:
                        on_job(spec)
                    except WorkerCrash:
                        conn.abort()
                        raise
                stop = threading.Event()
                beat = threading.Thread(target=_heartbeats, daemon=True,
                                        args=(conn, worker_id, msg.heartbeat_timeout / 2, stop))
                beat.start()
                try:
                    result = execute_job(spec, trainer, worker_id)
                except Exception as exc:  # report and ask for more work
                    log.exception("job %s failed", spec.job_id)
                    stats.errors += 1
                    conn.send(Error(spec.job_id, f"{type(exc).__name__}: {exc}"))
                    conn.send(Hello(worker_id))
                    continue
                finally:
                    stop.set()
                    beat.join()
                stats.results.append(result)
                conn.send(Result(result))
                failures = 0
        except (ConnectionError, OSError) as exc:
            failures += 1
            stats.reconnects += 1
            if failures >= max_attempts:
                raise WorkerError(f"lost coordinator connection {failures} times: {exc}") from exc
            log.warning("connection lost (%s); reconnecting", exc)
            time.sleep(min(backoff * 2 ** failures, 5.0))
        finally:
            conn.close()
