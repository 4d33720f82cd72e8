"""Newline-delimited JSON messages exchanged by coordinator and workers.

Every message is one UTF-8 JSON object on one LF-terminated line with a
``type`` field.  Decoding is strict: required fields must be present with
the right JSON types, unknown fields and trailing content are rejected, and
every failure is a :class:`ProtocolError` naming the offending field.
"""
import json
import math
from dataclasses import dataclass

from .errors import ProtocolError

MAX_LINE = 64 * 1024 * 1024


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    dataset: dict   # DpcDataset.to_dict()
    alc: dict       # AlcParams.to_dict()

    def to_dict(self):
        return {"job_id": self.job_id, "dataset": self.dataset, "alc": self.alc}

    @classmethod
    def from_dict(cls, d, prefix="job"):
        _check_keys(d, {"job_id", "dataset", "alc"}, prefix)
        return cls(_str(d, "job_id", prefix), _obj(d, "dataset", prefix), _obj(d, "alc", prefix))


@dataclass(frozen=True)
class JobResult:
    job_id: str
    detector_id: str
    period: str
    chosen_config: tuple        # (hidden_layers, epochs)
    aare: float
    baseline_aare: float
    total_search_seconds: float
    trace_digest: str
    worker_id: str

    def to_dict(self):
        return {
            "job_id": self.job_id, "detector_id": self.detector_id, "period": self.period,
            "chosen_config": list(self.chosen_config), "aare": self.aare,
            "baseline_aare": self.baseline_aare,
            "total_search_seconds": self.total_search_seconds,
            "trace_digest": self.trace_digest, "worker_id": self.worker_id,
        }

    @classmethod
    def from_dict(cls, d, prefix="result"):
        _check_keys(d, {"job_id", "detector_id", "period", "chosen_config", "aare",
                        "baseline_aare", "total_search_seconds", "trace_digest", "worker_id"}, prefix)
        cc = d["chosen_config"]
        if (not isinstance(cc, list) or len(cc) != 2
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in cc)):
            raise ProtocolError("chosen_config must be [hidden_layers, epochs]",
                                f"{prefix}.chosen_config")
        return cls(
            job_id=_str(d, "job_id", prefix), detector_id=_str(d, "detector_id", prefix),
            period=_str(d, "period", prefix), chosen_config=(cc[0], cc[1]),
            aare=_num(d, "aare", prefix), baseline_aare=_num(d, "baseline_aare", prefix),
            total_search_seconds=_num(d, "total_search_seconds", prefix),
            trace_digest=_str(d, "trace_digest", prefix), worker_id=_str(d, "worker_id", prefix),
        )


@dataclass(frozen=True)
class Hello:
    worker_id: str
    TYPE = "HELLO"


@dataclass(frozen=True)
class Job:
    job: JobSpec
    heartbeat_timeout: float
    TYPE = "JOB"


@dataclass(frozen=True)
class Result:
    result: JobResult
    TYPE = "RESULT"


@dataclass(frozen=True)
class NoMoreJobs:
    TYPE = "NO_MORE_JOBS"


@dataclass(frozen=True)
class Heartbeat:
    worker_id: str
    TYPE = "HEARTBEAT"


@dataclass(frozen=True)
class Error:
    job_id: str
    reason: str
    TYPE = "ERROR"


MESSAGE_TYPES = {cls.TYPE: cls for cls in (Hello, Job, Result, NoMoreJobs, Heartbeat, Error)}


def _check_keys(d, required, prefix):
    if not isinstance(d, dict):
        raise ProtocolError("expected a JSON object", prefix)
    for key in sorted(required):
        if key not in d:
            raise ProtocolError("missing required field", _join(prefix, key))
    for key in d:
        if key not in required:
            raise ProtocolError("unknown field", _join(prefix, key))


def _join(prefix, key):
    return f"{prefix}.{key}" if prefix else key


def _str(d, key, prefix=""):
    v = d[key]
    if not isinstance(v, str):
        raise ProtocolError(f"expected string, got {type(v).__name__}", _join(prefix, key))
    return v


def _obj(d, key, prefix=""):
    v = d[key]
    if not isinstance(v, dict):
        raise ProtocolError(f"expected object, got {type(v).__name__}", _join(prefix, key))
    return v


def _num(d, key, prefix=""):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ProtocolError(f"expected finite number, got {v!r}", _join(prefix, key))
    return float(v)


def _payload(msg):
    if isinstance(msg, Hello):
        return {"worker_id": msg.worker_id}
    if isinstance(msg, Job):
        return {"job": msg.job.to_dict(), "heartbeat_timeout": msg.heartbeat_timeout}
    if isinstance(msg, Result):
        return {"result": msg.result.to_dict()}
    if isinstance(msg, NoMoreJobs):
        return {}
    if isinstance(msg, Heartbeat):
        return {"worker_id": msg.worker_id}
    if isinstance(msg, Error):
        return {"job_id": msg.job_id, "reason": msg.reason}
    raise ProtocolError(f"cannot encode {type(msg).__name__}", "type")


def encode_message(msg):
    """One message as a LF-terminated UTF-8 line."""
    body = {"type": msg.TYPE, **_payload(msg)}
    try:
        text = json.dumps(body, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except ValueError as exc:
        raise ProtocolError(f"unencodable value: {exc}") from exc
    return text.encode("utf-8") + b"\n"


_decoder = json.JSONDecoder()


def decode_message(line):
    """Parse one line (bytes or str, optional trailing LF) into a message."""
    if isinstance(line, (bytes, bytearray)):
        if len(line) > MAX_LINE:
            raise ProtocolError("line too long", "line")
        try:
            line = bytes(line).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid UTF-8: {exc.reason}", "line") from None
    if line.endswith("\n"):
        line = line[:-1]
    if "\n" in line:
        raise ProtocolError("embedded newline", "line")
    if not line.strip():
        raise ProtocolError("empty line", "line")
    try:
        obj, end = _decoder.raw_decode(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc.msg} at column {exc.colno}", "line") from None
    if line[end:].strip():
        raise ProtocolError("trailing content after JSON object", "line")
    if not isinstance(obj, dict):
        raise ProtocolError("message must be a JSON object", "line")
    mtype = obj.get("type")
    if mtype is None:
        raise ProtocolError("missing required field", "type")
    if not isinstance(mtype, str) or mtype not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {mtype!r}", "type")
    fields = {k: v for k, v in obj.items() if k != "type"}
    if mtype == "HELLO":
        _check_keys(fields, {"worker_id"}, "")
        return Hello(_str(fields, "worker_id"))
    if mtype == "HEARTBEAT":
        _check_keys(fields, {"worker_id"}, "")
        return Heartbeat(_str(fields, "worker_id"))
    if mtype == "NO_MORE_JOBS":
        _check_keys(fields, set(), "")
        return NoMoreJobs()
    if mtype == "ERROR":
        _check_keys(fields, {"job_id", "reason"}, "")
        return Error(_str(fields, "job_id"), _str(fields, "reason"))
    if mtype == "JOB":
        _check_keys(fields, {"job", "heartbeat_timeout"}, "")
        timeout = _num(fields, "heartbeat_timeout")
        if timeout <= 0:
            raise ProtocolError("must be positive", "heartbeat_timeout")
        return Job(JobSpec.from_dict(fields["job"]), timeout)
    _check_keys(fields, {"result"}, "")
    return Result(JobResult.from_dict(fields["result"]))
