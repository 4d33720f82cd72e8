"""Result aggregation and the persistence baseline."""
import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .metrics import compute_aare

CUSTOMIZED = "customized-lstm"
PERSISTENCE = "persistence"


def persistence_baseline(dataset):
    """AARE of predicting each test target as the last value of its window."""
    if dataset.n_test < 1:
        raise DomainError("persistence baseline needs at least one test window")
    last = dataset.normalization.denormalize(dataset.X_test[:, -1])
    return compute_aare(dataset.raw_test_targets, last)


@dataclass
class RunReport:
    rows: list
    aggregates: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"rows": self.rows, "approaches": self.aggregates},
                          indent=2, sort_keys=True)

    def to_csv(self):
        """One summary row per approach."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["approach", "count", "mean_aare", "std_aare", "max_aare"])
        for name, agg in self.aggregates.items():
            w.writerow([name, agg["count"], repr(agg["mean"]), repr(agg["std"]), repr(agg["max"])])
        return buf.getvalue()

    def rows_csv(self):
        buf = io.StringIO()
        cols = ["detector_id", "period", "hidden_layers", "epochs", "aare", "baseline_aare",
                "search_seconds"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def summarize(values):
    v = np.asarray(values, dtype=float)
    return {"count": int(v.size), "mean": float(v.mean()), "std": float(v.std()),
            "max": float(v.max())}


def aggregate(results):
    """Per-DPC rows plus mean / population std / max AARE per approach."""
    results = list(results)
    if not results:
        raise DomainError("cannot aggregate an empty result set")
    rows = sorted(
        ({"detector_id": r.detector_id, "period": r.period,
          "hidden_layers": r.chosen_config[0], "epochs": r.chosen_config[1],
          "aare": r.aare, "baseline_aare": r.baseline_aare,
          "search_seconds": r.total_search_seconds, "job_id": r.job_id} for r in results),
        key=lambda row: (row["detector_id"], row["period"], row["job_id"]),
    )
    aggregates = {
        CUSTOMIZED: summarize([r["aare"] for r in rows]),
        PERSISTENCE: summarize([r["baseline_aare"] for r in rows]),
    }
    return RunReport(rows, aggregates)
