import numpy as np

from .errors import DataError, DomainError

MIN_OBSERVED = 1e-6


def compute_aare(observed, predicted):
    """Average absolute relative error, ``mean(|obs - pred| / obs)``.

    Observed speeds below 1e-6 make the ratio meaningless and raise
    :class:`DataError` naming the first offending index.
    """
    obs = np.asarray(observed, dtype=float).ravel()
    pred = np.asarray(predicted, dtype=float).ravel()
    if obs.shape != pred.shape:
        raise DomainError(f"length mismatch: {obs.size} observed vs {pred.size} predicted")
    if obs.size == 0:
        raise DomainError("AARE needs at least one point")
    bad = np.flatnonzero(~(obs >= MIN_OBSERVED))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"observed value {obs[i]!r} at index {i} is below {MIN_OBSERVED}")
    return float(np.mean(np.abs(obs - pred) / obs))
