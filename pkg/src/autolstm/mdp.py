"""Configuration-search MDP and its value-iteration solver.

States are configurations ``(h, j)`` meaning ``h`` hidden layers trained for
``j * e`` epochs.  From each state one may retrain with one more epoch
increment or with one more layer (restarting at ``e`` epochs); either attempt
succeeds with probability ``alpha``/``beta`` and otherwise stays put.  Costs
are the wall-clock seconds of the retraining, so the solved values are
expected remaining search times.
"""
import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ConvergenceError, DomainError

PROB_FLOOR = 1e-6
DEFAULT_PROB = 0.5
DEFAULT_THETA = 1.0
DEFAULT_MAX_ITER = 10_000
# Table of reference per-epoch times (seconds) for 1..5 hidden layers.
REFERENCE_EPOCH_TIMES = {1: 2.214, 2: 3.311, 3: 4.728, 4: 5.547, 5: 6.754}


class SearchAction(enum.Enum):
    INCREASE_EPOCHS = "IncreaseEpochs"
    ADD_LAYER = "AddLayer"

    @property
    def other(self):
        return SearchAction.ADD_LAYER if self is SearchAction.INCREASE_EPOCHS else SearchAction.INCREASE_EPOCHS


# argmin tie-break order: earlier wins
ACTION_ORDER = (SearchAction.INCREASE_EPOCHS, SearchAction.ADD_LAYER)


@dataclass(frozen=True, order=True)
class SearchState:
    h: int
    j: int

    def __str__(self):
        return f"s({self.h},{self.j})"


@dataclass(frozen=True)
class TransitionOutcome:
    next: SearchState
    prob: float
    cost_seconds: float


def _state_key(s):
    """``(h, j)`` from a tuple or a :class:`SearchState`."""
    h, j = (s.h, s.j) if isinstance(s, SearchState) else s
    return int(h), int(j)


def _clamp(p):
    return min(1.0, max(PROB_FLOOR, float(p)))


@dataclass
class MdpModel:
    """All parameters of the search MDP.

    ``alpha``/``beta`` map ``(h, j)`` to success probabilities and default to
    ``default_alpha``/``default_beta`` for states not listed.  ``epoch_time``
    maps every layer count ``1..n`` to seconds per epoch.
    """

    n: int
    k: int
    e: int
    epoch_time: dict
    gamma: float = 1.0
    theta: float = DEFAULT_THETA
    alpha: dict = field(default_factory=dict)
    beta: dict = field(default_factory=dict)
    default_alpha: float = DEFAULT_PROB
    default_beta: float = DEFAULT_PROB
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        self.epoch_time = {int(h): float(t) for h, t in self.epoch_time.items()}
        self.alpha = {_state_key(s): float(p) for s, p in self.alpha.items()}
        self.beta = {_state_key(s): float(p) for s, p in self.beta.items()}
        self.validate()

    def validate(self):
        if self.n < 1:
            raise ConfigurationError(f"n must be >= 1, got {self.n}")
        if self.e < 1:
            raise ConfigurationError(f"e must be >= 1, got {self.e}")
        if self.k < self.e or self.k % self.e:
            raise ConfigurationError(f"k={self.k} must be a positive multiple of e={self.e}")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        if not self.theta > 0:
            raise ConfigurationError(f"theta must be positive, got {self.theta}")
        missing = [h for h in range(1, self.n + 1) if h not in self.epoch_time]
        if missing:
            raise ConfigurationError(f"epoch_time missing for layer counts {missing}")
        for h, t in self.epoch_time.items():
            if not (math.isfinite(t) and t > 0):
                raise ConfigurationError(f"epoch_time[{h}] must be positive, got {t}")
        for name, table, default in (("alpha", self.alpha, self.default_alpha),
                                     ("beta", self.beta, self.default_beta)):
            for key, p in list(table.items()) + [("default", default)]:
                if not 0 < p <= 1:
                    raise ConfigurationError(f"{name}[{key}] must be in (0, 1], got {p}")

    @property
    def max_j(self):
        return self.k // self.e

    @property
    def terminal(self):
        return SearchState(self.n, self.max_j)

    def is_terminal(self, s):
        return s.h == self.n and s.j == self.max_j

    def contains(self, s):
        return 1 <= s.h <= self.n and 1 <= s.j <= self.max_j

    def p_alpha(self, s):
        return _clamp(self.alpha.get((s.h, s.j), self.default_alpha))

    def p_beta(self, s):
        return _clamp(self.beta.get((s.h, s.j), self.default_beta))

    def scaled(self, factor):
        """Copy with every epoch time multiplied by ``factor``."""
        return MdpModel(self.n, self.k, self.e, {h: t * factor for h, t in self.epoch_time.items()},
                        self.gamma, self.theta, dict(self.alpha), dict(self.beta),
                        self.default_alpha, self.default_beta, self.max_iter)

    def to_dict(self):
        return {
            "n": self.n, "k": self.k, "e": self.e, "gamma": self.gamma, "theta": self.theta,
            "epoch_time": {str(h): t for h, t in sorted(self.epoch_time.items())},
            "default_alpha": self.default_alpha, "default_beta": self.default_beta,
            "alpha": [[h, j, p] for (h, j), p in sorted(self.alpha.items())],
            "beta": [[h, j, p] for (h, j), p in sorted(self.beta.items())],
            "max_iter": self.max_iter,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                n=int(d["n"]), k=int(d["k"]), e=int(d["e"]),
                epoch_time={int(h): float(t) for h, t in d["epoch_time"].items()},
                gamma=float(d.get("gamma", 1.0)), theta=float(d.get("theta", DEFAULT_THETA)),
                alpha={(int(h), int(j)): float(p) for h, j, p in d.get("alpha", [])},
                beta={(int(h), int(j)): float(p) for h, j, p in d.get("beta", [])},
                default_alpha=float(d.get("default_alpha", DEFAULT_PROB)),
                default_beta=float(d.get("default_beta", DEFAULT_PROB)),
                max_iter=int(d.get("max_iter", DEFAULT_MAX_ITER)),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigurationError(f"malformed MDP model document: {exc}") from exc


def build_state_space(model):
    """All ``n * k/e`` states, h-major then j."""
    model.validate()
    return [SearchState(h, j) for h in range(1, model.n + 1) for j in range(1, model.max_j + 1)]


def available_actions(s, model):
    actions = []
    if s.j < model.max_j:
        actions.append(SearchAction.INCREASE_EPOCHS)
    if s.h < model.n:
        actions.append(SearchAction.ADD_LAYER)
    return actions


def transitions(s, a, model):
    """Success and self-loop outcomes of taking ``a`` in ``s``.

    Both outcomes carry the cost of the retraining: ``(j+1)*e*t_h`` for more
    epochs, ``e*t_{h+1}`` for another layer.
    """
    if not model.contains(s):
        raise DomainError(f"{s} is outside the state space")
    if a not in available_actions(s, model):
        raise DomainError(f"{a.value} is not available in {s}")
    if a is SearchAction.INCREASE_EPOCHS:
        nxt, p = SearchState(s.h, s.j + 1), model.p_alpha(s)
        cost = (s.j + 1) * model.e * model.epoch_time[s.h]
    else:
        nxt, p = SearchState(s.h + 1, 1), model.p_beta(s)
        cost = model.e * model.epoch_time[s.h + 1]
    return [TransitionOutcome(nxt, p, cost), TransitionOutcome(s, 1.0 - p, cost)]


@dataclass
class PolicyTable:
    value: dict
    action: dict
    iterations: int
    residuals: list = field(default_factory=list)

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "states": [
                {"h": s.h, "j": s.j, "value": v,
                 "action": self.action[s].value if s in self.action else None}
                for s, v in sorted(self.value.items())
            ],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            value, action = {}, {}
            for row in d["states"]:
                s = SearchState(int(row["h"]), int(row["j"]))
                value[s] = float(row["value"])
                if row.get("action") is not None:
                    action[s] = SearchAction(row["action"])
            return cls(value, action, int(d["iterations"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed policy document: {exc}") from exc


def _tables(model, states):
    """Per-state arrays for both actions: successor index, probability, cost."""
    index = {s: i for i, s in enumerate(states)}
    m = len(states)
    succ = np.zeros((2, m), dtype=int)
    prob = np.zeros((2, m))
    cost = np.zeros((2, m))
    avail = np.zeros((2, m), dtype=bool)
    for i, s in enumerate(states):
        for a_idx, a in enumerate(ACTION_ORDER):
            if a in available_actions(s, model):
                ok, _ = transitions(s, a, model)
                succ[a_idx, i] = index[ok.next]
                prob[a_idx, i] = ok.prob
                cost[a_idx, i] = ok.cost_seconds
                avail[a_idx, i] = True
            else:
                succ[a_idx, i] = i
    return succ, prob, cost, avail


def _q_values(V, succ, prob, cost, avail, gamma):
    idx = np.arange(V.size)
    q = prob * (cost + gamma * V[succ]) + (1.0 - prob) * (cost + gamma * V[idx])
    return np.where(avail, q, np.inf)


def _argmin(q_inc, q_add, tol=1e-9):
    """True where IncreaseEpochs wins; near-ties go to IncreaseEpochs."""
    return q_inc <= q_add + tol * np.maximum(1.0, np.abs(q_add))


def value_iteration(model):
    """Synchronous value iteration from ``V_0 = 0`` until the sup-norm change is below theta.

    Raises :class:`ConvergenceError` carrying the last residual when
    ``model.max_iter`` sweeps are not enough.
    """
    states = build_state_space(model)
    succ, prob, cost, avail = _tables(model, states)
    any_action = avail.any(axis=0)
    V = np.zeros(len(states))
    residuals = []
    iterations = 0
    while True:
        if iterations >= model.max_iter:
            raise ConvergenceError("value iteration did not converge",
                                   residuals[-1] if residuals else math.inf, iterations)
        iterations += 1
        q = _q_values(V, succ, prob, cost, avail, model.gamma)
        V_new = np.where(any_action, q.min(axis=0), 0.0)
        residual = float(np.max(np.abs(V_new - V))) if V.size else 0.0
        residuals.append(residual)
        V = V_new
        if residual < model.theta:
            break
    q = _q_values(V, succ, prob, cost, avail, model.gamma)
    inc_wins = _argmin(q[0], q[1])
    value, action = {}, {}
    for i, s in enumerate(states):
        value[s] = float(V[i])
        if any_action[i]:
            action[s] = ACTION_ORDER[0] if inc_wins[i] else ACTION_ORDER[1]
    return PolicyTable(value, action, iterations, residuals)


def suggest_action(policy, s):
    try:
        return policy.action[s]
    except KeyError:
        raise DomainError(f"no action for {s}: terminal or outside the state space") from None


# -- configuration file --------------------------------------------------------

def _parse_times(text):
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    return {i + 1: float(p) for i, p in enumerate(parts)}


def load_probability_csv(path):
    """CSV with columns h, j, alpha, beta (either probability column may be blank)."""
    alpha, beta = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                key = (int(row["h"]), int(row["j"]))
                if row.get("alpha", "").strip():
                    alpha[key] = float(row["alpha"])
                if row.get("beta", "").strip():
                    beta[key] = float(row["beta"])
            except (KeyError, ValueError) as exc:
                raise ConfigurationError(f"{path}: bad row {row}: {exc}") from exc
    return alpha, beta


def load_config(path):
    """Read an MDP model from ``key = value`` lines.

    Recognised keys: n, k, e, gamma, theta, max_iter, alpha, beta (defaults),
    epoch_times (comma-separated t_1..t_n) and probabilities (path of an
    h,j,alpha,beta CSV, relative to the config file).  ``#`` starts a comment.
    """
    path = Path(path)
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (x.strip() for x in line.split("=", 1))
        values[key] = val
    known = {"n", "k", "e", "gamma", "theta", "max_iter", "alpha", "beta", "epoch_times", "probabilities"}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        n = int(values["n"])
        times = _parse_times(values["epoch_times"]) if "epoch_times" in values else {
            h: REFERENCE_EPOCH_TIMES[h] for h in range(1, n + 1) if h in REFERENCE_EPOCH_TIMES}
        alpha, beta = {}, {}
        if "probabilities" in values:
            alpha, beta = load_probability_csv(path.parent / values["probabilities"])
        return MdpModel(
            n=n, k=int(values["k"]), e=int(values["e"]), epoch_time=times,
            gamma=float(values.get("gamma", 1.0)),
            theta=float(values.get("theta", DEFAULT_THETA)),
            alpha=alpha, beta=beta,
            default_alpha=float(values.get("alpha", DEFAULT_PROB)),
            default_beta=float(values.get("beta", DEFAULT_PROB)),
            max_iter=int(values.get("max_iter", DEFAULT_MAX_ITER)),
        )
    except KeyError as exc:
        raise ConfigurationError(f"{path}: missing key {exc}") from None
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def estimate_probabilities(traces, prior=1.0):
    """Empirical success frequencies from logged search traces.

    Every trace step records the state it started from, the action taken
    and whether it improved the error.  Returns ``(alpha, beta)`` tables with
    Laplace smoothing of strength ``prior`` (the estimate for a state seen
    once and improved once is ``(1 + prior) / (1 + 2 * prior)``).
    """
    counts = {}
    for trace in traces:
        for step in trace.steps:
            if step.action_taken is None:
                continue
            key = (step.action_taken, step.state.h, step.state.j)
            hits, total = counts.get(key, (0, 0))
            counts[key] = (hits + bool(step.accepted), total + 1)
    alpha, beta = {}, {}
    for (a, h, j), (hits, total) in counts.items():
        p = (hits + prior) / (total + 2 * prior)
        (alpha if a is SearchAction.INCREASE_EPOCHS else beta)[(h, j)] = p
    return alpha, beta
