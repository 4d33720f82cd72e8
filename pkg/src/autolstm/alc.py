"""Policy-guided configuration search (ALC).

Starting from one layer and ``e`` epochs, the search follows the
value-iteration policy, falls back to the other action once when the
suggested one does not lower the test AARE, and stops as soon as the AARE is
within ``delta`` or neither action helps.
"""
import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import DomainError, SearchError
from .lstm import LstmConfig, derive_seed, train
from .mdp import MdpModel, PolicyTable, SearchAction, SearchState, available_actions
from .metrics import compute_aare  # noqa: F401  re-exported

__all__ = ["AlcParams", "AlcStep", "AlcTrace", "Branch", "CustomizedModel", "Termination",
           "compute_aare", "run_alc", "lstm_trainer"]


class Termination(enum.Enum):
    SATISFIED_DELTA = "SatisfiedDelta"
    LOCAL_OPTIMUM = "LocalOptimum"
    BUDGET_EXHAUSTED = "BudgetExhausted"


class Branch(enum.Enum):
    """Which exit of the search produced the output."""

    INITIAL_SATISFIED = "initial-satisfied"
    EPOCHS_SATISFIED = "epochs-satisfied"
    FALLBACK_LAYER_SATISFIED = "fallback-layer-satisfied"
    EPOCHS_THEN_LAYER_FAILED = "epochs-then-layer-failed"
    LAYER_SATISFIED = "layer-satisfied"
    FALLBACK_EPOCHS_SATISFIED = "fallback-epochs-satisfied"
    LAYER_THEN_EPOCHS_FAILED = "layer-then-epochs-failed"
    BUDGET_EXHAUSTED = "budget-exhausted"


@dataclass
class AlcParams:
    delta: float
    model: MdpModel
    policy: PolicyTable
    base_seed: int = 0
    lstm: LstmConfig = field(default_factory=LstmConfig)

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must be in (0, 1), got {self.delta}")
        for h in range(1, self.model.n + 1):
            for j in range(1, self.model.max_j + 1):
                s = SearchState(h, j)
                if not self.model.is_terminal(s) and s not in self.policy.action:
                    raise DomainError(f"policy has no action for {s}")

    def to_dict(self):
        return {"delta": self.delta, "base_seed": self.base_seed, "model": self.model.to_dict(),
                "policy": self.policy.to_dict(), "lstm": asdict(self.lstm)}

    @classmethod
    def from_dict(cls, d):
        return cls(delta=float(d["delta"]), model=MdpModel.from_dict(d["model"]),
                   policy=PolicyTable.from_dict(d["policy"]), base_seed=int(d["base_seed"]),
                   lstm=LstmConfig(**d["lstm"]))


@dataclass
class AlcStep:
    state: SearchState                  # search state before this training
    suggested: SearchAction | None      # policy suggestion (None for the first training)
    action_taken: SearchAction | None
    hidden_layers: int
    epochs: int
    aare: float
    accepted: bool
    e_now: float                        # best AARE after this step
    cost_seconds: float

    def to_dict(self, with_cost=True):
        d = {
            "state": [self.state.h, self.state.j],
            "suggested": None if self.suggested is None else self.suggested.value,
            "action_taken": None if self.action_taken is None else self.action_taken.value,
            "hidden_layers": self.hidden_layers, "epochs": self.epochs,
            "aare": self.aare, "accepted": self.accepted, "e_now": self.e_now,
        }
        if with_cost:
            d["cost_seconds"] = self.cost_seconds
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(SearchState(*d["state"]),
                   None if d["suggested"] is None else SearchAction(d["suggested"]),
                   None if d["action_taken"] is None else SearchAction(d["action_taken"]),
                   int(d["hidden_layers"]), int(d["epochs"]), float(d["aare"]),
                   bool(d["accepted"]), float(d["e_now"]), float(d.get("cost_seconds", 0.0)))


@dataclass
class AlcTrace:
    steps: list = field(default_factory=list)
    reason: Termination | None = None
    branch: Branch | None = None
    final_state: SearchState | None = None

    @property
    def training_calls(self):
        return len(self.steps)

    @property
    def visited(self):
        """Configurations trained, in order, as ``(h, epochs)``."""
        return [(st.hidden_layers, st.epochs) for st in self.steps]

    def to_dict(self, with_cost=True):
        return {
            "steps": [st.to_dict(with_cost) for st in self.steps],
            "reason": None if self.reason is None else self.reason.value,
            "branch": None if self.branch is None else self.branch.value,
            "final_state": None if self.final_state is None else [self.final_state.h,
                                                                  self.final_state.j],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([AlcStep.from_dict(x) for x in d["steps"]],
                   None if d["reason"] is None else Termination(d["reason"]),
                   None if d["branch"] is None else Branch(d["branch"]),
                   None if d["final_state"] is None else SearchState(*d["final_state"]))

    def digest(self):
        """SHA-256 over everything except wall-clock costs."""
        blob = json.dumps(self.to_dict(with_cost=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class CustomizedModel:
    outcome: object
    trace: AlcTrace
    total_search_seconds: float
    chosen_config: tuple  # (hidden_layers, epochs) of the output model

    @property
    def aare(self):
        return self.outcome.aare

    def to_dict(self):
        o = self.outcome
        h, epochs = self.chosen_config
        return {
            "chosen": {"hidden_layers": h, "epochs": epochs},
            "aare": o.aare,
            "train_seconds": o.train_seconds,
            "epoch_seconds": o.epoch_seconds,
            "total_search_seconds": self.total_search_seconds,
            "trace": self.trace.to_dict(),
            "trace_digest": self.trace.digest(),
        }


def lstm_trainer(config, dataset):
    """Production trainer binding: fresh LSTM training."""
    return train(config, dataset)


class _Search:
    def __init__(self, dataset, params, trainer):
        self.dataset, self.params, self.trainer = dataset, params, trainer
        self.trace = AlcTrace()
        self.total = 0.0
        self.best_outcome = None
        self.e_now = None

    def train(self, state, h, j, suggested, taken):
        e = self.params.model.e
        epochs = j * e
        cfg = self.params.lstm.replace(hidden_layers=h, epochs=epochs,
                                       seed=derive_seed(self.params.base_seed, h, epochs))
        try:
            outcome = self.trainer(cfg, self.dataset)
        except Exception as exc:
            raise SearchError(f"trainer failed on <{h}, {epochs}>: {exc}", self.trace) from exc
        self.total += outcome.train_seconds
        accepted = self.e_now is None or outcome.aare < self.e_now
        if accepted:
            self.e_now = outcome.aare
            self.best_outcome = outcome
        self.trace.steps.append(AlcStep(state, suggested, taken, h, epochs, outcome.aare,
                                        accepted, self.e_now, outcome.train_seconds))
        return outcome, accepted

    def finish(self, state, reason, branch):
        self.trace.final_state = state
        self.trace.reason = reason
        self.trace.branch = branch
        return CustomizedModel(self.best_outcome, self.trace, self.total,
                               (state.h, state.j * self.params.model.e))


_SATISFIED = {
    (True, SearchAction.INCREASE_EPOCHS): Branch.EPOCHS_SATISFIED,
    (True, SearchAction.ADD_LAYER): Branch.LAYER_SATISFIED,
    (False, SearchAction.ADD_LAYER): Branch.FALLBACK_LAYER_SATISFIED,
    (False, SearchAction.INCREASE_EPOCHS): Branch.FALLBACK_EPOCHS_SATISFIED,
}
_BOTH_FAILED = {
    SearchAction.INCREASE_EPOCHS: Branch.EPOCHS_THEN_LAYER_FAILED,
    SearchAction.ADD_LAYER: Branch.LAYER_THEN_EPOCHS_FAILED,
}


def run_alc(dataset, params, trainer=lstm_trainer):
    """Customise one model for ``dataset``; returns a :class:`CustomizedModel`.

    ``trainer(config, dataset)`` must return an object with ``aare`` and
    ``train_seconds``.  The returned model is always the lowest-AARE one
    trained, and every training call is recorded in the trace.
    """
    model, delta = params.model, params.delta
    search = _Search(dataset, params, trainer)
    h, j = 1, 1
    search.train(SearchState(h, j), h, j, None, None)
    if search.e_now <= delta:
        return search.finish(SearchState(h, j), Termination.SATISFIED_DELTA, Branch.INITIAL_SATISFIED)

    while True:
        state = SearchState(h, j)
        actions = available_actions(state, model)
        if not actions:
            return search.finish(state, Termination.BUDGET_EXHAUSTED, Branch.BUDGET_EXHAUSTED)
        suggested = params.policy.action[state]
        # the suggested action can only be unavailable for a policy built on another model
        first = suggested if suggested in actions else suggested.other
        for attempt, action in enumerate((first, first.other)):
            if action not in actions:
                return search.finish(state, Termination.BUDGET_EXHAUSTED, Branch.BUDGET_EXHAUSTED)
            nh, nj = (h, j + 1) if action is SearchAction.INCREASE_EPOCHS else (h + 1, 1)
            outcome, improved = search.train(state, nh, nj, suggested, action)
            if improved:
                if outcome.aare <= delta:
                    followed = attempt == 0 and action is suggested
                    return search.finish(SearchState(nh, nj), Termination.SATISFIED_DELTA,
                                         _SATISFIED[(followed, action)])
                h, j = nh, nj
                break
        else:
            return search.finish(state, Termination.LOCAL_OPTIMUM, _BOTH_FAILED[first])
