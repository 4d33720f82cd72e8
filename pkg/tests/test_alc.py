import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autolstm.alc import AlcParams, AlcTrace, Branch, Termination, run_alc
from autolstm.errors import DataError, DomainError, SearchError
from autolstm.lstm import TrainingOutcome, derive_seed
from autolstm.mdp import MdpModel, PolicyTable, SearchState, value_iteration
from autolstm.metrics import compute_aare

from alc_scenarios import ADD, INC, SCENARIOS, check, forced_policy, params_for
from conftest import ScriptedTrainer


class TestAare:
    def test_single_point(self):
        assert compute_aare([100.0], [90.0]) == pytest.approx(0.10, abs=1e-12)

    def test_two_points(self):
        assert compute_aare([50.0, 80.0], [55.0, 72.0]) == pytest.approx(0.10, abs=1e-12)

    def test_zero_observed_names_index(self):
        with pytest.raises(DataError, match="index 1"):
            compute_aare([50.0, 0.0], [50.0, 1.0])

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            compute_aare([1.0, 2.0], [1.0])

    def test_empty(self):
        with pytest.raises(DomainError):
            compute_aare([], [])


@pytest.mark.parametrize("sc", SCENARIOS, ids=lambda s: s.name)
def test_scripted_branch(sc):
    trainer = ScriptedTrainer(sc.script)
    result = run_alc(None, params_for(sc.n, sc.k, sc.e, sc.prefer), trainer)
    assert check(sc, result, trainer.calls) == []


def test_suggestion_recorded():
    trainer = ScriptedTrainer({(1, 100): 0.2, (1, 200): 0.25, (2, 100): 0.04})
    result = run_alc(None, params_for(3, 300, 100, INC), trainer)
    steps = result.trace.steps
    assert steps[0].suggested is None
    assert [s.suggested for s in steps[1:]] == [INC, INC]
    assert [s.action_taken for s in steps[1:]] == [INC, ADD]
    assert [s.accepted for s in steps] == [True, False, True]


def test_per_config_seeds():
    seen = []

    def trainer(cfg, ds):
        seen.append(cfg.seed)
        return TrainingOutcome(None, {100: 0.2, 200: 0.1}.get(cfg.epochs, 0.01), 1.0, 0.01)

    run_alc(None, params_for(3, 300, 100, INC, base_seed=9), trainer)
    assert seen == [derive_seed(9, 1, 100), derive_seed(9, 1, 200), derive_seed(9, 1, 300)]


def test_params_validation():
    model = MdpModel(n=2, k=200, e=100, epoch_time={1: 1.0, 2: 2.0})
    policy = value_iteration(model)
    for delta in (0.0, 1.0, -0.1):
        with pytest.raises(DomainError):
            AlcParams(delta, model, policy)
    partial = PolicyTable(policy.value, {SearchState(1, 1): INC}, 0)
    with pytest.raises(DomainError):
        AlcParams(0.05, model, partial)


def test_params_roundtrip():
    p = params_for(3, 300, 100, ADD, base_seed=4)
    back = AlcParams.from_dict(p.to_dict())
    assert back.policy.action == p.policy.action
    assert back.lstm == p.lstm and back.base_seed == 4 and back.model.to_dict() == p.model.to_dict()


def test_trainer_failure_keeps_partial_trace():
    def trainer(cfg, ds):
        if cfg.epochs > 100:
            raise RuntimeError("boom")
        return TrainingOutcome(None, 0.3, 1.0, 0.01)

    with pytest.raises(SearchError) as err:
        run_alc(None, params_for(3, 300, 100, INC), trainer)
    assert err.value.trace.visited == [(1, 100)]


def test_digest_ignores_costs():
    a = run_alc(None, params_for(3, 300, 100, INC), ScriptedTrainer({(1, 100): 0.03}, seconds_per_epoch=1))
    b = run_alc(None, params_for(3, 300, 100, INC), ScriptedTrainer({(1, 100): 0.03}, seconds_per_epoch=2))
    assert a.total_search_seconds != b.total_search_seconds
    assert a.trace.digest() == b.trace.digest()
    assert AlcTrace.from_dict(a.trace.to_dict()).digest() == a.trace.digest()


def test_real_training_small(tiny_dataset):
    from autolstm.lstm import LstmConfig
    model = MdpModel(n=2, k=20, e=10, epoch_time={1: 1.0, 2: 2.0})
    params = AlcParams(0.05, model, value_iteration(model), 3, LstmConfig(hidden_units=4, window_len=4))
    result = run_alc(tiny_dataset, params)
    trained = [s.aare for s in result.trace.steps]
    assert result.aare == min(trained)
    assert result.outcome.model is not None
    assert result.chosen_config == (result.outcome.model.config.hidden_layers,
                                    result.outcome.model.config.epochs)


@st.composite
def search_case(draw):
    n = draw(st.integers(1, 3))
    m = draw(st.integers(1, 4))
    e = 10
    configs = [(h, j * e) for h in range(1, n + 1) for j in range(1, m + 1)]
    values = draw(st.lists(st.sampled_from([0.01, 0.04, 0.08, 0.1, 0.12, 0.2, 0.3]),
                           min_size=len(configs), max_size=len(configs)))
    alpha = draw(st.sampled_from([0.1, 0.5, 0.9]))
    beta = draw(st.sampled_from([0.1, 0.5, 0.9]))
    return n, m * e, e, dict(zip(configs, values)), alpha, beta


@settings(max_examples=300, deadline=None)
@given(search_case())
def test_search_invariants(case):
    n, k, e, script, alpha, beta = case
    model = MdpModel(n=n, k=k, e=e, epoch_time={h: 1.0 + 0.5 * h for h in range(1, n + 1)},
                     default_alpha=alpha, default_beta=beta)
    policy = value_iteration(model)
    trainer = ScriptedTrainer(script)
    result = run_alc(None, AlcParams(0.05, model, policy), trainer)
    steps = result.trace.steps

    assert len(steps) <= 2 * n * (k // e)
    accepted = [s.e_now for s in steps if s.accepted]
    assert all(b < a for a, b in zip(accepted, accepted[1:]))
    assert result.aare == min(s.aare for s in steps)
    best = next(s for s in steps if s.accepted and s.aare == result.aare)
    assert result.chosen_config == (best.hidden_layers, best.epochs)
    assert result.total_search_seconds == pytest.approx(sum(s.cost_seconds for s in steps))
    assert result.total_search_seconds >= result.outcome.train_seconds
    # the first attempt from every state follows the policy
    prev_state = None
    for s in steps[1:]:
        if s.state != prev_state:
            assert s.action_taken == s.suggested == policy.action[s.state]
        prev_state = s.state
    if result.trace.reason is Termination.SATISFIED_DELTA:
        assert result.aare <= 0.05
    else:
        assert result.aare > 0.05
