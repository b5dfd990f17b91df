import copy
import math

import numpy as np
import pytest

from conftest import (
    SQ,
    converged_after,
    exactly,
    fed_for,
    make_logistic,
    make_ridge,
    ridge_opt,
    train_world,
)
from fedunlearn.engine import FederationConfig, aggregate, federation_loss, local_update
from fedunlearn.errors import EmptyFederationError, InvalidRequestError
from fedunlearn.history import TrainingHistory
from fedunlearn.models import grad
from fedunlearn.sensitivity import NoiseBudget, SensitivityLedger, noise_std
from fedunlearn.unlearn import (
    StoppingRule,
    UnlearningRequest,
    UnlearningState,
    baseline_finetune,
    baseline_last,
    baseline_scratch,
    gaussian_perturb,
    ifu,
    perturbation_stream,
    retrain_until,
    sifu,
    stopping_criterion,
)


def sc_world(budget_sigma=0.4, rounds=12, clients=4, seed=21, fed_seed=9, **fed_kw):
    spec, datasets = make_ridge(clients=clients, samples=15, features=3, seed=seed, l2=0.1)
    fed, _ = fed_for(spec, datasets, frac=0.8, rounds=rounds, seed=fed_seed, **fed_kw)
    budget = NoiseBudget(1.0, 0.05, budget_sigma)
    theta0, contraction, history, ledger = train_world(spec, fed, rounds, budget=budget)
    return spec, fed, budget, theta0, contraction, history, ledger


# ---------------------------------------------------------------------------
# perturbation
# ---------------------------------------------------------------------------


def test_zero_sigma_perturb_is_an_identity_copy():
    rng = perturbation_stream(3, 1)
    before = rng.bit_generator.state
    theta = np.array([1.0, 2.0])
    out = gaussian_perturb(theta, 0.0, rng)
    np.testing.assert_array_equal(out, theta)
    assert out is not theta
    assert rng.bit_generator.state == before


def test_perturb_statistics():
    rng = perturbation_stream(7, 2)
    theta = np.zeros(100_000)
    out = gaussian_perturb(theta, 0.7, rng)
    assert 0.99 * 0.7 < float(out.std()) < 1.01 * 0.7
    assert abs(float(out.mean())) < 0.01


def test_perturb_rejects_negative_sigma():
    with pytest.raises(ValueError):
        gaussian_perturb(np.zeros(2), -0.1, perturbation_stream(0, 1))


def test_perturbation_stream_keyed_by_seed_and_request():
    a = gaussian_perturb(np.zeros(8), 1.0, perturbation_stream(5, 1))
    b = gaussian_perturb(np.zeros(8), 1.0, perturbation_stream(5, 1))
    c = gaussian_perturb(np.zeros(8), 1.0, perturbation_stream(5, 2))
    d = gaussian_perturb(np.zeros(8), 1.0, perturbation_stream(6, 1))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


# ---------------------------------------------------------------------------
# stopping
# ---------------------------------------------------------------------------


def test_stopping_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule(0.1, 5, 2)
    with pytest.raises(ValueError):
        StoppingRule(0.1, -1, 2)
    with pytest.raises(ValueError):
        StoppingRule(float("nan"), 0, 2)


def test_stopping_criterion_edges():
    rule = StoppingRule(0.5, 2, 10)
    assert not stopping_criterion(0, 0.1, rule)
    assert not stopping_criterion(1, 0.1, rule)
    assert stopping_criterion(2, 0.5, rule)
    assert not stopping_criterion(2, 0.6, rule)
    assert stopping_criterion(10, 99.0, rule)
    assert stopping_criterion(0, 99.0, StoppingRule(float("-inf"), 0, 0))


# ---------------------------------------------------------------------------
# retraining loop
# ---------------------------------------------------------------------------


def test_retrain_zero_rounds_returns_start():
    spec, datasets = make_ridge(seed=2)
    fed, _ = fed_for(spec, datasets, rounds=5)
    theta0 = np.ones(4)
    result = retrain_until(spec, fed, theta0, range(3), exactly(0))
    np.testing.assert_array_equal(result.final_model, theta0)
    assert result.rounds == 0
    assert not result.converged
    assert result.loss_trace == [(0, result.final_loss)]


def test_retrain_trace_is_contiguous_and_starts_at_offset():
    spec, datasets = make_ridge(seed=2)
    fed, _ = fed_for(spec, datasets, frac=0.5, rounds=5)
    result = retrain_until(spec, fed, np.zeros(4), range(3), exactly(4), start_position=7)
    positions = [p for p, _ in result.loss_trace]
    assert positions == [7, 8, 9, 10, 11]
    losses = [v for _, v in result.loss_trace]
    assert losses[-1] <= losses[0]


def test_retrain_records_history_and_ledger():
    spec, datasets = make_ridge(seed=3)
    fed, constants = fed_for(spec, datasets, frac=0.5, rounds=6)
    history = TrainingHistory(np.zeros(4))
    ledger = SensitivityLedger(1.0, fed.local_steps, clients=range(3))
    retrain_until(spec, fed, np.zeros(4), range(3), exactly(6),
                  ledger=ledger, history=history, segment=0)
    assert history.end_position == 6
    assert len(ledger) == 6
    assert all(rec.segment == 0 for rec in ledger.increments)


def test_retrain_single_active_client_records_empty_deltas():
    spec, datasets = make_ridge(seed=3)
    fed, _ = fed_for(spec, datasets, frac=0.5, rounds=4)
    ledger = SensitivityLedger(1.0, fed.local_steps, clients=range(3))
    retrain_until(spec, fed, np.zeros(4), [1], exactly(4), ledger=ledger)
    assert len(ledger) == 4
    assert all(rec.per_client_delta == {} for rec in ledger.increments)
    assert ledger.psi_online(1) == 0.0


def test_retrain_subset_matches_manual_renormalised_loop():
    spec, datasets = make_ridge(clients=3, seed=4)
    fed = FederationConfig.from_datasets(
        datasets, eta=0.3, local_steps=2, rounds=5, weights=[0.5, 0.3, 0.2]
    )
    result = retrain_until(spec, fed, np.zeros(4), [1, 2], exactly(5))
    theta = np.zeros(4)
    for _ in range(5):
        locals_ = [local_update(spec, datasets[i], theta, 0.3, 2) for i in (1, 2)]
        theta = aggregate(locals_, [0.6, 0.4])
    np.testing.assert_array_equal(result.final_model, theta)


def test_retrain_converges_at_closed_form_threshold():
    spec, datasets = make_ridge(clients=3, seed=6, l2=0.1)
    fed, _ = fed_for(spec, datasets, frac=0.9, rounds=0, seed=2)
    _, floor = ridge_opt(datasets, fed.weights, [0, 1, 2], spec.l2)
    rule = StoppingRule(floor * 1.01, 0, 500)
    result = retrain_until(spec, fed, np.zeros(4), range(3), rule)
    assert result.converged
    assert result.final_loss <= floor * 1.01
    assert result.rounds < 500


def test_retrain_requires_active_clients():
    spec, datasets = make_ridge(seed=1)
    fed, _ = fed_for(spec, datasets)
    with pytest.raises(EmptyFederationError):
        retrain_until(spec, fed, np.zeros(4), [], exactly(1))


# ---------------------------------------------------------------------------
# request plumbing
# ---------------------------------------------------------------------------


def test_request_validation():
    with pytest.raises(InvalidRequestError):
        UnlearningRequest(0, frozenset({1}))
    with pytest.raises(InvalidRequestError):
        UnlearningRequest(1, frozenset())


def test_sifu_rejects_out_of_order_and_stale_requests():
    spec, fed, budget, theta0, _, history, ledger = sc_world()
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    with pytest.raises(InvalidRequestError):
        sifu(state, UnlearningRequest(2, frozenset({0})), spec, fed, exactly(1))
    sifu(state, UnlearningRequest(1, frozenset({0})), spec, fed, exactly(1))
    with pytest.raises(InvalidRequestError):
        sifu(state, UnlearningRequest(2, frozenset({0})), spec, fed, exactly(1))
    with pytest.raises(InvalidRequestError):
        sifu(state, UnlearningRequest(2, frozenset({17})), spec, fed, exactly(1))


def test_sifu_cannot_empty_the_federation():
    spec, fed, budget, theta0, _, history, ledger = sc_world(clients=2)
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    with pytest.raises(EmptyFederationError):
        sifu(state, UnlearningRequest(1, frozenset({0, 1})), spec, fed, exactly(1))


# ---------------------------------------------------------------------------
# sifu mechanics
# ---------------------------------------------------------------------------


def test_sifu_rollback_matches_hand_scan():
    spec, fed, budget, theta0, _, history, ledger = sc_world()
    series = ledger.psi_series(2).copy()
    want = max(n for n in range(len(series)) if series[n] <= budget.psi_star)
    psi_at = float(series[want])
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    outcome = sifu(state, UnlearningRequest(1, frozenset({2})), spec, fed, exactly(3))
    assert outcome.rollback_position == want
    assert outcome.noise_sigma == noise_std(psi_at, budget.epsilon, budget.delta)
    assert outcome.source_segment == 0
    assert outcome.retrain_rounds == 3
    assert state.next_request_index == 2
    assert state.remaining == {0, 1, 3}
    assert state.processed == {2}


def test_sifu_perturbs_the_rollback_model_with_its_own_stream():
    spec, fed, budget, theta0, _, history, ledger = sc_world()
    base = history.model_at(ledger.rollback_index({2}, budget.psi_star)).copy()
    psi_at = ledger.set_sensitivity({2}, ledger.rollback_index({2}, budget.psi_star))
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    outcome = sifu(state, UnlearningRequest(1, frozenset({2})), spec, fed, exactly(0))
    sigma = noise_std(psi_at, budget.epsilon, budget.delta)
    want = gaussian_perturb(base, sigma, perturbation_stream(fed.seed, 1))
    np.testing.assert_array_equal(outcome.final_model, want)
    assert outcome.loss_trace[0][0] == outcome.rollback_position


def test_sifu_truncates_history_and_ledger_consistently():
    spec, fed, budget, theta0, _, history, ledger = sc_world(rounds=15)
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    outcome = sifu(state, UnlearningRequest(1, frozenset({1})), spec, fed, exactly(4))
    history.validate()
    assert history.end_position == outcome.rollback_position + 4
    assert len(ledger) == outcome.rollback_position + 4
    assert history.segment_at(history.end_position) == 1
    tail = ledger.increments[outcome.rollback_position :]
    assert all(rec.segment == 1 for rec in tail)
    assert all(1 not in rec.per_client_delta for rec in tail)


def test_sifu_with_zero_budget_equals_scratch_bitwise():
    spec, fed, budget, theta0, _, history, ledger = sc_world(budget_sigma=0.0)
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    outcome = sifu(state, UnlearningRequest(1, frozenset({0})), spec, fed, exactly(8))
    assert outcome.rollback_position == 0
    assert outcome.noise_sigma == 0.0
    scratch = baseline_scratch(spec, fed, theta0, {1, 2, 3}, exactly(8))
    np.testing.assert_array_equal(outcome.final_model, scratch)


def test_sifu_with_huge_budget_restarts_from_the_final_round():
    spec, fed, budget, theta0, _, history, ledger = sc_world(budget_sigma=1e9, rounds=10)
    end = history.end_position
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    outcome = sifu(state, UnlearningRequest(1, frozenset({3})), spec, fed, exactly(2))
    assert outcome.rollback_position == end


def test_sifu_ignores_a_client_that_never_contributed():
    spec, datasets = make_ridge(clients=3, samples=15, features=3, seed=30, l2=0.1)
    fed = FederationConfig.from_datasets(
        datasets, eta=0.4, local_steps=1, rounds=10, seed=4, weights=[0.0, 0.5, 0.5]
    )
    budget = NoiseBudget(1.0, 0.05, 0.3)
    theta0, _, history, ledger = train_world(spec, fed, 10, budget=budget)
    final = history.final_model.copy()
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    outcome = sifu(state, UnlearningRequest(1, frozenset({0})), spec, fed, exactly(5))
    assert outcome.rollback_position == 10
    assert outcome.noise_sigma == 0.0
    want = baseline_finetune(spec, TrainingHistory(final), {1, 2}, fed, exactly(5))
    np.testing.assert_array_equal(outcome.final_model, want)


def test_sequential_requests_accumulate_segments():
    spec, fed, budget, theta0, _, history, ledger = sc_world(rounds=15, clients=5)
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    first = sifu(state, UnlearningRequest(1, frozenset({0})), spec, fed, exactly(3))
    second = sifu(state, UnlearningRequest(2, frozenset({4})), spec, fed, exactly(3))
    history.validate()
    assert second.rollback_position <= first.rollback_position + 3
    indices = [seg.index for seg in history.segments]
    assert indices == sorted(set(indices))
    assert indices[-1] == 2
    np.testing.assert_array_equal(state.current_model, second.final_model)


def test_ifu_is_the_single_request_case_of_sifu():
    spec, fed, budget, theta0, _, history, ledger = sc_world(rounds=12)
    h2, l2_ = copy.deepcopy(history), copy.deepcopy(ledger)
    state = UnlearningState.from_training(history, ledger, budget, fed.client_count, fed.seed)
    a = sifu(state, UnlearningRequest(1, frozenset({1})), spec, fed, exactly(4))
    b = ifu(spec, h2, l2_, 1, budget, fed, exactly(4))
    assert a.rollback_position == b.rollback_position
    assert a.noise_sigma == b.noise_sigma
    np.testing.assert_array_equal(a.final_model, b.final_model)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def test_baseline_scratch_matches_manual_loop():
    spec, datasets = make_ridge(clients=3, seed=40)
    fed = FederationConfig.from_datasets(
        datasets, eta=0.2, local_steps=1, rounds=0, weights=[0.5, 0.3, 0.2]
    )
    theta0 = np.zeros(4)
    out = baseline_scratch(spec, fed, theta0, {1, 2}, exactly(6))
    theta = theta0.copy()
    for _ in range(6):
        locals_ = [local_update(spec, datasets[i], theta, 0.2, 1) for i in (1, 2)]
        theta = aggregate(locals_, [0.6, 0.4])
    np.testing.assert_array_equal(out, theta)


def test_baseline_finetune_continues_from_the_final_model():
    spec, fed, budget, theta0, _, history, ledger = sc_world()
    final = history.final_model.copy()
    out = baseline_finetune(spec, history, {1, 2, 3}, fed, exactly(0))
    np.testing.assert_array_equal(out, final)
    out = baseline_finetune(spec, history, {1, 2, 3}, fed, exactly(3))
    want = retrain_until(spec, fed, final, {1, 2, 3}, exactly(3)).final_model
    np.testing.assert_array_equal(out, want)


def test_baseline_last_uses_final_round_sensitivity():
    spec, fed, budget, theta0, _, history, ledger = sc_world(rounds=10)
    end = len(ledger)
    psi_final = ledger.set_sensitivity({2}, end)
    sigma = noise_std(psi_final, budget.epsilon, budget.delta)
    final = history.final_model.copy()
    out = baseline_last(spec, history, ledger, {2}, budget, fed, exactly(0))
    want = gaussian_perturb(final, sigma, perturbation_stream(fed.seed, 1))
    np.testing.assert_array_equal(out, want)
    assert history.segments[-1].index == 1
    assert len(ledger) == end


def test_baseline_last_extends_the_records():
    spec, fed, budget, theta0, _, history, ledger = sc_world(rounds=10)
    end = len(ledger)
    baseline_last(spec, history, ledger, {2}, budget, fed, exactly(4))
    assert len(ledger) == end + 4
    assert history.end_position == end + 4
    history.validate()
    with pytest.raises(InvalidRequestError):
        baseline_last(spec, history, ledger, set(), budget, fed, exactly(1))


def test_last_noise_never_below_ifu_noise_without_contraction():
    spec, datasets = make_logistic(clients=4, samples=15, features=3, seed=50)
    fed, constants = fed_for(spec, datasets, frac=0.5, local_steps=1, rounds=20, seed=3)
    budget = NoiseBudget(1.0, 0.05, 0.4)
    theta0, contraction, history, ledger = train_world(spec, fed, 20, budget=budget)
    assert contraction == 1.0
    psi_roll = ledger.set_sensitivity({1}, ledger.rollback_index({1}, budget.psi_star))
    psi_last = ledger.set_sensitivity({1}, len(ledger))
    assert psi_last >= psi_roll
    assert noise_std(psi_last, 1.0, 0.05) >= noise_std(psi_roll, 1.0, 0.05)
