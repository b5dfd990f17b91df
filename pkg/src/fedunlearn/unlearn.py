"""Unlearning mechanics: rollback + calibrated Gaussian noise + retraining.

The sequential procedure keeps a segmented history of global models and a
sensitivity ledger.  Each request finds the latest checkpoint whose bounded
sensitivity for the departing clients stays within the budget threshold,
perturbs that checkpoint with noise calibrated to the actual bound there,
truncates everything after it, and retrains on the surviving clients until a
loss threshold (or round cap) is met.  Single-request unlearning is the
special case with one request, and three reference baselines (scratch,
fine-tune, noise-the-final-model) share the same retraining loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import models
from .engine import FederationConfig, federation_loss, fedavg_round, renormalized_weights
from .errors import EmptyFederationError, InvalidRequestError
from .history import TrainingHistory
from .models import ModelSpec, Params
from .sensitivity import NoiseBudget, SensitivityLedger, client_increment_fast, noise_std

_PERTURB_TAG = 0x5EED


@dataclass(frozen=True)
class StoppingRule:
    """Stop retraining once the retained-client loss reaches the threshold.

    The threshold is only consulted after min_rounds rounds; max_rounds is a
    hard cap.  threshold = +inf therefore means "run exactly min_rounds".
    """

    loss_threshold: float
    min_rounds: int = 0
    max_rounds: int = 10_000

    def __post_init__(self):
        if self.min_rounds < 0 or self.max_rounds < 0:
            raise ValueError("round counts must be non-negative")
        if self.min_rounds > self.max_rounds:
            raise ValueError("min_rounds cannot exceed max_rounds")
        if math.isnan(self.loss_threshold):
            raise ValueError("loss_threshold must not be NaN")


def stopping_criterion(rounds_done: int, retained_loss: float, rule: StoppingRule) -> bool:
    """True when retraining may stop after rounds_done rounds."""
    if rounds_done >= rule.max_rounds:
        return True
    return rounds_done >= rule.min_rounds and retained_loss <= rule.loss_threshold


def perturbation_stream(seed: int, request_index: int) -> np.random.Generator:
    """Dedicated RNG stream for one unlearning request."""
    return np.random.default_rng(np.random.SeedSequence([_PERTURB_TAG, int(seed), int(request_index)]))


def gaussian_perturb(theta: Params, sigma: float, rng: np.random.Generator) -> Params:
    """theta + N(0, sigma^2 I).  sigma = 0 returns a copy without touching rng."""
    theta = models.as_params(theta)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return theta.copy()
    return theta + sigma * rng.standard_normal(theta.shape[0])


@dataclass(frozen=True)
class UnlearningRequest:
    request_index: int
    targets: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(int(c) for c in self.targets))
        if not self.targets:
            raise InvalidRequestError("request must name at least one client")
        if self.request_index < 1:
            raise InvalidRequestError("request_index starts at 1")


@dataclass
class UnlearningState:
    """Mutable record of a sequential unlearning session."""

    remaining: set[int]
    processed: set[int]
    budget: NoiseBudget
    ledger: SensitivityLedger
    history: TrainingHistory
    current_model: Params
    seed: int
    next_request_index: int = 1

    @classmethod
    def from_training(
        cls,
        history: TrainingHistory,
        ledger: SensitivityLedger,
        budget: NoiseBudget,
        client_count: int,
        seed: int,
    ) -> "UnlearningState":
        return cls(
            remaining=set(range(client_count)),
            processed=set(),
            budget=budget,
            ledger=ledger,
            history=history,
            current_model=history.final_model.copy(),
            seed=seed,
        )


@dataclass(frozen=True, eq=False)
class UnlearningOutcome:
    request_index: int
    targets: frozenset[int]
    rollback_position: int
    source_segment: int
    noise_sigma: float
    retrain_rounds: int
    final_retained_loss: float
    converged: bool
    final_model: Params
    history_after: TrainingHistory
    loss_trace: list[tuple[int, float]] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class RetrainResult:
    final_model: Params
    rounds: int
    converged: bool
    final_loss: float
    loss_trace: list[tuple[int, float]]


def retrain_until(
    spec: ModelSpec,
    config: FederationConfig,
    theta_start: Params,
    active,
    stopping: StoppingRule,
    *,
    ledger: SensitivityLedger | None = None,
    history: TrainingHistory | None = None,
    segment: int = 0,
    start_position: int = 0,
) -> RetrainResult:
    """Shared retraining loop; optionally records into a ledger and history.

    Recording computes per-active-client increments with the closed-form
    proxy against the weights actually used in each round's aggregation.
    Inactive clients implicitly contribute zero.
    """
    active = tuple(sorted(active))
    if not active:
        raise EmptyFederationError("retraining needs at least one active client")
    removed = set(range(config.client_count)) - set(active)
    q = renormalized_weights(config.weights, removed) if removed else config.weights
    rng = (
        np.random.default_rng(np.random.SeedSequence([int(config.seed), int(segment)]))
        if config.batch_size is not None
        else None
    )
    theta = models.as_params(theta_start).copy()
    loss = federation_loss(spec, config.clients, config.weights, theta, active)
    rounds = 0
    trace: list[tuple[int, float]] = [(start_position, loss)]
    while not stopping_criterion(rounds, loss, stopping):
        record = fedavg_round(spec, config, theta, active, start_position + rounds, rng)
        theta = record.global_after
        rounds += 1
        if ledger is not None:
            deltas = (
                {c: client_increment_fast(record, q, c) for c in active}
                if len(active) > 1
                else {}
            )
            ledger.record_round(deltas, segment, theta)
        if history is not None:
            history.append_model(theta)
        loss = federation_loss(spec, config.clients, config.weights, theta, active)
        trace.append((start_position + rounds, loss))
    return RetrainResult(theta, rounds, loss <= stopping.loss_threshold, loss, trace)


def sifu(
    state: UnlearningState,
    request: UnlearningRequest,
    spec: ModelSpec,
    retrain: FederationConfig,
    stopping: StoppingRule,
) -> UnlearningOutcome:
    """Process one sequential unlearning request, mutating `state`.

    Rolls the history back to the latest position whose set sensitivity for
    the request targets stays within the budget threshold, perturbs that
    checkpoint with noise calibrated to the bound actually attained there,
    drops the discarded suffix from the ledger, and retrains on the
    surviving clients.
    """
    if request.request_index != state.next_request_index:
        raise InvalidRequestError(
            f"expected request index {state.next_request_index}, got {request.request_index}"
        )
    stale = request.targets & state.processed
    if stale:
        raise InvalidRequestError(f"clients already unlearned: {sorted(stale)}")
    unknown = request.targets - state.remaining
    if unknown:
        raise InvalidRequestError(f"clients not in the federation: {sorted(unknown)}")
    survivors = state.remaining - request.targets
    if not survivors:
        raise EmptyFederationError("request would empty the federation")

    position = state.ledger.rollback_index(request.targets, state.budget.psi_star)
    psi_here = state.ledger.set_sensitivity(request.targets, position)
    sigma = noise_std(psi_here, state.budget.epsilon, state.budget.delta)
    source_segment = state.history.segment_at(position)
    base = state.history.model_at(position)

    state.history.truncate(position)
    state.ledger.truncate(position, state.history.model_at)
    perturbed = gaussian_perturb(base, sigma, perturbation_stream(state.seed, request.request_index))
    state.history.start_segment(request.request_index, perturbed)

    state.remaining = survivors
    state.processed = state.processed | request.targets
    result = retrain_until(
        spec,
        retrain,
        perturbed,
        survivors,
        stopping,
        ledger=state.ledger,
        history=state.history,
        segment=request.request_index,
        start_position=position,
    )
    state.current_model = result.final_model
    state.next_request_index += 1
    return UnlearningOutcome(
        request_index=request.request_index,
        targets=request.targets,
        rollback_position=position,
        source_segment=source_segment,
        noise_sigma=sigma,
        retrain_rounds=result.rounds,
        final_retained_loss=result.final_loss,
        converged=result.converged,
        final_model=result.final_model,
        history_after=state.history,
        loss_trace=result.loss_trace,
    )


def ifu(
    spec: ModelSpec,
    history: TrainingHistory,
    ledger: SensitivityLedger,
    client: int,
    budget: NoiseBudget,
    retrain: FederationConfig,
    stopping: StoppingRule,
) -> UnlearningOutcome:
    """Single-request unlearning of one client; the request-count-1 case of sifu.

    Mutates the passed history and ledger exactly as one sifu request would.
    """
    state = UnlearningState.from_training(history, ledger, budget, retrain.client_count, retrain.seed)
    return sifu(state, UnlearningRequest(1, frozenset({client})), spec, retrain, stopping)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def baseline_scratch(
    spec: ModelSpec,
    retrain: FederationConfig,
    theta0: Params,
    remaining,
    stopping: StoppingRule,
) -> Params:
    """Retrain from the initial model on the remaining clients."""
    return retrain_until(spec, retrain, theta0, remaining, stopping).final_model


def baseline_finetune(
    spec: ModelSpec,
    history: TrainingHistory,
    remaining,
    retrain: FederationConfig,
    stopping: StoppingRule,
) -> Params:
    """Keep training the final model on the remaining clients; no noise."""
    return retrain_until(spec, retrain, history.final_model, remaining, stopping).final_model


def baseline_last(
    spec: ModelSpec,
    history: TrainingHistory,
    ledger: SensitivityLedger,
    targets,
    budget: NoiseBudget,
    retrain: FederationConfig,
    stopping: StoppingRule,
    request_index: int = 1,
) -> Params:
    """Perturb the final model with noise calibrated to Psi at the final round,
    then retrain on the remaining clients.  No rollback: the history only grows,
    and the ledger is extended with the retraining increments."""
    targets = frozenset(int(c) for c in targets)
    if not targets:
        raise InvalidRequestError("baseline_last needs at least one target client")
    final_position = len(ledger)
    psi_final = ledger.set_sensitivity(targets, final_position)
    sigma = noise_std(psi_final, budget.epsilon, budget.delta)
    perturbed = gaussian_perturb(
        history.final_model, sigma, perturbation_stream(retrain.seed, request_index)
    )
    history.start_segment(request_index, perturbed)
    remaining = set(range(retrain.client_count)) - targets
    result = retrain_until(
        spec,
        retrain,
        perturbed,
        remaining,
        stopping,
        ledger=ledger,
        history=history,
        segment=request_index,
        start_position=final_position,
    )
    return result.final_model
