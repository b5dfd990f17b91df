"""Shared builders for the test suite.

Scenario constants here are frozen; the suite assumes them bit-for-bit.
"""
import math

import numpy as np

from fedunlearn.datagen import DataRecipe, generate_data
from fedunlearn.engine import FederationConfig, init_params
from fedunlearn.history import TrainingHistory
from fedunlearn.models import (
    ClientDataset,
    ModelKind,
    ModelSpec,
    Regime,
    loss,
    regime_constants,
    step_size_bound,
)
from fedunlearn.sensitivity import SensitivityLedger, contraction_factor
from fedunlearn.unlearn import StoppingRule, retrain_until

# calibration multiplier at epsilon=1, delta=0.05
SQ = math.sqrt(2.0 * math.log(25.0))


def exactly(n):
    """Stopping rule that runs exactly n rounds, convergence ignored."""
    return StoppingRule(float("-inf"), 0, n)


def converged_after(n):
    """Stopping rule that runs exactly n rounds and reports convergence."""
    return StoppingRule(float("inf"), n, n)


def make_ridge(clients=3, samples=20, features=4, het=0.5, seed=0, l2=0.1, noise=0.1):
    recipe = DataRecipe(
        clients=clients,
        samples_per_client=samples,
        features=features,
        heterogeneity=het,
        seed=seed,
        noise=noise,
    )
    return ModelSpec(ModelKind.RIDGE, (features,), l2), generate_data(recipe)


def make_logistic(clients=3, samples=20, features=4, het=0.5, seed=0, l2=0.0, noise=0.1):
    recipe = DataRecipe(
        clients=clients,
        samples_per_client=samples,
        features=features,
        heterogeneity=het,
        seed=seed,
        task="classification",
        noise=noise,
    )
    return ModelSpec(ModelKind.LOGISTIC, (features,), l2), generate_data(recipe)


def fed_for(spec, datasets, *, frac=1.0, local_steps=1, rounds=10, seed=1, weights=None):
    """Federation with eta at `frac` of the regime's admissible bound.

    Smooth regime has no bound; frac is taken relative to 1/beta there.
    """
    constants = regime_constants(spec, datasets)
    bound = step_size_bound(constants)
    if bound is None or not np.isfinite(bound):
        bound = 2.0 / constants.beta
    eta = frac * bound
    fed = FederationConfig.from_datasets(
        datasets, eta=eta, local_steps=local_steps, rounds=rounds, seed=seed, weights=weights
    )
    return fed, constants


def train_world(spec, fed, rounds, *, budget=None, theta0=None, init_mode="normal"):
    """Train `rounds` FedAvg rounds recording history and ledger from scratch."""
    constants = regime_constants(spec, list(fed.clients))
    contraction = contraction_factor(constants, fed.eta)
    if theta0 is None:
        theta0 = init_params(spec, fed.seed, init_mode)
    history = TrainingHistory(theta0)
    ledger = SensitivityLedger(
        contraction,
        fed.local_steps,
        psi_star=(budget.psi_star if budget is not None else None),
        clients=range(fed.client_count),
        initial_model=(theta0 if budget is not None else None),
    )
    retrain_until(
        spec,
        fed,
        theta0,
        range(fed.client_count),
        exactly(rounds),
        ledger=ledger,
        history=history,
    )
    return theta0, contraction, history, ledger


def ridge_opt(datasets, weights, active, l2):
    """Closed-form minimiser of the weighted ridge objective over `active`.

    Normal equations of sum_i q_i (0.5 ||X_i t - y_i||^2 / n_i + 0.5 l2 ||t||^2)
    with q renormalised over the active set.  Returns (theta, loss value).
    """
    active = sorted(active)
    q = np.array([weights[i] for i in active], dtype=np.float64)
    q = q / q.sum()
    d = datasets[active[0]].feature_dim
    lhs = np.zeros((d, d))
    rhs = np.zeros(d)
    for qi, i in zip(q, active):
        ds = datasets[i]
        lhs += qi * (ds.features.T @ ds.features / ds.sample_count + l2 * np.eye(d))
        rhs += qi * (ds.features.T @ ds.targets / ds.sample_count)
    theta = np.linalg.solve(lhs, rhs)
    spec = ModelSpec(ModelKind.RIDGE, (d,), l2)
    value = sum(qi * loss(spec, datasets[i], theta) for qi, i in zip(q, active))
    return theta, float(value)


def two_client_toy():
    """Two one-sample clients in 2-D with an exactly solvable ridge problem."""
    a = ClientDataset(np.array([[1.0, 0.0]]), np.array([1.0]))
    b = ClientDataset(np.array([[0.0, 1.0]]), np.array([1.0]))
    return [a, b]
