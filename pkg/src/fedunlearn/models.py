"""Model zoo: losses, gradients, and curvature constants.

Every model exposes its parameters as a single flat float64 vector so the
federated engine and the sensitivity ledger can treat models as points in
R^d.  The per-client objective is always

    F(theta) = mean_i per_sample_loss_i(theta) + (l2 / 2) * ||theta||^2

so the regulariser is part of every loss and gradient evaluated here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError

# Flat parameter vectors; helpers below validate dtype/shape.
Params = np.ndarray

_MAX_PARAMS = 10_000
_PROBE_PAIRS = 256
_PROBE_SEED = 52_021
_PROBE_SAFETY = 1.5


class ModelKind(str, enum.Enum):
    RIDGE = "ridge"
    LOGISTIC = "logistic"
    TINY_MLP = "tiny_mlp"


class Regime(str, enum.Enum):
    SMOOTH = "smooth"
    CONVEX = "convex"
    STRONGLY_CONVEX = "strongly_convex"


def as_params(theta) -> Params:
    """Coerce to a 1-D float64 vector without copying when possible."""
    arr = np.asarray(theta, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"parameters must be 1-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's local data: features (n, d) and targets (n,)."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        targs = np.asarray(self.targets, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionMismatchError(f"features must be 2-D, got shape {feats.shape}")
        if targs.ndim != 1:
            raise DimensionMismatchError(f"targets must be 1-D, got shape {targs.shape}")
        if feats.shape[0] != targs.shape[0]:
            raise DimensionMismatchError(
                f"{feats.shape[0]} feature rows vs {targs.shape[0]} targets"
            )
        if feats.shape[0] < 1:
            raise ValueError("client dataset needs at least one sample")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", targs)

    @property
    def sample_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ModelSpec:
    """Which model to train.

    dims: layer sizes.  For ridge/logistic this is (d_in,).  For tiny_mlp it
    is (d_in, hidden..., 1) with at most three weight layers and a linear
    scalar output; hidden activations are tanh.
    l2: regularisation strength (lambda >= 0), applied to the full vector.
    """

    kind: ModelKind
    dims: tuple[int, ...]
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "l2", float(self.l2))
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"layer sizes must be positive, got {self.dims}")
        if self.kind in (ModelKind.RIDGE, ModelKind.LOGISTIC):
            if len(self.dims) != 1:
                raise ValueError(f"{self.kind.value} expects dims=(d_in,), got {self.dims}")
        else:
            if not 3 <= len(self.dims) <= 4:
                raise ValueError("tiny_mlp needs 2 or 3 weight layers")
            if self.dims[-1] != 1:
                raise ValueError("tiny_mlp output dimension must be 1")
        if self.param_count > _MAX_PARAMS:
            raise ValueError(f"{self.param_count} parameters exceeds the {_MAX_PARAMS} cap")

    @property
    def param_count(self) -> int:
        if self.kind in (ModelKind.RIDGE, ModelKind.LOGISTIC):
            return self.dims[0]
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(self.dims, self.dims[1:]))


@dataclass(frozen=True)
class RegimeConstants:
    """Curvature envelope of a federation: regime plus (beta, mu, lam)."""

    regime: Regime
    beta: float
    mu: float
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be non-negative")
        if self.regime is Regime.STRONGLY_CONVEX:
            if not 0 < self.mu <= self.beta * (1 + 1e-12):
                raise ValueError(f"strongly convex regime needs 0 < mu <= beta, got mu={self.mu}")
        elif self.mu != 0.0:
            raise ValueError(f"{self.regime.value} regime must carry mu = 0, got mu={self.mu}")


def step_size_bound(constants: RegimeConstants) -> float | None:
    """Largest admissible step size for the regime, or None when unrestricted."""
    if constants.regime is Regime.CONVEX:
        return np.inf if constants.beta == 0 else 2.0 / constants.beta
    if constants.regime is Regime.STRONGLY_CONVEX:
        return 2.0 / (constants.beta + constants.mu)
    return None


# ---------------------------------------------------------------------------
# loss / gradient dispatch
# ---------------------------------------------------------------------------


def loss(spec: ModelSpec, data: ClientDataset, theta: Params) -> float:
    """Regularised per-sample-mean loss of theta on one client's data."""
    theta = _checked(spec, data, theta)
    if spec.kind is ModelKind.RIDGE:
        value = _ridge_data_loss(data, theta)
    elif spec.kind is ModelKind.LOGISTIC:
        value = _logistic_data_loss(data, theta)
    else:
        value = _mlp_data_loss(spec, data, theta)
    return float(value + 0.5 * spec.l2 * float(theta @ theta))


def grad(spec: ModelSpec, data: ClientDataset, theta: Params) -> Params:
    """Gradient of `loss` with respect to theta."""
    theta = _checked(spec, data, theta)
    if spec.kind is ModelKind.RIDGE:
        g = _ridge_data_grad(data, theta)
    elif spec.kind is ModelKind.LOGISTIC:
        g = _logistic_data_grad(data, theta)
    else:
        g = _mlp_data_grad(spec, data, theta)
    return g + spec.l2 * theta


def data_loss(spec: ModelSpec, data: ClientDataset, theta: Params) -> float:
    """Unregularised data term only (reporting metric)."""
    theta = _checked(spec, data, theta)
    if spec.kind is ModelKind.RIDGE:
        return float(_ridge_data_loss(data, theta))
    if spec.kind is ModelKind.LOGISTIC:
        return float(_logistic_data_loss(data, theta))
    return float(_mlp_data_loss(spec, data, theta))


def accuracy(spec: ModelSpec, data: ClientDataset, theta: Params) -> float:
    """Fraction of correct 0/1 predictions; logistic models only."""
    if spec.kind is not ModelKind.LOGISTIC:
        raise ValueError("accuracy is defined for logistic models only")
    theta = _checked(spec, data, theta)
    predicted = data.features @ theta > 0.0
    return float(np.mean(predicted == (data.targets > 0.5)))


def _checked(spec: ModelSpec, data: ClientDataset, theta) -> Params:
    theta = as_params(theta)
    if theta.shape[0] != spec.param_count:
        raise DimensionMismatchError(
            f"theta has {theta.shape[0]} entries, spec expects {spec.param_count}"
        )
    if data.feature_dim != spec.dims[0]:
        raise DimensionMismatchError(
            f"data has {data.feature_dim} features, spec expects {spec.dims[0]}"
        )
    return theta


# -- ridge ------------------------------------------------------------------


def _ridge_data_loss(data: ClientDataset, theta: Params) -> float:
    residual = data.features @ theta - data.targets
    return 0.5 * float(np.mean(residual**2))


def _ridge_data_grad(data: ClientDataset, theta: Params) -> Params:
    residual = data.features @ theta - data.targets
    return data.features.T @ residual / data.sample_count


# -- logistic ---------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(z/2)) is an overflow-free identity for the logistic function
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logistic_data_loss(data: ClientDataset, theta: Params) -> float:
    z = data.features @ theta
    # mean of softplus(z) - y*z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, z) - data.targets * z))


def _logistic_data_grad(data: ClientDataset, theta: Params) -> Params:
    z = data.features @ theta
    return data.features.T @ (_sigmoid(z) - data.targets) / data.sample_count


# -- tiny MLP ---------------------------------------------------------------


def _mlp_unpack(spec: ModelSpec, theta: Params) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in zip(spec.dims, spec.dims[1:]):
        w = theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def pack_mlp(spec: ModelSpec, layers: list[tuple[np.ndarray, np.ndarray]]) -> Params:
    """Flatten (W, b) pairs into the canonical parameter vector."""
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    theta = np.concatenate(parts)
    if theta.shape[0] != spec.param_count:
        raise DimensionMismatchError("packed layers do not match spec dims")
    return theta


def _mlp_forward(spec: ModelSpec, X: np.ndarray, theta: Params):
    layers = _mlp_unpack(spec, theta)
    activations = [X]
    for w, b in layers[:-1]:
        activations.append(np.tanh(activations[-1] @ w + b))
    w_out, b_out = layers[-1]
    pred = (activations[-1] @ w_out + b_out)[:, 0]
    return pred, activations, layers


def _mlp_data_loss(spec: ModelSpec, data: ClientDataset, theta: Params) -> float:
    pred, _, _ = _mlp_forward(spec, data.features, theta)
    return 0.5 * float(np.mean((pred - data.targets) ** 2))


def _mlp_data_grad(spec: ModelSpec, data: ClientDataset, theta: Params) -> Params:
    n = data.sample_count
    pred, activations, layers = _mlp_forward(spec, data.features, theta)
    delta = ((pred - data.targets) / n)[:, None]
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for level in range(len(layers) - 1, -1, -1):
        w, _ = layers[level]
        grads.append((activations[level].T @ delta, delta.sum(axis=0)))
        if level > 0:
            delta = (delta @ w.T) * (1.0 - activations[level] ** 2)
    grads.reverse()
    return pack_mlp(spec, grads)


# ---------------------------------------------------------------------------
# curvature constants
# ---------------------------------------------------------------------------


def regime_constants(spec: ModelSpec, all_data: list[ClientDataset]) -> RegimeConstants:
    """Curvature envelope over every client in the federation.

    Ridge: exact Gram-matrix eigenvalues give beta_i = lmax(X_i^T X_i)/n_i + l2
    and mu_i = lmin(X_i^T X_i)/n_i + l2; the envelope takes max beta / min mu.
    Rank-deficient data degrades gracefully to mu = l2 (Convex when l2 = 0).

    Logistic: the per-sample Hessian is bounded by X^T X / (4 n), so
    beta = max_i lmax(X_i^T X_i)/(4 n_i) + l2, with mu = l2 when l2 > 0.

    Tiny MLP: smooth-only regime; beta is a probed estimate, the max finite
    difference ratio ||grad(a) - grad(b)|| / ||a - b|| over 256 seeded random
    pairs, inflated by a 1.5x safety factor.  The estimate is a heuristic and
    is labelled as such by the Smooth regime itself.
    """
    if not all_data:
        raise ValueError("need at least one client dataset")
    for data in all_data:
        if data.feature_dim != spec.dims[0]:
            raise DimensionMismatchError(
                f"client data has {data.feature_dim} features, spec expects {spec.dims[0]}"
            )
    lam = spec.l2
    if spec.kind is ModelKind.RIDGE:
        betas, mus = [], []
        for data in all_data:
            eigs = np.linalg.eigvalsh(data.features.T @ data.features)
            betas.append(max(float(eigs[-1]), 0.0) / data.sample_count + lam)
            mus.append(max(float(eigs[0]), 0.0) / data.sample_count + lam)
        beta, mu = max(betas), min(mus)
        if mu > 0:
            return RegimeConstants(Regime.STRONGLY_CONVEX, beta, mu, lam)
        return RegimeConstants(Regime.CONVEX, beta, 0.0, lam)
    if spec.kind is ModelKind.LOGISTIC:
        beta = max(
            max(float(np.linalg.eigvalsh(d.features.T @ d.features)[-1]), 0.0)
            / (4.0 * d.sample_count)
            for d in all_data
        ) + lam
        if lam > 0:
            return RegimeConstants(Regime.STRONGLY_CONVEX, beta, lam, lam)
        return RegimeConstants(Regime.CONVEX, beta, 0.0, lam)
    return RegimeConstants(Regime.SMOOTH, _probe_smoothness(spec, all_data), 0.0, lam)


def _probe_smoothness(spec: ModelSpec, all_data: list[ClientDataset]) -> float:
    rng = np.random.default_rng(_PROBE_SEED)
    d = spec.param_count
    worst = 0.0
    for _ in range(_PROBE_PAIRS):
        theta = 0.5 * rng.standard_normal(d)
        offset = 0.2 * rng.standard_normal(d)
        gap = float(np.linalg.norm(offset))
        if gap == 0.0:
            continue
        for data in all_data:
            diff = grad(spec, data, theta + offset) - grad(spec, data, theta)
            worst = max(worst, float(np.linalg.norm(diff)) / gap)
    return _PROBE_SAFETY * worst
