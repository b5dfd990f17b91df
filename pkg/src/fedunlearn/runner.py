"""Experiment driver behind the CLI: train, unlearn, verify, report.

Artifact layout under $FEDUNLEARN_OUT (default ./runs), one directory per
config name:

    <run>/config.json                canonical config copy
    <run>/train/                     manifest, metrics.jsonl, ledger.csv,
                                     checkpoints/round_*.ckpt,
                                     rollback/client_*.ckpt, timings.json
    <run>/unlearn_<method>/          manifest, outcomes.json, metrics.jsonl,
                                     ledger.csv (ledger-backed methods),
                                     final_model.ckpt, timings.json
    <run>/verify_report.json
    <run>/report/*.csv

Every result file is deterministic for a fixed config; wall-clock timings go
to the separate timings.json files, which are the only non-reproducible
outputs.
"""

from __future__ import annotations

import os
import shutil
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, models
from .config import ExperimentConfig, config_hash, serialize_config
from .datagen import generate_data
from .engine import (
    FederationConfig,
    fedavg_round,
    federation_loss,
    init_params,
    read_checkpoint,
    renormalized_weights,
    run_fedavg,
    write_checkpoint,
)
from .errors import ConfigError, MissingArtifactsError
from .history import TrainingHistory
from .models import ModelKind, Regime, regime_constants
from .oracle import check_bound, empirical_sensitivity
from .sensitivity import (
    SensitivityLedger,
    client_increment_direct,
    client_increment_fast,
    contraction_factor,
    noise_std,
)
from .serialize import dumps17, fmt17
from .unlearn import (
    UnlearningRequest,
    UnlearningState,
    gaussian_perturb,
    perturbation_stream,
    retrain_until,
    sifu,
)

METHODS = ("sifu", "ifu", "scratch", "finetune", "last")
_PSI_CAP_FACTOR = 1e6


def output_root() -> Path:
    return Path(os.environ.get("FEDUNLEARN_OUT", "runs"))


def run_dir_for(config: ExperimentConfig, out_root: Path | None = None) -> Path:
    return (out_root or output_root()) / config.name


@dataclass(frozen=True, eq=False)
class PreparedExperiment:
    """Everything derived from a config that commands share."""

    config: ExperimentConfig
    spec: models.ModelSpec
    datasets: list
    weights: np.ndarray
    constants: models.RegimeConstants
    eta: float
    contraction: float
    theta0: np.ndarray
    digest: bytes

    @property
    def client_count(self) -> int:
        return len(self.datasets)

    def federation(self, rounds: int | None = None) -> FederationConfig:
        return FederationConfig(
            clients=tuple(self.datasets),
            weights=self.weights,
            eta=self.eta,
            local_steps=self.config.local_steps,
            rounds=self.config.rounds if rounds is None else rounds,
            seed=self.config.federation_seed,
            batch_size=self.config.batch_size,
        )


def prepare(config: ExperimentConfig) -> PreparedExperiment:
    datasets = generate_data(config.data)
    if config.weights is not None:
        weights = np.asarray(config.weights, dtype=np.float64)
    else:
        counts = np.array([d.sample_count for d in datasets], dtype=np.float64)
        weights = counts / counts.sum()
    constants = regime_constants(config.model, datasets)
    if constants.regime is Regime.SMOOTH:
        warnings.warn(
            "smooth regime: no step-size bound certifies contraction; "
            "the sensitivity bound grows as (1 + eta*beta)^steps",
            stacklevel=2,
        )
    eta = config.resolve_eta(constants)
    contraction = contraction_factor(constants, eta)
    theta0 = init_params(config.model, config.federation_seed, config.init)
    return PreparedExperiment(
        config=config,
        spec=config.model,
        datasets=datasets,
        weights=weights,
        constants=constants,
        eta=eta,
        contraction=contraction,
        theta0=theta0,
        digest=config_hash(config),
    )


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_manifest(directory: Path, prepared: PreparedExperiment, command: str, outputs) -> None:
    manifest = {
        "code_version": __version__,
        "command": command,
        "config_hash": prepared.digest.hex(),
        "name": prepared.config.name,
        "outputs": sorted(outputs),
        "seeds": {
            "data": prepared.config.data.seed,
            "federation": prepared.config.federation_seed,
        },
    }
    _write_text(directory / "manifest.json", dumps17(manifest, indent=2) + "\n")


def _write_timings(directory: Path, timings: dict) -> None:
    # wall-clock diagnostics; the one artifact excluded from reproducibility
    _write_text(directory / "timings.json", dumps17(timings, indent=2) + "\n")


def _store_config(run_dir: Path, config: ExperimentConfig) -> None:
    _write_text(run_dir / "config.json", serialize_config(config))


def _check_manifest_hash(directory: Path, prepared: PreparedExperiment) -> None:
    import json

    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactsError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("config_hash") != prepared.digest.hex():
        raise ConfigError(
            f"artifacts in {directory} were produced by a different config"
        )


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(config: ExperimentConfig, out_root: Path | None = None) -> Path:
    """Train the full federation, recording ledger, metrics, and checkpoints."""
    t_start = time.perf_counter()
    prepared = prepare(config)
    run_dir = run_dir_for(config, out_root)
    train_dir = run_dir / "train"
    if train_dir.exists():
        shutil.rmtree(train_dir)
    (train_dir / "checkpoints").mkdir(parents=True)
    (train_dir / "rollback").mkdir()
    _store_config(run_dir, config)
    _write_manifest(
        train_dir,
        prepared,
        "train",
        [
            "checkpoints/",
            "ledger.csv",
            "manifest.json",
            "metrics.jsonl",
            "rollback/",
            "timings.json",
        ],
    )

    spec = prepared.spec
    fed = prepared.federation()
    everyone = tuple(range(prepared.client_count))
    history = TrainingHistory(prepared.theta0)
    ledger = SensitivityLedger(
        prepared.contraction,
        config.local_steps,
        psi_star=config.budget.psi_star,
        clients=everyone,
        initial_model=prepared.theta0,
    )
    write_checkpoint(
        train_dir / "checkpoints" / "round_00000.ckpt", 0, prepared.theta0, prepared.digest
    )

    rng = np.random.default_rng(config.federation_seed) if config.batch_size is not None else None
    theta = prepared.theta0.copy()
    metric_rows = []
    for n in range(config.rounds):
        record = fedavg_round(spec, fed, theta, everyone, n, rng)
        theta = record.global_after
        deltas = (
            {c: client_increment_fast(record, prepared.weights, c) for c in everyone}
            if prepared.client_count > 1
            else {}
        )
        ledger.record_round(deltas, 0, theta)
        history.append_model(theta)
        metric_rows.append(
            {
                "round": n,
                "segment": 0,
                "global_loss": federation_loss(spec, fed.clients, fed.weights, theta),
                "delta": {str(c): deltas.get(c, 0.0) for c in everyone},
                "psi": {str(c): ledger.psi_online(c) for c in everyone},
            }
        )
        position = n + 1
        if position % config.checkpoint_interval == 0 or position == config.rounds:
            write_checkpoint(
                train_dir / "checkpoints" / f"round_{position:05d}.ckpt",
                position,
                theta,
                prepared.digest,
            )

    _write_text(train_dir / "metrics.jsonl", "".join(dumps17(row) + "\n" for row in metric_rows))
    ledger.export_csv(train_dir / "ledger.csv")
    for client, slot in sorted(ledger.per_client_rollback.items()):
        write_checkpoint(
            train_dir / "rollback" / f"client_{client}.ckpt",
            slot.position,
            slot.model,
            prepared.digest,
        )
    _write_timings(train_dir, {"train_seconds": time.perf_counter() - t_start})
    return train_dir


def _load_history(train_dir: Path) -> TrainingHistory:
    ckpt_dir = train_dir / "checkpoints"
    if not ckpt_dir.is_dir():
        raise MissingArtifactsError(f"missing checkpoint directory: {ckpt_dir}")
    positions = {}
    for path in sorted(ckpt_dir.glob("round_*.ckpt")):
        position, values, _ = read_checkpoint(path)
        positions[position] = values
    if not positions:
        raise MissingArtifactsError(f"no checkpoints found in {ckpt_dir}")
    try:
        return TrainingHistory.from_positions(positions)
    except ValueError as err:
        raise MissingArtifactsError(
            f"{err}; full-history unlearning needs checkpoint_interval=1 train artifacts"
        ) from err


def _load_ledger(train_dir: Path, prepared: PreparedExperiment) -> SensitivityLedger:
    path = train_dir / "ledger.csv"
    if not path.exists():
        raise MissingArtifactsError(f"missing ledger: {path}")
    ledger, _ = SensitivityLedger.from_csv(
        path,
        prepared.contraction,
        prepared.config.local_steps,
        psi_star=prepared.config.budget.psi_star,
    )
    return ledger


# ---------------------------------------------------------------------------
# unlearn
# ---------------------------------------------------------------------------


def cmd_unlearn(config: ExperimentConfig, method: str, out_root: Path | None = None) -> Path:
    """Process the config's request sequence with one unlearning method."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")
    t_start = time.perf_counter()
    prepared = prepare(config)
    run_dir = run_dir_for(config, out_root)
    train_dir = run_dir / "train"
    out_dir = run_dir / f"unlearn_{method}"
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    _store_config(run_dir, config)

    ledger_backed = method in ("sifu", "ifu", "last")
    if method == "ifu":
        for req in config.requests:
            if len(req) != 1:
                raise ConfigError("method 'ifu' handles single-client requests only")

    if method == "scratch":
        history = None
        ledger = None
    else:
        _check_manifest_hash(train_dir, prepared)
        history = _load_history(train_dir)
        ledger = _load_ledger(train_dir, prepared) if ledger_backed else None

    outputs = ["final_model.ckpt", "manifest.json", "metrics.jsonl", "outcomes.json", "timings.json"]
    if ledger_backed:
        outputs.append("ledger.csv")
    _write_manifest(out_dir, prepared, f"unlearn:{method}", outputs)

    spec = prepared.spec
    stopping = config.stopping
    retrain_cfg = prepared.federation()
    outcome_rows = []
    metric_rows = []

    if method in ("sifu", "ifu"):
        state = UnlearningState.from_training(
            history, ledger, config.budget, prepared.client_count, config.federation_seed
        )
        final_model = state.current_model
        for u, targets in enumerate(config.requests, start=1):
            outcome = sifu(state, UnlearningRequest(u, frozenset(targets)), spec, retrain_cfg, stopping)
            final_model = outcome.final_model
            outcome_rows.append(_outcome_row(outcome))
            metric_rows.extend(
                {"request": u, "position": pos, "retained_loss": loss}
                for pos, loss in outcome.loss_trace
            )
        final_position = len(ledger)
    elif method == "scratch":
        removed: set[int] = set()
        final_model = prepared.theta0.copy()
        final_position = 0
        for u, targets in enumerate(config.requests, start=1):
            removed |= set(targets)
            remaining = set(range(prepared.client_count)) - removed
            result = retrain_until(spec, retrain_cfg, prepared.theta0, remaining, stopping)
            final_model = result.final_model
            final_position = result.rounds
            outcome_rows.append(
                {
                    "request_index": u,
                    "targets": sorted(targets),
                    "rollback_position": 0,
                    "sigma": 0.0,
                    "retrain_rounds": result.rounds,
                    "final_retained_loss": result.final_loss,
                    "converged": result.converged,
                }
            )
            metric_rows.extend(
                {"request": u, "position": pos, "retained_loss": loss}
                for pos, loss in result.loss_trace
            )
    elif method == "finetune":
        removed = set()
        final_model = history.final_model.copy()
        final_position = history.end_position
        for u, targets in enumerate(config.requests, start=1):
            removed |= set(targets)
            remaining = set(range(prepared.client_count)) - removed
            result = retrain_until(
                spec, retrain_cfg, final_model, remaining, stopping, start_position=final_position
            )
            outcome_rows.append(
                {
                    "request_index": u,
                    "targets": sorted(targets),
                    "rollback_position": final_position,
                    "sigma": 0.0,
                    "retrain_rounds": result.rounds,
                    "final_retained_loss": result.final_loss,
                    "converged": result.converged,
                }
            )
            metric_rows.extend(
                {"request": u, "position": pos, "retained_loss": loss}
                for pos, loss in result.loss_trace
            )
            final_model = result.final_model
            final_position += result.rounds
    else:  # last: noise the final model, no rollback, ledger keeps growing
        removed = set()
        final_model = history.final_model.copy()
        for u, targets in enumerate(config.requests, start=1):
            removed |= set(targets)
            remaining = set(range(prepared.client_count)) - removed
            final_position = len(ledger)
            psi_final = ledger.set_sensitivity(set(targets), final_position)
            sigma = noise_std(psi_final, config.budget.epsilon, config.budget.delta)
            perturbed = gaussian_perturb(
                history.final_model, sigma, perturbation_stream(config.federation_seed, u)
            )
            history.start_segment(u, perturbed)
            result = retrain_until(
                spec,
                retrain_cfg,
                perturbed,
                remaining,
                stopping,
                ledger=ledger,
                history=history,
                segment=u,
                start_position=final_position,
            )
            outcome_rows.append(
                {
                    "request_index": u,
                    "targets": sorted(targets),
                    "rollback_position": final_position,
                    "sigma": sigma,
                    "retrain_rounds": result.rounds,
                    "final_retained_loss": result.final_loss,
                    "converged": result.converged,
                }
            )
            metric_rows.extend(
                {"request": u, "position": pos, "retained_loss": loss}
                for pos, loss in result.loss_trace
            )
            final_model = result.final_model
        final_position = len(ledger)

    _write_text(
        out_dir / "outcomes.json",
        dumps17({"method": method, "outcomes": outcome_rows}, indent=2) + "\n",
    )
    _write_text(out_dir / "metrics.jsonl", "".join(dumps17(row) + "\n" for row in metric_rows))
    if ledger_backed:
        ledger.export_csv(out_dir / "ledger.csv")
    write_checkpoint(out_dir / "final_model.ckpt", final_position, final_model, prepared.digest)
    _write_timings(out_dir, {"unlearn_seconds": time.perf_counter() - t_start})
    return out_dir


def _outcome_row(outcome) -> dict:
    return {
        "request_index": outcome.request_index,
        "targets": sorted(outcome.targets),
        "rollback_position": outcome.rollback_position,
        "sigma": outcome.noise_sigma,
        "retrain_rounds": outcome.retrain_rounds,
        "final_retained_loss": outcome.final_retained_loss,
        "converged": outcome.converged,
    }


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(config: ExperimentConfig, out_root: Path | None = None) -> tuple[dict, bool]:
    """Re-derive every certifiable claim for a config; returns (report, ok)."""
    t_start = time.perf_counter()
    prepared = prepare(config)
    run_dir = run_dir_for(config, out_root)
    checks = []

    psi_cap = None
    if prepared.constants.regime is Regime.SMOOTH:
        psi_cap = _PSI_CAP_FACTOR * max(1.0, float(np.linalg.norm(prepared.theta0)))
    fed = prepared.federation()
    for client in range(prepared.client_count):
        trace = empirical_sensitivity(fed, prepared.spec, prepared.theta0, client)
        report = check_bound(trace, tol=1e-8, psi_cap=psi_cap)
        checks.append(
            {
                "name": f"bound:client{client}",
                "pass": report.passed,
                "worst_slack": report.worst_slack,
                "tightness": report.tightness,
            }
        )

    checks.append(_check_proxy_equivalence(prepared, fed))
    checks.append(_check_contractivity(prepared))
    checks.extend(_audit_unlearn_runs(prepared, run_dir))

    ok = all(c["pass"] for c in checks)
    report = {"config_hash": prepared.digest.hex(), "pass": ok, "checks": checks}
    _write_text(run_dir / "verify_report.json", dumps17(report, indent=2) + "\n")
    _write_timings(run_dir, {"verify_seconds": time.perf_counter() - t_start})
    return report, ok


def _check_proxy_equivalence(prepared: PreparedExperiment, fed: FederationConfig) -> dict:
    records = run_fedavg(fed, prepared.spec, prepared.theta0)
    worst = 0.0
    passed = True
    for record in records:
        for client in range(prepared.client_count):
            direct = client_increment_direct(record, prepared.weights, client)
            fast = client_increment_fast(record, prepared.weights, client)
            gap = abs(fast - direct)
            worst = max(worst, gap)
            if gap > 1e-10 * max(abs(direct), abs(fast)) and gap > 1e-12:
                passed = False
    return {"name": "proxy_equivalence", "pass": passed, "worst_slack": worst, "tightness": None}


def _check_contractivity(prepared: PreparedExperiment, pairs: int = 200) -> dict:
    rng = np.random.default_rng(8_191)
    d = prepared.spec.param_count
    worst = 0.0
    factor = prepared.contraction
    for _ in range(pairs):
        theta = 0.5 * rng.standard_normal(d)
        phi = theta + 0.2 * rng.standard_normal(d)
        for data in prepared.datasets:
            step_theta = theta - prepared.eta * models.grad(prepared.spec, data, theta)
            step_phi = phi - prepared.eta * models.grad(prepared.spec, data, phi)
            lhs = float(np.linalg.norm(step_theta - step_phi))
            rhs = factor * float(np.linalg.norm(theta - phi))
            worst = max(worst, lhs - rhs)
    return {"name": "contractivity", "pass": worst <= 1e-9, "worst_slack": worst, "tightness": None}


def _audit_unlearn_runs(prepared: PreparedExperiment, run_dir: Path) -> list[dict]:
    import json

    checks = []
    for method in ("sifu", "ifu", "last"):
        out_dir = run_dir / f"unlearn_{method}"
        if not out_dir.is_dir():
            continue
        ledger_path = out_dir / "ledger.csv"
        outcomes_path = out_dir / "outcomes.json"
        if not ledger_path.exists() or not outcomes_path.exists():
            raise MissingArtifactsError(
                f"{out_dir} is missing ledger.csv or outcomes.json; re-run the unlearn command"
            )
        ledger, recorded = SensitivityLedger.from_csv(
            ledger_path, prepared.contraction, prepared.config.local_steps
        )
        outcomes = json.loads(outcomes_path.read_text())["outcomes"]
        checks.append(
            _audit_one_run(prepared, method, ledger, recorded, outcomes, rollback=method != "last")
        )
    return checks


def _audit_one_run(prepared, method, ledger, recorded, outcomes, rollback: bool) -> dict:
    budget = prepared.config.budget
    passed = True
    worst = float("-inf")

    # recorded psi column must match a fresh recomputation from the deltas
    for client in ledger.tracked_clients():
        series = ledger.psi_series(client)
        for position in range(len(ledger)):
            fresh = float(series[position + 1])
            stored = recorded.get((position, client))
            if stored is None or abs(stored - fresh) > 1e-12 * max(1.0, abs(fresh)):
                passed = False
                worst = max(worst, abs((stored or 0.0) - fresh))

    positions = [row["rollback_position"] for row in outcomes]
    for u, row in enumerate(outcomes):
        targets = row["targets"]
        if rollback:
            # the perturbation covering request u in the surviving history sits
            # at the smallest rollback position among request u and all later ones
            audit_pos = min(positions[u:])
            for client in targets:
                psi_here = ledger.bounded_sensitivity(audit_pos, client)
                slack = psi_here - budget.psi_star
                worst = max(worst, slack)
                if slack > 1e-9:
                    passed = False
            survived = audit_pos == row["rollback_position"]
        else:
            survived = True  # no truncation: every prefix is intact
        if survived:
            psi_at = max(ledger.bounded_sensitivity(row["rollback_position"], c) for c in targets)
            expected = noise_std(psi_at, budget.epsilon, budget.delta)
            if abs(expected - row["sigma"]) > 1e-9 * max(1.0, expected):
                passed = False
                worst = max(worst, abs(expected - row["sigma"]))
    if worst == float("-inf"):
        worst = 0.0
    return {"name": f"budget_audit:{method}", "pass": passed, "worst_slack": worst, "tightness": None}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(run_dir: Path) -> Path:
    """Summarise completed unlearning runs into per-metric CSV files."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise MissingArtifactsError(f"missing config copy: {config_path}")
    import json as _json

    from .config import parse_config

    config = parse_config(config_path.read_text())
    prepared = prepare(config)
    spec = prepared.spec

    methods = {}
    for out_dir in sorted(run_dir.glob("unlearn_*")):
        method = out_dir.name.removeprefix("unlearn_")
        outcomes_path = out_dir / "outcomes.json"
        final_path = out_dir / "final_model.ckpt"
        if not outcomes_path.exists() or not final_path.exists():
            raise MissingArtifactsError(f"{out_dir} is incomplete; re-run the unlearn command")
        outcomes = _json.loads(outcomes_path.read_text())["outcomes"]
        _, final_model, _ = read_checkpoint(final_path)
        methods[method] = (outcomes, final_model)
    if not methods:
        raise MissingArtifactsError(f"no completed unlearning runs under {run_dir}")

    forgotten = sorted({c for req in config.requests for c in req})
    remaining = tuple(i for i in range(prepared.client_count) if i not in forgotten)
    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)

    rounds_rows = []
    retained_rows = []
    forget_rows = []
    for method in sorted(methods):
        outcomes, final_model = methods[method]
        total_rounds = sum(row["retrain_rounds"] for row in outcomes)
        retained = (
            federation_loss(spec, prepared.datasets, prepared.weights, final_model, remaining)
            if remaining
            else float("nan")
        )
        rounds_rows.append(f"{method},{total_rounds}")
        retained_rows.append(f"{method},{fmt17(retained)}")
        forget_rows.append(f"{method},{fmt17(_forget_metric(spec, prepared, forgotten, final_model))},{_metric_kind(spec)}")

    _write_text(report_dir / "rounds.csv", "method,total_retrain_rounds\n" + "".join(r + "\n" for r in rounds_rows))
    _write_text(report_dir / "retained_loss.csv", "method,retained_loss\n" + "".join(r + "\n" for r in retained_rows))
    _write_text(report_dir / "forget.csv", "method,forget_metric,metric_kind\n" + "".join(r + "\n" for r in forget_rows))

    if "scratch" in methods:
        scratch_model = methods["scratch"][1]
        distance_rows = []
        for method in sorted(methods):
            gap = float(np.linalg.norm(methods[method][1] - scratch_model))
            distance_rows.append(f"{method},{fmt17(gap)}")
        _write_text(
            report_dir / "distance_to_scratch.csv",
            "method,distance_to_scratch\n" + "".join(r + "\n" for r in distance_rows),
        )
    return report_dir


def _metric_kind(spec) -> str:
    return "accuracy" if spec.kind is ModelKind.LOGISTIC else "mse"


def _forget_metric(spec, prepared, forgotten, theta) -> float:
    """Sample-weighted mean metric of the final model on the forgotten clients."""
    if not forgotten:
        return float("nan")
    total_samples = sum(prepared.datasets[c].sample_count for c in forgotten)
    value = 0.0
    for c in forgotten:
        data = prepared.datasets[c]
        share = data.sample_count / total_samples
        if spec.kind is ModelKind.LOGISTIC:
            value += share * models.accuracy(spec, data, theta)
        else:
            value += share * 2.0 * models.data_loss(spec, data, theta)
    return value
