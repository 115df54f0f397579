"""Post-training stages: global evaluation, deployment, incentives, monitoring.

Deployment can target every active client with one model or, when a
cluster selector is supplied, each client with its cluster's model.
The monitor watches a sliding window of deployed accuracy and feeds a
retraining action back to the round loop once it degrades.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .models import ArchDescriptor, Dataset, EvalReport, ParameterVector, evaluate, seq_sum

DECISION_DEPLOY = "deploy"
DECISION_REJECT = "reject"

ACTION_NONE = "none"
ACTION_FINE_TUNE = "fine_tune"
ACTION_NEW_JOB = "new_job"

DEFAULT_WINDOW = 5
DEFAULT_COOLDOWN = 5
DEFAULT_BAND = 0.1


# ---------------------------------------------------------------------------
# evaluation and the deploy decision
# ---------------------------------------------------------------------------


def evaluate_global(
    params: ParameterVector, arch: ArchDescriptor, holdout: Dataset
) -> EvalReport:
    """Score the global model on the shared holdout sample.

    Delegates to the model-core evaluator so the number recorded here
    is bitwise the number any client would compute on the same data.
    """
    if len(holdout) == 0:
        raise ConfigError("global holdout is empty")
    return evaluate(params, arch, holdout)


@dataclass(frozen=True)
class DeployPolicy:
    min_global_accuracy: float
    max_global_loss: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_global_accuracy <= 1.0:
            raise ValueError("min_global_accuracy must lie in [0, 1]")
        if not self.max_global_loss > 0.0:
            raise ValueError("max_global_loss must be positive")


@dataclass(frozen=True)
class DeployDecision:
    action: str
    reasons: tuple[str, ...]  # failing dimensions, empty on deploy


def decide_deploy(report: EvalReport, policy: DeployPolicy) -> DeployDecision:
    """Deploy when accuracy and loss both meet the policy, bounds inclusive."""
    reasons = []
    if report.accuracy < policy.min_global_accuracy:
        reasons.append("accuracy")
    if report.loss > policy.max_global_loss:
        reasons.append("loss")
    if reasons:
        return DeployDecision(DECISION_REJECT, tuple(reasons))
    return DeployDecision(DECISION_DEPLOY, ())


# ---------------------------------------------------------------------------
# deployment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeploymentSelector:
    """Cluster-targeted deployment: each client gets its cluster's model."""

    assignment: dict[int, int]  # client id -> cluster index
    cluster_models: dict[int, str]  # cluster index -> model version id


@dataclass(frozen=True)
class DeploymentRecord:
    version_id: str
    targets: tuple[int, ...]
    deployed_at_round: int
    model_ids: dict[int, str]  # per-target model actually shipped


def deploy(
    version_id: str,
    round_index: int,
    targets: list[int],
    selector: DeploymentSelector | None = None,
) -> DeploymentRecord:
    """Ship a decided model to the given active clients.

    Without a selector every target receives the version itself; with
    one, each target receives the model of its assigned cluster.
    """
    ordered = tuple(sorted(int(t) for t in targets))
    if not ordered:
        raise ValueError("no deployment targets")
    if selector is None:
        model_ids = {t: version_id for t in ordered}
    else:
        model_ids = {}
        for t in ordered:
            if t not in selector.assignment:
                raise ValueError(f"client {t} has no cluster assignment")
            cluster = selector.assignment[t]
            if cluster not in selector.cluster_models:
                raise ValueError(f"cluster {cluster} has no model")
            model_ids[t] = selector.cluster_models[cluster]
    return DeploymentRecord(version_id, ordered, round_index, model_ids)


def deployment_to_json(rec: DeploymentRecord) -> dict:
    return {
        "version_id": rec.version_id,
        "round": rec.deployed_at_round,
        "targets": list(rec.targets),
        "model_ids": {str(t): rec.model_ids[t] for t in rec.targets},
    }


# ---------------------------------------------------------------------------
# incentives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IncentiveEntry:
    round_index: int
    contribution_share: float
    rate: float
    amount: float
    multiplier: float = 1.0  # per-client negotiated rate hook, fixed for now


@dataclass
class IncentiveAccount:
    client_id: int
    balance: float = 0.0
    history: list[IncentiveEntry] = field(default_factory=list)


def accrue_incentive(
    accounts: dict[int, IncentiveAccount],
    round_index: int,
    contributors: list[tuple[int, int]],
    rate_per_round: float,
) -> None:
    """Split one round's credit among contributors by sample share."""
    if rate_per_round < 0.0:
        raise ConfigError("incentive rate must be >= 0")
    if not contributors:
        raise ValueError("no contributors to credit")
    total = sum(n for _, n in contributors)
    if total <= 0:
        raise ValueError("contributor sample counts must be positive")
    for client_id, n in sorted(contributors):
        share = n / total
        amount = rate_per_round * share
        account = accounts.get(client_id)
        if account is None:
            account = IncentiveAccount(client_id)
            accounts[client_id] = account
        account.history.append(IncentiveEntry(round_index, share, rate_per_round, amount))
        account.balance += amount


def incentive_entries_json(accounts: dict[int, IncentiveAccount]) -> list[dict]:
    rows = []
    for client_id in sorted(accounts):
        account = accounts[client_id]
        for entry in account.history:
            rows.append(
                {
                    "client_id": client_id,
                    "round": entry.round_index,
                    "share": entry.contribution_share,
                    "rate": entry.rate,
                    "amount": entry.amount,
                    "multiplier": entry.multiplier,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# monitoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonitorState:
    """Sliding window over deployed-model accuracy with trigger hysteresis."""

    window_size: int = DEFAULT_WINDOW
    threshold: float = 0.0
    cooldown_rounds: int = DEFAULT_COOLDOWN
    band: float = DEFAULT_BAND
    window: tuple[float, ...] = ()
    last_trigger_round: int | None = None

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.cooldown_rounds < 0:
            raise ValueError("cooldown_rounds must be >= 0")
        if self.band < 0.0:
            raise ValueError("band must be >= 0")
        if len(self.window) > self.window_size:
            raise ValueError("window overfull")


def monitor_observe(
    state: MonitorState, round_index: int, deployed_accuracy: float
) -> tuple[MonitorState, str]:
    """Push one accuracy sample and decide whether to raise a trigger.

    Fires only on a full window whose mean falls below the threshold,
    and not again until the cooldown has passed.  A shallow drop (mean
    within the band below threshold) asks for fine-tuning; a deep one
    asks for a fresh job.
    """
    window = (state.window + (float(deployed_accuracy),))[-state.window_size :]
    action = ACTION_NONE
    last = state.last_trigger_round
    if len(window) == state.window_size:
        mean = seq_sum(window) / state.window_size
        quiet = last is None or (round_index - last) > state.cooldown_rounds
        if mean < state.threshold and quiet:
            if mean >= state.threshold - state.band:
                action = ACTION_FINE_TUNE
            else:
                action = ACTION_NEW_JOB
            last = round_index
    new_state = MonitorState(
        window_size=state.window_size,
        threshold=state.threshold,
        cooldown_rounds=state.cooldown_rounds,
        band=state.band,
        window=window,
        last_trigger_round=last,
    )
    return new_state, action
