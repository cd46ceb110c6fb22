"""Privacy-constrained contextual-bandit group assignment.

Candidate groups are filtered by hard feasibility first — capacity,
coach load, minimum dwell, goal/language/activity eligibility — and only
then scored. Scoring is linear-UCB over a single shared coefficient
vector on a joint user-by-group feature map, with a stability penalty
against reassignments inside the oscillation horizon. Rewards are
within-user deltas against the fixed pre-assignment baseline window and
arrive after the evaluation window, so model updates run through a
pending-observation queue owned by the caller.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConstraintViolationError, InternalError, ValidationError
from .features import (
    DAYS_PER_WEEK,
    GOAL_CATEGORIES,
    EngagementWeights,
    LearningContext,
    UserEvents,
    engagement_scores,
)

_STREAK_CAP_DAYS = 14
_THETA_RESYNC_EVERY = 512


@dataclass
class GroupState:
    """Mutable membership and feasibility state for one peer group."""

    group_id: str
    coach_id: str
    capacity: int
    goal_category: str
    members: set[str] = field(default_factory=set)
    active: bool = True
    language_tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValidationError("group capacity must be at least 1")
        if self.goal_category not in GOAL_CATEGORIES:
            raise ValidationError(f"unknown goal category: {self.goal_category!r}")

    @property
    def fill_ratio(self) -> float:
        return len(self.members) / self.capacity

    def check_invariant(self) -> None:
        if len(self.members) > self.capacity:
            raise ConstraintViolationError(
                f"group {self.group_id} holds {len(self.members)} members over capacity {self.capacity}"
            )


@dataclass
class CoachState:
    coach_id: str
    groups: set[str] = field(default_factory=set)
    load_limit: int = 0

    def load(self, groups: Mapping[str, GroupState]) -> int:
        return sum(len(groups[g].members) for g in self.groups)

    def check_invariant(self, groups: Mapping[str, GroupState]) -> None:
        if self.load(groups) > self.load_limit:
            raise ConstraintViolationError(
                f"coach {self.coach_id} load {self.load(groups)} exceeds limit {self.load_limit}"
            )


@dataclass
class AssignmentRecord:
    """Where a user currently sits and when they last moved."""

    user_token: str
    current_group: Optional[str] = None
    last_change_epoch: int = 0


@dataclass(frozen=True)
class PolicyConfig:
    """Assignment policy knobs; every default is echoed into run manifests."""

    w_adh: float = 0.6          # reward weight on adherence delta
    w_eng: float = 0.4          # reward weight on engagement delta
    lam: float = 0.2            # churn penalty weight
    dwell: int = 4              # minimum epochs between reassignments
    oscillation: int = 8        # churn-penalty horizon, >= dwell
    beta: float = 1.0           # confidence width multiplier
    ridge: float = 1.0
    w_pre: int = 4              # reward baseline window (epochs)
    w_post: int = 4             # reward evaluation window (epochs)

    def __post_init__(self) -> None:
        if self.w_adh < 0 or self.w_eng < 0 or self.lam < 0:
            raise ValidationError("reward and churn weights must be non-negative")
        if self.oscillation < self.dwell:
            raise ValidationError("oscillation horizon must be at least the dwell time")
        if self.dwell < 0 or self.w_pre < 1 or self.w_post < 1 or self.ridge <= 0:
            raise ValidationError("invalid policy window or ridge configuration")

    def to_dict(self) -> dict:
        return {
            "w_adh": self.w_adh,
            "w_eng": self.w_eng,
            "lam": self.lam,
            "dwell": self.dwell,
            "oscillation": self.oscillation,
            "beta": self.beta,
            "ridge": self.ridge,
            "w_pre": self.w_pre,
            "w_post": self.w_post,
        }


# ---------------------------------------------------------------------------
# Joint feature map
# ---------------------------------------------------------------------------

N_NUMERIC = 5
_USER_BLOCK = N_NUMERIC + len(GOAL_CATEGORIES) + 2
_GROUP_BLOCK = 2 + len(GOAL_CATEGORIES)
FEATURE_DIM = _USER_BLOCK + _GROUP_BLOCK + len(GOAL_CATEGORIES)


def joint_features(
    context: LearningContext, group: GroupState, group_engagement: float = 0.5
) -> np.ndarray:
    """Concatenate user features, group aggregates, and a goal-interaction block.

    The interaction block is the elementwise product of the user and
    group goal one-hots, so goal agreement is directly learnable.
    """
    user_goal = context.categorical_features
    group_goal = np.zeros(len(GOAL_CATEGORIES))
    group_goal[GOAL_CATEGORIES.index(group.goal_category)] = 1.0
    user_block = np.concatenate(
        [
            context.numeric_features,
            user_goal,
            [
                min(context.missed_checkin_streak, _STREAK_CAP_DAYS) / _STREAK_CAP_DAYS,
                float(np.clip(context.engagement_slope, -1.0, 1.0)),
            ],
        ]
    )
    group_block = np.concatenate(
        [[float(np.clip(group_engagement, 0.0, 1.0)), group.fill_ratio], group_goal]
    )
    return np.concatenate([user_block, group_block, user_goal * group_goal])


# ---------------------------------------------------------------------------
# Linear-UCB model
# ---------------------------------------------------------------------------


class BanditModel:
    """Shared linear model over the joint feature map.

    State is the ridge-initialized design accumulator ``A`` and response
    vector ``b``; coefficients are kept in sync through rank-1 inverse
    updates and periodically resynced against a direct solve.
    """

    def __init__(self, dim: int = FEATURE_DIM, ridge: float = 1.0) -> None:
        if dim < 1 or ridge <= 0:
            raise ValidationError("model needs dim >= 1 and ridge > 0")
        self.dim = dim
        self.ridge = ridge
        self.A = ridge * np.eye(dim)
        self.b = np.zeros(dim)
        self._a_inv = np.eye(dim) / ridge
        self._theta = np.zeros(dim)
        self._updates = 0
        # Single-writer contract; readers score against an epoch-start snapshot.
        self._write_lock = threading.Lock()

    @property
    def theta(self) -> np.ndarray:
        return self._theta.copy()

    def mean(self, phi: np.ndarray) -> float:
        return float(self._theta @ phi)

    def width(self, phi: np.ndarray) -> float:
        """Ellipsoidal confidence width sqrt(phi^T A^-1 phi)."""
        return float(np.sqrt(max(0.0, phi @ self._a_inv @ phi)))

    def update(self, phi: np.ndarray, reward: float) -> None:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.dim,):
            raise InternalError(f"feature dimension {phi.shape} does not match model dim {self.dim}")
        if not np.all(np.isfinite(phi)) or not np.isfinite(reward):
            raise ValidationError("update requires finite features and reward")
        with self._write_lock:
            self.A += np.outer(phi, phi)
            self.b += reward * phi
            # Sherman-Morrison keeps the inverse O(d^2) per update; periodic
            # resync bounds accumulated drift.
            av = self._a_inv @ phi
            self._a_inv -= np.outer(av, av) / (1.0 + phi @ av)
            self._updates += 1
            if self._updates % _THETA_RESYNC_EVERY == 0:
                self._a_inv = np.linalg.inv(self.A)
            self._theta = self._a_inv @ self.b

    def solve_theta(self) -> np.ndarray:
        """Coefficients from a direct solve of A theta = b (reference path)."""
        return np.linalg.solve(self.A, self.b)


# ---------------------------------------------------------------------------
# Feasibility filtering
# ---------------------------------------------------------------------------

REASON_DWELL = "dwell_lock"
REASON_GOAL = "goal_mismatch"
REASON_INACTIVE = "inactive"
REASON_LANGUAGE = "language_mismatch"
REASON_CAPACITY = "capacity_full"
REASON_COACH_LOAD = "coach_load_full"


def feasibility_report(
    context: LearningContext,
    record: AssignmentRecord,
    groups: Mapping[str, GroupState],
    coaches: Mapping[str, CoachState],
    epoch: int,
    config: PolicyConfig,
    user_tags: frozenset[str] = frozenset(),
) -> dict[str, list[str]]:
    """Per-group list of violated constraints; empty list means feasible.

    Inside the dwell window every group except the current one is locked
    out. Capacity and coach-load checks exclude the user themself, so a
    member's own full group stays feasible for staying put.
    """
    token = context.user_token.value
    current = record.current_group
    in_dwell = current is not None and (epoch - record.last_change_epoch) < config.dwell
    if in_dwell:
        # The dwell rule overrides every other filter: staying put is the
        # only admissible action, whatever the current group looks like.
        return {gid: ([] if gid == current else [REASON_DWELL]) for gid in sorted(groups)}
    report: dict[str, list[str]] = {}
    for group_id in sorted(groups):
        group = groups[group_id]
        reasons = []
        if group.goal_category != context.goal_category:
            reasons.append(REASON_GOAL)
        if not group.active:
            reasons.append(REASON_INACTIVE)
        if user_tags and group.language_tags and not (user_tags & group.language_tags):
            reasons.append(REASON_LANGUAGE)
        members_excl = len(group.members) - (1 if token in group.members else 0)
        if members_excl >= group.capacity:
            reasons.append(REASON_CAPACITY)
        coach = coaches[group.coach_id]
        load_excl = coach.load(groups) - (
            1 if any(token in groups[g].members for g in coach.groups) else 0
        )
        if load_excl >= coach.load_limit:
            reasons.append(REASON_COACH_LOAD)
        report[group_id] = reasons
    return report


def eligible_groups(
    context: LearningContext,
    record: AssignmentRecord,
    groups: Mapping[str, GroupState],
    coaches: Mapping[str, CoachState],
    epoch: int,
    config: PolicyConfig,
    user_tags: frozenset[str] = frozenset(),
) -> list[str]:
    """Feasible group ids in deterministic (lexicographic) order."""
    report = feasibility_report(context, record, groups, coaches, epoch, config, user_tags)
    return [gid for gid in sorted(report) if not report[gid]]


# ---------------------------------------------------------------------------
# Scoring and selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateScore:
    group_id: str
    mu: float
    sigma: float
    churn_penalty: int
    score: float
    load: int


def _churn_penalty(
    group_id: str, record: AssignmentRecord, epoch: int, config: PolicyConfig
) -> int:
    if record.current_group is None or group_id == record.current_group:
        return 0
    return 1 if (epoch - record.last_change_epoch) < config.oscillation else 0


def score_and_select(
    context: LearningContext,
    candidates: Sequence[GroupState],
    model: BanditModel,
    record: AssignmentRecord,
    epoch: int,
    config: PolicyConfig,
    feature_map: Optional[Callable[[LearningContext, GroupState], np.ndarray]] = None,
) -> tuple[str, list[CandidateScore]]:
    """UCB-score every candidate and pick the argmax.

    Score is mean estimate plus beta times the confidence width, minus
    the churn penalty for moves inside the oscillation horizon. Ties
    break to the lowest current load, then lexicographic group id.
    """
    if not candidates:
        raise ValidationError("score_and_select requires a non-empty candidate set")
    fmap = feature_map or joint_features
    rows = []
    for group in candidates:
        phi = np.asarray(fmap(context, group), dtype=float)
        if phi.shape != (model.dim,):
            raise InternalError(
                f"feature map produced dim {phi.shape}, model expects {model.dim}"
            )
        mu = model.mean(phi)
        sigma = model.width(phi)
        penalty = _churn_penalty(group.group_id, record, epoch, config)
        rows.append(
            CandidateScore(
                group_id=group.group_id,
                mu=mu,
                sigma=sigma,
                churn_penalty=penalty,
                score=mu + config.beta * sigma - config.lam * penalty,
                load=len(group.members),
            )
        )
    best = min(rows, key=lambda r: (-r.score, r.load, r.group_id))
    return best.group_id, rows


# ---------------------------------------------------------------------------
# Reward observation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardObservation:
    """Observed short-horizon reward for one assignment decision."""

    user_token: str
    group_id: str
    delta_adh: float
    delta_eng: float
    churn_penalty: int
    reward: float
    epoch: int


def compute_reward(
    events: UserEvents,
    *,
    user_token: str,
    group_id: str,
    epoch: int,
    churn_penalty: int,
    weights: EngagementWeights,
    config: PolicyConfig,
) -> Optional[RewardObservation]:
    """Within-user deltas across the assignment boundary, or None if deferred.

    Adherence and engagement both compare the evaluation window
    [epoch, epoch + w_post) against the fixed pre-assignment baseline
    [epoch - w_pre, epoch). Insufficient history on either side defers
    the observation; no model update should happen for it.
    """
    if epoch < config.w_pre:
        return None
    end_week = epoch + config.w_post
    if events.checkins.size < end_week * DAYS_PER_WEEK:
        return None
    pre_days = events.checkins[(epoch - config.w_pre) * DAYS_PER_WEEK : epoch * DAYS_PER_WEEK]
    post_days = events.checkins[epoch * DAYS_PER_WEEK : end_week * DAYS_PER_WEEK]
    delta_adh = float(post_days.mean() - pre_days.mean())

    pre_scores = engagement_scores(events.action_counts[epoch - config.w_pre : epoch], weights)
    post_scores = engagement_scores(events.action_counts[epoch:end_week], weights)
    delta_eng = float(post_scores.mean() - pre_scores.mean())

    reward = config.w_adh * delta_adh + config.w_eng * delta_eng - config.lam * churn_penalty
    return RewardObservation(
        user_token=user_token,
        group_id=group_id,
        delta_adh=delta_adh,
        delta_eng=delta_eng,
        churn_penalty=churn_penalty,
        reward=reward,
        epoch=epoch,
    )


# ---------------------------------------------------------------------------
# End-to-end assignment
# ---------------------------------------------------------------------------


@dataclass
class AssignmentDecision:
    """Result of one assign() call plus the coach-facing rationale trace."""

    epoch: int
    user_token: str
    candidates: list[dict]
    chosen: Optional[str]
    changed: bool
    waitlisted: bool = False
    phi_chosen: Optional[np.ndarray] = None
    churn_penalty: int = 0

    def to_trace_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "user_token": self.user_token,
            "candidates": self.candidates,
            "chosen": self.chosen,
            "changed": self.changed,
        }


def assign(
    context: LearningContext,
    record: AssignmentRecord,
    groups: Mapping[str, GroupState],
    coaches: Mapping[str, CoachState],
    model: BanditModel,
    epoch: int,
    config: PolicyConfig,
    *,
    user_tags: frozenset[str] = frozenset(),
    group_engagement: Optional[Mapping[str, float]] = None,
) -> AssignmentDecision:
    """Filter, score, select, and apply one assignment decision.

    Membership and the assignment record mutate only when the chosen
    group differs from the current one. A placed user with no feasible
    alternative stays put; an unplaced user with no feasible group is
    waitlisted for the next epoch.
    """
    report = feasibility_report(context, record, groups, coaches, epoch, config, user_tags)
    feasible_ids = [gid for gid in sorted(report) if not report[gid]]
    engagement_by_group = group_engagement or {}

    trace: dict[str, dict] = {
        gid: {
            "group": gid,
            "mu": None,
            "sigma": None,
            "penalty": None,
            "score": None,
            "feasible": not reasons,
            "reasons": reasons,
        }
        for gid, reasons in report.items()
    }

    if not feasible_ids:
        chosen = record.current_group
        return AssignmentDecision(
            epoch=epoch,
            user_token=context.user_token.value,
            candidates=[trace[g] for g in sorted(trace)],
            chosen=chosen,
            changed=False,
            waitlisted=chosen is None,
        )

    fmap = lambda ctx, grp: joint_features(
        ctx, grp, engagement_by_group.get(grp.group_id, 0.5)
    )
    chosen_id, scores = score_and_select(
        context, [groups[g] for g in feasible_ids], model, record, epoch, config, feature_map=fmap
    )
    for row in scores:
        trace[row.group_id].update(
            mu=row.mu, sigma=row.sigma, penalty=row.churn_penalty, score=row.score
        )
    chosen_row = next(r for r in scores if r.group_id == chosen_id)
    # Capture the features as scored, before membership mutates fill ratios.
    phi_chosen = fmap(context, groups[chosen_id])

    changed = chosen_id != record.current_group
    if changed:
        if record.current_group is not None:
            groups[record.current_group].members.discard(context.user_token.value)
        groups[chosen_id].members.add(context.user_token.value)
        groups[chosen_id].check_invariant()
        coaches[groups[chosen_id].coach_id].check_invariant(groups)
        record.current_group = chosen_id
        record.last_change_epoch = epoch

    return AssignmentDecision(
        epoch=epoch,
        user_token=context.user_token.value,
        candidates=[trace[g] for g in sorted(trace)],
        chosen=chosen_id,
        changed=changed,
        phi_chosen=phi_chosen,
        churn_penalty=chosen_row.churn_penalty,
    )
