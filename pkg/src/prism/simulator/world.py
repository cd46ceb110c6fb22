"""Synthetic cohort world: generation and week-by-week behavior stepping.

Randomness is split into tagged substreams (cohort, placement, behavior,
messages, review) keyed by the scenario seed, and all per-user draws are
index-aligned fixed-size arrays. That makes paired static/adaptive arms
share every draw: when all effect sizes are zero the two arms produce
identical event streams, and with effects on, divergence is confined to
users whose group placement actually differs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from ..assignment import AssignmentRecord, BanditModel, CoachState, GroupState, PolicyConfig
from ..errors import ConstraintViolationError, ValidationError
from ..features import ACTION_TYPES, DAYS_PER_WEEK, GOAL_CATEGORIES
from ..redaction import DeidText, RedactionRule, default_rules, redact
from ..vault import KeyRing, UserToken, Vault
from .scenario import N_MESSAGE_VARIANTS, Scenario, synth_identity, synth_message

_STREAM_COHORT = 0xC0
_STREAM_PLACEMENT = 0xA1
_STREAM_BEHAVIOR = 0xB2
_STREAM_MESSAGE = 0xE3
STREAM_REVIEW = 0xD4

WEEK_SECONDS = 7 * 24 * 3600
SIM_EPOCH_BASE = datetime(2025, 1, 6, tzinfo=timezone.utc).timestamp()
_RESTORE_SPACING_SECONDS = 600.0  # keeps routine deliveries under the rate-limit cap


def substream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, tag) + extra)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def poisson_from_uniform(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Inverse-CDF Poisson draw: one uniform per element, so stream
    consumption never depends on the rate."""
    lam = np.asarray(lam, dtype=float)
    u = np.asarray(u, dtype=float)
    k = np.zeros(lam.shape, dtype=np.int64)
    pmf = np.exp(-lam)
    cdf = pmf.copy()
    remaining = u > cdf
    step = 0
    while remaining.any():
        step += 1
        if step > 1000:
            raise ValidationError("poisson rate too large for inverse-CDF draw")
        pmf = np.where(remaining, pmf * lam / step, pmf)
        cdf = np.where(remaining, cdf + pmf, cdf)
        k = np.where(remaining, step, k)
        remaining = u > cdf
    return k


class SimClock:
    """Deterministic clock: fixed base date, one tick per vault interaction."""

    def __init__(self) -> None:
        self._week = 0
        self._tick = 0

    def set_week(self, week: int) -> None:
        self._week = week
        self._tick = 0

    def __call__(self) -> float:
        t = SIM_EPOCH_BASE + self._week * WEEK_SECONDS + self._tick * _RESTORE_SPACING_SECONDS
        self._tick += 1
        return t


@dataclass
class SimUser:
    """Behavioral parameters for one synthetic user (identity lives in the vault)."""

    index: int
    token: UserToken
    goal: str
    base_logit: float
    match_sensitivity: float
    fatigue_rate: float
    engagement_rates: np.ndarray
    language_tags: frozenset[str] = frozenset({"en"})

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "token": self.token.value,
            "goal": self.goal,
            "base_logit": self.base_logit,
            "match_sensitivity": self.match_sensitivity,
            "fatigue_rate": self.fatigue_rate,
            "engagement_rates": list(map(float, self.engagement_rates)),
            "language_tags": sorted(self.language_tags),
        }


@dataclass
class World:
    """Full mutable state of one simulated run."""

    scenario: Scenario
    vault: Vault
    clock: SimClock
    users: list[SimUser]
    groups: dict[str, GroupState]
    coaches: dict[str, CoachState]
    records: dict[str, AssignmentRecord]
    rules: tuple[RedactionRule, ...]
    # Behavior arrays (index-aligned with users)
    checkins: np.ndarray        # (n, horizon*7) int8
    actions: np.ndarray         # (n, horizon, K) int32
    weights_kg: np.ndarray      # (n, horizon+1)
    weekly_scores: np.ndarray   # (n, horizon), NaN until scored
    # Environment-private registration payloads, kept only for message
    # synthesis; never serialized into any output.
    _raw_identities: dict[str, dict] = field(default_factory=dict)
    change_history: dict[str, list[tuple[int, str]]] = field(default_factory=dict)
    deid_messages: list[DeidText] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def user_index(self, token_value: str) -> int:
        return self._index_by_token[token_value]

    def __post_init__(self) -> None:
        self._index_by_token = {u.token.value: u.index for u in self.users}

    # -- oracles used by tests ------------------------------------------------

    def registered_identity_strings(self) -> set[str]:
        """Raw and normalized identity values, for output-separation scans."""
        values: set[str] = set()
        for identity in self._raw_identities.values():
            for key, value in identity.items():
                values.add(value)
                if key in ("email", "full_name", "first_name", "last_name"):
                    values.add(value.lower())
                if key == "phone":
                    values.add("".join(ch for ch in value if ch.isdigit()))
        return values

    def audit_constraints(self, policy: PolicyConfig) -> int:
        """Independent re-check of capacity, coach-load, and dwell invariants.

        Returns the number of violations found (0 in a correct run).
        """
        violations = 0
        for group in self.groups.values():
            if len(group.members) > group.capacity:
                violations += 1
        for coach in self.coaches.values():
            if coach.load(self.groups) > coach.load_limit:
                violations += 1
        for changes in self.change_history.values():
            epochs = [e for e, _ in changes[1:]]  # skip initial placement
            for prev, nxt in zip(epochs, epochs[1:]):
                if nxt - prev < policy.dwell:
                    violations += 1
        return violations


def generate_cohort(scenario: Scenario, keys: KeyRing) -> World:
    """Deterministically build users, groups, coaches, and vault registrations.

    Every synthetic user is registered through the vault, so nothing
    downstream of this function handles anything but tokens.
    """
    rng = substream(scenario.seed, _STREAM_COHORT)
    clock = SimClock()
    vault = Vault(keys, clock=clock, entropy=lambda n: rng.bytes(n))

    # Groups, coaches, capacity feasibility.
    capacities = rng.integers(scenario.capacity_min, scenario.capacity_max + 1, scenario.n_groups)
    total_capacity = int(capacities.sum())
    if scenario.n_users > total_capacity:
        raise ValidationError(
            f"capacity constraint infeasible: {scenario.n_users} users exceed "
            f"total group capacity {total_capacity}"
        )
    groups: dict[str, GroupState] = {}
    coaches: dict[str, CoachState] = {
        f"c{i:02d}": CoachState(coach_id=f"c{i:02d}") for i in range(scenario.n_coaches)
    }
    for g in range(scenario.n_groups):
        gid = f"g{g:03d}"
        coach_id = f"c{g % scenario.n_coaches:02d}"
        groups[gid] = GroupState(
            group_id=gid,
            coach_id=coach_id,
            capacity=int(capacities[g]),
            goal_category=GOAL_CATEGORIES[g % len(GOAL_CATEGORIES)],
            language_tags=frozenset({"en"}),
        )
        coaches[coach_id].groups.add(gid)
    for coach in coaches.values():
        cap_sum = sum(groups[g].capacity for g in coach.groups)
        coach.load_limit = max(1, int(np.floor(scenario.coach_load_factor * cap_sum)))
    total_load = sum(c.load_limit for c in coaches.values())
    if scenario.n_users > total_load:
        raise ValidationError(
            f"coach-load constraint infeasible: {scenario.n_users} users exceed "
            f"total coach load limit {total_load}"
        )

    # Users: identity through the vault, behavioral parameters kept.
    users: list[SimUser] = []
    raw_identities: dict[str, dict] = {}
    goal_weights = np.asarray(scenario.goal_weights)
    weights0_col = np.empty(scenario.n_users)
    for i in range(scenario.n_users):
        identity = synth_identity(rng, i)
        goal = GOAL_CATEGORIES[int(rng.choice(len(GOAL_CATEGORIES), p=goal_weights))]
        base_logit = scenario.base_logit_mean + scenario.base_logit_sd * float(rng.normal())
        fatigue = scenario.fatigue_mean * float(rng.uniform(0.5, 1.5))
        rates = np.asarray(scenario.engagement_rate_means) * np.exp(
            0.3 * rng.normal(size=len(ACTION_TYPES))
        )
        weight0 = scenario.weight_start_mean + scenario.weight_start_sd * float(rng.normal())
        token = vault.register(identity)
        users.append(
            SimUser(
                index=i,
                token=token,
                goal=goal,
                base_logit=base_logit,
                match_sensitivity=scenario.match_uplift,
                fatigue_rate=fatigue,
                engagement_rates=rates,
            )
        )
        raw_identities[token.value] = identity
        weights0_col[i] = weight0

    horizon = scenario.horizon_weeks
    world = World(
        scenario=scenario,
        vault=vault,
        clock=clock,
        users=users,
        groups=groups,
        coaches=coaches,
        records={},
        rules=default_rules(),
        checkins=np.zeros((scenario.n_users, horizon * DAYS_PER_WEEK), dtype=np.int8),
        actions=np.zeros((scenario.n_users, horizon, len(ACTION_TYPES)), dtype=np.int32),
        weights_kg=np.zeros((scenario.n_users, horizon + 1)),
        weekly_scores=np.full((scenario.n_users, horizon), np.nan),
        _raw_identities=raw_identities,
    )
    world.weights_kg[:, 0] = weights0_col

    _place_initially(world)
    return world


def _place_initially(world: World) -> None:
    """Seed placement; a configured fraction lands in goal-mismatched groups."""
    scenario = world.scenario
    rng = substream(scenario.seed, _STREAM_PLACEMENT)
    sorted_gids = sorted(world.groups)
    for user in world.users:
        mismatched = rng.random() < scenario.misgroup_fraction
        right = [g for g in sorted_gids if world.groups[g].goal_category == user.goal]
        wrong = [g for g in sorted_gids if world.groups[g].goal_category != user.goal]
        pools = (wrong, right) if mismatched else (right, wrong)
        placed = None
        for pool in pools:
            open_groups = [g for g in pool if _has_room(world, g)]
            if open_groups:
                placed = open_groups[int(rng.integers(len(open_groups)))]
                break
        if placed is None:
            raise ValidationError(
                "placement infeasible: no group has both capacity and coach headroom"
            )
        world.groups[placed].members.add(user.token.value)
        world.records[user.token.value] = AssignmentRecord(
            user_token=user.token.value, current_group=placed, last_change_epoch=0
        )
        world.change_history[user.token.value] = [(0, placed)]


def _has_room(world: World, gid: str) -> bool:
    group = world.groups[gid]
    if len(group.members) >= group.capacity:
        return False
    coach = world.coaches[group.coach_id]
    return coach.load(world.groups) < coach.load_limit


# ---------------------------------------------------------------------------
# Weekly stepping
# ---------------------------------------------------------------------------


def group_activity_flags(world: World, epoch: int) -> dict[str, bool]:
    """Active iff the group has members whose last-week mean score clears the bar.

    Before engagement scores exist (the pre-period), occupied groups
    count as active.
    """
    flags = {}
    for gid, group in world.groups.items():
        if not group.members:
            flags[gid] = False
            continue
        if epoch == 0 or np.isnan(world.weekly_scores[:, epoch - 1]).all():
            flags[gid] = True
            continue
        idx = [world.user_index(tok) for tok in group.members]
        flags[gid] = float(np.mean(world.weekly_scores[idx, epoch - 1])) >= world.scenario.activity_threshold
    return flags


def group_engagement_means(world: World, epoch: int) -> dict[str, float]:
    """Mean member engagement last week, as the group aggregate feature."""
    means = {}
    for gid, group in world.groups.items():
        if not group.members or epoch == 0:
            means[gid] = 0.5
            continue
        idx = [world.user_index(tok) for tok in group.members]
        scores = world.weekly_scores[idx, epoch - 1]
        means[gid] = 0.5 if np.isnan(scores).all() else float(np.nanmean(scores))
    return means


def step_week(world: World, epoch: int, active_flags: dict[str, bool]) -> None:
    """Simulate one week of check-ins, engagement actions, and weight drift.

    Check-in probability is a logistic model: base propensity plus a
    goal-match uplift and an active-group uplift, minus tenure fatigue,
    plus weekly noise. Engagement actions are Poisson with a
    multiplicative goal-match bonus. Weight drifts down proportionally
    to that week's adherence.
    """
    scenario = world.scenario
    n = world.n_users
    rng = substream(scenario.seed, _STREAM_BEHAVIOR, epoch)

    # Fixed draw order and shape, independent of membership.
    noise = rng.normal(size=n) * scenario.noise_sd
    u_checkin = rng.random((n, DAYS_PER_WEEK))
    u_actions = rng.random((n, len(ACTION_TYPES)))
    weight_noise = rng.normal(size=n) * scenario.weight_noise_sd

    match = np.zeros(n)
    active = np.zeros(n)
    for user in world.users:
        record = world.records[user.token.value]
        if record.current_group is None:
            continue
        group = world.groups[record.current_group]
        match[user.index] = 1.0 if group.goal_category == user.goal else 0.0
        active[user.index] = 1.0 if active_flags.get(record.current_group, False) else 0.0

    base = np.array([u.base_logit for u in world.users])
    sensitivity = np.array([u.match_sensitivity for u in world.users])
    fatigue = np.array([u.fatigue_rate for u in world.users])
    logits = base + sensitivity * match + scenario.activity_uplift * active - fatigue * epoch + noise
    p = sigmoid(logits)
    week_checkins = (u_checkin < p[:, None]).astype(np.int8)
    world.checkins[:, epoch * DAYS_PER_WEEK : (epoch + 1) * DAYS_PER_WEEK] = week_checkins

    rates = np.stack([u.engagement_rates for u in world.users])
    lam = rates * (1.0 + scenario.engagement_match_bonus * match)[:, None]
    world.actions[:, epoch, :] = poisson_from_uniform(u_actions, lam)

    week_adherence = week_checkins.mean(axis=1)
    world.weights_kg[:, epoch + 1] = (
        world.weights_kg[:, epoch]
        - scenario.weight_drift_per_adherent_week * week_adherence
        + weight_noise
    )


def step_messages(world: World, epoch: int) -> None:
    """Synthesize this week's free-text posts and push them through redaction.

    Raw text (which may self-disclose registered identifiers) exists
    only inside this function; only the de-identified result is kept.
    """
    scenario = world.scenario
    n = world.n_users
    rng = substream(scenario.seed, _STREAM_MESSAGE, epoch)
    post_draw = rng.random(n)
    variants = rng.integers(0, N_MESSAGE_VARIANTS, size=n)
    aux_ids = rng.integers(0, 10**8, size=n)
    geo = rng.integers(0, 10000, size=(n, 2))
    for user in world.users:
        i = user.index
        if post_draw[i] >= scenario.message_prob:
            continue
        identity = world._raw_identities[user.token.value]
        text = synth_message(int(variants[i]), identity, int(aux_ids[i]), int(geo[i, 0]), int(geo[i, 1]))
        world.deid_messages.append(
            redact(text, user.token, world.rules, {"goal": user.goal})
        )
