"""Scenario configuration and synthetic identity/message grammars.

Every identifier the cohort generator can produce is drawn from the
grammars the default redaction rules cover, which is what makes the
redaction-completeness property checkable: a clean pipeline must audit
to a zero leak rate on generated traffic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import numpy as np

from ..errors import ValidationError
from ..features import ACTION_TYPES, GOAL_CATEGORIES
from ..redaction import DEFAULT_FIRST_NAMES, DEFAULT_LAST_NAMES

STREET_NAMES = ("Maple", "Cedar", "Willow", "Birchwood", "Juniper", "Hawthorn", "Alder", "Poplar")
STREET_SUFFIXES = ("Street", "Avenue", "Road", "Lane", "Drive", "Court")

POLICY_STATIC = "static"
POLICY_ADAPTIVE = "adaptive"
POLICIES = (POLICY_STATIC, POLICY_ADAPTIVE)


@dataclass(frozen=True)
class Scenario:
    """Complete, reproducible description of one simulated cohort run."""

    name: str = "default"
    seed: int = 0
    policy: str = POLICY_ADAPTIVE
    n_users: int = 120
    n_groups: int = 8
    n_coaches: int = 2
    capacity_min: int = 18
    capacity_max: int = 26
    coach_load_factor: float = 0.95
    goal_weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    misgroup_fraction: float = 0.3
    horizon_weeks: int = 19
    w_pre: int = 8
    w_post: int = 11
    # Behavior model; baseline propensity sits on the logistic slope so
    # uplifts are visible rather than saturated.
    base_logit_mean: float = -0.5
    base_logit_sd: float = 0.5
    match_uplift: float = 1.0
    activity_uplift: float = 0.0
    engagement_match_bonus: float = 0.5
    fatigue_mean: float = 0.01
    noise_sd: float = 0.3
    engagement_rate_means: tuple[float, ...] = (2.0, 3.0, 5.0, 4.0, 1.0)
    activity_threshold: float = 0.0
    # Messaging and assistant workflow
    message_prob: float = 0.25
    review_approve_prob: float = 0.75
    review_edit_prob: float = 0.10
    review_discard_prob: float = 0.10
    analyst_probes_per_week: int = 1
    # Weight trajectory
    weight_start_mean: float = 86.0
    weight_start_sd: float = 12.0
    weight_drift_per_adherent_week: float = 0.18
    weight_noise_sd: float = 0.05

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValidationError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.w_pre < 1 or self.w_post < 1:
            raise ValidationError("pre and post windows must each cover at least one week")
        if self.horizon_weeks < self.w_pre + self.w_post:
            raise ValidationError("horizon must cover the pre and post windows")
        if self.n_users < 1 or self.n_groups < 1 or self.n_coaches < 1:
            raise ValidationError("scenario needs at least one user, group, and coach")
        if not (1 <= self.capacity_min <= self.capacity_max):
            raise ValidationError("capacity bounds must satisfy 1 <= min <= max")
        if len(self.goal_weights) != len(GOAL_CATEGORIES):
            raise ValidationError("goal_weights must cover every goal category")
        if abs(sum(self.goal_weights) - 1.0) > 1e-9 or any(w < 0 for w in self.goal_weights):
            raise ValidationError("goal_weights must be a probability vector")
        if not (0.0 <= self.misgroup_fraction <= 1.0):
            raise ValidationError("misgroup_fraction must lie in [0, 1]")
        if len(self.engagement_rate_means) != len(ACTION_TYPES):
            raise ValidationError("engagement_rate_means must cover every action type")
        review_total = self.review_approve_prob + self.review_edit_prob + self.review_discard_prob
        if review_total > 1.0 + 1e-9 or min(
            self.review_approve_prob, self.review_edit_prob, self.review_discard_prob
        ) < 0:
            raise ValidationError("review probabilities must be non-negative and sum to <= 1")
        if not (0 < self.coach_load_factor <= 1.0):
            raise ValidationError("coach_load_factor must lie in (0, 1]")

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key, value in doc.items():
            if isinstance(value, tuple):
                doc[key] = list(value)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        coerced = dict(doc)
        for key in ("goal_weights", "engagement_rate_means"):
            if key in coerced:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)

    @classmethod
    def from_json_file(cls, path: str) -> "Scenario":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read scenario file {path}: {exc}") from exc
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# Synthetic identity generation
# ---------------------------------------------------------------------------


def synth_identity(rng: np.random.Generator, index: int) -> dict[str, str]:
    """One registration payload; every field matches a redaction-covered grammar."""
    first = DEFAULT_FIRST_NAMES[int(rng.integers(len(DEFAULT_FIRST_NAMES)))]
    last = DEFAULT_LAST_NAMES[int(rng.integers(len(DEFAULT_LAST_NAMES)))]
    phone = f"613-555-{int(rng.integers(10000)):04d}"
    dob = (
        f"{int(rng.integers(1960, 2001))}-"
        f"{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 29)):02d}"
    )
    street_no = int(rng.integers(10, 900))
    street = STREET_NAMES[int(rng.integers(len(STREET_NAMES)))]
    suffix = STREET_SUFFIXES[int(rng.integers(len(STREET_SUFFIXES)))]
    return {
        "full_name": f"{first} {last}",
        "first_name": first,
        "last_name": last,
        "email": f"{first}.{last}{index}@example-mail.test".lower(),
        "phone": phone,
        "dob": dob,
        "address": f"{street_no} {street} {suffix}",
    }


# ---------------------------------------------------------------------------
# Synthetic message grammar
# ---------------------------------------------------------------------------

N_MESSAGE_VARIANTS = 10


def synth_message(
    variant: int, identity: Mapping[str, str], aux_id: int, lat_frac: int, lon_frac: int
) -> str:
    """Free-text post for one user; some variants self-disclose identifiers."""
    first = identity["first_name"]
    last = identity["last_name"]
    if variant == 0:
        return "solid week everyone, three workouts done and meals logged"
    if variant == 1:
        return "hit my step goal twice this week, feeling good about the plan"
    if variant == 2:
        return f"hi all, I'm {first}, glad to join this group"
    if variant == 3:
        return f"ping me at {identity['email']} if you want a walking buddy"
    if variant == 4:
        return f"text me at {identity['phone']} about saturday's session"
    if variant == 5:
        return f"pickup for the recipe swap is at {identity['address']}"
    if variant == 6:
        return f"born {identity['dob']} so this is my milestone year"
    if variant == 7:
        return f"support asked me to quote member id {aux_id:08d} in the thread"
    if variant == 8:
        return f"meet at 45.{lat_frac:04d}, -75.{lon_frac:04d} by the trailhead for the run"
    return f"thanks {first} {last} for the tips this week - {first}"
