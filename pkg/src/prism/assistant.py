"""Template-based coaching drafts with a mandatory review gate.

Draft generation is deterministic slot substitution over de-identified
inputs only: the summary slot accepts nothing but ``DeidText`` and every
rendered or edited draft is re-scanned with the redaction rules before
it can move forward. Nothing is deliverable until a reviewer approves or
edits it; terminal decisions are immutable and the first decision wins.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .errors import LeakageError, StateError, ValidationError
from .features import LearningContext
from .redaction import DeidText, RedactionRule, default_rules, scan_for_identifiers
from .vault import UserToken

logger = logging.getLogger(__name__)

TEMPLATE_CATEGORIES = ("reengagement", "milestone", "checkin_reminder")

# Lint list: templates must never steer toward clinical instructions.
PROHIBITED_CLINICAL_TERMS = ("diagnose", "diagnosis", "prescribe", "prescription", "dosage")

# Slot names that would smuggle identity back into a rendered draft.
IDENTITY_SLOT_NAMES = frozenset(
    {"name", "first_name", "last_name", "full_name", "email", "phone", "address", "dob"}
)

DRAFT_PENDING = "pending"
DRAFT_APPROVED = "approved"
DRAFT_EDITED = "edited"
DRAFT_DISCARDED = "discarded"
TERMINAL_STATUSES = frozenset({DRAFT_APPROVED, DRAFT_EDITED, DRAFT_DISCARDED})
DELIVERABLE_STATUSES = frozenset({DRAFT_APPROVED, DRAFT_EDITED})


def _slot_names(body: str) -> list[str]:
    import string

    return [fname for _, fname, _, _ in string.Formatter().parse(body) if fname]


@dataclass(frozen=True)
class DraftTemplate:
    """Message template with named slots; linted at construction."""

    template_id: str
    category: str
    body: str

    def __post_init__(self) -> None:
        if self.category not in TEMPLATE_CATEGORIES:
            raise ValidationError(f"unknown template category: {self.category!r}")
        lowered = self.body.lower()
        for term in PROHIBITED_CLINICAL_TERMS:
            if term in lowered:
                raise ValidationError(
                    f"template {self.template_id} contains prohibited clinical term {term!r}"
                )
        for slot in _slot_names(self.body):
            if slot.lower() in IDENTITY_SLOT_NAMES:
                raise ValidationError(
                    f"template {self.template_id} declares identity slot {slot!r}"
                )


def default_templates() -> dict[str, DraftTemplate]:
    templates = (
        DraftTemplate(
            template_id="reengage-streak",
            category="reengagement",
            body=(
                "Quick nudge from your coach: {summary} "
                "A single check-in today gets the streak restarted. "
                "Anything blocking you this week?"
            ),
        ),
        DraftTemplate(
            template_id="reengage-decline",
            category="checkin_reminder",
            body=(
                "We noticed things slowed down recently ({summary}). "
                "Want to pick one small goal together for week {epoch}?"
            ),
        ),
        DraftTemplate(
            template_id="milestone-cheer",
            category="milestone",
            body=(
                "Great momentum: {summary} Keep the daily check-ins coming; "
                "your group is cheering for you."
            ),
        ),
    )
    return {t.template_id: t for t in templates}


def load_templates(path: str) -> dict[str, DraftTemplate]:
    """Load and lint templates from a JSON array of {template_id, category, body}."""
    with open(path, "r", encoding="utf-8") as fh:
        docs = json.load(fh)
    if not isinstance(docs, list) or not docs:
        raise ValidationError("template file must be a non-empty JSON array")
    out = {}
    for doc in docs:
        template = DraftTemplate(
            template_id=doc["template_id"], category=doc["category"], body=doc["body"]
        )
        out[template.template_id] = template
    return out


@dataclass
class Draft:
    """One generated message moving through the review workflow."""

    draft_id: str
    user_token: str
    template_id: str
    rendered_text: str
    status: str = DRAFT_PENDING
    reviewer_id: Optional[str] = None
    created_at: Optional[str] = None
    decided_at: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "draft_id": self.draft_id,
            "user_token": self.user_token,
            "template_id": self.template_id,
            "rendered_text": self.rendered_text,
            "status": self.status,
            "reviewer_id": self.reviewer_id,
            "created_at": self.created_at,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Draft":
        return cls(**{k: doc[k] for k in (
            "draft_id", "user_token", "template_id", "rendered_text",
            "status", "reviewer_id", "created_at", "decided_at",
        )})


@dataclass(frozen=True)
class RiskFlag:
    """Disengagement signal surfaced to coaches; evidence is Learning-view only."""

    user_token: str
    kind: str
    severity: str
    evidence: Mapping[str, float]


DEFAULT_STREAK_THRESHOLD = 3       # days
DEFAULT_DECLINE_THRESHOLD = 0.05   # weekly-score drop per week


def flag_risks(
    context: LearningContext,
    *,
    streak_threshold: int = DEFAULT_STREAK_THRESHOLD,
    decline_threshold: float = DEFAULT_DECLINE_THRESHOLD,
) -> list[RiskFlag]:
    """Threshold checks over the context's disengagement signals."""
    flags = []
    streak = context.missed_checkin_streak
    if streak >= streak_threshold:
        flags.append(
            RiskFlag(
                user_token=context.user_token.value,
                kind="missed_streak",
                severity="high" if streak >= 2 * streak_threshold else "medium",
                evidence={"missed_checkin_streak": float(streak)},
            )
        )
    if context.engagement_slope <= -decline_threshold:
        flags.append(
            RiskFlag(
                user_token=context.user_token.value,
                kind="engagement_decline",
                severity="medium",
                evidence={"engagement_slope": context.engagement_slope},
            )
        )
    return flags


def _leak_check(text: str, rules: Sequence[RedactionRule], where: str) -> None:
    spans = scan_for_identifiers(text, rules)
    if spans:
        kinds = sorted({s.entity_type for s in spans})
        # Entity types only; never the matched text.
        raise LeakageError(f"{where} contains residual identifiers: {', '.join(kinds)}")


def generate_draft(
    summary: DeidText,
    context: LearningContext,
    template: DraftTemplate,
    *,
    rules: Optional[Sequence[RedactionRule]] = None,
    draft_id: Optional[str] = None,
    created_at: Optional[str] = None,
) -> Draft:
    """Render a pending draft by deterministic slot substitution.

    The rendered text is re-scanned with the redaction rules; any hit
    aborts with a leakage error instead of emitting the draft.
    """
    if not isinstance(summary, DeidText):
        raise ValidationError("summary must be a DeidText produced by the redaction pipeline")
    if not isinstance(context, LearningContext):
        raise ValidationError("context must be a LearningContext")
    slots = {
        "summary": summary.text,
        "missed_streak": context.missed_checkin_streak,
        "engagement_slope": f"{context.engagement_slope:+.2f}",
        "epoch": context.epoch,
    }
    slots.update(summary.cohort_metadata)
    try:
        rendered = template.body.format_map(slots)
    except KeyError as exc:
        raise ValidationError(f"template slot {exc} has no value") from exc
    active_rules = default_rules() if rules is None else rules
    _leak_check(rendered, active_rules, f"draft from template {template.template_id}")
    if draft_id is None:
        import hashlib

        digest = hashlib.sha256(
            "\x1f".join(
                (summary.source_user_token.value, template.template_id, rendered, created_at or "")
            ).encode("utf-8")
        ).hexdigest()
        draft_id = f"d-{digest[:12]}"
    return Draft(
        draft_id=draft_id,
        user_token=summary.source_user_token.value,
        template_id=template.template_id,
        rendered_text=rendered,
        created_at=created_at,
    )


_review_lock = threading.Lock()

REVIEW_DECISIONS = ("approve", "edit", "discard")


def review(
    draft: Draft,
    reviewer_id: str,
    decision: str,
    *,
    new_text: Optional[str] = None,
    rules: Optional[Sequence[RedactionRule]] = None,
    decided_at: Optional[str] = None,
) -> Draft:
    """Apply a terminal review decision to a pending draft.

    Edits re-pass the redaction scan before acceptance; on a scan hit
    the draft stays pending. Decisions on non-pending drafts fail, which
    makes the first decision win under concurrent review.
    """
    if decision not in REVIEW_DECISIONS:
        raise ValidationError(f"unknown review decision: {decision!r}")
    with _review_lock:
        if draft.status != DRAFT_PENDING:
            raise StateError(
                f"draft {draft.draft_id} already decided ({draft.status}); decisions are final"
            )
        if decision == "edit":
            if not new_text:
                raise ValidationError("edit decision requires replacement text")
            active_rules = default_rules() if rules is None else rules
            _leak_check(new_text, active_rules, f"edit of draft {draft.draft_id}")
            draft.rendered_text = new_text
            draft.status = DRAFT_EDITED
        elif decision == "approve":
            draft.status = DRAFT_APPROVED
        else:
            draft.status = DRAFT_DISCARDED
        draft.reviewer_id = reviewer_id
        draft.decided_at = decided_at
    logger.debug(
        "review decision=%s draft=%s reviewer=%s", draft.status, draft.draft_id, reviewer_id
    )
    return draft


def decision_labels(drafts: Iterable[Draft]) -> dict[str, int]:
    """Coach decisions as actionability labels for suggestion-quality audits.

    Approved or edited drafts count as actionable, discarded as not;
    pending drafts are unlabeled.
    """
    labels = {"actionable": 0, "not_actionable": 0, "unlabeled": 0}
    for draft in drafts:
        if draft.status in DELIVERABLE_STATUSES:
            labels["actionable"] += 1
        elif draft.status == DRAFT_DISCARDED:
            labels["not_actionable"] += 1
        else:
            labels["unlabeled"] += 1
    return labels


def save_drafts(drafts: Iterable[Draft], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for draft in drafts:
            fh.write(json.dumps(draft.to_dict(), sort_keys=True) + "\n")


def load_drafts(path: str) -> list[Draft]:
    drafts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                drafts.append(Draft.from_dict(json.loads(line)))
    return drafts
