"""Rule-based free-text de-identification and residual-leak auditing.

Detection is deterministic: regular expressions plus a configurable
name dictionary. Overlapping matches resolve longest-first, then
leftmost, then by a fixed entity-type priority, so output never depends
on rule ordering. Matches are replaced by typed placeholders; rare
identifiers (long digit runs) and sub-city geolocation are generalized
rather than deleted so sentence structure survives.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional, Sequence

from .errors import ConfigurationError, ValidationError
from .vault import UserToken

ENTITY_TYPES = ("EMAIL", "PHONE", "NAME", "ADDRESS", "DOB", "ID_NUMBER", "GEO_FINE")

# Tie-break order for equal-length overlapping spans; independent of the
# order rules are supplied in.
_TYPE_PRIORITY = {t: i for i, t in enumerate(ENTITY_TYPES)}

PLACEHOLDERS = {
    "EMAIL": "[EMAIL]",
    "PHONE": "[PHONE]",
    "NAME": "[NAME]",
    "ADDRESS": "[ADDRESS]",
    "DOB": "[DOB]",
    "ID_NUMBER": "[ID]",
    "GEO_FINE": "[LOCATION]",
}

# Name dictionary used by the default NAME rule. Names deliberately avoid
# the hex alphabet (a-f only) and placeholder words so they can never
# collide with tokens or already-redacted text.
DEFAULT_FIRST_NAMES = (
    "Marisol", "Thaddeus", "Yolanda", "Desmond", "Priya", "Santiago",
    "Ingrid", "Kwame", "Noor", "Matteo", "Zofia", "Ravi", "Celeste",
    "Omar", "Freya", "Dmitri", "Anika", "Leandro", "Saoirse", "Tobias",
    "Imani", "Henrik", "Lucia", "Farid", "Bronwyn", "Emeka", "Sigrid",
    "Alejandro", "Keiko", "Rasmus", "Amara", "Vikram",
)
DEFAULT_LAST_NAMES = (
    "Hibbert", "Okafor", "Lindqvist", "Marchetti", "Novak", "Oyelaran",
    "Petrov", "Whitlock", "Nakamura", "Fontaine", "Abernathy", "Delacroix",
    "Vasquez", "Thornbury", "Ogawa", "Sorensen", "Castellano", "Mbeki",
    "Halvorsen", "Quintero", "Rahimi", "Beaumont", "Kowalski", "Ashworth",
    "Duarte", "Ferreira", "Grimaldi", "Holloway", "Iyer", "Jankowski",
    "Katsaros", "Lombardi",
)

_EMAIL_PATTERN = r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b"
_PHONE_PATTERN = (
    r"(?<!\d)(?:\+?1[-.\s])?(?:\(\d{3}\)[\s.-]?|\d{3}[\s.-])\d{3}[\s.-]\d{4}(?!\d)"
)
# Date forms only when anchored to a birth-context word; the date part is
# the named group that gets replaced, so the context word survives.
_DOB_PATTERN = (
    r"(?i)\b(?:born(?:\s+on)?|birthday|birth\s*date|date\s+of\s+birth|dob|b\.?day)\b\W{0,8}"
    r"(?P<entity>\d{4}-\d{2}-\d{2}"
    r"|\d{1,2}/\d{1,2}/\d{2,4}"
    r"|(?:jan|feb|mar|apr|may|jun|jul|aug|sep|oct|nov|dec)[a-z]*\.?\s+\d{1,2},?\s+\d{4})"
)
_ADDRESS_PATTERN = (
    r"(?i)\b\d{1,5}\s+(?:[a-z]+\s+){0,2}"
    r"(?:street|st|avenue|ave|road|rd|boulevard|blvd|lane|ln|drive|dr|court|ct"
    r"|way|place|pl|terrace|ter|crescent|cres)\b\.?"
)
_GEO_PATTERN = r"[-+]?\d{1,3}\.\d{3,}\s*,\s*[-+]?\d{1,3}\.\d{3,}"
# Standalone digit runs of 6 or more: member numbers, order ids, etc.
# Lookarounds keep decimals and word-embedded digits out.
_ID_PATTERN = r"(?<![\w.\-])\d{6,}(?![\w.\-])"


def name_pattern(
    first_names: Sequence[str] = DEFAULT_FIRST_NAMES,
    last_names: Sequence[str] = DEFAULT_LAST_NAMES,
) -> str:
    """Dictionary matcher: a known first name, optionally followed by a known last name."""
    first = "|".join(re.escape(n) for n in sorted(first_names))
    last = "|".join(re.escape(n) for n in sorted(last_names))
    return rf"(?i)\b(?:{first})(?:\s+(?:{last}))?\b"


@dataclass(frozen=True)
class RedactionRule:
    """One detection rule: entity type, compiled pattern, typed placeholder."""

    entity_type: str
    pattern: "re.Pattern[str]"
    placeholder: str

    @classmethod
    def compile(cls, entity_type: str, pattern: str, placeholder: str) -> "RedactionRule":
        if entity_type not in ENTITY_TYPES:
            raise ConfigurationError(f"unknown entity type: {entity_type!r}")
        try:
            compiled = re.compile(pattern)
        except re.error as exc:
            raise ConfigurationError(
                f"rule pattern for {entity_type} does not compile: {exc}"
            ) from exc
        return cls(entity_type=entity_type, pattern=compiled, placeholder=placeholder)


def default_rules(
    first_names: Sequence[str] = DEFAULT_FIRST_NAMES,
    last_names: Sequence[str] = DEFAULT_LAST_NAMES,
) -> tuple[RedactionRule, ...]:
    specs = (
        ("EMAIL", _EMAIL_PATTERN),
        ("PHONE", _PHONE_PATTERN),
        ("NAME", name_pattern(first_names, last_names)),
        ("ADDRESS", _ADDRESS_PATTERN),
        ("DOB", _DOB_PATTERN),
        ("ID_NUMBER", _ID_PATTERN),
        ("GEO_FINE", _GEO_PATTERN),
    )
    return tuple(
        RedactionRule.compile(etype, pattern, PLACEHOLDERS[etype]) for etype, pattern in specs
    )


def load_rules(path: str) -> tuple[RedactionRule, ...]:
    """Load rules from a JSON file of ``{entity_type, pattern, placeholder}`` objects."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            docs = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read rules file {path}: {exc}") from exc
    if not isinstance(docs, list) or not docs:
        raise ConfigurationError("rules file must be a non-empty JSON array")
    rules = []
    for doc in docs:
        try:
            rules.append(RedactionRule.compile(doc["entity_type"], doc["pattern"], doc["placeholder"]))
        except KeyError as exc:
            raise ConfigurationError(f"rule object missing key {exc}") from exc
    return tuple(rules)


def dump_rules(rules: Iterable[RedactionRule], path: str) -> None:
    docs = [
        {"entity_type": r.entity_type, "pattern": r.pattern.pattern, "placeholder": r.placeholder}
        for r in rules
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(docs, fh, indent=2)


@dataclass(frozen=True)
class EntitySpan:
    """One detected identifier occurrence; ``matched_text`` never outlives the call."""

    start: int
    end: int
    entity_type: str
    matched_text: str

    def __post_init__(self) -> None:
        if not (0 <= self.start < self.end):
            raise ValidationError("span must satisfy 0 <= start < end")


def detect(text: str, rules: Sequence[RedactionRule]) -> list[EntitySpan]:
    """All candidate matches from all rules, unresolved."""
    spans = []
    for rule in rules:
        for m in rule.pattern.finditer(text):
            group = "entity" if "entity" in rule.pattern.groupindex else 0
            start, end = m.span(group)
            if start == end:
                continue
            spans.append(EntitySpan(start, end, rule.entity_type, m.group(group)))
    return spans


def resolve_spans(spans: Sequence[EntitySpan]) -> list[EntitySpan]:
    """Non-overlapping subset: longest match first, then leftmost, then type priority."""
    ordered = sorted(
        spans,
        key=lambda s: (-(s.end - s.start), s.start, _TYPE_PRIORITY[s.entity_type]),
    )
    chosen: list[EntitySpan] = []
    for span in ordered:
        if all(span.end <= c.start or span.start >= c.end for c in chosen):
            chosen.append(span)
    chosen.sort(key=lambda s: s.start)
    return chosen


def scan_for_identifiers(text: str, rules: Sequence[RedactionRule]) -> list[EntitySpan]:
    """Resolved identifier spans in ``text``; empty means clean."""
    return resolve_spans(detect(text, rules))


_DEID_GUARD = object()
_MAX_METADATA_ENTRIES = 16


class DeidText:
    """De-identified text bound to its source token and cohort metadata.

    Instances are constructible only through :func:`redact` (or trusted
    rehydration of previously redacted corpora); the coaching assistant
    accepts nothing else, which is what keeps raw text out of templates.
    """

    __slots__ = ("text", "source_user_token", "cohort_metadata", "redaction_count_by_type")

    def __init__(
        self,
        text: str,
        source_user_token: UserToken,
        cohort_metadata: Mapping[str, Any],
        redaction_count_by_type: Mapping[str, int],
        *,
        _guard: object = None,
    ) -> None:
        if _guard is not _DEID_GUARD:
            raise ValidationError(
                "DeidText cannot be built from raw text; use redact()"
            )
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "source_user_token", source_user_token)
        object.__setattr__(self, "cohort_metadata", dict(cohort_metadata))
        object.__setattr__(self, "redaction_count_by_type", dict(redaction_count_by_type))

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("DeidText is immutable")

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "user_token": self.source_user_token.value,
            "cohort": self.cohort_metadata,
            "counts": self.redaction_count_by_type,
        }


def _validate_metadata(metadata: Mapping[str, Any]) -> None:
    if len(metadata) > _MAX_METADATA_ENTRIES:
        raise ValidationError("cohort metadata is limited to a small key-value map")
    for key, value in metadata.items():
        if not isinstance(key, str) or not isinstance(value, (str, int, float, bool)):
            raise ValidationError("cohort metadata must map strings to scalars")


def redact(
    text: str,
    user_token: UserToken,
    rules: Optional[Sequence[RedactionRule]] = None,
    cohort_metadata: Optional[Mapping[str, Any]] = None,
) -> DeidText:
    """Replace every detected identifier with its typed placeholder.

    The result carries only the user token plus supplied cohort
    metadata; matched text is not retained.
    """
    if not isinstance(text, str):
        raise ValidationError("text must be a str")
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise ValidationError(f"text is not valid Unicode: {exc.reason}") from exc
    if not isinstance(user_token, UserToken):
        raise ValidationError("user_token must be a UserToken")
    metadata = dict(cohort_metadata or {})
    _validate_metadata(metadata)
    active_rules = default_rules() if rules is None else rules
    placeholder_by_type = {r.entity_type: r.placeholder for r in active_rules}

    spans = scan_for_identifiers(text, active_rules)
    counts = {etype: 0 for etype in placeholder_by_type}
    pieces = []
    cursor = 0
    for span in spans:
        pieces.append(text[cursor : span.start])
        pieces.append(placeholder_by_type[span.entity_type])
        counts[span.entity_type] += 1
        cursor = span.end
    pieces.append(text[cursor:])
    return DeidText(
        "".join(pieces),
        user_token,
        metadata,
        counts,
        _guard=_DEID_GUARD,
    )


def _rehydrate_deid(
    text: str,
    user_token: UserToken,
    cohort_metadata: Optional[Mapping[str, Any]] = None,
    redaction_count_by_type: Optional[Mapping[str, int]] = None,
) -> DeidText:
    """Trusted-path constructor for corpora this pipeline already produced."""
    return DeidText(
        text,
        user_token,
        dict(cohort_metadata or {}),
        dict(redaction_count_by_type or {}),
        _guard=_DEID_GUARD,
    )


def load_deid_corpus(path: str) -> list[DeidText]:
    """Rehydrate a JSON-lines corpus previously written by this pipeline."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            samples.append(
                _rehydrate_deid(
                    doc["text"],
                    UserToken(doc["user_token"]),
                    doc.get("cohort"),
                    doc.get("counts"),
                )
            )
    return samples


@dataclass(frozen=True)
class LeakReport:
    """Residual-identifier audit over a de-identified corpus."""

    n_samples: int
    n_hits: int
    leak_rate: float
    hit_examples_by_type: Mapping[str, tuple[int, ...]]

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_hits": self.n_hits,
            "leak_rate": self.leak_rate,
            "hit_examples_by_type": {k: list(v) for k, v in self.hit_examples_by_type.items()},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LeakReport":
        return cls(
            n_samples=int(doc["n_samples"]),
            n_hits=int(doc["n_hits"]),
            leak_rate=float(doc["leak_rate"]),
            hit_examples_by_type={
                k: tuple(v) for k, v in doc.get("hit_examples_by_type", {}).items()
            },
        )


_MAX_HIT_EXAMPLES = 5


def leak_audit(
    samples: Sequence[DeidText], rules: Optional[Sequence[RedactionRule]] = None
) -> LeakReport:
    """Fraction of samples with at least one residual match under the same rules.

    Hit examples are recorded as sample indices per entity type, never
    as the matched text itself.
    """
    if len(samples) == 0:
        raise ValidationError("leak audit needs at least one sample")
    active_rules = default_rules() if rules is None else rules
    n_hits = 0
    examples: dict[str, list[int]] = {}
    for i, sample in enumerate(samples):
        if not isinstance(sample, DeidText):
            raise ValidationError("leak audit samples must be DeidText")
        spans = scan_for_identifiers(sample.text, active_rules)
        if spans:
            n_hits += 1
            for span in spans:
                bucket = examples.setdefault(span.entity_type, [])
                if len(bucket) < _MAX_HIT_EXAMPLES:
                    bucket.append(i)
    return LeakReport(
        n_samples=len(samples),
        n_hits=n_hits,
        leak_rate=n_hits / len(samples),
        hit_examples_by_type={k: tuple(v) for k, v in examples.items()},
    )
