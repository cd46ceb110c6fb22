"""Redaction pipeline tests: detection, resolution, the DeidText boundary,
and leak-rate arithmetic."""

import json
import random

import pytest

from prism.errors import ConfigurationError, ValidationError
from prism.redaction import (
    DEFAULT_FIRST_NAMES,
    DEFAULT_LAST_NAMES,
    PLACEHOLDERS,
    DeidText,
    RedactionRule,
    _rehydrate_deid,
    default_rules,
    detect,
    dump_rules,
    leak_audit,
    load_deid_corpus,
    load_rules,
    redact,
    resolve_spans,
    scan_for_identifiers,
)
from prism.vault import UserToken

TOKEN = UserToken("cd" * 32)


class TestBasicRedaction:
    def test_email_and_phone(self):
        out = redact("email me at bob@x.org or 613-555-0142", TOKEN)
        assert out.text == "email me at [EMAIL] or [PHONE]"
        assert out.redaction_count_by_type["EMAIL"] == 1
        assert out.redaction_count_by_type["PHONE"] == 1

    def test_no_matches_identity_case(self):
        text = "went for a run, logged two meals, feeling strong"
        out = redact(text, TOKEN)
        assert out.text == text
        assert all(v == 0 for v in out.redaction_count_by_type.values())

    def test_name_dictionary_full_and_bare(self):
        out = redact("thanks Marisol Hibbert, and hi marisol", TOKEN)
        assert out.text == "thanks [NAME], and hi [NAME]"

    def test_digit_run_generalized(self):
        out = redact("my member id is 84721933", TOKEN)
        assert out.text == "my member id is [ID]"

    def test_short_digit_runs_survive(self):
        out = redact("did 12345 steps in 45 minutes", TOKEN)
        assert out.text == "did 12345 steps in 45 minutes"

    def test_decimals_are_not_ids(self):
        out = redact("weighed 81.123456 this morning", TOKEN)
        assert out.text == "weighed 81.123456 this morning"

    def test_latlong_generalized_to_location(self):
        out = redact("meet at 45.4215, -75.6972 by the gate", TOKEN)
        assert out.text == "meet at [LOCATION] by the gate"

    def test_street_address(self):
        out = redact("pickup at 128 Birchwood Avenue tomorrow", TOKEN)
        assert out.text == "pickup at [ADDRESS] tomorrow"

    def test_dob_requires_birth_context(self):
        with_context = redact("born 1985-03-12 in ottawa", TOKEN)
        assert with_context.text == "born [DOB] in ottawa"
        without = redact("the race is on 1985-03-12", TOKEN)
        assert "[DOB]" not in without.text

    def test_city_mention_survives(self):
        out = redact("moved to Ottawa last spring", TOKEN)
        assert out.text == "moved to Ottawa last spring"


class TestResolution:
    def test_longest_match_wins_on_overlap(self):
        # "12 Marisol Street" is both an address and contains a dictionary name.
        out = redact("meet me at 12 Marisol Street", TOKEN)
        assert out.text == "meet me at [ADDRESS]"

    def test_rule_order_independence(self):
        rules = list(default_rules())
        text = (
            "I'm Marisol Hibbert, born 1985-03-12, at 12 Maple Street, "
            "reach bob@x.org or 613-555-0142, id 99887766"
        )
        baseline = redact(text, TOKEN, tuple(rules)).text
        rng = random.Random(7)
        for _ in range(20):
            rng.shuffle(rules)
            assert redact(text, TOKEN, tuple(rules)).text == baseline

    def test_resolved_spans_never_overlap(self):
        text = "Marisol at 12 Maple Street, dob 01/02/1990, 45.1234,-75.5678"
        spans = scan_for_identifiers(text, default_rules())
        ordered = sorted(spans, key=lambda s: s.start)
        for left, right in zip(ordered, ordered[1:]):
            assert left.end <= right.start


class TestIdempotence:
    def test_placeholders_match_no_rule(self):
        for placeholder in PLACEHOLDERS.values():
            assert scan_for_identifiers(placeholder, default_rules()) == []

    def test_double_redaction_is_identity(self):
        texts = [
            "I'm Marisol, ping marisol.hibbert2@example-mail.test or 613-555-0142",
            "born 1985-03-12, live at 44 Cedar Lane, id 12345678",
            "45.4215, -75.6972 meetup",
        ]
        for text in texts:
            once = redact(text, TOKEN)
            twice = redact(once.text, TOKEN)
            assert twice.text == once.text
            assert all(v == 0 for v in twice.redaction_count_by_type.values())


class TestDeidBoundary:
    def test_public_construction_rejected(self):
        with pytest.raises(ValidationError):
            DeidText("raw text", TOKEN, {}, {})

    def test_metadata_restricted_to_scalars(self):
        with pytest.raises(ValidationError):
            redact("hello", TOKEN, cohort_metadata={"nested": {"a": 1}})

    def test_metadata_size_capped(self):
        metadata = {f"k{i}": i for i in range(40)}
        with pytest.raises(ValidationError):
            redact("hello", TOKEN, cohort_metadata=metadata)

    def test_matched_text_not_retained(self):
        out = redact("contact bob@x.org", TOKEN, cohort_metadata={"goal": "fitness"})
        serialized = json.dumps(out.to_dict())
        assert "bob@x.org" not in serialized

    def test_invalid_text_type_rejected(self):
        with pytest.raises(ValidationError):
            redact(b"bytes", TOKEN)  # type: ignore[arg-type]

    def test_immutable(self):
        out = redact("hello", TOKEN)
        with pytest.raises(AttributeError):
            out.text = "patched"


class TestRulesLoading:
    def test_round_trip_file(self, tmp_path):
        path = str(tmp_path / "rules.json")
        dump_rules(default_rules(), path)
        rules = load_rules(path)
        assert redact("bob@x.org", TOKEN, rules).text == "[EMAIL]"

    def test_uncompilable_pattern_aborts(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps([
            {"entity_type": "EMAIL", "pattern": "([unclosed", "placeholder": "[EMAIL]"}
        ]))
        with pytest.raises(ConfigurationError):
            load_rules(str(path))

    def test_unknown_entity_type_rejected(self):
        with pytest.raises(ConfigurationError):
            RedactionRule.compile("SSN", r"\d+", "[SSN]")


class TestLeakAudit:
    def test_zero_hits(self):
        samples = [redact(f"clean message {i}", TOKEN) for i in range(100)]
        report = leak_audit(samples)
        assert report.n_hits == 0
        assert report.leak_rate == 0.0

    def test_worked_instance_2_of_1200(self):
        samples = [redact(f"all good, week {i}", TOKEN) for i in range(1198)]
        # Residual self-disclosed signature names that slipped past a
        # hypothetical upstream pass, as the audit would find them.
        samples.append(_rehydrate_deid("see you all - Marisol", TOKEN))
        samples.append(_rehydrate_deid("cheers, Thaddeus", TOKEN))
        report = leak_audit(samples)
        assert report.n_samples == 1200
        assert report.n_hits == 2
        assert report.leak_rate == pytest.approx(2 / 1200, abs=1e-12)
        assert report.leak_rate == pytest.approx(0.0016666, abs=1e-6)

    def test_injected_email_one_in_fifty(self):
        samples = [redact(f"msg {i}", TOKEN) for i in range(49)]
        samples.append(_rehydrate_deid("stray raw mail bob@x.org", TOKEN))
        report = leak_audit(samples)
        assert report.leak_rate == pytest.approx(0.02)
        assert "EMAIL" in report.hit_examples_by_type
        assert report.hit_examples_by_type["EMAIL"] == (49,)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValidationError):
            leak_audit([])

    def test_report_never_contains_matched_text(self):
        samples = [_rehydrate_deid("mail bob@x.org now", TOKEN)]
        report = leak_audit(samples)
        assert "bob@x.org" not in json.dumps(report.to_dict())

    def test_corpus_file_round_trip(self, tmp_path):
        samples = [redact("call 613-555-0111 ok", TOKEN, cohort_metadata={"goal": "fitness"})]
        path = tmp_path / "corpus.jsonl"
        with open(path, "w") as fh:
            for s in samples:
                fh.write(json.dumps(s.to_dict()) + "\n")
        loaded = load_deid_corpus(str(path))
        assert loaded[0].text == "call [PHONE] ok"
        assert leak_audit(loaded).leak_rate == 0.0


class TestDictionaryHygiene:
    def test_names_cannot_hide_in_hex_tokens(self):
        hex_alphabet = set("0123456789abcdef")
        for name in DEFAULT_FIRST_NAMES + DEFAULT_LAST_NAMES:
            assert not set(name.lower()) <= hex_alphabet

    def test_names_do_not_collide_with_placeholders(self):
        placeholder_words = {p.strip("[]").lower() for p in PLACEHOLDERS.values()}
        for name in DEFAULT_FIRST_NAMES + DEFAULT_LAST_NAMES:
            assert name.lower() not in placeholder_words
