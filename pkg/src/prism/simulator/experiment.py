"""End-to-end experiment driver: static vs adaptive arms over pre/post windows.

Both arms share a seed and therefore a cohort and behavior stream. The
pre-period runs under the initial (static) placement; from the
intervention epoch onward the adaptive arm re-assigns weekly through the
constrained bandit, generates coach drafts for flagged users, routes
them through review, and delivers the survivors via audited vault
restorations. Constraint violations abort the run: they indicate an
implementation bug, never a tolerable outcome.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .._version import __version__
from ..assignment import BanditModel, FEATURE_DIM, PolicyConfig, assign, compute_reward
from ..assistant import (
    DELIVERABLE_STATUSES,
    DRAFT_APPROVED,
    DRAFT_DISCARDED,
    DRAFT_EDITED,
    DRAFT_PENDING,
    Draft,
    default_templates,
    flag_risks,
    generate_draft,
    review,
    save_drafts,
)
from ..errors import ConstraintViolationError, InternalError, ValidationError
from ..features import (
    ACTION_TYPES,
    DAYS_PER_WEEK,
    EngagementWeights,
    NormalizationWindow,
    UserEvents,
    build_context,
    engagement_index,
    engagement_scores,
)
from ..metrics import MetricsReport, format_eng_index, mann_whitney_u, render_report
from ..redaction import _rehydrate_deid, leak_audit, redact
from ..vault import KeyRing, RestorationRequest, rfc3339, verify_audit_chain
from .scenario import POLICY_ADAPTIVE, Scenario
from .world import (
    SIM_EPOCH_BASE,
    WEEK_SECONDS,
    World,
    generate_cohort,
    group_activity_flags,
    group_engagement_means,
    step_messages,
    step_week,
    substream,
    STREAM_REVIEW,
)

_WINDOW_WEEKS = 8
_EDIT_TEXT = (
    "Checking in from your coach: last week looked quieter than usual. "
    "Want to pick one small goal together for this week?"
)


@dataclass
class _PendingObservation:
    user_index: int
    phi: np.ndarray
    epoch: int
    group_id: str
    churn_penalty: int


class _TraceSink:
    """Streams decision traces to JSONL, keeps them in memory, or just counts."""

    def __init__(self, path: Optional[str], keep: bool) -> None:
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._keep = keep
        self.traces: list[dict] = []
        self.count = 0

    def write(self, trace: dict) -> None:
        self.count += 1
        if self._fh is not None:
            self._fh.write(json.dumps(trace, sort_keys=True) + "\n")
        if self._keep:
            self.traces.append(trace)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class RunManifest:
    """Everything needed to reproduce a run bit-exactly (keys come from the
    named source, never from the manifest itself)."""

    scenario: dict
    policy: dict
    engagement_alphas: list[float]
    redaction_rules: dict
    code_version: str
    seed: int
    key_source: str
    outputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "policy": self.policy,
            "engagement_alphas": self.engagement_alphas,
            "redaction_rules": self.redaction_rules,
            "code_version": self.code_version,
            "seed": self.seed,
            "key_source": self.key_source,
            "outputs": self.outputs,
        }


@dataclass
class RunResult:
    report: MetricsReport
    manifest: RunManifest
    world: World
    drafts: list[Draft]
    traces: list[dict]


def _user_events_view(world: World, index: int) -> UserEvents:
    return UserEvents(
        checkins=world.checkins[index],
        action_counts=world.actions[index],
        weights_kg=world.weights_kg[index, 1:],
        first_day=0,
    )


def _normalization_window(world: World, epoch: int) -> NormalizationWindow:
    start = max(0, epoch - _WINDOW_WEEKS)
    weekly_totals = world.actions[:, start:epoch, :].sum(axis=2)
    return NormalizationWindow(
        bounds={
            "weekly_actions": (float(weekly_totals.min()), float(weekly_totals.max())),
            "tenure_weeks": (0.0, float(world.scenario.horizon_weeks)),
        },
        window_length_weeks=_WINDOW_WEEKS,
    )


def _freeze_engagement_weights(world: World, alphas: Optional[tuple]) -> EngagementWeights:
    scenario = world.scenario
    pre_counts = world.actions[:, : scenario.w_pre, :].reshape(-1, len(ACTION_TYPES))
    kwargs = {} if alphas is None else {"alphas": tuple(alphas)}
    weights = EngagementWeights.from_pre_period(pre_counts, **kwargs)
    world.weekly_scores[:, : scenario.w_pre] = np.column_stack(
        [engagement_scores(world.actions[:, w, :], weights) for w in range(scenario.w_pre)]
    )
    return weights


def _probe_restorations(world: World, epoch: int, counters: dict) -> None:
    # Learning-view consumers never restore; these probes must always be denied.
    for k in range(world.scenario.analyst_probes_per_week):
        target = world.users[(epoch + k) % world.n_users]
        result = world.vault.restore_identity(
            RestorationRequest(
                requester_id=f"analyst-{k}",
                role="analyst",
                mfa_verified=True,
                user_token=target.token,
                purpose="cohort analysis",
            )
        )
        counters["restoration_attempts"] += 1
        counters["analyst_attempts"] += 1
        if not result.granted:
            counters["analyst_denials"] += 1


def _deliver(
    world: World, draft: Draft, counters: dict, delivered: list[tuple[str, str]]
) -> None:
    record = world.records[draft.user_token]
    coach_id = world.groups[record.current_group].coach_id if record.current_group else "c00"
    result = world.vault.restore_identity(
        RestorationRequest(
            requester_id=coach_id,
            role="coach",
            mfa_verified=True,
            user_token=world.users[world.user_index(draft.user_token)].token,
            purpose="deliver coaching message",
        )
    )
    counters["restoration_attempts"] += 1
    if not result.granted:
        raise InternalError(f"delivery restoration unexpectedly denied: {result.denial_reason}")
    delivered.append((draft.user_token, draft.rendered_text))


def _assistant_pass(
    world: World,
    epoch: int,
    contexts: dict[int, object],
    drafts: list[Draft],
    counters: dict,
    delivered: list[tuple[str, str]],
) -> None:
    scenario = world.scenario
    templates = default_templates()
    rng = substream(scenario.seed, STREAM_REVIEW, epoch)
    created_at = rfc3339(SIM_EPOCH_BASE + epoch * WEEK_SECONDS)
    for user in world.users:
        context = contexts[user.index]
        flags = flag_risks(context)
        if not flags:
            continue
        flag = flags[0]
        template = templates["reengage-streak" if flag.kind == "missed_streak" else "reengage-decline"]
        summary_text = (
            f"missed {context.missed_checkin_streak} recent check-ins; "
            f"engagement slope {context.engagement_slope:+.2f} per week."
        )
        summary = redact(summary_text, user.token, world.rules, {"goal": user.goal})
        draft = generate_draft(
            summary,
            context,
            template,
            rules=world.rules,
            draft_id=f"d-{scenario.seed}-{epoch:02d}-{user.index:04d}",
            created_at=created_at,
        )
        drafts.append(draft)
        record = world.records[user.token.value]
        coach_id = world.groups[record.current_group].coach_id if record.current_group else "c00"
        u = float(rng.random())
        if u < scenario.review_approve_prob:
            review(draft, coach_id, "approve", decided_at=created_at)
        elif u < scenario.review_approve_prob + scenario.review_edit_prob:
            review(draft, coach_id, "edit", new_text=_EDIT_TEXT, rules=world.rules, decided_at=created_at)
        elif u < scenario.review_approve_prob + scenario.review_edit_prob + scenario.review_discard_prob:
            review(draft, coach_id, "discard", decided_at=created_at)
        # else: stays pending in the review queue
        if draft.status in DELIVERABLE_STATUSES:
            _deliver(world, draft, counters, delivered)


def run_experiment(
    scenario: Scenario,
    keys: KeyRing,
    *,
    policy: Optional[PolicyConfig] = None,
    engagement_alphas: Optional[tuple] = None,
    out_dir: Optional[str] = None,
    keep_traces: bool = False,
    key_source: str = "explicit",
) -> RunResult:
    """Run one arm end-to-end and assemble its metrics report.

    The pre-period always runs under the initial static placement; the
    configured policy takes over at the intervention epoch. Writes the
    run directory when ``out_dir`` is given.
    """
    config = policy or PolicyConfig()
    world = generate_cohort(scenario, keys)
    adaptive = scenario.policy == POLICY_ADAPTIVE
    horizon = scenario.horizon_weeks
    t0 = scenario.w_pre

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    sink = _TraceSink(os.path.join(out_dir, "traces.jsonl") if out_dir else None, keep_traces)

    model = BanditModel(dim=FEATURE_DIM, ridge=config.ridge)
    pending: list[_PendingObservation] = []
    drafts: list[Draft] = []
    delivered: list[tuple[str, str]] = []
    eng_weights: Optional[EngagementWeights] = None
    counters = {
        "decisions": 0,
        "reassignments": 0,
        "restoration_attempts": 0,
        "analyst_attempts": 0,
        "analyst_denials": 0,
        "violations": 0,
    }

    try:
        eng_weights = _run_epochs(
            world, config, adaptive, sink, model, pending, drafts, delivered,
            counters, engagement_alphas,
        )
    finally:
        sink.close()

    report = _build_report(world, config, counters, drafts, delivered)
    manifest = RunManifest(
        scenario=scenario.to_dict(),
        policy=config.to_dict(),
        engagement_alphas=[float(a) for a in eng_weights.alphas],
        redaction_rules={
            "count": len(world.rules),
            "entity_types": sorted(r.entity_type for r in world.rules),
        },
        code_version=__version__,
        seed=scenario.seed,
        key_source=key_source,
    )

    if out_dir:
        _write_run_dir(out_dir, world, report, manifest, drafts)
    return RunResult(
        report=report, manifest=manifest, world=world, drafts=drafts, traces=sink.traces
    )


def _run_epochs(
    world: World,
    config: PolicyConfig,
    adaptive: bool,
    sink: _TraceSink,
    model: BanditModel,
    pending: list,
    drafts: list,
    delivered: list,
    counters: dict,
    engagement_alphas,
) -> EngagementWeights:
    scenario = world.scenario
    horizon = scenario.horizon_weeks
    t0 = scenario.w_pre
    eng_weights: Optional[EngagementWeights] = None

    for epoch in range(horizon):
        world.clock.set_week(epoch)
        if epoch == t0:
            eng_weights = _freeze_engagement_weights(world, engagement_alphas)
        if eng_weights is not None and epoch > t0:
            world.weekly_scores[:, epoch - 1] = engagement_scores(
                world.actions[:, epoch - 1, :], eng_weights
            )
        flags = group_activity_flags(world, epoch)

        if adaptive and epoch >= t0:
            # Matured rewards first: the policy only sees fully observed windows.
            still_pending = []
            for obs in pending:
                if obs.epoch + config.w_post <= epoch:
                    reward = compute_reward(
                        _user_events_view(world, obs.user_index),
                        user_token=world.users[obs.user_index].token.value,
                        group_id=obs.group_id,
                        epoch=obs.epoch,
                        churn_penalty=obs.churn_penalty,
                        weights=eng_weights,
                        config=config,
                    )
                    if reward is not None:
                        model.update(obs.phi, reward.reward)
                else:
                    still_pending.append(obs)
            pending[:] = still_pending

            window = _normalization_window(world, epoch)
            engagement_by_group = group_engagement_means(world, epoch)
            contexts = {
                user.index: build_context(
                    _user_events_view(world, user.index),
                    user_token=user.token,
                    epoch=epoch,
                    goal=user.goal,
                    window=window,
                    weights=eng_weights,
                )
                for user in world.users
            }
            for user in world.users:
                record = world.records[user.token.value]
                decision = assign(
                    contexts[user.index],
                    record,
                    world.groups,
                    world.coaches,
                    model,
                    epoch,
                    config,
                    user_tags=user.language_tags,
                    group_engagement=engagement_by_group,
                )
                counters["decisions"] += 1
                sink.write(decision.to_trace_dict())
                if decision.changed:
                    counters["reassignments"] += 1
                    world.change_history[user.token.value].append((epoch, decision.chosen))
                if decision.phi_chosen is not None:
                    pending.append(
                        _PendingObservation(
                            user_index=user.index,
                            phi=decision.phi_chosen,
                            epoch=epoch,
                            group_id=decision.chosen,
                            churn_penalty=decision.churn_penalty,
                        )
                    )
            _assistant_pass(world, epoch, contexts, drafts, counters, delivered)

        _probe_restorations(world, epoch, counters)
        step_week(world, epoch, flags)
        step_messages(world, epoch)

        epoch_violations = world.audit_constraints(config)
        if epoch_violations:
            counters["violations"] += epoch_violations
            raise ConstraintViolationError(
                f"constraint violation detected at epoch {epoch}; aborting run"
            )

    if eng_weights is None:
        eng_weights = _freeze_engagement_weights(world, engagement_alphas)
    for w in range(t0, horizon):
        if np.isnan(world.weekly_scores[:, w]).any():
            world.weekly_scores[:, w] = engagement_scores(world.actions[:, w, :], eng_weights)
    return eng_weights


def _build_report(
    world: World,
    config: PolicyConfig,
    counters: dict,
    drafts: list[Draft],
    delivered: list[tuple[str, str]],
) -> MetricsReport:
    scenario = world.scenario
    t0 = scenario.w_pre
    post_end = t0 + scenario.w_post

    pre_days = world.checkins[:, : t0 * DAYS_PER_WEEK]
    post_days = world.checkins[:, t0 * DAYS_PER_WEEK : post_end * DAYS_PER_WEEK]
    adh_pre = float(pre_days.mean(axis=1).mean())
    adh_post = float(post_days.mean(axis=1).mean())

    scores_pre = world.weekly_scores[:, :t0].ravel()
    scores_post = world.weekly_scores[:, t0:post_end].ravel()
    eng_idx = engagement_index(scores_pre, scores_post)

    corpus = list(world.deid_messages) + [
        _rehydrate_deid(d.rendered_text, world.users[world.user_index(d.user_token)].token)
        for d in drafts
    ]
    leak = leak_audit(corpus, world.rules)

    chain_ok, _ = verify_audit_chain(world.vault.audit_log.entries())
    status_counts = {
        "approved": sum(1 for d in drafts if d.status == DRAFT_APPROVED),
        "edited": sum(1 for d in drafts if d.status == DRAFT_EDITED),
        "discarded": sum(1 for d in drafts if d.status == DRAFT_DISCARDED),
        "pending": sum(1 for d in drafts if d.status == DRAFT_PENDING),
    }
    delivered_leak = None
    if delivered:
        delivered_docs = [
            _rehydrate_deid(text, world.users[world.user_index(token)].token)
            for token, text in delivered
        ]
        delivered_leak = leak_audit(delivered_docs, world.rules).leak_rate

    return MetricsReport(
        arm=scenario.policy,
        seed=scenario.seed,
        scenario_name=scenario.name,
        horizon_weeks=scenario.horizon_weeks,
        w_pre=scenario.w_pre,
        w_post=scenario.w_post,
        adherence_pre=adh_pre,
        adherence_post=adh_post,
        eng_index=eng_idx,
        weekly_scores_pre=[float(v) for v in scores_pre],
        weekly_scores_post=[float(v) for v in scores_post],
        reassignments=counters["reassignments"],
        violations=counters["violations"],
        leak=leak,
        weight_delta_mean=float(
            (world.weights_kg[:, scenario.horizon_weeks] - world.weights_kg[:, 0]).mean()
        ),
        decisions=counters["decisions"],
        governance={
            "restoration_attempts": counters["restoration_attempts"],
            "audit_entries": len(world.vault.audit_log),
            "analyst_attempts": counters["analyst_attempts"],
            "analyst_denials": counters["analyst_denials"],
            "audit_chain_ok": bool(chain_ok),
        },
        assistant={
            "drafts": len(drafts),
            **status_counts,
            "delivered": len(delivered),
            "delivered_leak_rate": delivered_leak,
        },
    )


def _write_run_dir(
    out_dir: str,
    world: World,
    report: MetricsReport,
    manifest: RunManifest,
    drafts: list[Draft],
) -> None:
    rendered = render_report(report)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(rendered["json"] + "\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(rendered["csv"])
    world.vault.audit_log.to_jsonl(os.path.join(out_dir, "audit.jsonl"))
    save_drafts(drafts, os.path.join(out_dir, "drafts.jsonl"))
    with open(os.path.join(out_dir, "deid_messages.jsonl"), "w", encoding="utf-8") as fh:
        for message in world.deid_messages:
            fh.write(json.dumps(message.to_dict(), sort_keys=True) + "\n")
    manifest.outputs = sorted(
        name
        for name in os.listdir(out_dir)
        if name != "manifest.json"
    )
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Arm comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonTable:
    """Side-by-side outcome table for two runs from the same seed family."""

    arm_a: str
    arm_b: str
    adherence_post_a: float
    adherence_post_b: float
    adherence_diff: float
    eng_index_a: float
    eng_index_b: float
    eng_rel_pct_a: float
    eng_rel_pct_b: float
    eng_diff_pp: float
    weight_delta_a: float
    weight_delta_b: float
    reassignments_a: int
    reassignments_b: int
    u_statistic: float
    p_value: float

    def to_dict(self) -> dict:
        return {
            "arm_a": self.arm_a,
            "arm_b": self.arm_b,
            "adherence_post": {
                "a": self.adherence_post_a,
                "b": self.adherence_post_b,
                "diff": self.adherence_diff,
            },
            "eng_index": {
                "a": self.eng_index_a,
                "b": self.eng_index_b,
                "rel_pct_a": self.eng_rel_pct_a,
                "rel_pct_b": self.eng_rel_pct_b,
                "diff_pp": self.eng_diff_pp,
            },
            "weight_delta": {"a": self.weight_delta_a, "b": self.weight_delta_b},
            "reassignments": {"a": self.reassignments_a, "b": self.reassignments_b},
            "mann_whitney": {"u": self.u_statistic, "p": self.p_value},
        }

    def render_text(self) -> str:
        return "\n".join(
            [
                f"{'metric':<22}{self.arm_a:>14}{self.arm_b:>14}",
                f"{'adherence (post)':<22}{self.adherence_post_a:>14.4f}{self.adherence_post_b:>14.4f}",
                f"{'eng index':<22}{format_eng_index(self.eng_index_a):>14}{format_eng_index(self.eng_index_b):>14}",
                f"{'eng diff (pp)':<22}{self.eng_diff_pp:>+28.1f}",
                f"{'weight delta (kg)':<22}{self.weight_delta_a:>14.2f}{self.weight_delta_b:>14.2f}",
                f"{'reassignments':<22}{self.reassignments_a:>14d}{self.reassignments_b:>14d}",
                f"{'U-test p (weekly S)':<22}{self.p_value:>28.4g}",
            ]
        )


def compare_arms(report_a: MetricsReport, report_b: MetricsReport) -> ComparisonTable:
    """Comparison table plus a rank-sum test over post-window weekly scores."""
    same_family = (
        report_a.seed == report_b.seed
        and report_a.w_pre == report_b.w_pre
        and report_a.w_post == report_b.w_post
        and report_a.horizon_weeks == report_b.horizon_weeks
    )
    if not same_family:
        raise ValidationError("reports come from mismatched windows or seed families")
    u, p = mann_whitney_u(report_a.weekly_scores_post, report_b.weekly_scores_post)
    rel_a = (report_a.eng_index - 1.0) * 100.0
    rel_b = (report_b.eng_index - 1.0) * 100.0
    return ComparisonTable(
        arm_a=report_a.arm,
        arm_b=report_b.arm,
        adherence_post_a=report_a.adherence_post,
        adherence_post_b=report_b.adherence_post,
        adherence_diff=report_b.adherence_post - report_a.adherence_post,
        eng_index_a=report_a.eng_index,
        eng_index_b=report_b.eng_index,
        eng_rel_pct_a=rel_a,
        eng_rel_pct_b=rel_b,
        eng_diff_pp=rel_b - rel_a,
        weight_delta_a=report_a.weight_delta_mean,
        weight_delta_b=report_b.weight_delta_mean,
        reassignments_a=report_a.reassignments,
        reassignments_b=report_b.reassignments,
        u_statistic=u,
        p_value=p,
    )


def run_paired(
    scenario: Scenario,
    keys: KeyRing,
    *,
    policy: Optional[PolicyConfig] = None,
) -> tuple[MetricsReport, MetricsReport]:
    """Static and adaptive arms of the same scenario under a shared seed."""
    from dataclasses import replace

    static = run_experiment(replace(scenario, policy="static"), keys, policy=policy)
    adaptive = run_experiment(replace(scenario, policy="adaptive"), keys, policy=policy)
    return static.report, adaptive.report
