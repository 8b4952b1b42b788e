"""The deployment control loop: feasibility monitoring, drift detection,
projection, oracle arbitration, and ablation accounting.

Four modes share one environment interface:

* oracle_only -- the reference policy acts at every step (and is charged).
* hierarchical -- the student acts on a feasibility-projected state; the
  oracle's decision is substituted (and charged) whenever the student's
  output fails to parse, is unaffordable, or windowed drift fires.
  Substituted pairs fill a bounded buffer whose overflow triggers a
  fine-tune event that shrinks the student's semantic noise.
* distill_only / no_distill -- the student acts alone with no controller
  help: no projection, no corrections; invalid outputs burn the minimum
  fidelity cost and evaluate nothing, so the prompt state grows until the
  student saturates.

Episodes are deterministic given (mode, seed): environment noise is keyed
per query, the student draws from its own per-(seed, mode) stream, and the
controller itself is draw-free.
"""

from __future__ import annotations

import enum
import hashlib
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .agents import (
    OracleParams,
    StudentParams,
    apply_finetune_event,
    format_decision,
    oracle_decide,
    parse_decision,
    student_decide,
)
from .errors import ExhaustedBudget, SchemaError, SemanticError
from .feasibility import (
    ModelSpec,
    LLAMA_8B_SPEC,
    feasible_prompt_length,
    saturation_length_bound,
)
from .mfbo import (
    SCHEMA_TOKENS,
    Decision,
    EnvSettings,
    HistoryEntry,
    KeyedNoise,
    PromptState,
)
from .policy import ReplayBuffer
from .projection import project_prompt_state


class Mode(enum.Enum):
    ORACLE_ONLY = "oracle_only"
    HIERARCHICAL = "hierarchical"
    DISTILL_ONLY = "distill_only"
    NO_DISTILL = "no_distill"

    @property
    def display_name(self) -> str:
        return {
            Mode.ORACLE_ONLY: "Oracle Only",
            Mode.HIERARCHICAL: "Hierarchical",
            Mode.DISTILL_ONLY: "Distill only",
            Mode.NO_DISTILL: "No distill",
        }[self]


class Feasibility(enum.Enum):
    FEASIBLE = "feasible"
    NEEDS_PROJECTION = "needs_projection"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class ControllerConfig:
    spec: ModelSpec = LLAMA_8B_SPEC
    kappa_exemplars: int = 8
    interval_count: int = 4
    drift_window: int = 8
    drift_threshold: float = 0.5
    model_mismatch_limit: float = 0.25
    buffer_lo: int = 4
    buffer_hi: int = 32
    oracle_call_cost: float = 0.01
    finetune_trigger: int = 4
    oracle: OracleParams = OracleParams()

    def __post_init__(self):
        if not (self.buffer_lo <= self.finetune_trigger <= self.buffer_hi):
            raise ValueError("need buffer_lo <= finetune_trigger <= buffer_hi")
        if self.drift_window < 1:
            raise ValueError("drift_window must be >= 1")
        if not (0.0 <= self.model_mismatch_limit <= 1.0):
            raise ValueError("model_mismatch_limit must lie in [0, 1]")
        if self.drift_threshold < 0 or self.oracle_call_cost < 0:
            raise ValueError("drift_threshold and oracle_call_cost must be non-negative")


def projection_threshold(cfg: ControllerConfig, saturation_obs: int | None = None) -> int:
    """Token level past which the controller projects: 90% of the tightest
    known saturation limit, never beyond the memory-feasible length."""
    margin = saturation_length_bound(cfg.spec)
    if saturation_obs is not None:
        margin = min(margin, saturation_obs)
    return int(min(0.9 * margin, feasible_prompt_length(cfg.spec)))


def check_feasibility(
    state: PromptState, cfg: ControllerConfig, saturation_obs: int | None = None
) -> Feasibility:
    """Classify a state: fine as is, in need of projection, or hopeless
    (the schema block alone exceeds the memory-feasible prompt length)."""
    if SCHEMA_TOKENS > feasible_prompt_length(cfg.spec):
        return Feasibility.INFEASIBLE
    if state.token_cost > projection_threshold(cfg, saturation_obs):
        return Feasibility.NEEDS_PROJECTION
    return Feasibility.FEASIBLE


@dataclass(frozen=True)
class StepObservation:
    """What the drift detector sees of one student attempt."""

    schema_failed: bool
    model_mismatch: bool | None  # None when nothing parseable was produced
    point_gap: float | None


def detect_drift(window: Sequence[StepObservation], cfg: ControllerConfig) -> bool:
    """Windowed disagreement test over recent student attempts.

    Fires when any attempt in the window failed the protocol, when the
    fraction of parsed attempts picking a different model than the
    reference exceeds the mismatch limit, or when the mean point gap
    exceeds the drift threshold.
    """
    window = list(window)
    if len(window) > cfg.drift_window:
        raise ValueError("window longer than configured drift_window")
    if not window:
        return False
    if any(obs.schema_failed for obs in window):
        return True
    mismatches = [obs.model_mismatch for obs in window if obs.model_mismatch is not None]
    if mismatches and sum(mismatches) / len(mismatches) > cfg.model_mismatch_limit:
        return True
    gaps = [obs.point_gap for obs in window if obs.point_gap is not None]
    if gaps and float(np.mean(gaps)) > cfg.drift_threshold:
        return True
    return False


@dataclass
class StepRecord:
    step: int
    state_digest: str
    projected_digest: str | None
    raw_message: str
    model: int | None
    point: float | None
    error_gap: float | None
    valid: bool
    drift: bool
    oracle_called: bool
    evaluated: bool
    wasted: float


@dataclass
class EpisodeMetrics:
    x_regret: float
    f_regret: float
    num_points: int
    hierarchical_frequency: float
    oracle_cost: float


@dataclass
class EpisodeRecord:
    mode: Mode
    seed: int
    steps: list[StepRecord] = field(default_factory=list)
    evaluations: list[HistoryEntry] = field(default_factory=list)
    metrics: EpisodeMetrics | None = None
    finetune_events: int = 0
    wasted_total: float = 0.0
    initial_budget: float = 0.0
    final_remaining: float = 0.0
    final_state: PromptState | None = None
    infeasible: bool = False

    @property
    def total_steps(self) -> int:
        return len(self.steps)


def _digest(state: PromptState) -> str:
    payload = repr((state.history, state.remaining_budget, state.token_cost, len(state.summaries)))
    return hashlib.sha1(payload.encode()).hexdigest()[:12]


def _student_stream(seed: int, mode: Mode) -> np.random.Generator:
    order = list(Mode).index(mode)
    return np.random.default_rng(np.random.SeedSequence(entropy=(0x57_0D_E2, seed % (2**32), order)))


def _mode_student(mode: Mode, student: StudentParams) -> StudentParams:
    """Structural per-mode overrides: non-hierarchical students act without
    any oracle (independent), and only no_distill skips phase-1 training."""
    if mode is Mode.HIERARCHICAL:
        return replace(student, distilled=True)
    if mode is Mode.DISTILL_ONLY:
        return replace(student, distilled=True, independent=True)
    if mode is Mode.NO_DISTILL:
        return replace(student, distilled=False, independent=True)
    return student


def run_episode(
    mode: Mode,
    env_settings: EnvSettings,
    cfg: ControllerConfig,
    student: StudentParams,
    seed: int,
) -> EpisodeRecord:
    """Play one full episode of the given mode; deterministic given seed."""
    env = env_settings.build(noise=KeyedNoise(seed))
    state = env.initial_state()
    record = EpisodeRecord(mode=mode, seed=seed, initial_budget=state.initial_budget)
    params = _mode_student(mode, student)
    rng = _student_stream(seed, mode)
    window: deque[StepObservation] = deque(maxlen=cfg.drift_window)
    buffer = ReplayBuffer(lo=cfg.buffer_lo, hi=cfg.buffer_hi)
    oracle_calls = 0
    sat_obs = params.saturation_obs if mode is not Mode.ORACLE_ONLY else None

    step_i = 0
    while state.remaining_budget >= env.min_cost:
        feas = check_feasibility(state, cfg, sat_obs)
        projected_digest = None
        if feas is Feasibility.INFEASIBLE:
            record.infeasible = True
            break
        if feas is Feasibility.NEEDS_PROJECTION and mode is Mode.HIERARCHICAL:
            state = project_prompt_state(
                state,
                cfg.spec,
                cfg.kappa_exemplars,
                cfg.interval_count,
                token_budget=projection_threshold(cfg, sat_obs),
            )
            projected_digest = _digest(state)
        state_digest = _digest(state)

        try:
            reference = oracle_decide(state, cfg.oracle, env.gp)
        except ExhaustedBudget:
            break

        drift = False
        oracle_called = False
        decision: Decision | None = None
        model = point = gap = None

        if mode is Mode.ORACLE_ONLY:
            decision = reference
            raw = format_decision(decision)
            valid = True
            oracle_called = True
            model, point = decision.model_index, decision.point
        else:
            target = None if params.independent else reference
            raw = student_decide(state, target, params, rng, gp=env.gp)
            schema_failed = False
            attempted: Decision | None = None
            try:
                attempted = parse_decision(raw, state.catalog, state.domain)
            except SchemaError:
                schema_failed = True
            except SemanticError:
                pass
            valid = attempted is not None
            if attempted is not None:
                model, point = attempted.model_index, attempted.point
                gap = abs(attempted.point - reference.point)
            affordable = (
                attempted is not None
                and state.model(attempted.model_index).cost <= state.remaining_budget
            )

            if mode is Mode.HIERARCHICAL:
                window.append(
                    StepObservation(
                        schema_failed=schema_failed,
                        model_mismatch=(attempted.model_index != reference.model_index)
                        if attempted is not None
                        else None,
                        point_gap=gap,
                    )
                )
                drift = detect_drift(window, cfg)
                if drift or not valid or not affordable:
                    decision = reference
                    oracle_called = True
                    buffer.append(reference, attempted)
                    if len(buffer) >= cfg.finetune_trigger:
                        buffer.check_bounds()
                        params = apply_finetune_event(params)
                        record.finetune_events += 1
                        buffer.clear()
                else:
                    decision = attempted
            else:
                # unsupervised modes: invalid or unaffordable output burns
                # the minimum fidelity cost and evaluates nothing
                if valid and affordable:
                    decision = attempted

        if decision is None:
            state = env.charge_wasted(state, env.min_cost)
            record.wasted_total += env.min_cost
            record.steps.append(
                StepRecord(
                    step=step_i, state_digest=state_digest, projected_digest=projected_digest,
                    raw_message=raw, model=model, point=point, error_gap=gap, valid=valid,
                    drift=drift, oracle_called=False, evaluated=False, wasted=env.min_cost,
                )
            )
        else:
            if oracle_called:
                oracle_calls += 1
            state = env.step(state, decision)
            record.evaluations.append(state.history[-1])
            record.steps.append(
                StepRecord(
                    step=step_i, state_digest=state_digest, projected_digest=projected_digest,
                    raw_message=raw, model=model, point=point, error_gap=gap, valid=valid,
                    drift=drift, oracle_called=oracle_called, evaluated=True, wasted=0.0,
                )
            )
        step_i += 1

    total = len(record.steps)
    regret = env.regret_metrics(record.evaluations)
    record.metrics = EpisodeMetrics(
        x_regret=regret.x_regret,
        f_regret=regret.f_regret,
        num_points=regret.num_points,
        hierarchical_frequency=(oracle_calls / total) if total else 0.0,
        oracle_cost=cfg.oracle_call_cost * oracle_calls,
    )
    record.final_remaining = state.remaining_budget
    record.final_state = state
    return record


METRIC_NAMES = ("x_regret", "f_regret", "num_points", "hierarchical_frequency", "oracle_cost")


@dataclass
class AblationRow:
    mode: Mode
    n_seeds: int
    mean: dict[str, float]
    half_width: dict[str, float]  # 95% normal-approximation CI half-widths
    median: dict[str, float]
    single_seed: bool  # half-widths are degenerate zeros


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def row(self, mode: Mode) -> AblationRow:
        for r in self.rows:
            if r.mode is mode:
                return r
        raise KeyError(mode.value)


def summarize_ablation(records: Sequence[EpisodeRecord]) -> AblationTable:
    """Per-mode mean, 95% half-width (normal approximation), and median of
    every episode metric. Episodes with undefined regret (no evaluations)
    are excluded metric-wise via NaN-aware aggregation."""
    by_mode: dict[Mode, list[EpisodeRecord]] = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec)

    rows = []
    for mode, recs in by_mode.items():
        values = {
            name: np.array([getattr(r.metrics, name) for r in recs], dtype=float)
            for name in METRIC_NAMES
        }
        n = len(recs)
        mean, hw, med = {}, {}, {}
        for name, vals in values.items():
            mean[name] = float(np.nanmean(vals))
            med[name] = float(np.nanmedian(vals))
            if n > 1:
                hw[name] = float(1.96 * np.nanstd(vals, ddof=1) / math.sqrt(n))
            else:
                hw[name] = 0.0
        rows.append(
            AblationRow(mode=mode, n_seeds=n, mean=mean, half_width=hw, median=med, single_seed=n == 1)
        )
    return AblationTable(rows=rows)
