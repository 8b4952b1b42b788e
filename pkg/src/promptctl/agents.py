"""Decision policies and the wire protocol between them.

Decisions travel as single-line messages of the form ``RESULT=[model,point]``.
The parser is a strict grammar with two failure classes: structural
(SchemaError: the text is not a well-formed message) and semantic
(SemanticError: well-formed, but the model index or point is invalid for the
task at hand).

The oracle is a two-stage upper-confidence-bound rule over interval
summaries of the state. The student is a behavioral model of a compact
deployed policy: it tracks a reference decision with tunable semantic noise
and an output-validity failure probability that ramps to one as the prompt
state approaches its observed saturation threshold.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ExhaustedBudget, SchemaError, SemanticError
from .mfbo import Decision, GPConfig, PromptState, gp_posterior

UCB_GRID_RESOLUTION = 512

_DECISION_RE = re.compile(
    r"\A\s*RESULT=\[([+-]?\d+),\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+))\]\s*\Z"
)


def format_decision(decision: Decision) -> str:
    """Render a decision as ``RESULT=[<model>,<point>]``, point to 4 digits."""
    return f"RESULT=[{decision.model_index},{decision.point:.4f}]"


def parse_decision(message: str, catalog, domain: tuple[float, float]) -> Decision:
    """Parse and validate a protocol message.

    Grammar: optional surrounding whitespace, the literal ``RESULT=[``, an
    integer, a comma (whitespace after it tolerated), a decimal real, ``]``.
    Raises SchemaError when the text does not match the grammar and
    SemanticError when the parsed index is not in the catalog or the point
    falls outside the domain.
    """
    match = _DECISION_RE.match(message)
    if match is None:
        raise SchemaError(f"not a RESULT=[model,point] message: {message[:60]!r}")
    index = int(match.group(1))
    point = float(match.group(2))
    if index not in {m.index for m in catalog}:
        raise SemanticError(f"model index {index} not in catalog")
    if not (domain[0] <= point <= domain[1]):
        raise SemanticError(f"point {point} outside domain {domain}")
    return Decision(model_index=index, point=point)


@dataclass(frozen=True)
class OracleParams:
    ucb_kappa: float = 2.0
    interval_count: int = 4
    cheap_threshold: float = 0.9
    confirm_budget: float = 12.0
    grid_resolution: int = UCB_GRID_RESOLUTION
    confirm_grid_resolution: int = 4096

    def __post_init__(self):
        if self.interval_count < 1:
            raise ValueError("interval_count must be >= 1")
        if self.ucb_kappa < 0:
            raise ValueError("ucb_kappa must be non-negative")
        if self.confirm_budget < 0:
            raise ValueError("confirm_budget must be non-negative")


def _ucb_scores(state: PromptState, gp: GPConfig, kappa: float, resolution: int):
    grid = np.linspace(state.domain[0], state.domain[1], resolution)
    mean, std = gp_posterior(state.history, grid, gp)
    return grid, mean + kappa * std


def _pick_fidelity(
    state: PromptState, cheap_threshold: float | None, confirm_budget: float = 0.0
) -> int:
    """Budget-phased fidelity choice: expensive early, cheap in the long
    middle phase, expensive again for the final confirmation window."""
    affordable = [m for m in state.catalog if m.cost <= state.remaining_budget]
    if not affordable:
        raise ExhaustedBudget(f"no model affordable with {state.remaining_budget} remaining")
    expensive = max(affordable, key=lambda m: (m.cost, -m.index)).index
    if state.remaining_budget <= confirm_budget:
        return expensive
    if cheap_threshold is not None and state.budget_fraction < cheap_threshold:
        return min(affordable, key=lambda m: (m.cost, m.index)).index
    return expensive


def oracle_decide(state: PromptState, params: OracleParams, gp: GPConfig) -> Decision:
    """Two-stage confidence-bound rule with an end-game confirmation phase.

    Stage 1 scores each of ``interval_count`` equal-width intervals by the
    maximum UCB over the grid points it contains and picks the best (ties
    to the lowest interval). Stage 2 picks the best grid point within that
    interval (ties to the lowest grid index). The fidelity is the most
    expensive affordable model, switching to the cheapest once the
    remaining budget fraction drops below ``cheap_threshold``.

    In the final ``confirm_budget`` minutes the rule switches to
    confirmation: evaluate the posterior-mean argmax (the believed best
    point) at the highest affordable fidelity, pinning down the optimum
    with noise-free observations before the budget runs out.
    """
    if state.remaining_budget <= params.confirm_budget:
        grid, mean_score = _ucb_scores(state, gp, kappa=0.0, resolution=params.confirm_grid_resolution)
        fidelity = _pick_fidelity(state, params.cheap_threshold, params.confirm_budget)
        return Decision(model_index=fidelity, point=float(grid[int(np.argmax(mean_score))]))

    grid, ucb = _ucb_scores(state, gp, params.ucb_kappa, params.grid_resolution)
    k = params.interval_count
    edges = np.linspace(state.domain[0], state.domain[1], k + 1)
    assignment = np.clip(np.searchsorted(edges, grid, side="right") - 1, 0, k - 1)

    best_interval, best_score = 0, -np.inf
    for interval in range(k):
        members = ucb[assignment == interval]
        if len(members) == 0:
            continue
        score = float(members.max())
        if score > best_score:
            best_interval, best_score = interval, score

    in_interval = np.flatnonzero(assignment == best_interval)
    point_idx = in_interval[int(np.argmax(ucb[in_interval]))]  # argmax takes first max
    fidelity = _pick_fidelity(state, params.cheap_threshold, params.confirm_budget)
    return Decision(model_index=fidelity, point=float(grid[point_idx]))


@dataclass(frozen=True)
class StudentParams:
    """Behavioral parameters of the compact acting policy.

    ``saturation_obs`` is the observed token threshold past which output
    validity collapses; the failure probability ramps linearly from its
    base value at the threshold to 1 at 1.15x the threshold. Non-distilled
    students have a 10x base failure probability. ``independent`` students
    ignore the reference decision and run their own coarse-grid
    confidence-bound search with a naive most-expensive-affordable
    fidelity choice.
    """

    schema_fail_prob: float = 0.005
    semantic_noise_std: float = 0.7
    saturation_obs: int = 2160
    adapt_factor: float = 0.35
    noise_floor: float = 0.25
    distilled: bool = True
    independent: bool = False
    grid_resolution: int = 16
    ucb_kappa: float = 2.0
    fidelity_rule: str = "cheapest"  # or "random_affordable" / "max_affordable"

    def __post_init__(self):
        if not (0.0 <= self.schema_fail_prob <= 1.0):
            raise ValueError("schema_fail_prob must lie in [0, 1]")
        if self.semantic_noise_std < 0 or self.noise_floor < 0:
            raise ValueError("noise levels must be non-negative")
        if self.noise_floor > self.semantic_noise_std:
            raise ValueError("noise_floor must not exceed the initial semantic_noise_std")
        if not (0.0 < self.adapt_factor < 1.0):
            raise ValueError("adapt_factor must lie in (0, 1)")
        if self.saturation_obs <= 0:
            raise ValueError("saturation_obs must be positive")
        if self.fidelity_rule not in ("cheapest", "random_affordable", "max_affordable"):
            raise ValueError("unknown fidelity_rule")


SATURATION_RAMP = 0.15  # validity collapses over [sat, 1.15 * sat]
FLIP_COUPLING = 0.25  # index-flip probability per unit of semantic noise


def effective_fail_prob(params: StudentParams, token_cost: int) -> float:
    """Base failure probability below saturation, ramping to 1 just past it."""
    base = params.schema_fail_prob * (1.0 if params.distilled else 10.0)
    base = min(1.0, base)
    sat = params.saturation_obs
    if token_cost <= sat:
        return base
    end = sat * (1.0 + SATURATION_RAMP)
    if token_cost >= end:
        return 1.0
    return base + (1.0 - base) * (token_cost - sat) / (end - sat)


_GARBLED = "Vevvevevevee \n\n\n\n the"


def _malformed_message(decision: Decision | None, rng: np.random.Generator) -> str:
    kind = int(rng.integers(3))
    if kind == 0:
        return ""
    if kind == 1 and decision is not None:
        return f"You should use model {decision.model_index} in the point {decision.point:.1f}."
    return _GARBLED


def _own_decision(
    state: PromptState, params: StudentParams, gp: GPConfig, rng: np.random.Generator
) -> Decision:
    grid, ucb = _ucb_scores(state, gp, params.ucb_kappa, params.grid_resolution)
    point = float(grid[int(np.argmax(ucb))])
    affordable = sorted(
        (m for m in state.catalog if m.cost <= state.remaining_budget),
        key=lambda m: (m.cost, m.index),
    )
    if not affordable:
        raise ExhaustedBudget(f"no model affordable with {state.remaining_budget} remaining")
    if params.fidelity_rule == "random_affordable":
        index = affordable[int(rng.integers(len(affordable)))].index
    elif params.fidelity_rule == "max_affordable":
        index = affordable[-1].index
    else:
        index = affordable[0].index
    return Decision(model_index=index, point=point)


def student_decide(
    state: PromptState,
    oracle_target: Decision | None,
    params: StudentParams,
    rng: np.random.Generator,
    gp: GPConfig | None = None,
) -> str:
    """Produce the student's raw protocol message for the current state.

    With the effective failure probability the output is malformed or
    empty. Otherwise the student tracks a target decision (the supplied
    reference, or its own coarse search when independent), flipping the
    model index to a neighbor with probability min(1, noise) and jittering
    the point by zero-mean Gaussian noise clamped to the domain.
    """
    target = oracle_target
    if params.independent or target is None:
        if gp is None:
            raise ValueError("independent student needs a GP config")
        target = _own_decision(state, params, gp, rng)

    if rng.uniform() < effective_fail_prob(params, state.token_cost):
        return _malformed_message(target, rng)

    index = target.model_index
    if params.semantic_noise_std > 0 and rng.uniform() < min(1.0, FLIP_COUPLING * params.semantic_noise_std):
        indices = sorted(m.index for m in state.catalog)
        pos = indices.index(index)
        if pos == 0:
            pos += 1
        elif pos == len(indices) - 1:
            pos -= 1
        else:
            pos += 1 if rng.uniform() < 0.5 else -1
        index = indices[pos]

    point = target.point
    if params.semantic_noise_std > 0:
        point += params.semantic_noise_std * rng.standard_normal()
        point = float(min(max(point, state.domain[0]), state.domain[1]))
    return format_decision(Decision(model_index=index, point=point))


def apply_finetune_event(params: StudentParams) -> StudentParams:
    """Shrink semantic noise geometrically toward its floor; the validity
    failure rate is a schema property and stays untouched."""
    return replace(
        params,
        semantic_noise_std=max(params.noise_floor, params.adapt_factor * params.semantic_noise_std),
    )
