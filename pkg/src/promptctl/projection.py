"""State projection: exemplar selection, interval summaries, soft relaxation.

The controller keeps prompts inside their feasible range by compressing the
summarizable part of a state while leaving schema content untouched. Two
mechanisms are provided:

* a rule-based route: equal-width interval summaries of the evaluation
  history plus a small set of exemplar evaluations chosen greedily under a
  phantom-normalized coverage objective (facility-location form, so the
  greedy choice carries the usual 1 - 1/e guarantee), and
* a continuous relaxation: softmax-weighted convex combinations of unit
  embeddings, trained by gradient descent on a squared-hinge barrier that
  penalizes token budgets being exceeded.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import EnumerationCapError, FeasibilityError
from .feasibility import ModelSpec, feasible_prompt_length, saturation_length_bound
from .mfbo import (
    SCHEMA_TOKENS,
    TOKENS_PER_ENTRY,
    TOKENS_PER_INTERVAL,
    HistoryEntry,
    PromptState,
    state_token_cost,
)

Metric = Callable[[np.ndarray, np.ndarray], float]

BRUTE_FORCE_CAP = 20


class UnitKind(enum.Enum):
    SCHEMA = "schema"
    SUMMARIZABLE = "summarizable"


@dataclass(frozen=True)
class Unit:
    id: int | str
    kind: UnitKind
    embedding: tuple[float, ...]
    token_cost: int = 1

    def __post_init__(self):
        if self.token_cost <= 0:
            raise ValueError("token_cost must be positive")


@dataclass(frozen=True)
class UnitSet:
    """Units plus the phantom distance that normalizes the coverage objective.

    The phantom must be at least the largest pairwise distance among
    summarizable embeddings; then every per-element term of the coverage
    objective is an inactive clamp and the objective is exactly the
    facility-location value.
    """

    units: tuple[Unit, ...]
    dim: int
    phantom: float

    def __post_init__(self):
        if self.phantom <= 0:
            raise ValueError("phantom must be positive")
        for u in self.units:
            if len(u.embedding) != self.dim:
                raise ValueError(f"unit {u.id!r} has embedding dim {len(u.embedding)}, expected {self.dim}")
        emb = self._summarizable_matrix()
        if len(emb) > 1:
            d = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=-1)
            if self.phantom < d.max() - 1e-12:
                raise ValueError("phantom below max pairwise summarizable distance")

    @classmethod
    def from_units(cls, units: Sequence[Unit], phantom: float | None = None) -> "UnitSet":
        units = tuple(units)
        if not units:
            raise ValueError("empty unit set")
        dim = len(units[0].embedding)
        if phantom is None:
            emb = np.array([u.embedding for u in units if u.kind is UnitKind.SUMMARIZABLE])
            if len(emb) > 1:
                d = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=-1)
                phantom = max(float(d.max()), 1e-9)
            else:
                phantom = 1.0
        return cls(units=units, dim=dim, phantom=phantom)

    def summarizable(self) -> tuple[Unit, ...]:
        return tuple(u for u in self.units if u.kind is UnitKind.SUMMARIZABLE)

    def _summarizable_matrix(self) -> np.ndarray:
        rows = [u.embedding for u in self.units if u.kind is UnitKind.SUMMARIZABLE]
        return np.array(rows, dtype=float) if rows else np.zeros((0, self.dim))


@dataclass(frozen=True)
class Summary:
    selected: tuple
    value: float
    token_cost: int


def decompose(units: Sequence[Unit]) -> tuple[list[Unit], list[Unit]]:
    """Stable partition into (schema, summarizable); schema is never pruned."""
    schema = [u for u in units if u.kind is UnitKind.SCHEMA]
    summarizable = [u for u in units if u.kind is UnitKind.SUMMARIZABLE]
    return schema, summarizable


def _clamped_distances(uset: UnitSet, metric: Metric | None) -> tuple[list[Unit], np.ndarray, dict]:
    """Pairwise summarizable distances clamped at the phantom."""
    units = sorted(uset.summarizable(), key=lambda u: u.id)
    emb = np.array([u.embedding for u in units], dtype=float)
    if metric is None:
        d = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=-1) if len(units) else np.zeros((0, 0))
    else:
        n = len(units)
        d = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                d[i, j] = d[j, i] = metric(emb[i], emb[j])
    index = {u.id: k for k, u in enumerate(units)}
    return units, np.minimum(d, uset.phantom), index


def coverage_value(selected, uset: UnitSet, metric: Metric | None = None) -> float:
    """Phantom-normalized coverage of the summarizable units by ``selected``.

    Each summarizable unit contributes phantom minus its (clamped) distance
    to the nearest selected exemplar; the empty selection scores 0. Raises
    KeyError for ids outside the summarizable part.
    """
    units, dists, index = _clamped_distances(uset, metric)
    cols = [index[i] for i in selected]  # KeyError on unknown/schema ids
    if not cols:
        return 0.0
    nearest = dists[:, cols].min(axis=1)
    return float(np.sum(uset.phantom - nearest))


def greedy_project(uset: UnitSet, kappa: int, metric: Metric | None = None) -> Summary:
    """Forward greedy selection of at most ``kappa`` exemplars.

    Ties break toward the lowest unit id; selection stops early once no
    candidate adds value. Returns an empty summary when there is nothing
    summarizable.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    units, dists, _ = _clamped_distances(uset, metric)
    n = len(units)
    if n == 0:
        return Summary(selected=(), value=0.0, token_cost=0)

    current = np.full(n, uset.phantom)
    chosen: list[int] = []
    for _ in range(min(kappa, n)):
        best_gain, best_k = 0.0, None
        for k in range(n):  # id-sorted order: first strict max wins ties
            if k in chosen:
                continue
            gain = float(np.maximum(0.0, current - dists[:, k]).sum())
            if gain > best_gain:
                best_gain, best_k = gain, k
        if best_k is None:
            break
        chosen.append(best_k)
        current = np.minimum(current, dists[:, best_k])
    ids = tuple(sorted(units[k].id for k in chosen))
    return Summary(
        selected=ids,
        value=float(np.sum(uset.phantom - current)),
        token_cost=sum(units[k].token_cost for k in chosen),
    )


def brute_force_project(uset: UnitSet, kappa: int, metric: Metric | None = None) -> Summary:
    """Exact optimum over all exemplar subsets of size at most ``kappa``.

    Verification oracle for the greedy route; ties break to the
    lexicographically smallest id tuple. Capped at BRUTE_FORCE_CAP
    summarizable units.
    """
    units, dists, _ = _clamped_distances(uset, metric)
    n = len(units)
    if n > BRUTE_FORCE_CAP:
        raise EnumerationCapError(f"{n} summarizable units exceed brute-force cap {BRUTE_FORCE_CAP}")
    best_val, best_subset = 0.0, ()
    for size in range(1, min(kappa, n) + 1):
        for subset in itertools.combinations(range(n), size):
            val = float(np.sum(uset.phantom - dists[:, subset].min(axis=1)))
            if val > best_val + 1e-15:
                best_val, best_subset = val, subset
    return Summary(
        selected=tuple(units[k].id for k in best_subset),
        value=best_val,
        token_cost=sum(units[k].token_cost for k in best_subset),
    )


@dataclass(frozen=True)
class IntervalStat:
    lo: float
    hi: float
    mean_error: float
    mean_uncertainty: float
    representative: tuple | None
    empty: bool


@dataclass(frozen=True)
class IntervalSummary:
    intervals: tuple[IntervalStat, ...]
    count: int


def summarize_intervals(history, domain: tuple[float, float], count: int) -> IntervalSummary:
    """Equal-width partition of the domain with per-interval means.

    ``history`` holds (x, error, uncertainty) triples; every point lands in
    exactly one interval (the last interval is closed on the right). The
    representative of an interval is its lowest-error point; empty intervals
    are kept, flagged, with zero means and no representative.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = float(domain[0]), float(domain[1])
    if hi <= lo:
        raise ValueError("domain must be a nonempty interval")
    edges = np.linspace(lo, hi, count + 1)
    buckets: list[list[tuple]] = [[] for _ in range(count)]
    for triple in history:
        x = float(triple[0])
        if not (lo <= x <= hi):
            raise ValueError(f"history point {x} outside domain [{lo}, {hi}]")
        k = min(int(np.searchsorted(edges, x, side="right")) - 1, count - 1)
        buckets[max(k, 0)].append(tuple(triple))

    stats = []
    for k in range(count):
        pts = buckets[k]
        if not pts:
            stats.append(IntervalStat(float(edges[k]), float(edges[k + 1]), 0.0, 0.0, None, True))
            continue
        errs = [p[1] for p in pts]
        uncs = [p[2] for p in pts]
        rep = min(pts, key=lambda p: p[1])
        stats.append(
            IntervalStat(
                lo=float(edges[k]),
                hi=float(edges[k + 1]),
                mean_error=float(np.mean(errs)),
                mean_uncertainty=float(np.mean(uncs)),
                representative=rep,
                empty=False,
            )
        )
    return IntervalSummary(intervals=tuple(stats), count=count)


def history_triples(history: Sequence[HistoryEntry]) -> list[tuple[float, float, float]]:
    """(x, error, uncertainty) view of env history entries.

    A point's error is the shortfall of its observed value below the best
    observation so far, so the best point carries error 0.
    """
    if not history:
        return []
    y_best = max(e.y for e in history)
    return [(e.x, y_best - e.y, e.std) for e in history]


def default_projection_budget(spec: ModelSpec) -> int:
    """Token budget the controller projects down to: 90% of the tighter of
    the memory-feasible length and the saturation bound."""
    feasible = feasible_prompt_length(spec)
    return int(0.9 * min(saturation_length_bound(spec), feasible))


def project_prompt_state(
    state: PromptState,
    spec: ModelSpec,
    kappa: int,
    intervals: int,
    token_budget: int | None = None,
) -> PromptState:
    """Compress a state's history into interval summaries plus exemplars.

    Schema fields (catalog, domain, budgets, best error) pass through
    verbatim. At most ``kappa`` exemplar evaluations are kept, chosen by
    greedy coverage over (x/span, error, uncertainty) embeddings; fewer are
    kept when the token budget demands it, and interval summaries are
    dropped altogether if even they do not fit. Raises FeasibilityError
    when the schema block alone exceeds the budget.
    """
    if kappa < 1 or intervals < 1:
        raise ValueError("kappa and intervals must be >= 1")
    budget = token_budget if token_budget is not None else default_projection_budget(spec)
    if SCHEMA_TOKENS > budget:
        raise FeasibilityError(f"schema block of {SCHEMA_TOKENS} tokens exceeds budget {budget}")

    history = state.history
    if len(history) <= kappa and state_token_cost(len(history), len(state.summaries)) <= budget:
        return replace(state, history=tuple(sorted(history)))

    triples = history_triples(history)
    summary = summarize_intervals(triples, state.domain, intervals)
    n_int = intervals
    max_entries = (budget - SCHEMA_TOKENS - TOKENS_PER_INTERVAL * n_int) // TOKENS_PER_ENTRY
    if max_entries < 0:
        summary = None
        n_int = 0
        max_entries = (budget - SCHEMA_TOKENS) // TOKENS_PER_ENTRY
    keep = min(kappa, int(max_entries))

    kept_entries: tuple[HistoryEntry, ...] = ()
    if keep >= 1 and history:
        span = state.domain[1] - state.domain[0]
        units = [
            Unit(
                id=i,
                kind=UnitKind.SUMMARIZABLE,
                embedding=((t[0] - state.domain[0]) / span, t[1], t[2]),
                token_cost=TOKENS_PER_ENTRY,
            )
            for i, t in enumerate(triples)
        ]
        chosen = greedy_project(UnitSet.from_units(units), keep)
        kept_entries = tuple(sorted(history[i] for i in chosen.selected))

    return replace(
        state,
        history=kept_entries,
        summaries=summary.intervals if summary is not None else (),
        token_cost=state_token_cost(len(kept_entries), n_int),
    )


# --- continuous relaxation -------------------------------------------------


def inverse_step_schedule(c: float = 1.0) -> Callable[[int], float]:
    """Square-summable schedule xi_k = c / (k + 1)."""
    return lambda k: c / (k + 1.0)


@dataclass
class SoftProjectionParams:
    weights: np.ndarray
    budget: float
    barrier_coef: float = 1.0
    step_size: Callable[[int], float] = None  # type: ignore[assignment]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.barrier_coef < 0:
            raise ValueError("barrier_coef must be non-negative")
        if self.step_size is None:
            self.step_size = inverse_step_schedule()


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def soft_project(embeddings: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Convex combinations of embedding rows with weights softmax(phi).

    ``phi`` has shape (n,) for a single output row or (k, n) for k rows;
    the result is a (k, d) matrix. Lipschitz in phi for fixed embeddings.
    """
    emb = np.asarray(embeddings, dtype=float)
    w = _softmax(np.atleast_2d(np.asarray(phi, dtype=float)))
    if w.shape[1] != emb.shape[0]:
        raise ValueError(f"phi length {w.shape[1]} does not match {emb.shape[0]} embedding rows")
    return w @ emb


def unit_matrix(uset: UnitSet) -> np.ndarray:
    return np.array([u.embedding for u in uset.units], dtype=float)


def soft_token_gap(uset: UnitSet, phi: np.ndarray, budget: float) -> float:
    """Soft used-length minus budget: expected token cost under softmax(phi),
    summed over output rows."""
    costs = np.array([u.token_cost for u in uset.units], dtype=float)
    w = _softmax(np.atleast_2d(np.asarray(phi, dtype=float)))
    if w.shape[1] != len(costs):
        raise ValueError("phi length does not match unit count")
    return float((w @ costs).sum() - budget)


def barrier(z: float) -> float:
    """Squared hinge: zero on the feasible side, strictly convex beyond it."""
    return max(0.0, z) ** 2


def barrier_loss(phi: np.ndarray, batch: Sequence[UnitSet], gap: Callable[[UnitSet, np.ndarray], float]) -> float:
    """Mean squared-hinge penalty of the feasibility gap over a batch."""
    if not batch:
        raise ValueError("batch must be nonempty")
    return float(np.mean([barrier(gap(uset, phi)) for uset in batch]))


def token_length_gap(budget: float) -> Callable[[UnitSet, np.ndarray], float]:
    return lambda uset, phi: soft_token_gap(uset, phi, budget)


def barrier_loss_and_grad(phi: np.ndarray, batch: Sequence[UnitSet], budget: float):
    """Barrier loss for the token-length gap, with its analytic gradient."""
    phi = np.asarray(phi, dtype=float)
    flat = phi.ndim == 1
    p2 = np.atleast_2d(phi)
    loss = 0.0
    grad = np.zeros_like(p2)
    for uset in batch:
        costs = np.array([u.token_cost for u in uset.units], dtype=float)
        w = _softmax(p2)
        gap = float((w @ costs).sum() - budget)
        if gap > 0:
            loss += gap**2
            # d(w_r . t)/d phi_rj = w_rj (t_j - w_r . t)
            row_dot = w @ costs
            grad += 2.0 * gap * w * (costs[None, :] - row_dot[:, None])
    n = len(batch)
    loss /= n
    grad /= n
    return loss, (grad[0] if flat else grad)


@dataclass
class SoftTrainStep:
    loss: float
    grad_norm: float
    step_size: float
    drift: float


@dataclass
class SoftTrainResult:
    weights: np.ndarray
    steps: list[SoftTrainStep]


def train_soft_projection(
    params: SoftProjectionParams,
    batches: Sequence[UnitSet],
    steps: int,
) -> SoftTrainResult:
    """Stochastic descent on the scaled barrier, cycling through batches.

    Each step logs the projected-output drift on the first batch, which is
    bounded by L * barrier_coef * xi_k * ||grad|| for the projection's
    Lipschitz constant L.
    """
    if not batches:
        raise ValueError("need at least one batch")
    phi = np.array(params.weights, dtype=float, copy=True)
    ref = unit_matrix(batches[0])
    log: list[SoftTrainStep] = []
    for k in range(steps):
        uset = batches[k % len(batches)]
        loss, grad = barrier_loss_and_grad(phi, [uset], params.budget)
        xi = params.step_size(k)
        new_phi = phi - params.barrier_coef * xi * grad
        drift = float(np.linalg.norm(soft_project(ref, new_phi) - soft_project(ref, phi)))
        log.append(SoftTrainStep(loss=loss, grad_norm=float(np.linalg.norm(grad)), step_size=xi, drift=drift))
        phi = new_phi
    return SoftTrainResult(weights=phi, steps=log)
