"""Multi-fidelity Bayesian optimization environment.

A fixed smooth multimodal objective on [0, 10] is approximated by a catalog
of surrogates: each surrogate adds zero-mean Gaussian noise whose standard
deviation shrinks linearly as fidelity approaches 1. Evaluations consume a
shared time budget, and a Gaussian-process posterior supplies the
uncertainty signal carried in the interaction state.

Noise draws are routed through a caller-supplied source so that runs with
matched seeds see identical perturbations for identical (fidelity, point)
queries regardless of trajectory order (see :class:`KeyedNoise`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np

from .errors import InsufficientBudget, SemanticError

# Linear token model for a serialized interaction state. Invented stand-in
# for tokenizer counts: fixed schema block plus a constant cost per history
# entry and per interval summary.
SCHEMA_TOKENS = 400
TOKENS_PER_ENTRY = 18
TOKENS_PER_INTERVAL = 10

DEFAULT_DOMAIN = (0.0, 10.0)
DEFAULT_NOISE_SCALE = 0.15


@dataclass(frozen=True)
class FidelityModel:
    index: int
    fidelity: float
    cost: float
    noise_scale: float

    def __post_init__(self):
        if self.index <= 0:
            raise ValueError("index must be a positive integer")
        if not (0.0 < self.fidelity <= 1.0):
            raise ValueError("fidelity must lie in (0, 1]")
        if self.cost <= 0:
            raise ValueError("cost must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


def default_catalog(eta: float = DEFAULT_NOISE_SCALE) -> tuple[FidelityModel, ...]:
    """Four surrogates with fidelities .25/.5/.75/1.0 and costs 1/2/3/4 minutes."""
    alphas = (0.25, 0.5, 0.75, 1.0)
    costs = (1.0, 2.0, 3.0, 4.0)
    return tuple(
        FidelityModel(index=i + 1, fidelity=a, cost=c, noise_scale=eta * (1.0 - a))
        for i, (a, c) in enumerate(zip(alphas, costs))
    )


class HistoryEntry(NamedTuple):
    x: float
    y: float
    fidelity: int
    std: float  # posterior std at x just before this evaluation


class Decision(NamedTuple):
    model_index: int
    point: float


@dataclass(frozen=True)
class PromptState:
    """Interaction state: catalog, evaluation history, and budget accounting.

    ``summaries`` holds interval statistics left behind by projection;
    ``wasted_cost`` accumulates budget burned on discarded (non-evaluating)
    attempts. Conservation: initial_budget == remaining_budget + sum of
    history costs + wasted_cost holds on unprojected trajectories.
    """

    catalog: tuple[FidelityModel, ...]
    history: tuple[HistoryEntry, ...]
    domain: tuple[float, float]
    best_error: float
    initial_budget: float
    remaining_budget: float
    token_cost: int
    wasted_cost: float = 0.0
    summaries: tuple = ()  # interval statistics left behind by projection

    def model(self, index: int) -> FidelityModel:
        for m in self.catalog:
            if m.index == index:
                return m
        raise SemanticError(f"model index {index} not in catalog")

    @property
    def budget_fraction(self) -> float:
        if self.initial_budget <= 0:
            return 0.0
        return self.remaining_budget / self.initial_budget


def state_token_cost(n_history: int, n_intervals: int = 0) -> int:
    return SCHEMA_TOKENS + TOKENS_PER_ENTRY * n_history + TOKENS_PER_INTERVAL * n_intervals


def ground_truth(x: float) -> float:
    """The unknown objective: three smooth bumps plus a small oscillation."""
    if not (0.0 <= x <= 10.0):
        raise ValueError(f"x={x} outside the supported domain [0, 10]")
    return (
        0.95 * math.exp(-((x - 2.0) ** 2) / 0.45)
        + 1.35 * math.exp(-((x - 5.8) ** 2) / 1.1)
        + 0.85 * math.exp(-((x - 8.2) ** 2) / 0.35)
        + 0.08 * math.sin(2.0 * x)
    )


def _ground_truth_vec(xs: np.ndarray) -> np.ndarray:
    return (
        0.95 * np.exp(-((xs - 2.0) ** 2) / 0.45)
        + 1.35 * np.exp(-((xs - 5.8) ** 2) / 1.1)
        + 0.85 * np.exp(-((xs - 8.2) ** 2) / 0.35)
        + 0.08 * np.sin(2.0 * xs)
    )


@lru_cache(maxsize=8)
def objective_argmax(domain: tuple[float, float] = DEFAULT_DOMAIN, resolution: int = 1_000_001) -> tuple[float, float]:
    """(x*, g(x*)) located by a dense grid scan over the domain."""
    xs = np.linspace(domain[0], domain[1], resolution)
    vals = _ground_truth_vec(xs)
    k = int(np.argmax(vals))
    return float(xs[k]), float(vals[k])


class KeyedNoise:
    """Stateless per-query noise: the draw depends only on (seed, index, x).

    The query point is quantized to 1e-6 to absorb float formatting jitter,
    so matched runs that evaluate the same (fidelity, point) pair receive
    the same perturbation regardless of when they do it.
    """

    _SALT = 0x5EED_CA7A

    def __init__(self, seed: int):
        self.seed = int(seed)

    def __call__(self, index: int, x: float) -> float:
        qx = int(round(x * 1e6)) % (2**32)
        ss = np.random.SeedSequence(entropy=(self._SALT, self.seed % (2**32), int(index), qx))
        return float(np.random.default_rng(ss).standard_normal())


class SequentialNoise:
    """Ordinary sequential noise stream, for standalone environment use."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def __call__(self, index: int, x: float) -> float:
        return float(self._rng.standard_normal())


@dataclass
class GPConfig:
    lengthscale: float = 0.8
    signal_var: float = 1.0
    noise_var: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lengthscale <= 0 or self.signal_var <= 0:
            raise ValueError("lengthscale and signal_var must be positive")
        if any(v < 0 for v in self.noise_var.values()):
            raise ValueError("noise variances must be non-negative")

    @classmethod
    def for_catalog(cls, catalog, lengthscale: float = 0.8, signal_var: float = 1.0) -> "GPConfig":
        return cls(
            lengthscale=lengthscale,
            signal_var=signal_var,
            noise_var={m.index: m.noise_scale**2 for m in catalog},
        )


def _kernel(xa: np.ndarray, xb: np.ndarray, cfg: GPConfig) -> np.ndarray:
    d = xa[:, None] - xb[None, :]
    return cfg.signal_var * np.exp(-(d**2) / (2.0 * cfg.lengthscale**2))


def gp_posterior(data, query, cfg: GPConfig):
    """Zero-mean GP regression with a squared-exponential kernel.

    ``data`` is a sequence of HistoryEntry; each observation carries the
    noise variance of its fidelity. ``query`` may be a scalar or an array;
    the return is (mean, std) of matching shape. The kernel matrix gets an
    escalating diagonal jitter (1e-8 up to 1e-4) before giving up.
    """
    query_arr = np.atleast_1d(np.asarray(query, dtype=float))
    scalar = np.isscalar(query) or np.asarray(query).ndim == 0
    if len(data) == 0:
        mean = np.zeros_like(query_arr)
        std = np.full_like(query_arr, math.sqrt(cfg.signal_var))
        return (float(mean[0]), float(std[0])) if scalar else (mean, std)

    xs = np.array([e.x for e in data], dtype=float)
    ys = np.array([e.y for e in data], dtype=float)
    noise = np.array([cfg.noise_var.get(e.fidelity, 0.0) for e in data], dtype=float)
    k_xx = _kernel(xs, xs, cfg) + np.diag(noise)

    chol = None
    for jitter in (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        try:
            chol = np.linalg.cholesky(k_xx + jitter * np.eye(len(xs)))
            break
        except np.linalg.LinAlgError:
            continue
    if chol is None:
        raise np.linalg.LinAlgError("kernel matrix not positive definite after jitter escalation")

    k_star = _kernel(query_arr, xs, cfg)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, ys))
    mean = k_star @ alpha
    v = np.linalg.solve(chol, k_star.T)
    var = cfg.signal_var - np.einsum("ij,ij->j", v, v)
    std = np.sqrt(np.clip(var, 0.0, None))
    return (float(mean[0]), float(std[0])) if scalar else (mean, std)


@dataclass(frozen=True)
class RegretMetrics:
    x_regret: float
    f_regret: float
    num_points: int
    defined: bool


@dataclass(frozen=True)
class EnvSettings:
    """Constructor arguments of an environment, minus the noise stream."""

    budget: float = 150.0
    eta: float = DEFAULT_NOISE_SCALE
    lengthscale: float = 0.8
    signal_var: float = 1.0
    domain: tuple[float, float] = DEFAULT_DOMAIN

    def build(self, noise: Callable[[int, float], float]) -> "MultiFidelityEnv":
        catalog = default_catalog(self.eta)
        return MultiFidelityEnv(
            catalog=catalog,
            domain=self.domain,
            budget=self.budget,
            noise=noise,
            gp=GPConfig.for_catalog(catalog, self.lengthscale, self.signal_var),
        )


class MultiFidelityEnv:
    """One optimization task instance; one trajectory mutates one instance's
    states, and instances share nothing."""

    def __init__(
        self,
        catalog: tuple[FidelityModel, ...] | None = None,
        domain: tuple[float, float] = DEFAULT_DOMAIN,
        budget: float = 150.0,
        noise: Callable[[int, float], float] | None = None,
        gp: GPConfig | None = None,
        eta: float = DEFAULT_NOISE_SCALE,
    ):
        self.catalog = catalog if catalog is not None else default_catalog(eta)
        if not (0.0 <= domain[0] < domain[1] <= 10.0):
            raise ValueError("domain must be a nonempty subinterval of [0, 10]")
        self.domain = (float(domain[0]), float(domain[1]))
        self.budget = float(budget)
        self.noise = noise if noise is not None else SequentialNoise(0)
        self.gp = gp if gp is not None else GPConfig.for_catalog(self.catalog)
        _, self._g_max = objective_argmax(self.domain)

    @property
    def min_cost(self) -> float:
        return min(m.cost for m in self.catalog)

    def initial_state(self) -> PromptState:
        return PromptState(
            catalog=self.catalog,
            history=(),
            domain=self.domain,
            best_error=self._g_max,
            initial_budget=self.budget,
            remaining_budget=self.budget,
            token_cost=state_token_cost(0),
        )

    def surrogate_eval(self, index: int, x: float) -> float:
        model = next((m for m in self.catalog if m.index == index), None)
        if model is None:
            raise SemanticError(f"model index {index} not in catalog")
        value = ground_truth(x)
        if model.noise_scale == 0.0:
            return value
        return value + model.noise_scale * self.noise(index, x)

    def _best_error(self, history) -> float:
        if not history:
            return self._g_max
        return max(0.0, self._g_max - max(e.y for e in history))

    def step(self, state: PromptState, decision: Decision) -> PromptState:
        model = state.model(decision.model_index)
        if not (state.domain[0] <= decision.point <= state.domain[1]):
            raise SemanticError(f"point {decision.point} outside domain {state.domain}")
        if model.cost > state.remaining_budget:
            raise InsufficientBudget(
                f"cost {model.cost} exceeds remaining budget {state.remaining_budget}"
            )
        _, std_before = gp_posterior(state.history, decision.point, self.gp)
        y = self.surrogate_eval(decision.model_index, decision.point)
        entry = HistoryEntry(x=float(decision.point), y=float(y), fidelity=model.index, std=float(std_before))
        history = state.history + (entry,)
        return replace(
            state,
            history=history,
            best_error=self._best_error(history),
            remaining_budget=state.remaining_budget - model.cost,
            token_cost=state_token_cost(len(history), len(state.summaries)),
        )

    def charge_wasted(self, state: PromptState, cost: float) -> PromptState:
        """Burn budget on an attempt that produced no evaluation."""
        if cost > state.remaining_budget:
            raise InsufficientBudget(f"cost {cost} exceeds remaining budget {state.remaining_budget}")
        return replace(
            state,
            remaining_budget=state.remaining_budget - cost,
            wasted_cost=state.wasted_cost + cost,
        )

    def regret_metrics(self, state_or_history) -> RegretMetrics:
        """Gap between the best identified point and the true optimum.

        The best point is the history entry with the highest posterior mean
        (the model's view of the noiseless objective); accepts either a
        PromptState or a raw history sequence.
        """
        history = state_or_history.history if isinstance(state_or_history, PromptState) else tuple(state_or_history)
        if not history:
            return RegretMetrics(x_regret=math.nan, f_regret=math.nan, num_points=0, defined=False)
        x_star, g_star = objective_argmax(self.domain)
        xs = np.array([e.x for e in history])
        means, _ = gp_posterior(history, xs, self.gp)
        best = history[int(np.argmax(means))]
        return RegretMetrics(
            x_regret=abs(best.x - x_star),
            f_regret=g_star - ground_truth(best.x),
            num_points=len(history),
            defined=True,
        )
