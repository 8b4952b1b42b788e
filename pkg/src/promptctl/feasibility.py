"""Hardware-feasible prompt length, saturation limits, and a toy attention head.

Two complementary limits on usable prompt length are computed here:

* a memory limit: how many tokens the KV cache can hold on the device once
  weights and runtime overhead are subtracted, and
* a saturation limit: the longest prompt for which a fixed task-relevant
  subsequence can still receive a required share of attention mass.

The toy attention head provides a direct numerical check of the dilution
effect that motivates the saturation limit: with bounded scores, the softmax
mass on any fixed index set decays like O(m/len).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GIB = 2**30


@dataclass(frozen=True)
class ModelSpec:
    """Hardware and attention parameters of a deployed model.

    Memory fields are in bytes; use ``GIB`` for gibibyte inputs (binary,
    2**30-byte units -- decimal gigabytes do not reproduce the reference
    token counts).
    """

    layers: int
    kv_heads: int
    head_dim: int
    bytes_per_value: int
    batch: int = 1
    context_window: int = 131072
    mem_total: int = 0
    mem_weights: int = 0
    mem_misc: int = 0
    q_eff: float = 0.0
    k_eff: float = 0.0
    relevant_size: int = 50
    attention_threshold: float = 0.1

    def __post_init__(self):
        for name in ("layers", "kv_heads", "head_dim", "bytes_per_value", "batch", "context_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("mem_total", "mem_weights", "mem_misc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.q_eff < 0 or self.k_eff < 0:
            raise ValueError("q_eff and k_eff must be non-negative")
        if self.relevant_size <= 0:
            raise ValueError("relevant_size must be a positive integer")
        if not (0.0 < self.attention_threshold <= 1.0):
            raise ValueError("attention_threshold must lie in (0, 1]")


# Reference profiles used throughout the docs and tests.
LLAMA_8B_SPEC = ModelSpec(
    layers=32, kv_heads=8, head_dim=128, bytes_per_value=2, batch=1,
    context_window=131072, mem_total=24 * GIB, mem_weights=16 * GIB,
    mem_misc=2 * GIB, q_eff=3.25, k_eff=2.71, relevant_size=50,
    attention_threshold=0.1,
)
MISTRAL_7B_SPEC = ModelSpec(
    layers=32, kv_heads=8, head_dim=128, bytes_per_value=2, batch=1,
    context_window=131072, mem_total=24 * GIB, mem_weights=int(14.5 * GIB),
    mem_misc=2 * GIB, q_eff=2.22, k_eff=1.85, relevant_size=50,
    attention_threshold=0.1,
)


@dataclass(frozen=True)
class FeasibilityReport:
    feasible_len: int
    sat_len_bound: float
    degradation_ratio: float
    observed_sat: float
    bound_violated: bool


def kv_bytes_per_token(spec: ModelSpec) -> int:
    """KV-cache bytes consumed per prompt token (keys + values, all layers)."""
    return spec.batch * spec.layers * 2 * spec.kv_heads * spec.head_dim * spec.bytes_per_value


def feasible_prompt_length(spec: ModelSpec) -> int:
    """Longest prompt the KV cache can hold, capped by the context window.

    Returns 0 when weights plus overhead already exhaust device memory.
    Total function: never raises on a valid spec.
    """
    residual = spec.mem_total - spec.mem_weights - spec.mem_misc
    if residual <= 0:
        return 0
    return min(spec.context_window, residual // kv_bytes_per_token(spec))


def saturation_length_bound(spec: ModelSpec) -> float:
    """Upper limit on prompt length before attention on the relevant subset
    can fall below the required threshold.

    Equals (m / tau) * exp(2 * Q * K / sqrt(d_h)) for relevant-subset size m,
    mass threshold tau, and worst-case query/key norm bounds Q, K.
    """
    if spec.attention_threshold <= 0:
        raise ValueError("attention_threshold must be positive")
    spread = 2.0 * spec.q_eff * spec.k_eff / math.sqrt(spec.head_dim)
    return (spec.relevant_size / spec.attention_threshold) * math.exp(spread)


def degradation_ratio(spec: ModelSpec, observed_sat: float | None = None) -> FeasibilityReport:
    """Ratio of the saturation threshold to the memory-feasible length.

    ``observed_sat`` is an empirically measured saturation threshold in
    tokens; when omitted, the theoretical bound is used in its place.
    Raises ValueError when the spec admits no feasible prompt at all.
    """
    feasible = feasible_prompt_length(spec)
    if feasible <= 0:
        raise ValueError("spec has zero feasible prompt length; no ratio defined")
    bound = saturation_length_bound(spec)
    if observed_sat is None:
        observed_sat = bound
    return FeasibilityReport(
        feasible_len=feasible,
        sat_len_bound=bound,
        degradation_ratio=observed_sat / feasible,
        observed_sat=observed_sat,
        bound_violated=observed_sat > bound,
    )


@dataclass(frozen=True)
class ToyAttentionConfig:
    """Single-head, single-query attention toy with scores drawn in [a, b].

    ``relevant_indices`` are 0-based key positions; causality is modeled by
    restricting keys to the first ``seq_len`` positions.
    """

    seq_len: int
    relevant_indices: tuple[int, ...]
    score_lo: float = 0.0
    score_hi: float = 1.0
    value_bound: float = 1.0
    out_norm: float = 1.0
    value_dim: int = 8

    def __post_init__(self):
        if self.seq_len <= 0:
            raise ValueError("seq_len must be positive")
        if self.score_lo > self.score_hi:
            raise ValueError("score_lo must not exceed score_hi")
        if self.value_bound < 0 or self.out_norm < 0:
            raise ValueError("value_bound and out_norm must be non-negative")
        idx = self.relevant_indices
        if len(set(idx)) != len(idx):
            raise ValueError("relevant_indices must be distinct")
        if any(i < 0 or i >= self.seq_len for i in idx):
            raise ValueError("relevant_indices must lie in [0, seq_len)")

    @property
    def mass_bound(self) -> float:
        """Provable cap on the relevant-subset softmax mass: m*e^(b-a)/len."""
        m = len(self.relevant_indices)
        return m * math.exp(self.score_hi - self.score_lo) / self.seq_len


def _softmax_weights(cfg: ToyAttentionConfig, rng: np.random.Generator) -> np.ndarray:
    scores = rng.uniform(cfg.score_lo, cfg.score_hi, size=cfg.seq_len)
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


def attention_mass_on_subset(cfg: ToyAttentionConfig, rng_seed: int) -> float:
    """Softmax mass landing on the relevant index set for one random draw.

    The result is guaranteed to be at most ``cfg.mass_bound`` for every seed.
    """
    rng = np.random.default_rng(rng_seed)
    weights = _softmax_weights(cfg, rng)
    return float(weights[list(cfg.relevant_indices)].sum())


def logit_contribution_norm(cfg: ToyAttentionConfig, rng_seed: int) -> float:
    """Norm of the relevant subset's contribution to the output logits.

    Random value vectors with norm at most ``value_bound`` are mixed by the
    attention weights and passed through a random map of operator norm
    ``out_norm``; the result is at most W*V*m*e^(b-a)/len for every seed.
    """
    rng = np.random.default_rng(rng_seed)
    weights = _softmax_weights(cfg, rng)
    m = len(cfg.relevant_indices)
    if m == 0 or cfg.value_bound == 0.0:
        return 0.0
    d = cfg.value_dim
    values = rng.standard_normal((m, d))
    norms = np.linalg.norm(values, axis=1)
    norms[norms == 0] = 1.0
    radii = cfg.value_bound * rng.uniform(0.0, 1.0, size=m)
    values = values / norms[:, None] * radii[:, None]
    out_map = rng.standard_normal((d, d))
    spectral = np.linalg.norm(out_map, 2)
    if spectral > 0:
        out_map = out_map * (cfg.out_norm / spectral)
    else:
        out_map = np.zeros((d, d))
    mixed = weights[list(cfg.relevant_indices)] @ values
    return float(np.linalg.norm(out_map @ mixed))
