"""Tabular softmax policies: reweighted distillation and online adaptation.

A policy is a logits table over (context, token). The oracle policy
supervises a student in two phases: an offline phase matches the student to
a protocol-reweighted view of the oracle (KL on reweighted rows), and an
online phase corrects the student on paired contexts collected in a bounded
replay buffer. Plain gradient descent keeps every update deterministic and
directly checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BufferBoundsError, DivergenceError, SupportError

LOSS_TOLERANCE = 1e-6


@dataclass
class SoftmaxPolicy:
    contexts: tuple[str, ...]
    vocab: tuple[str, ...]
    logits: np.ndarray  # shape (len(contexts), len(vocab))
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.shape != (len(self.contexts), len(self.vocab)):
            raise ValueError("logits shape must be (contexts, vocab)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self._ctx_index = {c: i for i, c in enumerate(self.contexts)}
        self._tok_index = {t: i for i, t in enumerate(self.vocab)}

    @classmethod
    def random(cls, contexts, vocab, rng: np.random.Generator, scale: float = 1.0) -> "SoftmaxPolicy":
        contexts, vocab = tuple(contexts), tuple(vocab)
        return cls(contexts, vocab, scale * rng.standard_normal((len(contexts), len(vocab))))

    def copy(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.contexts, self.vocab, self.logits.copy(), self.temperature)

    def ctx(self, context: str) -> int:
        return self._ctx_index[context]

    def tok(self, token: str) -> int:
        return self._tok_index[token]

    def probs(self, context: str) -> np.ndarray:
        z = self.logits[self.ctx(context)] / self.temperature
        z = z - z.max()
        w = np.exp(z)
        return w / w.sum()

    def log_prob(self, context: str, token: str) -> float:
        return float(np.log(self.probs(context)[self.tok(token)]))


@dataclass
class TokenWeights:
    """Non-negative weight table over (context, token) pairs."""

    table: np.ndarray  # aligned with the oracle policy's (contexts, vocab)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float)
        if (self.table < 0).any():
            raise ValueError("weights must be non-negative")

    @classmethod
    def uniform(cls, policy: SoftmaxPolicy) -> "TokenWeights":
        return cls(np.ones_like(policy.logits))

    @classmethod
    def upweight(cls, policy: SoftmaxPolicy, tokens: Iterable[str], factor: float = 10.0) -> "TokenWeights":
        """Emphasize protocol-defining tokens by a multiplicative factor."""
        table = np.ones_like(policy.logits)
        cols = [policy.tok(t) for t in tokens]
        table[:, cols] = factor
        return cls(table)

    def row(self, policy: SoftmaxPolicy, context: str) -> np.ndarray:
        return self.table[policy.ctx(context)]


@dataclass
class ReplayBuffer:
    """Paired (oracle context, student context) store with size bounds."""

    lo: int
    hi: int
    pairs: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.lo <= self.hi):
            raise ValueError("need 0 < lo <= hi")

    def append(self, oracle_context: str, student_context: str) -> None:
        self.pairs.append((oracle_context, student_context))

    def clear(self) -> None:
        self.pairs.clear()

    def __len__(self) -> int:
        return len(self.pairs)

    def check_bounds(self) -> None:
        if not (self.lo <= len(self.pairs) <= self.hi):
            raise BufferBoundsError(
                f"buffer size {len(self.pairs)} outside bounds [{self.lo}, {self.hi}]"
            )


def reweight_policy(policy: SoftmaxPolicy, weights: TokenWeights, context: str) -> np.ndarray:
    """Renormalized product of the policy row and the weight row."""
    p = policy.probs(context)
    w = weights.row(policy, context)
    z = p * w
    total = z.sum()
    if total <= 0.0:
        raise ValueError(f"weights are identically zero on context {context!r}")
    return z / total


def _kl(p: np.ndarray, q: np.ndarray, vocab, *, context: str) -> float:
    mask = p > 0
    if np.any(q[mask] <= 0.0):
        bad = int(np.argmax((p > 0) & (q <= 0.0)))
        raise SupportError(
            f"student assigns zero probability to token {vocab[bad]!r} in context {context!r}",
            token=vocab[bad],
        )
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def distill_loss(
    oracle: SoftmaxPolicy,
    student: SoftmaxPolicy,
    weights: TokenWeights,
    batch: Sequence[tuple[str, str]],
) -> float:
    """Mean KL from the reweighted oracle to the student over context pairs.

    Each batch item pairs the context the oracle is scored on with the
    context the student is scored on (they may coincide).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    total = 0.0
    for ctx_oracle, ctx_student in batch:
        p = reweight_policy(oracle, weights, ctx_oracle)
        q = student.probs(ctx_student)
        total += _kl(p, q, oracle.vocab, context=ctx_oracle)
    return total / len(batch)


def _distill_grad(oracle, student, weights, batch) -> np.ndarray:
    """Analytic gradient of distill_loss in the student's logits."""
    grad = np.zeros_like(student.logits)
    for ctx_oracle, ctx_student in batch:
        p = reweight_policy(oracle, weights, ctx_oracle)
        q = student.probs(ctx_student)
        grad[student.ctx(ctx_student)] += (q - p) / student.temperature
    return grad / len(batch)


def surrogate_nll_grad(oracle, student, weights, batch) -> np.ndarray:
    """Gradient of the expected negative log-likelihood under the reweighted
    oracle, summed per target token. Same stationary points as distill_loss
    (entropy of the target is parameter-free); kept as an independent
    derivation for equivalence checks."""
    grad = np.zeros_like(student.logits)
    for ctx_oracle, ctx_student in batch:
        p = reweight_policy(oracle, weights, ctx_oracle)
        q = student.probs(ctx_student)
        row = student.ctx(ctx_student)
        for a, pa in enumerate(p):
            if pa == 0.0:
                continue
            onehot = np.zeros_like(q)
            onehot[a] = 1.0
            grad[row] += pa * (q - onehot) / student.temperature
    return grad / len(batch)


def consistency_loss(oracle: SoftmaxPolicy, student: SoftmaxPolicy, buffer: ReplayBuffer) -> float:
    """Mean unweighted KL from oracle rows to student rows over the buffer."""
    buffer.check_bounds()
    total = 0.0
    for ctx_oracle, ctx_student in buffer.pairs:
        p = oracle.probs(ctx_oracle)
        q = student.probs(ctx_student)
        total += _kl(p, q, oracle.vocab, context=ctx_oracle)
    return total / len(buffer.pairs)


def _consistency_grad(oracle, student, buffer) -> np.ndarray:
    grad = np.zeros_like(student.logits)
    for ctx_oracle, ctx_student in buffer.pairs:
        p = oracle.probs(ctx_oracle)
        q = student.probs(ctx_student)
        grad[student.ctx(ctx_student)] += (q - p) / student.temperature
    return grad / len(buffer.pairs)


def reward(
    oracle: SoftmaxPolicy,
    contexts: Sequence[str],
    response: Sequence[str],
    weights: TokenWeights,
    alpha: float,
    beta: float,
) -> float:
    """Oracle-aligned score of a response along a chained context sequence.

    The unweighted part sums oracle log-likelihoods of the response tokens;
    the weighted part scales each term by its token weight. The two are
    mixed by (alpha, beta) with alpha + beta = 1.
    """
    if abs(alpha + beta - 1.0) > 1e-12 or alpha < 0 or beta < 0:
        raise ValueError("need alpha, beta >= 0 with alpha + beta = 1")
    if len(contexts) != len(response):
        raise ValueError("contexts and response must have equal length")
    r_sem = 0.0
    r_proto = 0.0
    for ctx, token in zip(contexts, response):
        p = oracle.probs(ctx)[oracle.tok(token)]
        if p <= 0.0:
            raise SupportError(
                f"oracle gives zero probability to realized token {token!r}", token=token
            )
        logp = math.log(p)
        r_sem += logp
        r_proto += weights.row(oracle, ctx)[oracle.tok(token)] * logp
    return alpha * r_sem + beta * r_proto


def make_pair_dataset(contexts: Iterable[str]) -> list[tuple[str, str]]:
    """Pair each context with itself (oracle and student see the same state)."""
    return [(c, c) for c in contexts]


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def train_distill(
    student: SoftmaxPolicy,
    oracle: SoftmaxPolicy,
    dataset: Sequence[tuple[str, str]],
    epochs: int,
    lr: float,
    weights: TokenWeights | None = None,
) -> TrainLog:
    """Full-batch gradient descent on the reweighted-KL objective.

    Mutates the student in place. The objective is convex in the logits, so
    the loss must be non-increasing; three consecutive increases beyond
    tolerance signal a bad learning rate.
    """
    if weights is None:
        weights = TokenWeights.uniform(oracle)
    log = TrainLog()
    increases = 0
    prev = distill_loss(oracle, student, weights, dataset)
    log.losses.append(prev)
    for _ in range(epochs):
        grad = _distill_grad(oracle, student, weights, dataset)
        student.logits -= lr * grad
        loss = distill_loss(oracle, student, weights, dataset)
        log.losses.append(loss)
        if loss > prev + LOSS_TOLERANCE:
            increases += 1
            if increases >= 3:
                raise DivergenceError(
                    f"loss increased 3 epochs in a row (lr={lr}); reduce the learning rate"
                )
        else:
            increases = 0
        prev = loss
    return log


def train_adapt(
    student: SoftmaxPolicy,
    oracle: SoftmaxPolicy,
    stream: Iterable[tuple[str, str]],
    buffer_lo: int,
    buffer_hi: int,
    lr: float,
    update_size: int | None = None,
    drift_hook: Callable[[list[tuple[str, str]]], bool] | None = None,
) -> TrainLog:
    """Online correction: buffer paired contexts, step when full or on drift.

    Pairs stream in as (oracle context, student context). A gradient step
    on the consistency loss fires when the buffer reaches ``update_size``
    (default: ``buffer_hi``) or the drift hook returns True; buffer bounds
    are asserted at every update, and leftovers below ``buffer_lo`` at
    stream end are discarded without an update.
    """
    update_size = buffer_hi if update_size is None else update_size
    if not (buffer_lo <= update_size <= buffer_hi):
        raise ValueError("need buffer_lo <= update_size <= buffer_hi")
    buffer = ReplayBuffer(lo=buffer_lo, hi=buffer_hi)
    log = TrainLog()

    def apply_update():
        loss = consistency_loss(oracle, student, buffer)  # asserts Remark-style bounds
        grad = _consistency_grad(oracle, student, buffer)
        student.logits -= lr * grad
        log.losses.append(loss)
        buffer.clear()

    for pair in stream:
        buffer.append(*pair)
        if len(buffer) >= update_size or (drift_hook is not None and drift_hook(buffer.pairs)):
            apply_update()
    if len(buffer) >= buffer_lo:
        apply_update()
    return log


def transfer_capacity(
    dataset_size: float,
    param_count: float,
    k: float = 0.1,
    delta1: float = 0.25,
    delta2: float = 0.3,
    allow_out_of_range: bool = False,
) -> float:
    """Sub-linear transfer law: k * dataset_size**delta1 * param_count**delta2.

    The exponents are constrained to their empirically supported ranges
    (delta1 in [0.25, 0.35], delta2 in [0.3, 0.5]) unless explicitly
    overridden.
    """
    if dataset_size <= 0 or param_count <= 0 or k <= 0:
        raise ValueError("dataset_size, param_count, and k must be positive")
    if not allow_out_of_range:
        if not (0.25 <= delta1 <= 0.35):
            raise ValueError("delta1 outside [0.25, 0.35]; pass allow_out_of_range=True to override")
        if not (0.3 <= delta2 <= 0.5):
            raise ValueError("delta2 outside [0.3, 0.5]; pass allow_out_of_range=True to override")
    return k * dataset_size**delta1 * param_count**delta2
