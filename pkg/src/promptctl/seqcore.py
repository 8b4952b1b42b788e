"""Feasible-sequence algebra: axiom checking and diminishing-returns tests.

Sequences are plain tuples of hashable element ids drawn from a finite
universe. Exhaustive checks enumerate duplicate-free sequences (words without
repeated elements), which is the setting the axioms are usually stated in;
objective checks sample sequences with repetition allowed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

from .errors import EnumerationCapError

Element = Hashable
Seq = tuple

#: numeric slack for comparing real-valued marginal gains
EPS_NUM = 1e-9


@dataclass(frozen=True)
class FeasibleFamily:
    """A universe of elements together with a feasibility predicate."""

    universe: tuple
    member: Callable[[Seq], bool]


@dataclass(frozen=True)
class SequenceObjective:
    """Non-negative objective on sequences, with declared structural flags.

    ``normalized`` declares evaluate(()) == 0; ``monotone`` declares that
    appending never decreases the value. Declared flags are verified by
    :func:`check_string_submodular`, not trusted.
    """

    evaluate: Callable[[Seq], float]
    normalized: bool = False
    monotone: bool = False


@dataclass
class AxiomStatus:
    holds: bool = True
    counterexample: object = None


@dataclass
class AxiomReport:
    """Outcome of the exhaustive axiom check up to a length bound."""

    max_len: int
    sequences_checked: int = 0
    empty_feasible: AxiomStatus = field(default_factory=AxiomStatus)   # G1
    deletable: AxiomStatus = field(default_factory=AxiomStatus)        # G2
    exchangeable: AxiomStatus = field(default_factory=AxiomStatus)     # G3

    @property
    def all_hold(self) -> bool:
        return self.empty_feasible.holds and self.deletable.holds and self.exchangeable.holds


def _enumerate_simple(universe: Sequence, max_len: int):
    """All duplicate-free sequences over the universe up to max_len, by length."""
    frontier = [()]
    yield ()
    for _ in range(max_len):
        nxt = []
        for seq in frontier:
            used = set(seq)
            for e in universe:
                if e not in used:
                    ext = seq + (e,)
                    yield ext
                    nxt.append(ext)
        frontier = nxt


def _count_simple(n_universe: int, max_len: int) -> int:
    total, term = 1, 1
    for k in range(1, max_len + 1):
        term *= n_universe - k + 1
        if term <= 0:
            break
        total += term
    return total


def check_greedoid_axioms(family: FeasibleFamily, max_len: int, cap: int = 200_000) -> AxiomReport:
    """Exhaustively test the three feasibility axioms up to ``max_len``.

    G1: the empty sequence is feasible.
    G2: every nonempty feasible sequence has some position whose removal
        leaves a feasible sequence.
    G3: for feasible S1, S2 with len(S1) < len(S2), some element of S2 that
        does not occur in S1 extends S1 feasibly.

    The first counterexample per axiom is recorded. Raises
    EnumerationCapError when the enumeration would exceed ``cap`` sequences.
    """
    n = len(family.universe)
    if _count_simple(n, max_len) > cap:
        raise EnumerationCapError(
            f"enumerating up to length {max_len} over {n} elements exceeds cap {cap}"
        )

    report = AxiomReport(max_len=max_len)
    feasible = []
    for seq in _enumerate_simple(family.universe, max_len):
        report.sequences_checked += 1
        if family.member(seq):
            feasible.append(seq)

    if () not in feasible:
        report.empty_feasible = AxiomStatus(False, ())

    for seq in feasible:
        if not seq:
            continue
        if not any(family.member(seq[:i] + seq[i + 1:]) for i in range(len(seq))):
            report.deletable = AxiomStatus(False, seq)
            break

    by_len: dict[int, list] = {}
    for seq in feasible:
        by_len.setdefault(len(seq), []).append(seq)
    done = False
    for short in feasible:
        if done:
            break
        for longer_len in range(len(short) + 1, max_len + 1):
            if done:
                break
            for longer in by_len.get(longer_len, ()):  # noqa: B007
                extensions = [e for e in longer if e not in set(short)]
                if not any(family.member(short + (e,)) for e in extensions):
                    report.exchangeable = AxiomStatus(False, (short, longer))
                    done = True
                    break
    return report


def marginal_gain(f: SequenceObjective, s: Seq, e: Element) -> float:
    """Value added by appending ``e`` to ``s``: f(s + (e,)) - f(s)."""
    return f.evaluate(s + (e,)) - f.evaluate(s)


@dataclass
class SubmodularityReport:
    ok: bool
    trials: int
    counterexample: object = None
    reason: str = ""


def check_string_submodular(
    f: SequenceObjective,
    universe: Sequence,
    max_len: int,
    trials: int,
    rng_seed: int,
) -> SubmodularityReport:
    """Randomized diminishing-returns check over prefix pairs.

    Samples prefix pairs S1 <= S2 and elements e absent from S2, and asserts
    gain(S1, e) >= gain(S2, e) - EPS_NUM. Also verifies prefix monotonicity
    and normalization when the objective declares them. Returns the first
    counterexample found, if any.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = random.Random(rng_seed)
    universe = list(universe)

    if f.normalized and abs(f.evaluate(())) > EPS_NUM:
        return SubmodularityReport(False, 0, (), "normalization: f(()) != 0")

    for t in range(trials):
        n2 = rng.randint(0, max_len)
        s2 = tuple(rng.choice(universe) for _ in range(n2))
        s1 = s2[: rng.randint(0, n2)]
        candidates = [e for e in universe if e not in set(s2)]
        if not candidates:
            continue
        e = rng.choice(candidates)
        g1 = marginal_gain(f, s1, e)
        g2 = marginal_gain(f, s2, e)
        if g1 < g2 - EPS_NUM:
            return SubmodularityReport(
                False, t + 1, (s1, s2, e),
                f"diminishing returns violated: gain short={g1!r} < gain long={g2!r}",
            )
        if f.monotone and f.evaluate(s2) < f.evaluate(s1) - EPS_NUM:
            return SubmodularityReport(False, t + 1, (s1, s2), "prefix monotonicity violated")
    return SubmodularityReport(True, trials)
