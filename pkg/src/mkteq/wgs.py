"""Ascending-price solver for markets with weak gross substitutes.

Each round asks the oracle for the surplus vector, splits the goods at the
first large gap in the sorted surpluses, and raises the prices of the top
group by the largest grid multiplier that keeps the top group's surpluses
above the rest.  The multiplier grid is the set of fractions a/b > 1 with
a, b bounded, searched along the Stern-Brocot tree.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

from .model import SolverConfig


class OracleInconsistency(RuntimeError):
    """The multiplier predicate failed where the analysis says it holds."""


class NonConvergence(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class BitBudgetExceeded(NonConvergence):
    pass


def potential(s: Sequence[Fraction]) -> Fraction:
    return sum((Fraction(x) ** 2 for x in s), Fraction(0))


def sorted_order(s: Sequence[Fraction]) -> list[int]:
    """Goods by decreasing surplus, ties by ascending index."""
    return sorted(range(len(s)), key=lambda j: (-s[j], j))


def find_gap(s: Sequence[Fraction], m: int, mu: Fraction = Fraction(0)):
    """Smallest k whose successor is at most mu or sits a (1+1/m) factor lower.

    Returns ``(k, G1, G2)`` with G1 the top-k goods.
    """
    order = sorted_order(s)
    ratio = 1 + Fraction(1, m)
    for k in range(1, len(order)):
        hi, nxt = s[order[k - 1]], s[order[k]]
        if nxt <= mu or hi > ratio * nxt:
            return k, tuple(sorted(order[:k])), tuple(sorted(order[k:]))
    raise OracleInconsistency("no surplus gap: every surplus exceeds mu, so they cannot sum to ~0")


def update_prices(p: Sequence[Fraction], x: Fraction, S) -> tuple[Fraction, ...]:
    x = Fraction(x)
    if x <= 1:
        raise ValueError("price multiplier must exceed 1")
    S = set(S)
    if not S:
        raise ValueError("empty update set")
    return tuple(Fraction(pj) * x if j in S else Fraction(pj) for j, pj in enumerate(p))


# --------------------------------------------------------------------------
# Stern-Brocot search


def _steps(a: int, b: int, c: int, d: int, bound: int) -> int:
    """Largest k with a + k c <= bound and b + k d <= bound."""
    ks = []
    if c:
        ks.append((bound - a) // c)
    if d:
        ks.append((bound - b) // d)
    return max(0, min(ks))


def _gallop(f: Callable[[int], bool], kmax: int) -> int:
    """Largest k in [1, kmax] with f(k), given f(1) and f monotone decreasing."""
    if kmax <= 1:
        return 1
    if kmax >= 64:
        # a run that reaches the grid edge is common when the threshold is a
        # simple fraction; one probe settles it
        if f(kmax):
            return kmax
        bad = kmax
    else:
        bad = kmax + 1
    good, probe = 1, 2
    while probe < bad and f(probe):
        good, probe = probe, probe * 2
    bad = min(bad, probe)
    while bad - good > 1:
        mid = (good + bad) // 2
        if f(mid):
            good = mid
        else:
            bad = mid
    return good


def stern_brocot_search(go_right: Callable[[Fraction], bool], bound: int):
    """Descend the Stern-Brocot tree above 1 toward a monotone threshold.

    ``go_right(x)`` must be true below the threshold and false above it.
    Returns the final neighbours ``(lo, hi)`` as (num, den) pairs; no
    fraction with numerator and denominator at most ``bound`` lies strictly
    between them.  ``hi`` may be (1, 0), standing for infinity.
    """
    a, b, c, d = 1, 1, 1, 0
    while True:
        if a + c > bound or b + d > bound:
            return (a, b), (c, d)
        if go_right(Fraction(a + c, b + d)):
            kmax = _steps(a, b, c, d, bound)
            k = _gallop(lambda k: go_right(Fraction(a + k * c, b + k * d)), kmax)
            a, b = a + k * c, b + k * d
            if k >= kmax:
                return (a, b), (c, d)
            c, d = a + c, b + d
        else:
            kmax = _steps(c, d, a, b, bound)
            k = _gallop(lambda k: not go_right(Fraction(c + k * a, d + k * b)), kmax)
            c, d = c + k * a, d + k * b
            if k >= kmax:
                return (a, b), (c, d)
            a, b = a + c, b + d


@dataclass
class SearchResult:
    x: Fraction
    probes: list  # (x, predicate, surplus) in probe order
    non_monotone: bool


def _check_monotone(probes, largest: bool) -> bool:
    """True if some probe pair contradicts a monotone predicate."""
    pts = sorted((x, ok) for x, ok, _ in probes)
    seen_flip = False
    for _, ok in pts:
        # largest mode: true... then false; smallest mode: false... then true
        want_first = largest
        if ok != want_first:
            seen_flip = True
        elif seen_flip:
            return True
    return False


def search_multiplier(oracle, p: Sequence[Fraction], G1, G2, bound: int, mu: Fraction = Fraction(0),
                      smallest: bool = False) -> SearchResult:
    """Binary search the grid multiplier for one round.

    Default (largest) mode: the largest x with
    min_{G1} s'(x) >= max({s'_j : j in G2} | {mu}).
    Smallest mode: the smallest x with
    min_{G1} s'(x) <= max({s'_j : j in G2} | {0}).
    """
    G1, G2 = tuple(G1), tuple(G2)
    memo: dict[Fraction, bool] = {}
    probes = []

    def pred(x: Fraction) -> bool:
        if x in memo:
            return memo[x]
        s = oracle(update_prices(p, x, G1))
        lo_top = min(s[j] for j in G1)
        if smallest:
            ok = lo_top <= max([s[j] for j in G2] + [Fraction(0)])
        else:
            ok = lo_top >= max([s[j] for j in G2] + [Fraction(mu)])
        memo[x] = ok
        probes.append((x, ok, s))
        return ok

    if smallest:
        _, hi = stern_brocot_search(lambda x: not pred(x), bound)
        if hi[1] == 0:
            raise OracleInconsistency("top-group surplus never falls to the rest within the grid")
        x = Fraction(*hi)
    else:
        lo, _ = stern_brocot_search(pred, bound)
        if lo == (1, 1):
            raise OracleInconsistency("predicate fails at the first grid point above 1")
        x = Fraction(*lo)
    return SearchResult(x, probes, _check_monotone(probes, not smallest))


# --------------------------------------------------------------------------
# main loop


@dataclass
class RoundState:
    t: int
    p: tuple[Fraction, ...]
    s_tilde: tuple[Fraction, ...]
    phi: Fraction
    order: tuple[int, ...] = ()
    k: int | None = None
    G1: tuple[int, ...] = ()
    G2: tuple[int, ...] = ()
    x: Fraction | None = None
    s_after: tuple[Fraction, ...] | None = None  # oracle at the chosen x
    probes: int = 0
    non_monotone: bool = False

    def to_json(self) -> dict:
        from .model import fmt_rational
        return {
            "t": self.t,
            "p": [fmt_rational(v) for v in self.p],
            "s_tilde": [fmt_rational(v) for v in self.s_tilde],
            "k": self.k,
            "G1": list(self.G1),
            "x": None if self.x is None else fmt_rational(self.x),
            "phi": fmt_rational(self.phi),
        }


@dataclass
class Trace:
    rounds: list[RoundState] = field(default_factory=list)
    oracle_calls: int = 0
    mu: Fraction = Fraction(0)
    mode: str = "approx"

    @property
    def n_rounds(self) -> int:
        return max(0, len(self.rounds) - 1)

    @property
    def final(self) -> RoundState:
        return self.rounds[-1]


def max_bits_env() -> int | None:
    raw = os.environ.get("MKTEQ_MAX_BITS")
    if not raw:
        return None
    return int(raw)


def price_bits(p: Sequence[Fraction]) -> int:
    return max(max(abs(x.numerator).bit_length(), x.denominator.bit_length()) for x in p)


def ascend(oracle, m: int, config: SolverConfig, *, mu: Fraction, bound: int, smallest: bool,
           post_update=None, on_round=None, max_bits: int | None = None,
           stop=None) -> tuple[tuple[Fraction, ...], Trace]:
    """Shared round loop for the WGS and spending solvers.

    ``stop(p, s)`` may end the loop early at a round boundary.
    """
    trace = Trace(mu=Fraction(mu))
    if max_bits is None:
        max_bits = max_bits_env()

    def counted(q):
        trace.oracle_calls += 1
        return tuple(oracle(q))

    p = (Fraction(1),) * m
    s = counted(p)
    t = 0
    while True:
        phi = potential(s)
        if phi < config.eps_prime_sq or (stop is not None and stop(p, s)):
            state = RoundState(t, p, s, phi)
            trace.rounds.append(state)
            if on_round:
                on_round(state)
            return p, trace
        if t >= config.max_rounds:
            trace.rounds.append(RoundState(t, p, s, phi))
            raise NonConvergence(f"no convergence within {config.max_rounds} rounds", trace)
        k, G1, G2 = find_gap(s, m, mu)
        res = search_multiplier(counted, p, G1, G2, bound, mu, smallest=smallest)
        after = next(sv for x, _, sv in res.probes if x == res.x)
        state = RoundState(t, p, s, phi, tuple(sorted_order(s)), k, G1, G2, res.x, after,
                           len(res.probes), res.non_monotone)
        trace.rounds.append(state)
        if on_round:
            on_round(state)
        new_p = update_prices(p, res.x, G1)
        if post_update is not None:
            new_p = tuple(post_update(new_p))
        if max_bits is not None and price_bits(new_p) > max_bits:
            raise BitBudgetExceeded(f"price bit length exceeds {max_bits}", trace)
        s = after if new_p == update_prices(p, res.x, G1) else counted(new_p)
        p = new_p
        t += 1


def solve_wgs(oracle, m: int, config: SolverConfig, exact: bool = False, on_round=None,
              max_bits: int | None = None) -> tuple[tuple[Fraction, ...], Trace]:
    """Approximate equilibrium prices from p = (1, ..., 1).

    ``oracle(p)`` returns a surplus vector within ``config.mu`` of the true
    one.  With ``exact=True`` the oracle is taken to be exact and the mu
    margins in the gap test and the search predicate drop to zero.
    """
    mu = Fraction(0) if exact else config.mu
    p, trace = ascend(oracle, m, config, mu=mu, bound=config.Delta, smallest=False,
                      on_round=on_round, max_bits=max_bits)
    trace.mode = "exact-oracle" if exact else "approx"
    return p, trace
