"""Market instances, utility specifications and solver parameters.

All quantities are exact rationals (``fractions.Fraction``).  Endowments are
normalized on load so that every good has total supply 1; the original
supplies are kept as per-good scale factors so a market can be written back
in its raw form.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Sequence, Union


class MarketError(ValueError):
    """Raised for malformed or invalid market instances."""


def parse_rational(value) -> Fraction:
    """Parse ``"a/b"``, an integer, or a decimal literal exactly."""
    if isinstance(value, bool):
        raise MarketError(f"not a rational: {value!r}")
    if isinstance(value, (int, Fraction)):
        return Fraction(value)
    if isinstance(value, float):
        # floats in JSON are taken at their decimal spelling, not binary value
        return Fraction(repr(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise MarketError(f"not a rational: {value!r}") from exc
    raise MarketError(f"not a rational: {value!r}")


def fmt_rational(q: Fraction) -> str:
    q = Fraction(q)
    return str(q.numerator) if q.denominator == 1 else f"{q.numerator}/{q.denominator}"


def bit_length(q: Fraction) -> int:
    """Bits needed to write the value as serialized: integers carry no denominator."""
    q = Fraction(q)
    bits = abs(q.numerator).bit_length()
    return bits if q.denominator == 1 else bits + q.denominator.bit_length()


def max_bits(values) -> int:
    """Largest numerator/denominator bit length over a collection of rationals."""
    best = 0
    for v in values:
        v = Fraction(v)
        best = max(best, abs(v.numerator).bit_length(), v.denominator.bit_length())
    return best


# --------------------------------------------------------------------------
# utilities


@dataclass(frozen=True)
class CobbDouglas:
    exponents: tuple[Fraction, ...]

    kind = "cobb_douglas"


@dataclass(frozen=True)
class CES:
    values: tuple[Fraction, ...]
    rho: Fraction

    kind = "ces"

    @property
    def sigma(self) -> Fraction:
        return 1 / (1 - self.rho)


@dataclass(frozen=True)
class SpendingConstraint:
    """Separable piecewise-linear utility with per-segment budget caps.

    ``segments[j]`` lists ``(rate, budget_fraction)`` pairs for good ``j`` in
    strictly decreasing rate order.  ``linear`` marks utilities that were
    given as plain linear values (one segment with fraction 1 per valued
    good); it only affects serialization.
    """

    segments: tuple[tuple[tuple[int, Fraction], ...], ...]
    linear: bool = False

    kind = "spending_constraint"

    @classmethod
    def from_linear(cls, values: Sequence[int]) -> "SpendingConstraint":
        segs = tuple(((int(u), Fraction(1)),) if u > 0 else () for u in values)
        return cls(segs, linear=True)

    def total_fraction(self) -> Fraction:
        return sum((b for segs in self.segments for _, b in segs), Fraction(0))


UtilitySpec = Union[CobbDouglas, CES, SpendingConstraint]


# --------------------------------------------------------------------------
# market


@dataclass(frozen=True)
class Market:
    """An exchange market with supply-normalized endowments.

    ``endowments[i][j]`` is agent ``i``'s share of good ``j``; columns sum to
    one.  ``scale[j]`` is the original total supply of good ``j``.
    """

    goods: tuple[str, ...]
    agents: tuple[str, ...]
    endowments: tuple[tuple[Fraction, ...], ...]
    utilities: tuple[UtilitySpec, ...]
    scale: tuple[Fraction, ...] = field(default=())

    @property
    def m(self) -> int:
        return len(self.goods)

    @property
    def n(self) -> int:
        return len(self.agents)

    def utility_classes(self) -> set[str]:
        return {u.kind for u in self.utilities}

    @property
    def is_spending(self) -> bool:
        return all(isinstance(u, SpendingConstraint) for u in self.utilities)

    def bit_size(self) -> int:
        """Total bit length of every endowment and utility parameter."""
        total = sum(bit_length(w) for row in self.endowments for w in row)
        for u in self.utilities:
            if isinstance(u, SpendingConstraint):
                for segs in u.segments:
                    for rate, frac in segs:
                        total += bit_length(rate)
                        if not u.linear:
                            total += bit_length(frac)
            elif isinstance(u, CES):
                total += sum(bit_length(v) for v in u.values) + bit_length(u.rho)
            else:
                total += sum(bit_length(e) for e in u.exponents)
        return total


def budget(market: Market, agent: int, p: Sequence[Fraction]) -> Fraction:
    """Money value of an agent's endowment at prices ``p``."""
    return sum((Fraction(pj) * w for pj, w in zip(p, market.endowments[agent]) if w), Fraction(0))


def check_prices(market: Market, p: Sequence[Fraction]) -> tuple[Fraction, ...]:
    if len(p) != market.m:
        raise MarketError(f"price vector has {len(p)} entries, market has {market.m} goods")
    out = tuple(Fraction(x) for x in p)
    if any(x <= 0 for x in out):
        raise MarketError("prices must be strictly positive")
    return out


def _good_map(raw, goods: Sequence[str], what: str) -> list:
    """Read a per-good field given either as a name-keyed object or a list."""
    if isinstance(raw, dict):
        unknown = set(raw) - set(goods)
        if unknown:
            raise MarketError(f"{what}: unknown goods {sorted(unknown)}")
        return [raw.get(g) for g in goods]
    if isinstance(raw, list):
        if len(raw) != len(goods):
            raise MarketError(f"{what}: expected {len(goods)} entries")
        return list(raw)
    raise MarketError(f"{what}: expected an object or a list")


def _parse_utility(raw: dict, goods: Sequence[str], who: str) -> UtilitySpec:
    if not isinstance(raw, dict) or "type" not in raw:
        raise MarketError(f"{who}: utility must be an object with a 'type'")
    kind = raw["type"]
    if kind == "linear":
        vals = []
        for v in _good_map(raw.get("values", {}), goods, f"{who} values"):
            q = parse_rational(v) if v is not None else Fraction(0)
            if q < 0 or q.denominator != 1:
                raise MarketError(f"{who}: linear values must be nonnegative integers")
            vals.append(int(q))
        if not any(vals):
            raise MarketError(f"{who}: linear utility values are all zero")
        return SpendingConstraint.from_linear(vals)
    if kind == "cobb_douglas":
        exps = [parse_rational(v) if v is not None else Fraction(0)
                for v in _good_map(raw.get("exponents", {}), goods, f"{who} exponents")]
        if any(e < 0 for e in exps) or not any(exps):
            raise MarketError(f"{who}: Cobb-Douglas exponents must be nonnegative, not all zero")
        return CobbDouglas(tuple(exps))
    if kind == "ces":
        vals = [parse_rational(v) if v is not None else Fraction(0)
                for v in _good_map(raw.get("values", {}), goods, f"{who} values")]
        if "rho" not in raw:
            raise MarketError(f"{who}: CES utility needs 'rho'")
        rho = parse_rational(raw["rho"])
        if not 0 < rho < 1:
            raise MarketError(f"{who}: rho must lie strictly between 0 and 1")
        if any(v < 0 for v in vals) or not any(vals):
            raise MarketError(f"{who}: CES values must be nonnegative, not all zero")
        return CES(tuple(vals), rho)
    if kind == "spending_constraint":
        per_good = []
        for g, segs in zip(goods, _good_map(raw.get("segments", {}), goods, f"{who} segments")):
            segs = segs or []
            parsed = []
            for seg in segs:
                if not isinstance(seg, (list, tuple)) or len(seg) != 2:
                    raise MarketError(f"{who}/{g}: a segment is a [rate, fraction] pair")
                rate, frac = parse_rational(seg[0]), parse_rational(seg[1])
                if rate <= 0 or rate.denominator != 1:
                    raise MarketError(f"{who}/{g}: segment rates must be positive integers")
                if not 0 < frac <= 1:
                    raise MarketError(f"{who}/{g}: budget fractions must lie in (0, 1]")
                parsed.append((int(rate), frac))
            for (r1, _), (r2, _) in zip(parsed, parsed[1:]):
                if r2 >= r1:
                    raise MarketError(f"{who}/{g}: segment rates must strictly decrease")
            per_good.append(tuple(parsed))
        util = SpendingConstraint(tuple(per_good))
        if util.total_fraction() < 1:
            raise MarketError(f"{who}: segment budget fractions sum below 1, budget cannot be spent")
        return util
    raise MarketError(f"{who}: unknown utility type {kind!r}")


def market_from_dict(data: dict) -> Market:
    """Build a validated, supply-normalized market from the JSON structure."""
    if not isinstance(data, dict):
        raise MarketError("market must be a JSON object")
    goods = data.get("goods")
    agents = data.get("agents")
    if not isinstance(goods, list) or not all(isinstance(g, str) for g in goods):
        raise MarketError("'goods' must be a list of names")
    if len(set(goods)) != len(goods):
        raise MarketError("duplicate good names")
    if len(goods) < 2:
        raise MarketError("a market needs at least two goods")
    if not isinstance(agents, list) or not agents:
        raise MarketError("'agents' must be a nonempty list")

    names, raw_w, utils = [], [], []
    for idx, a in enumerate(agents):
        if not isinstance(a, dict):
            raise MarketError(f"agent {idx}: expected an object")
        name = str(a.get("name", f"a{idx + 1}"))
        row = [parse_rational(v) if v is not None else Fraction(0)
               for v in _good_map(a.get("endowment", {}), goods, f"{name} endowment")]
        if any(w < 0 for w in row):
            raise MarketError(f"{name}: negative endowment")
        names.append(name)
        raw_w.append(row)
        utils.append(_parse_utility(a.get("utility"), goods, name))
    if len(set(names)) != len(names):
        raise MarketError("duplicate agent names")

    supply = [sum((row[j] for row in raw_w), Fraction(0)) for j in range(len(goods))]
    for g, s in zip(goods, supply):
        if s == 0:
            raise MarketError(f"good {g!r} has zero total supply")
    w = tuple(tuple(row[j] / supply[j] for j in range(len(goods))) for row in raw_w)
    return Market(tuple(goods), tuple(names), w, tuple(utils), tuple(supply))


def load_market(path) -> Market:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MarketError(f"{path}: not valid JSON ({exc})") from exc
    return market_from_dict(data)


def _utility_to_dict(u: UtilitySpec, goods: Sequence[str]) -> dict:
    if isinstance(u, SpendingConstraint):
        if u.linear:
            return {"type": "linear",
                    "values": {g: segs[0][0] for g, segs in zip(goods, u.segments) if segs}}
        return {"type": "spending_constraint",
                "segments": {g: [[r, fmt_rational(b)] for r, b in segs]
                             for g, segs in zip(goods, u.segments) if segs}}
    if isinstance(u, CES):
        return {"type": "ces", "rho": fmt_rational(u.rho),
                "values": {g: fmt_rational(v) for g, v in zip(goods, u.values) if v}}
    return {"type": "cobb_douglas",
            "exponents": {g: fmt_rational(e) for g, e in zip(goods, u.exponents) if e}}


def market_to_dict(market: Market) -> dict:
    """Serialize with the original (unnormalized) endowments."""
    scale = market.scale or (Fraction(1),) * market.m
    agents = []
    for name, row, u in zip(market.agents, market.endowments, market.utilities):
        agents.append({
            "name": name,
            "endowment": {g: fmt_rational(w * s) for g, w, s in zip(market.goods, row, scale) if w},
            "utility": _utility_to_dict(u, market.goods),
        })
    return {"goods": list(market.goods), "agents": agents}


def dump_market(market: Market) -> str:
    return json.dumps(market_to_dict(market), indent=2, sort_keys=False)


# --------------------------------------------------------------------------
# sufficiency


def validate_sufficiency(market: Market) -> tuple[int, ...] | None:
    """Check the connectivity condition needed by the spending solvers.

    For every agent subset S whose owned goods do not cover the market,
    some agent of S must value (with its first segment) a good it does not
    own collectively.  Returns ``None`` when the condition holds and the
    first violating subset (agent indices) otherwise.
    """
    if not market.is_spending:
        raise MarketError("sufficiency is defined for spending-constraint markets only")
    owned = [{j for j, w in enumerate(row) if w > 0} for row in market.endowments]
    wanted = [{j for j, segs in enumerate(u.segments) if segs} for u in market.utilities]
    everything = set(range(market.m))
    for size in range(1, market.n + 1):
        for subset in combinations(range(market.n), size):
            gamma = set().union(*(owned[i] for i in subset))
            if gamma == everything:
                continue
            if not any(wanted[i] - gamma for i in subset):
                return subset
    return None


def unvalued_goods(market: Market) -> tuple[int, ...]:
    """Goods no agent values; such a good can only clear at price zero."""
    if not market.is_spending:
        raise MarketError("defined for spending-constraint markets only")
    return tuple(j for j in range(market.m)
                 if not any(u.segments[j] for u in market.utilities))


# --------------------------------------------------------------------------
# solver configuration


@dataclass(frozen=True)
class SolverConfig:
    epsilon: Fraction
    epsilon_prime: Fraction
    mu: Fraction
    Delta: int
    M: int
    D1: int
    D2: int
    L: int
    R1: int = 16
    R2: int = 16
    R: int = 16
    max_rounds: int = 0

    @property
    def eps_prime_sq(self) -> Fraction:
        return self.epsilon_prime ** 2


def ceil_log2(q) -> int:
    """Exact ceil(log2(q)) for a positive rational."""
    q = Fraction(q)
    if q <= 0:
        raise ValueError("log of a nonpositive number")
    k = q.numerator.bit_length() - q.denominator.bit_length()
    # now 2**(k-1) < q < 2**(k+1); settle the boundary exactly
    while Fraction(2) ** k < q:
        k += 1
    while Fraction(2) ** (k - 1) >= q:
        k -= 1
    return k


def epsilon_prime_lower(epsilon: Fraction, m: int, extra_bits: int = 32) -> Fraction:
    """Rational e' with e' <= epsilon/(2 sqrt m) < e'(1 + 2^-extra_bits)."""
    epsilon = Fraction(epsilon)
    # epsilon/(2 sqrt m) = sqrt(epsilon^2/(4m)); approximate the square root from below
    target = epsilon * epsilon / (4 * m)
    scale = max(0, -ceil_log2(target)) // 2 + extra_bits + 4
    num = target.numerator * 4 ** scale
    root = math.isqrt(num // target.denominator)
    # root <= sqrt(target)*2^scale < root+1; shrink until the relative slack is small enough
    cand = Fraction(root, 2 ** scale)
    while cand * cand > target:
        cand -= Fraction(1, 2 ** scale)
    assert cand > 0 and (cand * (1 + Fraction(1, 2 ** extra_bits))) ** 2 > target
    return cand


def round_budget(m: int, epsilon: Fraction, D1: int) -> int:
    """64 (D1 m^7 ceil(log2 m) + m^3 ceil(log2(1/epsilon)))."""
    return 64 * (D1 * m ** 7 * ceil_log2(m) + m ** 3 * max(1, ceil_log2(1 / Fraction(epsilon))))


def derive_config(epsilon, market_or_m, D1: int, D2: int, L: int | None = None,
                  R1: int = 16, R2: int = 16, R: int = 16,
                  max_rounds: int | None = None) -> SolverConfig:
    """Fill in the solver parameters for precision ``epsilon``."""
    epsilon = Fraction(epsilon)
    m = market_or_m if isinstance(market_or_m, int) else market_or_m.m
    if m < 2:
        raise MarketError("a market needs at least two goods")
    if epsilon <= 0:
        raise MarketError("epsilon must be positive")
    if D1 < 1 or D2 < 1:
        raise MarketError("D1 and D2 must be at least 1")
    if min(R1, R2, R) < 2:
        raise MarketError("R, R1, R2 must be at least 2")
    if L is None:
        if isinstance(market_or_m, int):
            raise MarketError("L is required when no market is given")
        L = market_or_m.bit_size()
    mu = epsilon / (R1 * m ** 7)
    lm = ceil_log2(m)
    Delta = math.ceil(Fraction(2) ** (D1 + D2 + lm) / mu)
    eps_p = epsilon_prime_lower(epsilon, m)
    M = max(ceil_log2(5 * Fraction(m) ** 7 / eps_p ** 2), L)
    if max_rounds is None:
        max_rounds = round_budget(m, epsilon, D1)
    return SolverConfig(epsilon, eps_p, mu, Delta, M, D1, D2, L, R1, R2, R, max_rounds)


def default_D1(market: Market) -> int:
    """Price-range exponent used when none is supplied.

    Spending markets use 2 m L.  For CES markets with strictly positive
    values, equilibrium price ratios never exceed max(u)/min(u) (the
    cheapest good's spend dominates the dearest good's spend by that
    factor to the power sigma), so the exponent of that ratio plus one
    suffices.  Otherwise fall back to L.
    """
    L = market.bit_size()
    if market.is_spending:
        return 2 * market.m * L
    ces = [u for u in market.utilities if isinstance(u, CES)]
    if ces and len(ces) == market.n and all(all(v > 0 for v in u.values) for u in ces):
        ratio = max(max(u.values) / min(u.values) for u in ces)
        return max(1, ceil_log2(ratio) + 1)
    return max(1, L)


def default_D2(market: Market, D1: int) -> int:
    """Surplus-slope exponent used when none is supplied.

    On the box 1 <= p <= 2^D1 an agent's spend on a good moves by at most
    w_ij + |sigma - 1| * budget per unit price change, so every partial
    derivative of a surplus is below 2 + |sigma - 1| m 2^D1.  Cobb-Douglas
    is the sigma = 1 case.  Spending markets have no such bound; 1 is used.
    """
    if market.is_spending:
        return 1
    worst = Fraction(0)
    for u in market.utilities:
        if isinstance(u, CES):
            worst = max(worst, abs(u.sigma - 1))
    bound = 2 + worst * market.m * 2 ** D1
    return max(1, ceil_log2(bound + 1))
