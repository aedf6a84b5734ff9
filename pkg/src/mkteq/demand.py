"""Aggregate demand oracles.

``exact_oracle`` returns the surplus vector of the balanced flow for
linear and spending-constraint markets.  ``approx_oracle`` returns a surplus
vector within ``mu`` of the exact one; for CES agents it evaluates the
closed-form demand in binary floating point with enough mantissa bits, for
Cobb-Douglas agents the closed form is rational and evaluated exactly.
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import mpmath

from .flow import balanced_flow, build_network
from .model import (CES, CobbDouglas, Market, MarketError,
                    budget, ceil_log2, check_prices)


def mpf_to_fraction(x) -> Fraction:
    """Exact rational value of an mpmath float."""
    sign, man, exp, _ = mpmath.mpf(x)._mpf_
    if not man and exp:
        raise ValueError(f"not a finite number: {x}")
    man = -int(man) if sign else int(man)
    return Fraction(man * 2 ** exp) if exp >= 0 else Fraction(man, 2 ** -exp)


def _to_mpf(q: Fraction):
    q = Fraction(q)
    return mpmath.mpf(q.numerator) / q.denominator


def working_bits(mu: Fraction, m: int, delta: int | None = None,
                 p: Sequence[Fraction] | None = None) -> int:
    """Mantissa bits for irrational demands: 64 + bits(1/mu) + 2 bits(Delta) + ceil(log2 m).

    Without a grid bound, the bit size of the largest price stands in for
    ``Delta``.
    """
    inv = 1 / Fraction(mu)
    inv_bits = max(1, -(-inv.numerator // inv.denominator)).bit_length()
    if delta is not None:
        d_bits = int(delta).bit_length()
    else:
        d_bits = 1
        for x in p or ():
            x = Fraction(x)
            d_bits = max(d_bits, x.numerator.bit_length(), x.denominator.bit_length())
    return 64 + inv_bits + 2 * d_bits + max(0, ceil_log2(m))


def demand_cobb_douglas(util: CobbDouglas, money: Fraction, p: Sequence[Fraction]) -> tuple[Fraction, ...]:
    """x_j = (e_j / sum e) * money / p_j, exactly."""
    total = sum(util.exponents, Fraction(0))
    if total <= 0:
        raise MarketError("Cobb-Douglas exponents are all zero")
    if any(Fraction(x) <= 0 for x in p):
        raise MarketError("prices must be strictly positive")
    return tuple(e / total * Fraction(money) / Fraction(pj) for e, pj in zip(util.exponents, p))


@lru_cache(maxsize=4096)
def _powered_values(values: tuple[Fraction, ...], sigma: Fraction, prec: int):
    with mpmath.workprec(prec):
        s = _to_mpf(sigma)
        return tuple(mpmath.power(_to_mpf(v), s) if v > 0 else mpmath.mpf(0) for v in values)


def _ces_spend(util: CES, money, p_mpf, prec: int):
    """Money an agent spends on each good, as mpmath floats at ``prec`` bits."""
    sigma = util.sigma
    with mpmath.workprec(prec):
        usig = _powered_values(util.values, sigma, prec)
        expo = 1 - sigma
        if expo.denominator == 1:
            pw = [pj ** int(expo) for pj in p_mpf]
        else:
            e = _to_mpf(expo)
            pw = [mpmath.power(pj, e) for pj in p_mpf]
        weights = [a * b for a, b in zip(usig, pw)]
        total = mpmath.fsum(weights)
        return [money * w / total for w in weights]


def demand_ces(util: CES, money: Fraction, p: Sequence[Fraction], bits: int = 128) -> tuple[Fraction, ...]:
    """CES demand x_j = money u_j^s p_j^-s / sum_k u_k^s p_k^(1-s), s = 1/(1-rho).

    Evaluated with ``bits`` mantissa bits; the returned rationals are the
    exact values of the rounded floats.
    """
    if not any(v > 0 for v in util.values):
        raise MarketError("CES values are all zero")
    if any(Fraction(x) <= 0 for x in p):
        raise MarketError("prices must be strictly positive")
    with mpmath.workprec(bits):
        p_mpf = [_to_mpf(x) for x in p]
        spend = _ces_spend(util, _to_mpf(money), p_mpf, bits)
        return tuple(mpf_to_fraction(s / pj) for s, pj in zip(spend, p_mpf))


def exact_oracle(market: Market, p: Sequence[Fraction]) -> tuple[Fraction, ...]:
    """Surplus vector p_j (demand_j - 1) of the balanced flow, exactly."""
    if not market.is_spending:
        raise MarketError("exact demands need linear or spending-constraint utilities")
    p = check_prices(market, p)
    return balanced_flow(build_network(market, p), p)[1]


def _closed_form_spend(market: Market, p: tuple[Fraction, ...], bits: int):
    """Per-agent spend vectors; rationals for Cobb-Douglas, mpf for CES."""
    spends = []
    p_mpf = None
    for i, u in enumerate(market.utilities):
        money = budget(market, i, p)
        if isinstance(u, CobbDouglas):
            total = sum(u.exponents, Fraction(0))
            spends.append([money * e / total for e in u.exponents])
        elif isinstance(u, CES):
            if p_mpf is None:
                with mpmath.workprec(bits):
                    p_mpf = [_to_mpf(x) for x in p]
            with mpmath.workprec(bits):
                spends.append(_ces_spend(u, _to_mpf(money), p_mpf, bits))
        else:
            raise MarketError("mixed markets with spending-constraint agents are not supported")
    return spends


def approx_oracle(market: Market, p: Sequence[Fraction], mu: Fraction,
                  delta: int | None = None, bits: int | None = None) -> tuple[Fraction, ...]:
    """Surplus vector within ``mu`` of the exact one, deterministic."""
    p = check_prices(market, p)
    if Fraction(mu) <= 0:
        raise MarketError("mu must be positive")
    if market.is_spending:
        return exact_oracle(market, p)
    if bits is None:
        bits = working_bits(mu, market.m, delta, p)
    spends = _closed_form_spend(market, p, bits)
    if all(isinstance(u, CobbDouglas) for u in market.utilities):
        return tuple(sum((s[j] for s in spends), Fraction(0)) - p[j] for j in range(market.m))
    out = []
    with mpmath.workprec(bits):
        for j in range(market.m):
            acc = mpmath.fsum(_to_mpf(s[j]) if isinstance(s[j], Fraction) else s[j] for s in spends)
            out.append(mpf_to_fraction(acc - _to_mpf(p[j])))
    return tuple(out)


def reference_oracle(market: Market, p: Sequence[Fraction], bits: int = 128) -> tuple[Fraction, ...]:
    """Surplus at a fixed precision, used as the reference in checks."""
    if market.is_spending:
        return exact_oracle(market, p)
    return approx_oracle(market, p, Fraction(1), bits=bits)


def agent_bundles(market: Market, p: Sequence[Fraction], bits: int = 128) -> list[tuple[Fraction, ...]]:
    """Per-agent demand bundles (goods units)."""
    p = check_prices(market, p)
    if market.is_spending:
        net = build_network(market, p)
        flow, _ = balanced_flow(net, p)
        out = []
        for part in net.partitions:
            spend = list(part.allocated_by_good)
            for (i, j), f in flow.edges.items():
                if i == part.agent:
                    spend[j] += f
            out.append(tuple(s / pj for s, pj in zip(spend, p)))
        return out
    out = []
    for i, u in enumerate(market.utilities):
        money = budget(market, i, p)
        if isinstance(u, CobbDouglas):
            out.append(demand_cobb_douglas(u, money, p))
        elif isinstance(u, CES):
            out.append(demand_ces(u, money, p, bits))
        else:
            raise MarketError("mixed markets with spending-constraint agents are not supported")
    return out
