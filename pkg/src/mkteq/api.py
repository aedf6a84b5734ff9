"""One-call entry points shared by the CLI and the tests."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .demand import approx_oracle, working_bits
from .model import Market, SolverConfig, default_D1, default_D2, derive_config
from .spending import solve_spending
from .wgs import Trace, solve_wgs


@dataclass
class SolveResult:
    prices: tuple[Fraction, ...]
    trace: Trace
    config: SolverConfig
    mode: str


def make_config(market: Market, epsilon, d1=None, d2=None, L=None, r1=16, r2=16, r=16,
                max_rounds=None) -> SolverConfig:
    D1 = default_D1(market) if d1 is None else d1
    D2 = default_D2(market, D1) if d2 is None else d2
    return derive_config(epsilon, market, D1, D2, L=L, R1=r1, R2=r2, R=r, max_rounds=max_rounds)


def solve(market: Market, epsilon, config: SolverConfig | None = None, on_round=None,
          max_bits: int | None = None) -> SolveResult:
    """Approximate equilibrium prices.

    Spending-constraint markets run the exact-oracle solver with rounding;
    everything else runs the WGS solver on the approximate oracle.
    """
    if config is None:
        config = make_config(market, epsilon)
    if market.is_spending:
        p, trace = solve_spending(market, config.epsilon, config, on_round=on_round, max_bits=max_bits)
        return SolveResult(p, trace, config, "spending")
    bits = working_bits(config.mu, market.m, config.Delta)
    oracle = lambda q: approx_oracle(market, q, config.mu, bits=bits)
    p, trace = solve_wgs(oracle, market.m, config, on_round=on_round, max_bits=max_bits)
    return SolveResult(p, trace, config, "approx")
