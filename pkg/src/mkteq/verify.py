"""Independent checkers and brute-force references.

Nothing here is used by the solvers; these routines recompute things the
slow way so the solvers can be held to account.
"""
from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import mpmath
import numpy as np

from .demand import _to_mpf, agent_bundles, mpf_to_fraction, exact_oracle, reference_oracle
from .flow import EqualityNetwork, balanced_flow, build_network, surplus_of_flow
from .model import (CES, CobbDouglas, Market, MarketError, SolverConfig, SpendingConstraint,
                    budget, check_prices, fmt_rational, market_from_dict, parse_rational,
                    unvalued_goods, validate_sufficiency)
from .wgs import potential, update_prices

CES_SLACK_TOL = Fraction(1, 2 ** 90)


@dataclass
class CheckReport:
    passed: bool
    oversell: list = field(default_factory=list)       # per good: demand / supply - 1
    optimality: list = field(default_factory=list)     # per agent slack
    worst: dict | None = None
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "oversell": [fmt_rational(Fraction(v)) for v in self.oversell],
            "optimality_slack": [fmt_rational(Fraction(v)) for v in self.optimality],
            "worst": self.worst,
            "notes": self.notes,
        }


# --------------------------------------------------------------------------
# equilibrium check


def _greedy_spending_value(util: SpendingConstraint, money: Fraction, p) -> Fraction:
    """Best utility with ``money``: buy segments by decreasing bang-per-buck."""
    segs = sorted(((Fraction(r) / p[j], frac * money) for j, per in enumerate(util.segments)
                   for r, frac in per), key=lambda t: -t[0])
    left, val = money, Fraction(0)
    for bpb, cap in segs:
        take = min(cap, left)
        val += bpb * take
        left -= take
        if left == 0:
            break
    return val


def spending_value(util: SpendingConstraint, spend: Sequence[Fraction], money: Fraction, p) -> Fraction:
    """Utility of spending ``spend[j]`` on good j, segments filled in order."""
    val = Fraction(0)
    for j, per in enumerate(util.segments):
        left = Fraction(spend[j])
        for r, frac in per:
            take = min(left, frac * money)
            val += Fraction(r) / p[j] * take
            left -= take
        # money beyond the last segment buys nothing
    return val


def _ces_slack(util: CES, x, p, bits: int) -> Fraction:
    """Relative spread of marginal utility per unit money over bought goods."""
    with mpmath.workprec(bits):
        r = _to_mpf(util.rho)
        bpb = [_to_mpf(u) * mpmath.power(_to_mpf(xj), r - 1) / _to_mpf(pj)
               for u, xj, pj in zip(util.values, x, p) if xj > 0 and u > 0]
        if not bpb:
            return Fraction(1)
        hi, lo = max(bpb), min(bpb)
        return mpf_to_fraction((hi - lo) / hi) if hi > 0 else Fraction(0)


def check_approx_equilibrium(market: Market, p: Sequence[Fraction], mu_factor=1, bits: int = 128) -> CheckReport:
    """Recompute demands and test oversell and per-agent optimality."""
    mu_factor = Fraction(mu_factor)
    if mu_factor < 1:
        raise MarketError("mu_factor must be at least 1")
    p = check_prices(market, p)
    bundles = agent_bundles(market, p, bits)
    demand = [sum((b[j] for b in bundles), Fraction(0)) for j in range(market.m)]
    oversell = [d - 1 for d in demand]
    slack = []
    worst = None
    notes = []
    for i, (u, x) in enumerate(zip(market.utilities, bundles)):
        money = budget(market, i, p)
        spent = sum((xj * pj for xj, pj in zip(x, p)), Fraction(0))
        if isinstance(u, SpendingConstraint):
            best = _greedy_spending_value(u, money, p)
            got = spending_value(u, [xj * pj for xj, pj in zip(x, p)], money, p)
            sl = best - got + abs(spent - money)
            tol = Fraction(0)
        elif isinstance(u, CobbDouglas):
            tot = sum(u.exponents, Fraction(0))
            sl = max(abs(xj * pj / money - e / tot) for xj, pj, e in zip(x, p, u.exponents)) if money else Fraction(0)
            sl += abs(spent - money)
            tol = Fraction(0)
        else:
            sl = _ces_slack(u, x, p, bits) + (abs(spent - money) / money if money else 0)
            tol = CES_SLACK_TOL
        slack.append(sl)
        if sl > tol and worst is None:
            worst = {"kind": "optimality", "agent": market.agents[i], "slack": fmt_rational(sl)}
    for j, d in enumerate(demand):
        if d > mu_factor:
            cand = {"kind": "oversell", "good": market.goods[j], "demand": fmt_rational(d),
                    "bound": fmt_rational(mu_factor)}
            if worst is None or worst["kind"] != "oversell" or d > parse_rational(worst["demand"]):
                worst = cand
    if mu_factor == 1:
        notes.append("exact clearing bound")
    return CheckReport(worst is None, oversell, slack, worst, notes)


# --------------------------------------------------------------------------
# brute-force demand


def _utility_grid(util, spend: np.ndarray, p: np.ndarray, money: float) -> np.ndarray:
    """Utility at each row of ``spend`` (money per good)."""
    x = spend / p
    if isinstance(util, CobbDouglas):
        e = np.array([float(v) for v in util.exponents])
        with np.errstate(divide="ignore"):
            logs = np.where(e > 0, np.log(np.maximum(x, 0.0)), 0.0)
        return (logs * e).sum(axis=1)
    if isinstance(util, CES):
        u = np.array([float(v) for v in util.values])
        return (u * np.power(np.maximum(x, 0.0), float(util.rho))).sum(axis=1)
    total = np.zeros(spend.shape[0])
    for j, per in enumerate(util.segments):
        left = spend[:, j].copy()
        for r, frac in per:
            take = np.minimum(left, float(frac) * money)
            total += r / p[j] * take
            left -= take
    return total


def brute_force_demand(util, money, p: Sequence, grid_steps: int = 1000) -> tuple[float, ...]:
    """Grid search over budget splits; a test reference only.

    The split resolution is 1/grid_steps of the budget, so expect agreement
    with the true demand to about 10/grid_steps in budget shares.
    """
    m = len(p)
    if m > 3:
        raise ValueError("grid search supports at most 3 goods")
    if grid_steps > 10 ** 4:
        raise ValueError("grid_steps is capped at 10^4")
    money = float(money)
    pf = np.array([float(v) for v in p])
    t = np.linspace(0.0, 1.0, grid_steps + 1)
    best_val, best = -np.inf, None
    if m == 1:
        return (money / pf[0],)
    if m == 2:
        spend = np.stack([t, 1 - t], axis=1) * money
        vals = _utility_grid(util, spend, pf, money)
        k = int(np.argmax(vals))
        best = spend[k]
    else:
        for a in t:
            rest = t[t <= 1 - a + 1e-12]
            spend = np.stack([np.full_like(rest, a), rest, np.maximum(1 - a - rest, 0.0)], axis=1) * money
            vals = _utility_grid(util, spend, pf, money)
            k = int(np.argmax(vals))
            if vals[k] > best_val:
                best_val, best = vals[k], spend[k]
    return tuple(float(s / pj) for s, pj in zip(best, pf))


# --------------------------------------------------------------------------
# brute-force balanced surplus


def _ordered_partitions(items: list):
    if not items:
        yield []
        return
    n = len(items)
    for labels in itertools.product(range(n), repeat=n):
        used = sorted(set(labels))
        if used != list(range(len(used))):
            continue
        yield [[items[i] for i in range(n) if labels[i] == b] for b in used]


def brute_force_balanced_surplus(net: EqualityNetwork, p: Sequence[Fraction] | None = None) -> tuple[Fraction, ...]:
    """Minimum of sum_j (l_j + spent_j - p_j)^2 over maximum flows, by enumeration.

    Works in the space of sink vectors l: they range over the base polytope
    of f(Y) = sum_i min(a_i, sum_{j in Y} c_ij).  The optimum has tight lower
    level sets, so every candidate is an ordered partition of the goods with
    a common surplus per block; the feasible one with ascending levels wins.
    """
    if net.n > 3 or net.m > 3:
        raise ValueError("enumeration supports at most 3 agents and 3 goods")
    prices = tuple(net.prices if p is None else (Fraction(x) for x in p))
    c = [net.spent_good[j] - prices[j] for j in range(net.m)]
    goods = list(range(net.m))

    def rank(Y) -> Fraction:
        Y = set(Y)
        return sum((min(net.source_cap[i], sum((cap for (a, j), cap in net.edges.items() if a == i and j in Y),
                                                  Fraction(0))) for i in range(net.n)), Fraction(0))

    ranks = {Y: rank(Y) for r in range(net.m + 1) for Y in itertools.combinations(goods, r)}
    found = None
    for blocks in _ordered_partitions(goods):
        ell, levels, prev, acc = {}, [], Fraction(0), set()
        for blk in blocks:
            acc |= set(blk)
            r = ranks[tuple(sorted(acc))]
            lam = (r - prev + sum(c[j] for j in blk)) / len(blk)
            for j in blk:
                ell[j] = lam - c[j]
            levels.append(lam)
            prev = r
        if any(a > b for a, b in zip(levels, levels[1:])):
            continue
        if any(sum((ell[j] for j in Y), Fraction(0)) > rY for Y, rY in ranks.items()):
            continue
        s = tuple(ell[j] + c[j] for j in goods)
        if found is not None and found != s:
            raise AssertionError("two distinct optimal surplus vectors")
        found = s
    if found is None:
        raise AssertionError("no KKT candidate is feasible")
    return found


def check_max_min_fairness(net: EqualityNetwork, trials: int = 100, seed: int = 0) -> CheckReport:
    """Perturb the balanced flow along agent-local exchanges; none may look fairer.

    A feasible maximum flow's surplus vector, sorted in decreasing order, must
    never be lexicographically smaller than the balanced one, and its squared
    norm never smaller.
    """
    flow, s = balanced_flow(net)
    base = sorted(s, reverse=True)
    rng = random.Random(seed)
    bad = []
    pairs = [(i, j, k) for (i, j) in flow.edges for (i2, k) in flow.edges if i2 == i and k != j]
    for t in range(trials):
        if not pairs:
            break
        i, j, k = rng.choice(pairs)
        room = min(flow.edges[(i, j)], net.edges[(i, k)] - flow.edges[(i, k)])
        if room <= 0:
            continue
        delta = room * Fraction(rng.randint(1, 1000), 1000)
        edges = dict(flow.edges)
        edges[(i, j)] -= delta
        edges[(i, k)] += delta
        s2 = surplus_of_flow(net, edges)
        if sorted(s2, reverse=True) < base or potential(s2) < potential(s):
            bad.append({"trial": t, "agent": i, "from": j, "to": k, "delta": fmt_rational(delta)})
    worst = bad[0] if bad else None
    return CheckReport(not bad, worst=worst, notes=[f"{len(bad)} fairer perturbations"] if bad else [])


# --------------------------------------------------------------------------
# WGS probe


def check_wgs_monotonicity(market: Market, p: Sequence[Fraction], j: int, delta) -> CheckReport:
    """Raise p_j by delta; every other surplus must weakly increase."""
    if not market.is_spending:
        raise MarketError("the WGS probe needs a spending-constraint market")
    delta = Fraction(delta)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    p = check_prices(market, p)
    s = exact_oracle(market, p)
    q = tuple(v + delta if k == j else v for k, v in enumerate(p))
    s2 = exact_oracle(market, q)
    drops = [k for k in range(market.m) if k != j and s2[k] < s[k]]
    worst = None
    if drops:
        k = drops[0]
        worst = {"kind": "wgs", "good": market.goods[k], "before": fmt_rational(s[k]), "after": fmt_rational(s2[k])}
    return CheckReport(not drops, worst=worst)


# --------------------------------------------------------------------------
# trace invariants


@dataclass
class TraceReport:
    violations: dict
    rounds: int
    decrease_factors: list

    @property
    def passed(self) -> bool:
        return not any(self.violations.values())

    def to_json(self) -> dict:
        return {"passed": self.passed, "rounds": self.rounds,
                "violations": {k: v for k, v in self.violations.items()},
                "decrease_factors": [fmt_rational(f) for f in self.decrease_factors]}


INVARIANTS = ("initial_norm", "norm_monotone", "negative_at_one", "min_price_one", "price_cap",
              "update_bound", "gap_closure", "potential_decrease", "big_steps", "g1_membership",
              "negative_connected")


def _record(r) -> dict:
    if isinstance(r, dict):
        out = dict(r)
    else:
        out = r.to_json()
    out["p"] = tuple(parse_rational(v) for v in out["p"])
    out["s_tilde"] = tuple(parse_rational(v) for v in out["s_tilde"])
    out["x"] = None if out.get("x") is None else parse_rational(out["x"])
    out["G1"] = tuple(out.get("G1") or ())
    return out


def check_trace(market: Market, records: Iterable, config: SolverConfig, mode: str = "approx",
                bits: int = 128, tol=None, rounding_M: int | None = None) -> TraceReport:
    """Replay a solver trace and test every per-round invariant.

    ``records`` are RoundState objects or their JSON form.  Surpluses are
    recomputed with the exact oracle for spending markets and with a fixed
    ``bits``-bit reference otherwise; ``tol`` absorbs the reference error.
    In spending mode the potential and update checks use the prices before
    rounding, which is where those bounds apply.
    """
    recs = [_record(r) for r in records]
    m = market.m
    exact = market.is_spending
    if tol is None:
        tol = Fraction(0) if exact else Fraction(1, 2 ** (bits - 24))
    mu = Fraction(0) if mode in ("spending", "exact-oracle") else config.mu
    cache = {}

    def ref(q):
        q = tuple(q)
        if q not in cache:
            cache[q] = exact_oracle(market, q) if exact else reference_oracle(market, q, bits)
        return cache[q]

    v = {name: [] for name in INVARIANTS}
    factors = []
    cap = Fraction(2) ** config.D1
    small = 1 + Fraction(1, config.R2 * m ** 3)
    big = 0
    prev_norm = None
    for idx, r in enumerate(recs):
        t, p = r["t"], r["p"]
        s = ref(p)
        norm = sum((abs(x) for x in s), Fraction(0))
        scale = max(p)
        if idx == 0 and norm > 2 * m + tol * m:
            v["initial_norm"].append({"t": t, "norm": fmt_rational(norm)})
        if prev_norm is not None and norm > prev_norm + 2 * m * tol * scale:
            v["norm_monotone"].append({"t": t, "before": fmt_rational(prev_norm), "after": fmt_rational(norm)})
        prev_norm = norm
        # spending runs may leave negative surplus above price 1; there the
        # good must instead be linked to a price-1 good (checked below)
        if mode != "spending":
            for j in range(m):
                if s[j] < -tol * scale and p[j] != 1:
                    v["negative_at_one"].append({"t": t, "good": j})
        if min(p) != 1:
            v["min_price_one"].append({"t": t})
        if max(p) > cap:
            v["price_cap"].append({"t": t, "max": fmt_rational(max(p))})
        if exact and mode == "spending":
            v["negative_connected"].extend({"t": t, "good": j} for j in _negative_unconnected(market, p, s))
        x = r["x"]
        if x is None:
            continue
        G1 = r["G1"]
        for j in G1:
            if r["s_tilde"][j] <= mu:
                v["g1_membership"].append({"t": t, "good": j})
        moved = update_prices(p, x, G1)
        s_mid = ref(moved)
        for j in G1:
            if s_mid[j] > x * s[j] + tol * x * scale:
                v["update_bound"].append({"t": t, "good": j})
        # gap closure is about what the solver saw at the chosen multiplier
        s_seen = r.get("s_after")
        if s_seen is None:
            s_seen = s_mid
        else:
            s_seen = tuple(parse_rational(q) for q in s_seen)
        G2 = [j for j in range(m) if j not in G1]
        if min(s_seen[j] for j in G1) > max([s_seen[j] for j in G2] + [mu]) + 6 * mu:
            v["gap_closure"].append({"t": t, "x": fmt_rational(x)})
        if x >= small:
            big += 1
        else:
            before = potential(s)
            if idx + 1 < len(recs) and mode != "spending":
                after = potential(ref(recs[idx + 1]["p"]))
            else:
                after = potential(s_mid)
            if before > 0:
                factors.append(after / before)
            if not after < before + tol * m * scale:
                v["potential_decrease"].append({"t": t, "before": fmt_rational(before), "after": fmt_rational(after)})
    limit = math.ceil(2 * config.R2 * math.log(2)) * m ** 4 * config.D1
    if big > limit:
        v["big_steps"].append({"count": big, "limit": limit})
    return TraceReport(v, max(0, len(recs) - 1), factors)


def _negative_unconnected(market: Market, p, s) -> list[int]:
    """Goods with negative surplus and price > 1 not EG-linked to a price-1 good."""
    net = build_network(market, p)
    adj: dict = {}
    for (i, j) in net.edges:
        adj.setdefault(("a", i), set()).add(("g", j))
        adj.setdefault(("g", j), set()).add(("a", i))
    out = []
    for j in range(market.m):
        if s[j] < 0 and p[j] > 1:
            seen, stack = {("g", j)}, [("g", j)]
            ok = False
            while stack and not ok:
                node = stack.pop()
                if node[0] == "g" and p[node[1]] == 1:
                    ok = True
                for nb in adj.get(node, ()):
                    if nb not in seen:
                        seen.add(nb)
                        stack.append(nb)
            if not ok:
                out.append(j)
    return out


# --------------------------------------------------------------------------
# instance generator

CLASSES = ("linear", "ces", "cobb_douglas", "spending_constraint")


def _endowments(rng: random.Random, m: int, n: int, sparse: bool) -> list[dict]:
    while True:
        if sparse:
            # unit holdings; every agent and every good appears at least once
            rows = [[0] * m for _ in range(n)]
            for k in range(max(m, n)):
                i = k if k < n else rng.randrange(n)
                j = k if k < m else rng.randrange(m)
                rows[i][j] = 1
            rng.shuffle(rows)
        else:
            rows = [[rng.choice((0, 0, 1, 2, 3)) for _ in range(m)] for _ in range(n)]
        if all(any(r) for r in rows) and all(any(r[j] for r in rows) for j in range(m)):
            return rows


def _sample_utility(rng: random.Random, cls: str, m: int, sparse: bool, rho=None) -> dict:
    if cls == "linear":
        hi = 3 if sparse else 9
        while True:
            vals = [rng.choice((0,) * (3 if sparse else 1) + tuple(range(1, hi + 1))) for _ in range(m)]
            if any(vals):
                return {"type": "linear", "values": vals}
    if cls == "cobb_douglas":
        return {"type": "cobb_douglas", "exponents": [rng.randint(1, 5) for _ in range(m)]}
    if cls == "ces":
        r = rho if rho is not None else rng.choice((Fraction(1, 4), Fraction(1, 2), Fraction(3, 4)))
        return {"type": "ces", "rho": fmt_rational(Fraction(r)), "values": [rng.randint(1, 9) for _ in range(m)]}
    fracs = (Fraction(1, 4), Fraction(1, 3), Fraction(1, 2), Fraction(1))
    while True:
        segs = []
        for _ in range(m):
            k = rng.choice((0, 1, 1, 2) if not sparse else (0, 0, 1, 1, 2))
            rates = sorted(rng.sample(range(1, 4 if sparse else 16), k), reverse=True)
            segs.append([[r, fmt_rational(rng.choice(fracs))] for r in rates])
        if sum((parse_rational(b) for per in segs for _, b in per), Fraction(0)) >= 1:
            return {"type": "spending_constraint", "segments": segs}


def _distinct_columns(agents: list[dict], m: int) -> bool:
    """No two goods look identical to every agent (keeps CES demands unique)."""
    cols = set()
    for j in range(m):
        key = []
        for a in agents:
            u = a["utility"]
            vals = u.get("values") or u.get("exponents")
            key.append(str(vals[j]))
            key.append(str(a["endowment"][j]))
        cols.add(tuple(key))
    return len(cols) == m


def generate_instance(cls: str, m: int, n: int, seed: int, max_bits: int | None = None,
                      rho=None, max_tries: int = 100000) -> Market:
    """Deterministic random market of class ``cls`` passing the sufficiency check.

    With ``max_bits`` the sampler switches to sparse unit endowments and
    small rates and resamples until the instance's total bit size fits.
    """
    if cls not in CLASSES:
        raise MarketError(f"unknown instance class {cls!r}")
    if m < 2 or n < 1:
        raise MarketError("need m >= 2 goods and n >= 1 agents")
    rng = random.Random(f"{cls}/{m}/{n}/{seed}")
    sparse = max_bits is not None
    goods = [f"g{j + 1}" for j in range(m)]
    for _ in range(max_tries):
        rows = _endowments(rng, m, n, sparse)
        agents = [{"name": f"a{i + 1}", "endowment": rows[i],
                   "utility": _sample_utility(rng, cls, m, sparse, rho)} for i in range(n)]
        if cls == "ces" and not _distinct_columns(agents, m):
            continue
        market = market_from_dict({"goods": goods, "agents": agents})
        if max_bits is not None and market.bit_size() > max_bits:
            continue
        if market.is_spending and (validate_sufficiency(market) is not None or unvalued_goods(market)):
            continue
        return market
    raise MarketError(f"no {cls} instance with m={m}, n={n} found within {max_tries} samples")
