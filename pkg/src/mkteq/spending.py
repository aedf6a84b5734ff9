"""Spending-constraint markets: ratio-graph rounding, the exact-oracle
ascending solver, and extraction of exact rational equilibrium prices.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .demand import exact_oracle
from .flow import build_network, max_flow
from .model import (Market, MarketError, SolverConfig, check_prices, derive_config, unvalued_goods,
                    validate_sufficiency)
from .wgs import Trace, _gallop, _steps, ascend, update_prices


class SufficiencyError(MarketError):
    def __init__(self, witness, market: Market | None = None):
        names = [market.agents[i] for i in witness] if market else list(witness)
        super().__init__(f"sufficiency condition fails for agent subset {names}")
        self.witness = tuple(witness)


class LinearSystemError(RuntimeError):
    pass


class ExactVerificationError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# --------------------------------------------------------------------------
# small graph helpers


class _DSU:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self):
        out: dict = {}
        for x in sorted(self.parent):
            out.setdefault(self.find(x), []).append(x)
        return sorted(out.values(), key=lambda g: g[0])


# --------------------------------------------------------------------------
# ratio graph and rounding


@dataclass(frozen=True)
class RatioGraph:
    m: int
    M: int
    edges: frozenset

    def components(self) -> list[list[int]]:
        dsu = _DSU(range(self.m))
        for i, j in self.edges:
            dsu.union(i, j)
        return dsu.groups()

    @property
    def connected(self) -> bool:
        return len(self.components()) == 1


def _fits(q: Fraction, limit: int) -> bool:
    return q.numerator <= limit and q.denominator <= limit


def ratio_graph(p: Sequence[Fraction], M: int) -> RatioGraph:
    """Goods i, j are adjacent when p_i/p_j reduces to a/b with a, b <= 2^M - 1."""
    if M < 1:
        raise ValueError("M must be at least 1")
    p = [Fraction(x) for x in p]
    limit = 2 ** M - 1
    edges = frozenset((i, j) for i in range(len(p)) for j in range(i + 1, len(p))
                      if _fits(p[i] / p[j], limit))
    return RatioGraph(len(p), M, edges)


def least_grid_at_least(r: Fraction, limit: int) -> Fraction | None:
    """Smallest a/b >= r with 1 <= a, b <= limit, or None if r > limit."""
    r = Fraction(r)
    if r > limit:
        return None
    if _fits(r, limit):
        return r
    # Stern-Brocot descent over all positive fractions toward r
    a, b, c, d = 0, 1, 1, 0
    while True:
        if a + c > limit or b + d > limit:
            return Fraction(c, d)
        if Fraction(a + c, b + d) < r:
            kmax = _steps(a, b, c, d, limit)
            k = _gallop(lambda k: Fraction(a + k * c, b + k * d) < r, kmax)
            a, b = a + k * c, b + k * d
            if k >= kmax:
                return Fraction(c, d)
            c, d = a + c, b + d
        else:
            kmax = _steps(c, d, a, b, limit)
            k = _gallop(lambda k: Fraction(c + k * a, d + k * b) >= r, kmax)
            c, d = c + k * a, d + k * b
            if k >= kmax:
                return Fraction(c, d)
            a, b = a + c, b + d


def rounding(p: Sequence[Fraction], M: int) -> tuple[Fraction, ...]:
    """Raise whole ratio-graph components until the ratio graph is connected.

    The component holding the lowest-indexed price-1 good is never raised.
    Each pass picks the component pair (i > j) whose cheapest grid ratio
    needs the least relative increase, ties broken by (i, j), and multiplies
    component i by that factor.  The grid is {a/b : a, b <= 2^M - 1}, the
    same bound the ratio graph uses, so every pass adds an edge.
    """
    p = [Fraction(x) for x in p]
    if min(p) != 1:
        raise MarketError("rounding needs a price vector with minimum 1")
    limit = 2 ** M - 1
    anchor = p.index(Fraction(1))
    for _ in range(len(p)):
        comps = ratio_graph(p, M).components()
        if len(comps) == 1:
            return tuple(p)
        comps.sort(key=lambda c: (anchor not in c, c[0]))
        best = None
        for ci in range(1, len(comps)):
            for cj in range(ci):
                B = None
                for a in comps[ci]:
                    for b in comps[cj]:
                        r = p[a] / p[b]
                        x = least_grid_at_least(r, limit)
                        if x is not None and (B is None or x / r < B):
                            B = x / r
                if B is not None and (best is None or B < best[0]):
                    best = (B, ci, cj)
        if best is None:
            raise MarketError("prices too spread for the rounding grid")
        B, ci, _ = best
        for g in comps[ci]:
            p[g] *= B
    if not ratio_graph(p, M).connected:
        raise AssertionError("rounding did not connect the ratio graph")
    return tuple(p)


# --------------------------------------------------------------------------
# approximate phase


def spending_bound(m: int, M: int, L: int) -> int:
    return 2 ** (2 * m * M + L)


def solve_spending(market: Market, epsilon, config: SolverConfig | None = None, on_round=None,
                   max_bits: int | None = None, stop=None) -> tuple[tuple[Fraction, ...], Trace]:
    """Exact-oracle ascending prices with rounding after every round.

    Each round raises the top surplus group by the smallest grid factor at
    which its least surplus meets the rest (or zero), then rounds.
    """
    witness = validate_sufficiency(market)
    if witness is not None:
        raise SufficiencyError(witness, market)
    idle = unvalued_goods(market)
    if idle:
        raise MarketError(f"no agent values goods {[market.goods[j] for j in idle]}; no positive equilibrium exists")
    if config is None:
        L = market.bit_size()
        config = derive_config(epsilon, market, D1=2 * market.m * L, D2=1, L=L)
    bound = spending_bound(market.m, config.M, config.L)
    oracle = lambda q: exact_oracle(market, q)
    p, trace = ascend(oracle, market.m, config, mu=Fraction(0), bound=bound, smallest=True,
                      post_update=lambda q: rounding(q, config.M), on_round=on_round,
                      max_bits=max_bits, stop=stop)
    trace.mode = "spending"
    return p, trace


# --------------------------------------------------------------------------
# equality graphs


@dataclass(frozen=True)
class EqualityGraphs:
    n: int
    m: int
    eg: frozenset           # (agent, good) equality edges
    eg_prime: frozenset     # eg plus endowment and allocated-segment edges
    allocated: tuple        # F: (agent, good, segment index)
    current_segment: dict   # (agent, good) -> segment index in the current class

    def _components(self, edges) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        nodes = [("a", i) for i in range(self.n)] + [("g", j) for j in range(self.m)]
        dsu = _DSU(nodes)
        for i, j in edges:
            dsu.union(("a", i), ("g", j))
        out = []
        for grp in dsu.groups():
            agents = tuple(sorted(x[1] for x in grp if x[0] == "a"))
            goods = tuple(sorted(x[1] for x in grp if x[0] == "g"))
            out.append((agents, goods))
        out.sort(key=lambda c: (c[1][0] if c[1] else math.inf, c[0][0] if c[0] else math.inf))
        return out

    def eg_components(self):
        return self._components(self.eg)

    def eg_prime_components(self):
        return self._components(self.eg_prime)


def build_equality_graphs(market: Market, p: Sequence[Fraction], net=None) -> EqualityGraphs:
    p = check_prices(market, p)
    if net is None:
        net = build_network(market, p)
    eg = frozenset(net.edges)
    F = tuple((s.agent, s.good, s.index) for part in net.partitions for s in part.allocated_segments)
    extra = {(i, j) for i, row in enumerate(market.endowments) for j, w in enumerate(row) if w > 0}
    extra |= {(i, j) for i, j, _ in F}
    return EqualityGraphs(market.n, market.m, eg, eg | frozenset(extra), tuple(sorted(F)),
                          dict(net.edge_segment))


def raise_disconnected_components(market: Market, p: Sequence[Fraction], max_steps: int | None = None) -> tuple[Fraction, ...]:
    """Lift EG' components without a price-1 good until each has one.

    A component's prices are multiplied by the least factor at which some
    agent inside starts to like a good outside as much as its current class.
    """
    p = list(check_prices(market, p))
    steps = 0
    while True:
        graphs = build_equality_graphs(market, p)
        lonely = [c for c in graphs.eg_prime_components() if c[1] and all(p[j] != 1 for j in c[1])]
        if not lonely:
            return tuple(p)
        agents, goods = lonely[0]
        s = exact_oracle(market, p)
        if any(s[j] != 0 for j in goods):
            raise ExactVerificationError(
                "component without a price-1 good has nonzero surplus; approximate phase was not precise enough",
                {"component_goods": list(goods), "surplus": [str(s[j]) for j in goods]})
        inside = set(goods)
        x = None
        for i in agents:
            util = market.utilities[i]
            cur = [(j, k) for (a, j), k in graphs.current_segment.items() if a == i]
            if not cur:
                continue
            j0, k0 = cur[0]
            bpb = Fraction(util.segments[j0][k0][0]) / p[j0]
            for j, segs in enumerate(util.segments):
                if j in inside:
                    continue
                for rate, _ in segs:
                    other = Fraction(rate) / p[j]
                    if other < bpb:
                        cand = bpb / other
                        if x is None or cand < x:
                            x = cand
        if x is None:
            raise SufficiencyError(agents, market)
        p = list(update_prices(p, x, inside))
        steps += 1
        if max_steps is not None and steps > max_steps:
            raise RuntimeError("component raising did not settle")


# --------------------------------------------------------------------------
# linear system


@dataclass
class LinearSystem:
    goods: tuple[int, ...]                       # column order
    components: list                             # EG components (agents, goods) within this block
    anchor: int                                  # good whose price is fixed to 1
    alpha: dict                                  # good -> multiple of its component representative
    R: dict                                      # (component index, good) -> R_lj
    A: list                                      # square matrix, rows over ``goods``
    b: list
    row_kinds: list = field(default_factory=list)
    N: list = field(default_factory=list)        # reduced per-component matrix


def _r_coefficients(market: Market, comps, F) -> dict:
    """R_lj for every EG component l and every good j."""
    agent_comp = {}
    good_comp = {}
    for l, (agents, goods) in enumerate(comps):
        for i in agents:
            agent_comp[i] = l
        for j in goods:
            good_comp[j] = l
    frac = {(i, j, k): market.utilities[i].segments[j][k][1] for i, j, k in F}
    R = {}
    for l, (agents, goods) in enumerate(comps):
        gset = set(goods)
        for j in range(market.m):
            total = Fraction(0)
            for i in range(market.n):
                w = market.endowments[i][j]
                if not w:
                    continue
                if agent_comp.get(i) == l:
                    out = sum((frac[f] for f in F if f[0] == i and f[1] not in gset), Fraction(0))
                    total += w * (1 - out)
                else:
                    into = sum((frac[f] for f in F if f[0] == i and f[1] in gset), Fraction(0))
                    total += w * into
            R[(l, j)] = total
    return R


def _spanning_ratios(market: Market, graphs: EqualityGraphs, agents, goods, p):
    """BFS from the lowest good; returns alpha and ratio rows as (j_new, coef_new, j_old, coef_old)."""
    if not goods:
        return {}, []
    root = goods[0]
    alpha = {root: Fraction(1)}
    rows = []
    adj_g = {}
    for (i, j) in graphs.eg:
        adj_g.setdefault(j, []).append(i)
    adj_a = {}
    for (i, j) in graphs.eg:
        adj_a.setdefault(i, []).append(j)
    queue = deque([root])
    seen_a = set()
    while queue:
        j = queue.popleft()
        for i in sorted(adj_g.get(j, [])):
            if i in seen_a:
                continue
            seen_a.add(i)
            u_j = market.utilities[i].segments[j][graphs.current_segment[(i, j)]][0]
            for j2 in sorted(adj_a[i]):
                if j2 in alpha:
                    continue
                u_j2 = market.utilities[i].segments[j2][graphs.current_segment[(i, j2)]][0]
                # equal bang-per-buck: u_j / p_j = u_j2 / p_j2
                alpha[j2] = alpha[j] * Fraction(u_j2, u_j)
                rows.append((j2, u_j, j, u_j2))
                queue.append(j2)
    if set(alpha) != set(goods):
        raise LinearSystemError(f"equality component {goods} is not connected through equality edges")
    return alpha, rows


def build_linear_system(market: Market, p: Sequence[Fraction], graphs: EqualityGraphs,
                        block: tuple | None = None) -> LinearSystem:
    """Assemble the price system for one EG' component (``block``).

    Rows: price 1 for the anchor good, spanning-tree equal-bang-per-buck
    relations inside every EG component, and a money-balance row for every
    EG component except the anchor's (the balance rows of a block sum to
    zero, so that one is implied).
    """
    p = check_prices(market, p)
    all_comps = graphs.eg_components()
    R = _r_coefficients(market, all_comps, graphs.allocated)
    for l in range(len(all_comps)):
        for j in range(market.m):
            if not 0 <= R[(l, j)] <= 1:
                raise LinearSystemError(f"R[{l},{j}] = {R[(l, j)]} outside [0, 1]")
    for j in range(market.m):
        col = sum((R[(l, j)] for l in range(len(all_comps))), Fraction(0))
        if col != 1:
            raise LinearSystemError(f"R column {j} sums to {col}, not 1")

    if block is None:
        blocks = graphs.eg_prime_components()
        if len(blocks) != 1:
            raise LinearSystemError("EG' is disconnected; build one system per component")
        block = blocks[0]
    block_goods = tuple(sorted(block[1]))
    gset = set(block_goods)
    comp_ids = [l for l, c in enumerate(all_comps) if c[1] and set(c[1]) <= gset]
    ones = [j for j in block_goods if p[j] == 1]
    if not ones:
        raise LinearSystemError(f"component {block_goods} has no good with price 1")
    anchor = ones[0]
    col = {j: c for c, j in enumerate(block_goods)}
    size = len(block_goods)

    A, b, kinds = [], [], []
    row = [Fraction(0)] * size
    row[col[anchor]] = Fraction(1)
    A.append(row), b.append(Fraction(1)), kinds.append(("price", anchor))
    alpha = {}
    for l in comp_ids:
        agents, goods = all_comps[l]
        a_l, rows = _spanning_ratios(market, graphs, agents, goods, p)
        alpha.update(a_l)
        for j2, c2, j1, c1 in rows:
            row = [Fraction(0)] * size
            row[col[j2]] += c2
            row[col[j1]] -= c1
            A.append(row), b.append(Fraction(0)), kinds.append(("ratio", j1, j2))
    anchor_comp = next(l for l in comp_ids if anchor in all_comps[l][1])
    for j in range(market.m):
        if j not in gset and any(R[(l, j)] for l in comp_ids):
            raise LinearSystemError(f"good {j} outside the block feeds a balance row")
    for l in comp_ids:
        if l == anchor_comp:
            continue
        row = [Fraction(0)] * size
        for j in block_goods:
            row[col[j]] = (1 if j in all_comps[l][1] else 0) - R[(l, j)]
        A.append(row), b.append(Fraction(0)), kinds.append(("balance", l))
    if len(A) != size:
        raise LinearSystemError(f"system has {len(A)} rows for {size} unknowns")

    # reduced form, one unknown per component; used for structural checks only
    N = []
    for l in comp_ids:
        T_l = sum((alpha[j] for j in all_comps[l][1]), Fraction(0))
        N_row = []
        for l2 in comp_ids:
            S = sum((alpha[j] * R[(l, j)] for j in all_comps[l2][1]), Fraction(0))
            N_row.append(T_l - S if l == l2 else -S)
        N.append(N_row)
    return LinearSystem(block_goods, [all_comps[l] for l in comp_ids], anchor, alpha,
                        {(l, j): R[(l, j)] for l in comp_ids for j in block_goods}, A, b, kinds, N)


def solve_rational(A: list, b: list) -> list[Fraction]:
    """Gauss-Jordan elimination over the rationals; raises on singular systems."""
    n = len(A)
    rows = [list(map(Fraction, r)) + [Fraction(v)] for r, v in zip(A, b)]
    for c in range(n):
        piv = next((r for r in range(c, n) if rows[r][c] != 0), None)
        if piv is None:
            raise LinearSystemError(f"matrix is singular at column {c}")
        rows[c], rows[piv] = rows[piv], rows[c]
        pr = rows[c]
        inv = 1 / pr[c]
        pr[:] = [v * inv for v in pr]
        for r in range(n):
            if r != c and rows[r][c] != 0:
                f = rows[r][c]
                rows[r] = [x - f * y for x, y in zip(rows[r], pr)]
    return [rows[r][n] for r in range(n)]


# --------------------------------------------------------------------------
# exact extraction


@dataclass
class ExactResult:
    prices: tuple[Fraction, ...]
    raised: tuple[Fraction, ...]
    systems: list
    edges_lost: tuple      # equality edges at the input prices missing at the result
    edges_gained: tuple    # new ties at the result
    min_cut_ok: bool
    surplus: tuple[Fraction, ...]
    denominator: int

    @property
    def edges_equal(self) -> bool:
        return not self.edges_lost and not self.edges_gained


def common_denominator(p: Sequence[Fraction]) -> int:
    d = 1
    for x in p:
        d = d * Fraction(x).denominator // math.gcd(d, Fraction(x).denominator)
    return d


def cramer_bound(m: int, L: int) -> int:
    return m ** m * 2 ** (2 * m * (m + 1) * L)


def extract_exact(market: Market, p_approx: Sequence[Fraction], strict: bool = False) -> ExactResult:
    """Exact equilibrium prices from a fine enough approximate equilibrium.

    Every equality edge at the input prices must survive.  New edges can
    appear where the exact prices sit on a tie the input only approached;
    they are reported in ``edges_gained`` and rejected only when ``strict``.
    """
    p = raise_disconnected_components(market, p_approx)
    graphs = build_equality_graphs(market, p)
    new = list(p)
    systems = []
    for block in graphs.eg_prime_components():
        if not block[1]:
            continue
        sysm = build_linear_system(market, p, graphs, block)
        sol = solve_rational(sysm.A, sysm.b)
        for j, v in zip(sysm.goods, sol):
            new[j] = v
        systems.append(sysm)
    if any(v <= 0 for v in new):
        raise ExactVerificationError("linear system produced a nonpositive price",
                                     {"prices": [str(v) for v in new]})
    new = tuple(new)
    after = build_equality_graphs(market, new)
    lost = tuple(sorted(graphs.eg - after.eg))
    gained = tuple(sorted(after.eg - graphs.eg))
    net = build_network(market, new)
    cut_ok = max_flow(net).value == sum(net.source_cap, Fraction(0))
    surplus = exact_oracle(market, new)
    res = ExactResult(new, tuple(p), systems, lost, gained, cut_ok, surplus, common_denominator(new))
    if lost or (gained and strict):
        raise ExactVerificationError("equality edges changed at the extracted prices",
                                     {"lost": [list(e) for e in lost], "gained": [list(e) for e in gained]})
    if not cut_ok:
        raise ExactVerificationError("source cut is not a minimum cut at the extracted prices")
    if any(surplus):
        raise ExactVerificationError("extracted prices leave a nonzero surplus",
                                     {"surplus": [str(v) for v in surplus]})
    return res


def exact_epsilon(m: int, L: int) -> Fraction:
    return Fraction(1, m ** (4 * m) * 2 ** (4 * m * m * L))


@dataclass
class ExactRun:
    prices: tuple[Fraction, ...]
    approx_prices: tuple[Fraction, ...]
    trace: Trace
    result: ExactResult
    L: int
    early: bool
    first_pass: ExactResult | None = None  # set when a second pass was needed


def exact_config(market: Market, L: int | None = None) -> SolverConfig:
    if L is None:
        L = market.bit_size()
    eps = exact_epsilon(market.m, L)
    return derive_config(eps, market, D1=2 * market.m * L, D2=1, L=L)


def solve_exact(market: Market, L: int | None = None, on_round=None, max_bits: int | None = None,
                early: bool = True, strict: bool = False) -> ExactRun:
    """Approximate phase at the exact-extraction precision, then extraction.

    With ``early`` the extraction is also tried at every round boundary and
    the run stops at the first prices it turns into a verified equilibrium
    (zero exact surplus, no equality edge lost, saturated source cut).
    If the extracted prices gain equality edges, extraction is repeated from
    them; that pass must return the same prices with unchanged graphs.
    """
    config = exact_config(market, L)
    found = {}

    def stop(p, s):
        if not any(s):
            return False  # already exact; the main test ends the loop
        try:
            found[p] = extract_exact(market, p, strict)
        except (ExactVerificationError, LinearSystemError, SufficiencyError):
            return False
        return True

    p, trace = solve_spending(market, config.epsilon, config, on_round=on_round, max_bits=max_bits,
                              stop=stop if early else None)
    res = found.get(p) or extract_exact(market, p, strict)
    first = None
    if res.edges_gained:
        # the exact prices sit on a tie the approximate ones only approached;
        # a second pass from the exact point must reproduce it with equal graphs
        first, res = res, extract_exact(market, res.prices, strict=True)
        if res.prices != first.prices:
            raise ExactVerificationError("second extraction pass moved the prices",
                                         {"first": [str(v) for v in first.prices],
                                          "second": [str(v) for v in res.prices]})
    return ExactRun(res.prices, p, trace, res, config.L, p in found, first)
