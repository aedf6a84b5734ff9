"""Bang-per-buck partitions, the equality network and balanced flows.

For a spending-constraint market at prices ``p`` every agent sorts its
segments by bang-per-buck ``rate / p_j``.  Segments in classes strictly
better than the *current* class are bought in full (allocated); the current
class is where the remaining budget is spent.  The equality network routes
that remaining money from agents to goods, and the balanced flow is the
maximum flow whose good surpluses have minimum Euclidean norm.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from itertools import groupby
from typing import Iterable, Sequence

from .model import Market, MarketError, SpendingConstraint, budget, check_prices


@dataclass(frozen=True)
class Segment:
    agent: int
    good: int
    index: int          # position of the segment within f_ij, 0-based
    rate: int
    fraction: Fraction  # share of the budget this segment may absorb
    capacity: Fraction  # fraction * budget, in money


@dataclass(frozen=True)
class PartitionProfile:
    agent: int
    budget: Fraction
    classes: tuple[tuple[Segment, ...], ...]
    current: int  # index of the current class (0-based); -1 if the agent has no segments
    spent_allocated: Fraction
    allocated_by_good: tuple[Fraction, ...]

    @property
    def current_segments(self) -> tuple[Segment, ...]:
        return self.classes[self.current] if self.current >= 0 else ()

    @property
    def allocated_segments(self) -> tuple[Segment, ...]:
        return tuple(s for cls in self.classes[: max(self.current, 0)] for s in cls)


def spending_utility(market: Market, agent: int) -> SpendingConstraint:
    u = market.utilities[agent]
    if not isinstance(u, SpendingConstraint):
        raise MarketError(f"agent {market.agents[agent]} does not have a linear or spending-constraint utility")
    return u


def build_partitions(market: Market, agent: int, p: Sequence[Fraction]) -> PartitionProfile:
    """Group an agent's segments by bang-per-buck and locate the current class.

    The current class is the first one whose cumulative capacity reaches the
    budget; an agent whose segments cannot absorb the budget keeps its last
    class as current.
    """
    util = spending_utility(market, agent)
    m_i = budget(market, agent, p)
    segs = []
    for j, per_good in enumerate(util.segments):
        for k, (rate, frac) in enumerate(per_good):
            segs.append(Segment(agent, j, k, rate, frac, frac * m_i))
    key = lambda s: Fraction(s.rate) / p[s.good]
    segs.sort(key=lambda s: (-key(s), s.good, s.index))
    classes = tuple(tuple(grp) for _, grp in groupby(segs, key=key))

    current = len(classes) - 1
    spent = Fraction(0)
    for t, cls in enumerate(classes):
        cap = sum((s.capacity for s in cls), Fraction(0))
        if spent + cap >= m_i:
            current = t
            break
        spent += cap
    else:
        if classes:
            spent -= sum((s.capacity for s in classes[-1]), Fraction(0))
    by_good = [Fraction(0)] * market.m
    for cls in classes[: max(current, 0)]:
        for s in cls:
            by_good[s.good] += s.capacity
    return PartitionProfile(agent, m_i, classes, current, spent, tuple(by_good))


@dataclass(frozen=True)
class EqualityNetwork:
    """Source -> agents -> goods -> sink network for prices ``prices``.

    ``edges`` maps (agent, good) to the capacity of the current-class
    segment; sink edges are uncapacitated.
    """

    n: int
    m: int
    prices: tuple[Fraction, ...]
    source_cap: tuple[Fraction, ...]
    edges: dict
    edge_segment: dict
    spent_good: tuple[Fraction, ...]
    partitions: tuple[PartitionProfile, ...] = ()

    def to_json(self) -> dict:
        from .model import fmt_rational
        return {
            "prices": [fmt_rational(x) for x in self.prices],
            "source_cap": [fmt_rational(x) for x in self.source_cap],
            "edges": [[i, j, fmt_rational(c)] for (i, j), c in sorted(self.edges.items())],
            "spent_good": [fmt_rational(x) for x in self.spent_good],
        }


def build_network(market: Market, p: Sequence[Fraction]) -> EqualityNetwork:
    p = check_prices(market, p)
    parts = tuple(build_partitions(market, i, p) for i in range(market.n))
    edges, edge_seg = {}, {}
    spent_good = [Fraction(0)] * market.m
    for part in parts:
        for s in part.current_segments:
            edges[(part.agent, s.good)] = s.capacity
            edge_seg[(part.agent, s.good)] = s.index
        for j, v in enumerate(part.allocated_by_good):
            spent_good[j] += v
    source = tuple(part.budget - part.spent_allocated for part in parts)
    return EqualityNetwork(market.n, market.m, p, source, dict(sorted(edges.items())),
                           edge_seg, tuple(spent_good), parts)


# --------------------------------------------------------------------------
# maximum flow (exact, deterministic shortest augmenting paths)


@dataclass(frozen=True)
class Flow:
    value: Fraction
    source: tuple[Fraction, ...]  # per agent
    edges: dict                   # (agent, good) -> flow
    sink: tuple[Fraction, ...]    # per good, the l_jt values

    def to_json(self) -> dict:
        from .model import fmt_rational
        return {
            "value": fmt_rational(self.value),
            "source": [fmt_rational(x) for x in self.source],
            "edges": [[i, j, fmt_rational(f)] for (i, j), f in sorted(self.edges.items())],
            "sink": [fmt_rational(x) for x in self.sink],
        }


class _Residual:
    """Residual graph on nodes source, agents, goods, sink (in that order).

    ``None`` capacity means unbounded.
    """

    def __init__(self, n: int, m: int):
        self.n, self.m = n, m
        self.size = n + m + 2
        self.S, self.T = 0, n + m + 1
        self.cap: dict = {}
        self.adj: list[list[int]] = [[] for _ in range(self.size)]

    def agent(self, i: int) -> int:
        return 1 + i

    def good(self, j: int) -> int:
        return 1 + self.n + j

    def add(self, u: int, v: int, c):
        if (u, v) not in self.cap:
            self.adj[u].append(v)
            self.adj[v].append(u)
            self.cap[(u, v)] = Fraction(0)
            self.cap.setdefault((v, u), Fraction(0))
        if c is None or self.cap[(u, v)] is None:
            self.cap[(u, v)] = None
        else:
            self.cap[(u, v)] += c

    def _res(self, u, v):
        return self.cap.get((u, v), Fraction(0))

    def run(self) -> Fraction:
        for a in self.adj:
            a.sort()
        total = Fraction(0)
        while True:
            parent = {self.S: None}
            queue = deque([self.S])
            while queue and self.T not in parent:
                u = queue.popleft()
                for v in self.adj[u]:
                    if v in parent:
                        continue
                    r = self._res(u, v)
                    if r is None or r > 0:
                        parent[v] = u
                        queue.append(v)
            if self.T not in parent:
                return total
            path, v = [], self.T
            while parent[v] is not None:
                path.append((parent[v], v))
                v = parent[v]
            bottleneck = None
            for u, v in path:
                r = self._res(u, v)
                if r is not None and (bottleneck is None or r < bottleneck):
                    bottleneck = r
            if bottleneck is None:
                raise MarketError("unbounded flow path")
            for u, v in path:
                if self.cap[(u, v)] is not None:
                    self.cap[(u, v)] -= bottleneck
                if self.cap[(v, u)] is not None:
                    self.cap[(v, u)] += bottleneck
            total += bottleneck

    def reachable(self) -> set[int]:
        seen = {self.S}
        queue = deque([self.S])
        while queue:
            u = queue.popleft()
            for v in self.adj[u]:
                r = self._res(u, v)
                if v not in seen and (r is None or r > 0):
                    seen.add(v)
                    queue.append(v)
        return seen


def _solve(net: EqualityNetwork, goods: Iterable[int] | None = None,
           sink_caps: dict | None = None) -> tuple[Flow, _Residual]:
    allowed = set(range(net.m)) if goods is None else set(goods)
    g = _Residual(net.n, net.m)
    original = {}
    for i, c in enumerate(net.source_cap):
        g.add(g.S, g.agent(i), c)
        original[(g.S, g.agent(i))] = c
    for (i, j), c in net.edges.items():
        if j in allowed:
            g.add(g.agent(i), g.good(j), c)
            original[(g.agent(i), g.good(j))] = c
    for j in sorted(allowed):
        c = None if sink_caps is None else sink_caps.get(j)
        g.add(g.good(j), g.T, c)
    value = g.run()
    # flow on an edge = what went backwards into the residual reverse arc
    src = tuple(g.cap[(g.agent(i), g.S)] for i in range(net.n))
    edge_flow = {(i, j): g.cap[(g.good(j), g.agent(i))]
                 for (i, j) in net.edges if j in allowed}
    sink = [Fraction(0)] * net.m
    for (i, j), f in edge_flow.items():
        sink[j] += f
    return Flow(value, src, edge_flow, tuple(sink)), g


def max_flow(net: EqualityNetwork, sink_caps: dict | None = None) -> Flow:
    """Exact maximum s-t flow; sink edges unbounded unless ``sink_caps`` given."""
    return _solve(net, None, sink_caps)[0]


# --------------------------------------------------------------------------
# balanced flow


def _solve_level(breaks: list[tuple[Fraction, Fraction]], const: Fraction, target: Fraction) -> Fraction:
    """Smallest lam with const + sum max(d + lam, 0) == target over (d, -d) pairs."""
    breaks = sorted(breaks, key=lambda t: t[1])
    acc = Fraction(0)
    for k, (d, b) in enumerate(breaks, start=1):
        acc += d
        lam = (target - const - acc) / k
        nxt = breaks[k][1] if k < len(breaks) else None
        if lam >= b and (nxt is None or lam <= nxt):
            return lam
    raise AssertionError("no level solves the cut equation")


def balanced_flow(net: EqualityNetwork, p: Sequence[Fraction] | None = None) -> tuple[Flow, tuple[Fraction, ...]]:
    """Maximum flow minimizing sum_j (l_j + spent_g_j - p_j)^2.

    Level peeling: for the goods still undecided, find the least level lam
    at which capping each sink edge at max(p_j - spent_j + lam, 0) keeps the
    maximum flow value; the goods behind the cut that certifies this level
    are fixed there and removed, then the rest is solved again.
    """
    prices = tuple(net.prices if p is None else (Fraction(x) for x in p))
    target = [prices[j] - net.spent_good[j] for j in range(net.m)]
    fed = {j for (_, j) in net.edges}
    ell: dict[int, Fraction] = {j: Fraction(0) for j in range(net.m) if j not in fed}
    remaining = set(fed)

    while remaining:
        v, _ = _solve(net, remaining)
        if v.value == 0:
            for j in remaining:
                ell[j] = Fraction(0)
            break
        lam = -max(target[j] for j in remaining)
        tight = None
        while True:
            caps = {j: max(target[j] + lam, Fraction(0)) for j in remaining}
            fl, g = _solve(net, remaining, caps)
            if fl.value == v.value:
                break
            seen = g.reachable()
            X = {i for i in range(net.n) if g.agent(i) in seen}
            W = {j for j in remaining if g.good(j) in seen}
            const = sum((net.source_cap[i] for i in range(net.n) if i not in X), Fraction(0))
            const += sum((c for (i, j), c in net.edges.items()
                          if i in X and j in remaining and j not in W), Fraction(0))
            new = _solve_level([(target[j], -target[j]) for j in W], const, v.value)
            assert new > lam
            lam, tight = new, W
        assert tight
        for j in tight:
            ell[j] = max(target[j] + lam, Fraction(0))
        remaining -= tight

    witness, _ = _solve(net, None, dict(ell))
    total, _ = _solve(net, None)
    if witness.value != total.value or any(witness.sink[j] != ell[j] for j in range(net.m)):
        raise AssertionError("balanced sink vector is not realizable by a maximum flow")
    surplus = tuple(ell[j] + net.spent_good[j] - prices[j] for j in range(net.m))
    return witness, surplus


def surplus_of_flow(net: EqualityNetwork, flow_edges: dict) -> tuple[Fraction, ...]:
    sink = [Fraction(0)] * net.m
    for (_, j), f in flow_edges.items():
        sink[j] += f
    return tuple(sink[j] + net.spent_good[j] - net.prices[j] for j in range(net.m))
