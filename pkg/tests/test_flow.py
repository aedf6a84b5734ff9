import math
import random
from fractions import Fraction as F

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from mkteq.flow import EqualityNetwork, balanced_flow, build_network, build_partitions, max_flow
from mkteq.model import market_from_dict
from mkteq.verify import brute_force_balanced_surplus, check_max_min_fairness

from conftest import linear_market


def net_of(source, edges, prices, spent=None):
    m = len(prices)
    return EqualityNetwork(len(source), m, tuple(F(x) for x in prices), tuple(F(x) for x in source),
                           {k: F(v) for k, v in edges.items()}, {k: 0 for k in edges},
                           tuple(F(x) for x in (spent or [0] * m)))


def nx_max_flow(net):
    """Max-flow value from networkx on integer-scaled capacities."""
    caps = list(net.source_cap) + list(net.edges.values())
    scale = math.lcm(*(c.denominator for c in caps))
    g = nx.DiGraph()
    for i, c in enumerate(net.source_cap):
        g.add_edge("s", ("a", i), capacity=int(c * scale))
    for (i, j), c in net.edges.items():
        g.add_edge(("a", i), ("g", j), capacity=int(c * scale))
    for j in range(net.m):
        g.add_edge(("g", j), "t")  # missing capacity means unbounded
    return F(nx.maximum_flow_value(g, "s", "t"), scale)


def qp_surplus(net):
    """Float QP over edge flows: maximize flow value, then minimize sum s_j^2."""
    keys = list(net.edges)
    vstar = float(nx_max_flow(net))
    tgt = np.array([float(net.prices[j] - net.spent_good[j]) for j in range(net.m)])
    A = np.zeros((net.m, len(keys)))
    for e, (_, j) in enumerate(keys):
        A[j, e] = 1
    cons = [{"type": "eq", "fun": lambda f: f.sum() - vstar}]
    for i in range(net.n):
        idx = [e for e, (a, _) in enumerate(keys) if a == i]
        cons.append({"type": "ineq", "fun": lambda f, idx=idx, i=i: float(net.source_cap[i]) - f[idx].sum()})
    bounds = [(0, float(net.edges[k])) for k in keys]
    res = minimize(lambda f: ((A @ f - tgt) ** 2).sum(), np.zeros(len(keys)), bounds=bounds,
                   constraints=cons, method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return A @ res.x - tgt


def spending_agent():
    return market_from_dict({"goods": ["g1", "g2"], "agents": [
        {"name": "i", "endowment": {"g1": 1, "g2": 1},
         "utility": {"type": "spending_constraint",
                     "segments": {"g1": [[4, "3/10"], [2, "1/2"]], "g2": [[3, "1"]]}}}]})


def test_partition_classes_and_current_index():
    mk = spending_agent()
    part = build_partitions(mk, 0, (F(5), F(5)))  # budget 10
    assert part.budget == 10
    assert [[(s.good, s.index, s.rate) for s in c] for c in part.classes] == [[(0, 0, 4)], [(1, 0, 3)], [(0, 1, 2)]]
    assert [c[0].capacity for c in part.classes] == [3, 10, 5]
    assert part.current == 1
    assert part.spent_allocated == 3


def test_linear_agent_partitions():
    mk = linear_market([[1, 1], [1, 1]])
    tie = build_partitions(mk, 0, (F(1), F(1)))
    assert len(tie.classes) == 1 and tie.current == 0 and tie.spent_allocated == 0
    split = build_partitions(mk, 0, (F(1), F(2)))
    assert [c[0].good for c in split.classes] == [0, 1]


def test_zero_rate_segments_are_dropped(cross):
    part = build_partitions(cross, 0, (F(1), F(1)))
    assert [s.good for c in part.classes for s in c] == [1]


def test_network_examples(cross):
    net = build_network(cross, (F(1), F(1)))
    assert net.edges == {(0, 1): 1, (1, 1): 1}
    assert net.source_cap == (1, 1) and net.spent_good == (0, 0)
    sp = build_network(spending_agent(), (F(5), F(5)))
    assert sp.source_cap == (7,)
    assert sp.edges == {(0, 1): 10}
    assert sp.spent_good == (3, 0)


def test_network_caps_are_budget_shares():
    mk = market_from_dict({"goods": ["g1", "g2"], "agents": [
        {"name": "i", "endowment": {"g1": 1, "g2": 1}, "utility": {"type": "linear", "values": [1, 1]}}]})
    net = build_network(mk, (F(1), F(1)))
    assert net.edges == {(0, 0): 2, (0, 1): 2} and net.source_cap == (2,)


@pytest.mark.parametrize("net, value", [
    (net_of([1, 1], {(0, 1): 1, (1, 0): 1}, [1, 1]), 2),
    (net_of([7], {(0, 0): 10}, [1]), 7),
    (net_of([3, 1], {(0, 0): 3, (1, 0): 1}, [1]), 4),
])
def test_max_flow_examples(net, value):
    fl = max_flow(net)
    assert fl.value == value == nx_max_flow(net)


@pytest.mark.parametrize("net, surplus", [
    (net_of([2], {(0, 0): 2, (0, 1): 2}, [1, 1]), (0, 0)),
    (net_of([1, 2], {(1, 0): 2, (1, 1): 2, (0, 1): 1}, [1, 2]), (0, 0)),
    (net_of([1], {(0, 0): 1, (0, 1): 1}, [1, 3]), (-1, -2)),
])
def test_balanced_flow_examples(net, surplus):
    fl, s = balanced_flow(net)
    assert s == surplus
    assert s == brute_force_balanced_surplus(net)
    assert np.allclose(qp_surplus(net), [float(x) for x in surplus], atol=1e-6)
    assert fl.value == max_flow(net).value


def random_net(rng, n, m):
    source = [F(rng.randint(0, 6), rng.randint(1, 3)) for _ in range(n)]
    edges = {}
    for i in range(n):
        for j in range(m):
            if rng.random() < 0.6:
                edges[(i, j)] = F(rng.randint(1, 6), rng.randint(1, 3))
    prices = [F(rng.randint(1, 8), rng.randint(1, 2)) for _ in range(m)]
    spent = [F(rng.randint(0, 2), 2) for _ in range(m)]
    return net_of(source, edges, prices, spent)


@pytest.mark.parametrize("seed", range(40))
def test_balanced_flow_matches_brute_force(seed):
    rng = random.Random(seed)
    net = random_net(rng, rng.randint(1, 3), rng.randint(1, 3))
    fl, s = balanced_flow(net)
    assert s == brute_force_balanced_surplus(net)
    assert fl.value == max_flow(net).value == nx_max_flow(net)
    # witness respects capacities and conservation
    for (i, j), f in fl.edges.items():
        assert 0 <= f <= net.edges[(i, j)]
    for i in range(net.n):
        assert sum(f for (a, _), f in fl.edges.items() if a == i) <= net.source_cap[i]


@pytest.mark.parametrize("seed", range(10))
def test_balanced_flow_against_float_qp(seed):
    net = random_net(random.Random(1000 + seed), 2, 3)
    _, s = balanced_flow(net)
    assert np.allclose(qp_surplus(net), [float(x) for x in s], atol=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_max_min_fairness(seed):
    net = random_net(random.Random(2000 + seed), 3, 3)
    assert check_max_min_fairness(net, trials=50, seed=seed).passed


@given(st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_surplus_invariant_under_node_permutation(seed):
    rng = random.Random(seed)
    net = random_net(rng, 3, 3)
    pa, pg = list(range(3)), list(range(3))
    rng.shuffle(pa)
    rng.shuffle(pg)
    inv = {g: k for k, g in enumerate(pg)}
    perm = net_of([net.source_cap[a] for a in pa],
                  {(pa.index(i), inv[j]): c for (i, j), c in net.edges.items()},
                  [net.prices[g] for g in pg], [net.spent_good[g] for g in pg])
    _, s = balanced_flow(net)
    _, sp = balanced_flow(perm)
    assert tuple(sp[inv[j]] for j in range(3)) == s
    assert balanced_flow(net)[1] == s
