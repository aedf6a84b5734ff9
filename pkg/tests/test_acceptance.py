"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line that is printed in the terminal summary.
"""
import json
import math
import random
import time
from fractions import Fraction as F

import numpy as np
import pytest

from mkteq.api import solve
from mkteq.cli import run
from mkteq.demand import agent_bundles, demand_ces, demand_cobb_douglas, exact_oracle, reference_oracle
from mkteq.flow import balanced_flow, build_network
from mkteq.model import CES, CobbDouglas, ceil_log2, derive_config, dump_market
from mkteq.spending import build_equality_graphs, cramer_bound, rounding, solve_spending
from mkteq.verify import (brute_force_balanced_surplus, brute_force_demand,
                          check_max_min_fairness, check_trace, check_wgs_monotonicity, generate_instance)
from mkteq.wgs import potential

from conftest import ACCEPTANCE, CROSS, SYMMETRIC

EPS = F(1, 10 ** 6)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def ces_instance(seed):
    return generate_instance("ces", 2 + seed % 5, 2 + (seed * 3) % 5, seed, rho=F(1, 2))


@pytest.fixture(scope="module")
def ces_runs():
    runs = []
    for seed in range(20):
        mk = ces_instance(seed)
        t0 = time.perf_counter()
        res = solve(mk, EPS)
        runs.append((mk, res, time.perf_counter() - t0))
    return runs


@pytest.fixture(scope="module")
def spending_runs():
    runs = []
    eps = F(1, 1000)
    for seed in range(8):
        mk = generate_instance("spending_constraint", 2 + seed % 2, 2 + (seed // 2) % 2, seed, max_bits=16)
        L = mk.bit_size()
        cfg = derive_config(eps, mk, D1=2 * mk.m * L, D2=1, L=L)
        p, trace = solve_spending(mk, eps, cfg)
        runs.append((mk, cfg, trace))
    return runs


def test_criterion_1_wgs_convergence(ces_runs):
    bad = []
    for mk, res, secs in ces_runs:
        s = reference_oracle(mk, res.prices, bits=128)
        demand = [sum(b[j] for b in agent_bundles(mk, res.prices)) for j in range(mk.m)]
        if not potential(s) < EPS ** 2 / (4 * mk.m):
            bad.append(("phi", mk.m, mk.n))
        if max(demand) > 1 + EPS:
            bad.append(("oversell", mk.m, mk.n))
        if secs >= 60:
            bad.append(("time", secs))
    worst = max(secs for *_, secs in ces_runs)
    report(1, not bad, f"{len(ces_runs)} CES instances converged, slowest {worst:.1f}s, problems {bad}")


def test_criterion_2_round_budget(ces_runs):
    bad = []
    for mk, res, _ in ces_runs:
        cfg, m = res.config, mk.m
        rounds_cap = 64 * (cfg.D1 * m ** 7 * ceil_log2(m) + m ** 3 * ceil_log2(1 / cfg.epsilon))
        calls_cap = rounds_cap * ceil_log2(cfg.Delta ** 2)
        if res.trace.n_rounds > rounds_cap or res.trace.oracle_calls > calls_cap:
            bad.append((m, mk.n, res.trace.n_rounds, res.trace.oracle_calls))
    most = max(res.trace.n_rounds for _, res, _ in ces_runs)
    report(2, not bad, f"max {most} rounds, all within the round and oracle-call caps, over budget {bad}")


CLAIMS = ("initial_norm", "norm_monotone", "negative_at_one", "min_price_one", "price_cap", "update_bound",
          "gap_closure", "g1_membership", "big_steps", "negative_connected")


def test_criterion_3_trace_invariants(ces_runs, spending_runs):
    counts = {k: 0 for k in CLAIMS}
    traced = 0
    for mk, res, _ in ces_runs:
        rep = check_trace(mk, res.trace.rounds, res.config)
        traced += 1
        for k in CLAIMS:
            counts[k] += len(rep.violations[k])
    for mk, cfg, trace in spending_runs:
        rep = check_trace(mk, trace.rounds, cfg, mode="spending", rounding_M=cfg.M)
        traced += 1
        for k in CLAIMS:
            counts[k] += len(rep.violations[k])
    total = sum(counts.values())
    report(3, total == 0, f"{traced} traced runs, {total} invariant violations {counts if total else ''}".rstrip())


def test_criterion_4_potential_decrease(ces_runs, spending_runs):
    small_rounds = 0
    violations = 0
    for mk, res, _ in ces_runs:
        rep = check_trace(mk, res.trace.rounds, res.config)
        small_rounds += len(rep.decrease_factors)
        violations += len(rep.violations["potential_decrease"])
    for mk, cfg, trace in spending_runs:
        rep = check_trace(mk, trace.rounds, cfg, mode="spending")
        small_rounds += len(rep.decrease_factors)
        violations += len(rep.violations["potential_decrease"])
    report(4, violations == 0, f"{small_rounds} small-step rounds checked, {violations} without strict decrease")


def test_criterion_5_balanced_flow():
    fixtures, mismatches, unfair = 0, 0, 0
    perturbations = 0
    for seed in range(60):
        rng = random.Random(seed)
        m, n = rng.choice((2, 3)), rng.choice((2, 3))
        cls = ("linear", "spending_constraint")[seed % 2]
        mk = generate_instance(cls, m, n, seed)
        p = tuple(F(rng.randint(1, 12), rng.randint(1, 4)) for _ in range(m))
        net = build_network(mk, p)
        fixtures += 1
        if balanced_flow(net)[1] != brute_force_balanced_surplus(net):
            mismatches += 1
        if seed < 10:
            rep = check_max_min_fairness(net, trials=100, seed=seed)
            perturbations += 100
            unfair += not rep.passed
    ok = fixtures >= 50 and mismatches == 0 and unfair == 0
    report(5, ok, f"{fixtures} fixtures, {mismatches} surplus mismatches; {perturbations} perturbed flows, {unfair} fairness failures")


def test_criterion_6_wgs_property():
    probes, failures = 0, 0
    for seed in range(20):
        rng = random.Random(seed)
        m = rng.choice((2, 3))
        mk = generate_instance("spending_constraint", m, rng.choice((2, 3)), seed)
        p = tuple(F(rng.randint(1, 16), rng.randint(1, 4)) for _ in range(m))
        for _ in range(20):
            j = rng.randrange(m)
            delta = F(rng.randint(1, 40), rng.randint(1, 8))
            probes += 1
            failures += not check_wgs_monotonicity(mk, p, j, delta).passed
    report(6, failures == 0, f"{probes} single-price raises on 20 instances, {failures} surplus drops")


def test_criterion_7_rounding():
    viol = {"a": 0, "b": 0, "c": 0, "d": 0, "phi": 0}
    cases = 0
    for k in range(100):
        rng = random.Random(k)
        m, n = rng.choice((2, 3)), rng.choice((2, 3))
        mk = generate_instance("spending_constraint", m, n, k)
        L = mk.bit_size()
        for M in (L, L + 4, L + 16):
            p = [F(1)] + [1 + F(rng.randrange(0, 3 * 2 ** (M + 8)), 2 ** (M + 8) + rng.randrange(0, 2 ** M))
                          for _ in range(m - 1)]
            rng.shuffle(p)
            q = rounding(p, M)
            cases += 1
            viol["a"] += not any(a == b == 1 for a, b in zip(p, q))
            viol["b"] += not all(x.numerator <= 2 ** (m * M) and x.denominator <= 2 ** (m * M) for x in q)
            viol["c"] += not build_equality_graphs(mk, p).eg <= build_equality_graphs(mk, q).eg
            viol["d"] += not all(a <= b <= a + F(1, 2 ** M) for a, b in zip(p, q))
            viol["phi"] += not potential(exact_oracle(mk, q)) < potential(exact_oracle(mk, p)) + F(5 * m ** 3, 2 ** M)
    report(7, not any(viol.values()), f"{cases} roundings, violations {viol}")


def test_criterion_8_exact_extraction(tmp_path):
    done, problems, slowest = 0, [], 0.0
    for m in (2, 3):
        for n in (2, 3):
            for seed in range(3):
                mk = generate_instance("spending_constraint", m, n, seed, max_bits=16)
                path = tmp_path / f"m{m}n{n}s{seed}.json"
                path.write_text(dump_market(mk))
                out = tmp_path / "out.json"
                t0 = time.perf_counter()
                code = run(["exact", "--market", str(path), "--out", str(out)])
                secs = time.perf_counter() - t0
                slowest = max(slowest, secs)
                if code != 0:
                    problems.append((m, n, seed, "exit", code))
                    continue
                res = json.loads(out.read_text())
                p = tuple(F(v) for v in res["prices"])
                den = math.lcm(*(x.denominator for x in p))
                ok = (exact_oracle(mk, p) == (0,) * m and mk.bit_size() <= 16
                      and den <= cramer_bound(m, res["L"]) and str(den) == res["denominator"]
                      and res["gates"]["equality_edges"] and res["gates"]["min_cut"] and secs < 120)
                if not ok:
                    problems.append((m, n, seed, res))
                done += 1
    report(8, done >= 10 and not problems, f"{done} instances extracted exactly, slowest {slowest:.2f}s, problems {problems}")


def test_criterion_9_demand_closed_forms():
    fixtures, worst, budget_err = 0, 0.0, F(0)
    for seed in range(50):
        rng = random.Random(seed)
        m = 2 + seed % 2
        p = tuple(F(rng.randint(2, 8), 4) for _ in range(m))
        money = F(rng.randint(1, 8), 4)
        if seed % 2 == 0:
            util = CES(tuple(F(rng.randint(1, 9)) for _ in range(m)), rng.choice((F(1, 4), F(1, 2), F(3, 4))))
            x = demand_ces(util, money, p)
        else:
            util = CobbDouglas(tuple(F(rng.randint(1, 5)) for _ in range(m)))
            x = demand_cobb_douglas(util, money, p)
        ref = brute_force_demand(util, money, p, grid_steps=10 ** 4 if m == 2 else 3000)
        worst = max(worst, float(np.max(np.abs(np.array([float(v) for v in x]) - ref))))
        spent = sum(a * b for a, b in zip(x, p))
        budget_err = max(budget_err, abs(spent - money))
        fixtures += 1
    ok = worst <= 1e-3 and budget_err <= F(1, 2 ** 100)
    report(9, ok, f"{fixtures} fixtures, max grid deviation {worst:.2e}, max budget error {float(budget_err):.1e}")


def test_criterion_10_hand_equilibria(tmp_path):
    cross, sym = tmp_path / "cross.json", tmp_path / "sym.json"
    cross.write_text(json.dumps(CROSS))
    sym.write_text(json.dumps(SYMMETRIC))
    got = {}
    for name, path in (("cross", cross), ("sym", sym)):
        for cmd, extra in (("solve", ["--epsilon", "1/1000"]), ("exact", [])):
            out = tmp_path / f"{name}-{cmd}.json"
            code = run([cmd, "--market", str(path), "--out", str(out)] + extra)
            res = json.loads(out.read_text()) if code == 0 else {}
            got[(name, cmd)] = (code, res.get("prices"), res.get("rounds"))
    ok = (got[("cross", "solve")][:2] == (0, ["1", "2"]) and got[("cross", "exact")][:2] == (0, ["1", "2"])
          and got[("sym", "solve")] == (0, ["1", "1"], 0) and got[("sym", "exact")] == (0, ["1", "1"], 0))
    report(10, ok, f"cross market solve/exact -> {got[('cross', 'solve')][1]}/{got[('cross', 'exact')][1]}, "
                   f"symmetric -> {got[('sym', 'solve')][1]} at round {got[('sym', 'solve')][2]}")
