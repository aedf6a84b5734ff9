"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 non-convergence or bit budget
exceeded, 4 exact-phase verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import api
from .demand import agent_bundles, reference_oracle
from .flow import balanced_flow, build_network
from .model import (MarketError, check_prices, dump_market, fmt_rational, load_market,
                    parse_rational)
from .spending import (ExactVerificationError, LinearSystemError, SufficiencyError,
                       cramer_bound, exact_epsilon, rounding, solve_exact)
from .verify import CLASSES, check_approx_equilibrium, check_trace, generate_instance
from .wgs import NonConvergence, OracleInconsistency

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_EXACT = 0, 2, 3, 4
DEFAULT_EXACT_BITS = 1 << 14


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _rational(text: str) -> Fraction:
    try:
        return parse_rational(text)
    except (ValueError, ZeroDivisionError, MarketError) as exc:
        raise argparse.ArgumentTypeError(f"not a rational number: {text!r}") from exc


def _write_json(obj, path: str | None):
    text = json.dumps(obj, indent=2) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def emit_trace(trace, path: str):
    """Newline-delimited JSON, one round per line."""
    with open(path, "w") as fh:
        for state in trace.rounds:
            fh.write(json.dumps(state.to_json(), separators=(",", ":")) + "\n")


def read_trace(path: str) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _load_prices(path: str, goods) -> tuple[Fraction, ...]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MarketError(f"{path}: cannot read prices ({exc})") from exc
    if isinstance(raw, dict) and "prices" in raw:
        raw = raw["prices"]
    if isinstance(raw, dict):
        missing = [g for g in goods if g not in raw]
        if missing:
            raise MarketError(f"prices missing for goods {missing}")
        raw = [raw[g] for g in goods]
    if not isinstance(raw, list):
        raise MarketError("prices must be a list or an object keyed by good")
    return tuple(parse_rational(v) for v in raw)


def _prices_json(market, p) -> dict:
    return {"goods": list(market.goods), "prices": [fmt_rational(v) for v in p]}


def _dump_network(market, p, path):
    net = build_network(market, p)
    flow, surplus = balanced_flow(net)
    _write_json({"network": net.to_json(), "flow": flow.to_json(),
                 "surplus": [fmt_rational(v) for v in surplus]}, path)


def _config(market, args):
    return api.make_config(market, args.epsilon, d1=args.d1, d2=args.d2, L=args.L, r1=args.r1,
                           r2=args.r2, r=args.r, max_rounds=args.max_rounds)


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> int:
    market = load_market(args.market)
    config = _config(market, args)
    res = api.solve(market, args.epsilon, config)
    if args.trace:
        emit_trace(res.trace, args.trace)
    if args.debug_network and market.is_spending:
        _dump_network(market, res.prices, args.debug_network)
    report = check_approx_equilibrium(market, res.prices, 1 + config.epsilon)
    if not report.passed:
        raise CliError(f"returned prices fail the equilibrium check: {report.worst}", EXIT_CONVERGENCE)
    out = _prices_json(market, res.prices)
    out.update({
        "epsilon": fmt_rational(config.epsilon),
        "mode": res.mode,
        "rounds": res.trace.n_rounds,
        "oracle_calls": res.trace.oracle_calls,
        "phi": fmt_rational(res.trace.final.phi),
        "check": report.to_json(),
    })
    _write_json(out, args.out)
    return EXIT_OK


def cmd_exact(args) -> int:
    market = load_market(args.market)
    if not market.is_spending:
        raise MarketError("exact mode needs linear or spending-constraint utilities")
    L = args.L if args.L is not None else market.bit_size()
    need = exact_epsilon(market.m, L).denominator.bit_length()
    if need > args.max_exact_bits:
        raise MarketError(f"exact phase needs 1/epsilon of {need} bits (m={market.m}, L={L}); "
                          f"limit is {args.max_exact_bits}, raise --max-exact-bits to try anyway")
    run = solve_exact(market, L=L, early=not args.full_approx)
    if args.trace:
        emit_trace(run.trace, args.trace)
    if args.debug_network:
        _dump_network(market, run.prices, args.debug_network)
    surplus = reference_oracle(market, run.prices)
    if any(surplus):
        raise CliError("extracted prices do not clear the market", EXIT_EXACT)
    res = run.result
    out = _prices_json(market, run.prices)
    out.update({
        "L": L,
        "rounds": run.trace.n_rounds,
        "oracle_calls": run.trace.oracle_calls,
        "early_stop": run.early,
        "second_pass": run.first_pass is not None,
        "denominator": str(res.denominator),
        "denominator_bound_ok": res.denominator <= cramer_bound(market.m, L),
        "gates": {"equality_edges": res.edges_equal, "min_cut": res.min_cut_ok},
        "surplus": [fmt_rational(v) for v in surplus],
    })
    _write_json(out, args.out)
    return EXIT_OK


def cmd_demand(args) -> int:
    market = load_market(args.market)
    p = check_prices(market, _load_prices(args.prices, market.goods))
    bundles = agent_bundles(market, p, args.bits)
    surplus = reference_oracle(market, p, args.bits)
    if args.debug_network and market.is_spending:
        _dump_network(market, p, args.debug_network)
    _write_json({
        "goods": list(market.goods),
        "prices": [fmt_rational(v) for v in p],
        "bundles": {a: [fmt_rational(v) for v in b] for a, b in zip(market.agents, bundles)},
        "surplus": [fmt_rational(v) for v in surplus],
    }, args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    market = load_market(args.market)
    p = check_prices(market, _load_prices(args.prices, market.goods))
    report = check_approx_equilibrium(market, p, args.mu_factor)
    out = report.to_json()
    if args.trace:
        if args.epsilon is None:
            raise MarketError("--trace needs --epsilon to rebuild the solver parameters")
        config = _config(market, args)
        mode = "spending" if market.is_spending else "approx"
        out["trace"] = check_trace(market, read_trace(args.trace), config, mode).to_json()
    _write_json(out, args.out)
    return EXIT_OK


def cmd_round(args) -> int:
    raw = json.loads(Path(args.prices).read_text())
    if isinstance(raw, dict):
        raw = raw.get("prices", raw)
    p = [parse_rational(v) for v in raw]
    if any(v <= 0 for v in p):
        raise MarketError("prices must be positive")
    q = rounding(p, args.M)
    _write_json({"M": args.M, "prices": [fmt_rational(v) for v in q]}, args.out)
    return EXIT_OK


def cmd_gen(args) -> int:
    market = generate_instance(args.cls, args.m, args.n, args.seed, max_bits=args.max_bits, rho=args.rho)
    text = dump_market(market) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_params(sp, epsilon_required: bool):
    sp.add_argument("--epsilon", type=_rational, required=epsilon_required,
                    help="target precision, e.g. 1/1000 or 0.001")
    sp.add_argument("--d1", type=int, help="log2 bound on the equilibrium price range")
    sp.add_argument("--d2", type=int, help="log2 bound on surplus slopes")
    sp.add_argument("--L", type=int, help="input bit length (default: computed from the market)")
    sp.add_argument("--r1", type=int, default=16, help="oracle precision constant (mu = eps / (r1 m^7))")
    sp.add_argument("--r2", type=int, default=16, help="small-step threshold constant")
    sp.add_argument("--r", type=int, default=16, help="spare analysis constant")
    sp.add_argument("--max-rounds", type=int, help="round budget (default: derived bound)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mkteq", description="Exchange-market equilibrium solver.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="approximate equilibrium by ascending prices")
    sp.add_argument("--market", required=True, help="market JSON file")
    _add_params(sp, True)
    sp.add_argument("--trace", help="write the per-round trace as NDJSON")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.add_argument("--debug-network", help="dump the equality network and balanced flow at the result")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("exact", help="exact rational equilibrium for spending-constraint markets")
    sp.add_argument("--market", required=True, help="market JSON file")
    sp.add_argument("--L", type=int, help="input bit length (default: computed from the market)")
    sp.add_argument("--trace", help="write the approximate-phase trace as NDJSON")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.add_argument("--full-approx", action="store_true",
                    help="run the approximate phase to full precision instead of stopping at the first verified extraction")
    sp.add_argument("--max-exact-bits", type=int, default=DEFAULT_EXACT_BITS,
                    help="refuse instances whose exact-phase precision needs more bits than this")
    sp.add_argument("--debug-network", help="dump the equality network and balanced flow at the result")
    sp.set_defaults(func=cmd_exact)

    sp = sub.add_parser("demand", help="per-agent demand bundles and surplus at given prices")
    sp.add_argument("--market", required=True, help="market JSON file")
    sp.add_argument("--prices", required=True, help="prices JSON (list, or object keyed by good)")
    sp.add_argument("--bits", type=int, default=128, help="mantissa bits for CES demands")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.add_argument("--debug-network", help="dump the equality network and balanced flow")
    sp.set_defaults(func=cmd_demand)

    sp = sub.add_parser("verify", help="check prices against the market; optionally replay a trace")
    sp.add_argument("--market", required=True, help="market JSON file")
    sp.add_argument("--prices", required=True, help="prices JSON")
    sp.add_argument("--mu-factor", type=_rational, default=Fraction(1),
                    help="allowed demand/supply ratio per good (default 1)")
    sp.add_argument("--trace", help="NDJSON trace to replay (needs --epsilon)")
    _add_params(sp, False)
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("round-prices", help="round prices onto a connected ratio graph")
    sp.add_argument("--prices", required=True, help="prices JSON list with minimum 1")
    sp.add_argument("--M", type=int, required=True, help="ratio bit bound")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(func=cmd_round)

    sp = sub.add_parser("gen", help="generate a random market")
    sp.add_argument("--class", dest="cls", required=True, choices=CLASSES)
    sp.add_argument("--m", type=int, required=True, help="number of goods")
    sp.add_argument("--n", type=int, required=True, help="number of agents")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-bits", type=int, help="resample until the market's bit length fits")
    sp.add_argument("--rho", type=_rational, help="fix the CES exponent")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(func=cmd_gen)
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mkteq: {exc}", file=sys.stderr)
        return exc.code
    except SufficiencyError as exc:
        print(f"mkteq: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (MarketError, json.JSONDecodeError, OSError) as exc:
        print(f"mkteq: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonConvergence as exc:
        print(f"mkteq: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OracleInconsistency as exc:
        print(f"mkteq: oracle inconsistency: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ExactVerificationError, LinearSystemError) as exc:
        detail = getattr(exc, "diagnostics", None)
        print(f"mkteq: exact phase failed: {exc}" + (f" {json.dumps(detail)}" if detail else ""), file=sys.stderr)
        return EXIT_EXACT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
