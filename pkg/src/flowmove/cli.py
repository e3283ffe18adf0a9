"""Command-line entry point.

Exit codes: 0 success, 1 expectation failure, 2 usage or parse error,
3 checker violation.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path

from . import checker, scenario
from .packet import Address
from .runtime import EndpointConfig

OK, EXPECTATION, USAGE, VIOLATION = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE, f"{self.prog}: error: {message}\n")


def _address(text: str) -> Address:
    try:
        return Address.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowmove", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("sim", help="run a scenario script in the simulator")
    s.add_argument("script", type=Path)
    s.add_argument("--seed", type=int, help="overrides FLOWMOVE_SEED and the script's seed")
    s.add_argument("--summary", action="store_true", help="print application events only")

    c = sub.add_parser("check", help="exhaustively check a two-host configuration")
    c.add_argument("--script", type=Path, help="scenario whose connect/addflow/ping commands are checked")
    c.add_argument("--migrations", type=int, default=1, help="migration cap per host")
    c.add_argument("--loss", type=int, default=2)
    c.add_argument("--dup", type=int, default=1)
    mode = c.add_mutually_exclusive_group()
    mode.add_argument("--safety", action="store_true", help="deadlock search only")
    mode.add_argument("--liveness", action="store_true", help="non-progress cycle search only")
    c.add_argument("--variant", choices=["explicit-ack", "implicit-ack"], default="explicit-ack")
    c.add_argument("--unfair-timeouts", action="store_true")
    c.add_argument("--max-retries", type=int, help="fail flows after this many retries (default: never)")
    c.add_argument("--memory-mb", type=int, default=4096)
    c.add_argument("--trace-out", type=Path, default=Path("flowmove-trace.json"))

    r = sub.add_parser("replay", help="re-execute a checker trace file")
    r.add_argument("trace", type=Path)

    lv = sub.add_parser("live", help="run over UDP sockets")
    lv.add_argument("role", choices=["client", "server", "middlebox", "demo"])
    lv.add_argument("--local", type=_address, help="local address (control address for a middlebox)")
    lv.add_argument("--peer", type=_address, help="server address (client only)")
    lv.add_argument("--middlebox", type=_address, help="middlebox to notify on migration")
    lv.add_argument("--ttl", type=float, default=5.0, help="middlebox cache lifetime in seconds")
    lv.add_argument("--seed", type=int, default=0)
    lv.add_argument("--corrupt-nonce", action="store_true", help="send one forged RSYN after connecting")
    lv.add_argument("--pings", type=int, default=100, help="demo: number of pings")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handler = {"sim": cmd_sim, "check": cmd_check, "replay": cmd_replay, "live": cmd_live}[args.cmd]
    return handler(args)


def _load(path: Path) -> scenario.Scenario:
    return scenario.parse(path.read_text())


def cmd_sim(args) -> int:
    try:
        sc = _load(args.script)
    except (OSError, scenario.ParseError) as exc:
        print(f"{args.script}: {exc}", file=sys.stderr)
        return USAGE
    result = scenario.run_sim(sc, args.seed)
    for line in result.summary() if args.summary else result.trace:
        print(line)
    for f in result.failures:
        print(f"{args.script}: {f}", file=sys.stderr)
    return OK if result.ok else EXPECTATION


def cmd_check(args) -> int:
    script = checker.CONNECT_PING
    if args.script is not None:
        try:
            script = scenario.to_checker_script(_load(args.script))
        except (OSError, scenario.ParseError) as exc:
            print(f"{args.script}: {exc}", file=sys.stderr)
            return USAGE
    try:
        cfg = checker.CheckerConfig(
            max_migrations=args.migrations,
            loss_budget=args.loss,
            dup_budget=args.dup,
            fair_timeouts=not args.unfair_timeouts,
            implicit_ack=args.variant == "implicit-ack",
            max_retries=args.max_retries,
            memory_budget=args.memory_mb << 20,
        )
    except ValueError as exc:
        print(f"flowmove check: {exc}", file=sys.stderr)
        return USAGE
    try:
        if args.safety:
            verdict = checker.check_safety(script, cfg)
        elif args.liveness:
            verdict = checker.check_liveness(script, cfg)
        else:
            verdict = checker.check(script, cfg)
    except checker.MemoryBudgetExceeded as exc:
        print(f"flowmove check: {exc}", file=sys.stderr)
        return VIOLATION
    print(verdict.summary())
    s = verdict.stats
    print(f"states={s.states} transitions={s.transitions} end_states={s.end_states} "
          f"concurrent_migration_states={s.concurrent_migration_states} peak_rss={s.peak_rss_mb:.0f}MB")
    if verdict.ok:
        return OK
    for line in verdict.log:
        print(line)
    args.trace_out.write_text(checker.dump_trace(verdict, script, cfg))
    print(f"trace written to {args.trace_out}")
    return VIOLATION


def cmd_replay(args) -> int:
    try:
        kind, script, cfg, moves, cycle_start = checker.load_trace(args.trace.read_text())
    except (OSError, ValueError, KeyError) as exc:
        print(f"{args.trace}: {exc}", file=sys.stderr)
        return USAGE
    try:
        r = checker.replay(moves, script, cfg)
    except checker.TraceDiverged as exc:
        print(f"trace diverged: {exc}", file=sys.stderr)
        return EXPECTATION
    for line in r.log:
        print(line)
    if kind == "DeadlockTrace":
        problems = checker.end_state_problems(r.state, script)
        stuck = not checker.enabled_moves(r.state, script, cfg)
        reproduced = stuck and bool(problems)
        detail = "; ".join(problems)
    elif kind == "NonProgressCycleTrace":
        reproduced = r.states[cycle_start].canonical() == r.state.canonical()
        detail = f"cycle of {len(moves) - cycle_start} moves returns to state after move {cycle_start}"
    else:
        reproduced, detail = True, "no violation recorded"
    print(("reproduced " if reproduced else "NOT reproduced ") + f"{kind}: {detail}")
    return OK if reproduced else EXPECTATION


def cmd_live(args) -> int:
    from . import live

    try:
        if args.role == "demo":
            stats = asyncio.run(live.demo(pings=args.pings, migrate_at=args.pings // 2, seed=args.seed, out=print))
            print(f"answered={stats['answered']} lost={stats['lost']} failed={stats['failed']}")
            return EXPECTATION if stats["failed"] else OK
        if args.local is None:
            print("flowmove live: --local is required", file=sys.stderr)
            return USAGE
        if args.role == "middlebox":
            return asyncio.run(live.run_middlebox(args.local, args.ttl))
        if args.role == "client" and args.peer is None:
            print("flowmove live: client needs --peer", file=sys.stderr)
            return USAGE
        cfg = EndpointConfig(ilist=(args.local,), seed=args.seed, middlebox_notify=args.middlebox)
        return asyncio.run(live.run_node(args.role, args.local, args.peer, cfg, args.corrupt_nonce))
    except live.BindFailed as exc:
        print(f"flowmove live: {exc}", file=sys.stderr)
        return USAGE
    except live.PeerUnreachable as exc:
        print(f"flowmove live: {exc}", file=sys.stderr)
        return EXPECTATION
    except KeyboardInterrupt:
        return OK


if __name__ == "__main__":
    sys.exit(main())
