"""Scenario scripts: parsing and execution in the simulator.

A script is line oriented.  ``#`` starts a comment.  Directives run in order
at the current simulated time; ``run <ms>`` advances the clock.  The grammar
is described in ``docs/scenarios.md``.
"""

from __future__ import annotations

import os
import shlex
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from . import proto
from .checker import Cmd, Script
from .packet import Address, PacketType
from .proto import K
from .runtime import RetransmitPolicy
from .simnet import Simulator

SETUP = {"seed", "latency", "retransmit", "variant", "ageout"}


class ParseError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ExpectationFailed(Exception):
    def __init__(self, line: int, expected: str, actual: str):
        super().__init__(f"line {line}: expected {expected}, got {actual}")
        self.line = line
        self.expected = expected
        self.actual = actual


@dataclass(frozen=True)
class Directive:
    line: int
    op: str
    args: Tuple[str, ...]


@dataclass
class Scenario:
    directives: List[Directive] = field(default_factory=list)
    seed: int = 0
    latency_ms: float = 10.0
    jitter_ms: float = 5.0
    ageout_ms: float = 1000.0
    retransmit: RetransmitPolicy = field(default_factory=RetransmitPolicy)
    implicit_ack: bool = False
    hosts: List[str] = field(default_factory=list)
    middleboxes: List[str] = field(default_factory=list)


def _addr(d: Directive, text: str) -> Address:
    try:
        return Address.parse(text)
    except ValueError:
        raise ParseError(d.line, f"bad address {text!r}") from None


def _int(d: Directive, text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(d.line, f"expected an integer, got {text!r}") from None


def _num(d: Directive, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(d.line, f"expected a number, got {text!r}") from None


def _ptype(d: Directive, text: str) -> PacketType:
    try:
        return PacketType[text.upper().replace("-", "_")]
    except KeyError:
        raise ParseError(d.line, f"unknown packet type {text!r}") from None


def _kwargs(d: Directive, args, allowed) -> dict:
    if len(args) % 2:
        raise ParseError(d.line, f"expected key/value pairs after {d.op}")
    out = {}
    for k, v in zip(args[::2], args[1::2]):
        if k not in allowed:
            raise ParseError(d.line, f"unknown option {k!r} for {d.op}")
        out[k] = v
    return out


_ARITY = {
    "seed": (1, 1), "latency": (1, 3), "retransmit": (1, 5), "variant": (1, 1), "ageout": (1, 1),
    "host": (3, None), "middlebox": (3, 5), "notify-middlebox": (2, 2), "connect": (2, 4),
    "addflow": (3, 3), "migrate": (3, None), "ping": (1, 3), "drop-next": (0, 2), "dup-next": (0, 2),
    "run": (1, 1), "expect": (2, 4),
}


def parse(text: str) -> Scenario:
    sc = Scenario()
    declared = set()
    seen_host = False
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            words = shlex.split(line)
        except ValueError as exc:
            raise ParseError(n, str(exc)) from None
        op, args = words[0].lower(), tuple(words[1:])
        d = Directive(n, op, args)
        if op not in _ARITY:
            raise ParseError(n, f"unknown directive {op!r}")
        lo, hi = _ARITY[op]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise ParseError(n, f"wrong number of arguments for {op}")
        if op in SETUP:
            if seen_host:
                raise ParseError(n, f"{op} must come before the first host")
            _setup(sc, d)
            continue
        if op == "host":
            if args[1] != "bind":
                raise ParseError(n, "expected: host <name> bind <addr>...")
            if args[0] in declared:
                raise ParseError(n, f"{args[0]} declared twice")
            for a in args[2:]:
                _addr(d, a)
            declared.add(args[0])
            sc.hosts.append(args[0])
            seen_host = True
        elif op == "middlebox":
            if args[1] != "at":
                raise ParseError(n, "expected: middlebox <name> at <addr> [ttl <s>]")
            if args[0] in declared:
                raise ParseError(n, f"{args[0]} declared twice")
            _addr(d, args[2])
            _num(d, _kwargs(d, args[3:], {"ttl"}).get("ttl", "5"))
            declared.add(args[0])
            sc.middleboxes.append(args[0])
            seen_host = True
        else:
            _check_refs(sc, d)
        sc.directives.append(d)
    return sc


def _setup(sc: Scenario, d: Directive) -> None:
    a = d.args
    if d.op == "seed":
        sc.seed = _int(d, a[0])
    elif d.op == "latency":
        sc.latency_ms = _num(d, a[0])
        sc.jitter_ms = _num(d, _kwargs(d, a[1:], {"jitter"}).get("jitter", str(sc.jitter_ms)))
    elif d.op == "ageout":
        sc.ageout_ms = _num(d, a[0])
    elif d.op == "retransmit":
        kw = _kwargs(d, a[1:], {"backoff", "retries"})
        try:
            sc.retransmit = RetransmitPolicy(
                _num(d, a[0]) / 1000, _num(d, kw.get("backoff", "2")), _int(d, kw.get("retries", "8"))
            )
        except ValueError as exc:
            raise ParseError(d.line, str(exc)) from None
    elif d.op == "variant":
        if a[0] not in ("implicit-ack", "explicit-ack"):
            raise ParseError(d.line, f"unknown variant {a[0]!r}")
        sc.implicit_ack = a[0] == "implicit-ack"


def _need_host(sc: Scenario, d: Directive, name: str) -> None:
    if name not in sc.hosts:
        raise ParseError(d.line, f"unknown host {name!r}")


def _check_refs(sc: Scenario, d: Directive) -> None:
    a = d.args
    if d.op == "notify-middlebox":
        _need_host(sc, d, a[0])
        if a[1] not in sc.middleboxes:
            raise ParseError(d.line, f"unknown middlebox {a[1]!r}")
    elif d.op == "connect":
        _need_host(sc, d, a[0])
        _need_host(sc, d, a[1])
        if len(a) == 3:
            raise ParseError(d.line, "connect takes both a local and a remote address or neither")
        for x in a[2:]:
            _addr(d, x)
    elif d.op in ("addflow", "migrate"):
        _need_host(sc, d, a[0])
        for x in a[1:]:
            _addr(d, x)
    elif d.op == "ping":
        _need_host(sc, d, a[0])
        if len(a) > 1:
            _int(d, a[1])
        if len(a) > 2:
            _int(d, a[2])
    elif d.op in ("drop-next", "dup-next"):
        if a and not a[0].isdigit():
            _ptype(d, a[0])
            rest = a[1:]
        else:
            rest = a
        if len(rest) > 1:
            raise ParseError(d.line, f"usage: {d.op} [TYPE] [COUNT]")
        if rest:
            _int(d, rest[0])
    elif d.op == "run":
        _num(d, a[0])
    elif d.op == "expect":
        kind = a[0]
        if kind in ("pong", "failed", "established"):
            _need_host(sc, d, a[1])
            if len(a) > 3:
                raise ParseError(d.line, f"usage: expect {kind} <host> [flow]")
            if len(a) == 3:
                _int(d, a[2])
        elif kind == "state":
            if len(a) != 4:
                raise ParseError(d.line, "usage: expect state <host> <flow> <STATE>")
            _need_host(sc, d, a[1])
            if a[3].upper() not in K.__members__:
                raise ParseError(d.line, f"unknown state {a[3]!r}")
        elif kind == "remote":
            if len(a) != 4:
                raise ParseError(d.line, "usage: expect remote <host> <flow> <addr>")
            _need_host(sc, d, a[1])
            _addr(d, a[3])
        else:
            raise ParseError(d.line, f"unknown expectation {kind!r}")


# ---------------------------------------------------------------------------
# Execution


@dataclass
class SimResult:
    trace: List[str]
    failures: List[ExpectationFailed]
    sim: Simulator

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> List[str]:
        return [line for line in self.trace if line.split(" ", 2)[1] in ("app", "error")]


def effective_seed(sc: Scenario, override: Optional[int] = None) -> int:
    if override is not None:
        return override
    env = os.environ.get("FLOWMOVE_SEED")
    if env:
        return int(env, 0)
    return sc.seed


def run_sim(sc: Scenario, seed: Optional[int] = None) -> SimResult:
    sim = Simulator(
        seed=effective_seed(sc, seed),
        latency_us=round(sc.latency_ms * 1000),
        jitter_us=round(sc.jitter_ms * 1000),
        age_out_us=round(sc.ageout_ms * 1000),
        retransmit=sc.retransmit,
        implicit_ack=sc.implicit_ack,
    )
    failures: List[ExpectationFailed] = []
    last_ping = {}
    mb_addr = {}
    for d in sc.directives:
        a = d.args
        if d.op == "host":
            sim.add_host(a[0], [Address.parse(x) for x in a[2:]])
        elif d.op == "middlebox":
            ttl = float(_kwargs(d, a[3:], {"ttl"}).get("ttl", "5"))
            mb_addr[a[0]] = Address.parse(a[2])
            sim.add_middlebox(a[0], mb_addr[a[0]], ttl)
        elif d.op == "notify-middlebox":
            sim.hosts[a[0]].endpoint.config.middlebox_notify = mb_addr[a[1]]
        elif d.op == "connect":
            addrs = [Address.parse(x) for x in a[2:]] or [None, None]
            sim.connect(a[0], a[1], *addrs)
        elif d.op == "addflow":
            sim.add_flow(a[0], Address.parse(a[1]), Address.parse(a[2]))
        elif d.op == "migrate":
            ilist = [Address.parse(x) for x in a[3:]]
            sim.migrate(a[0], Address.parse(a[1]), Address.parse(a[2]), ilist or None)
        elif d.op == "ping":
            flow = int(a[1]) if len(a) > 1 else 0
            count = int(a[2]) if len(a) > 2 else 1
            last_ping[(a[0], flow)] = sim.now
            for _ in range(count):
                sim.ping(a[0], flow)
        elif d.op in ("drop-next", "dup-next"):
            ptype = None
            rest = a
            if a and not a[0].isdigit():
                ptype, rest = _ptype(d, a[0]), a[1:]
            count = int(rest[0]) if rest else 1
            (sim.drop_next if d.op == "drop-next" else sim.dup_next)(ptype, count)
        elif d.op == "run":
            sim.run_for(round(float(a[0]) * 1000))
        elif d.op == "expect":
            failure = _expect(sim, d, last_ping)
            sim.log("expect", f"line {d.line} {' '.join(a)}: {'ok' if failure is None else 'FAILED'}")
            if failure is not None:
                failures.append(failure)
    return SimResult(sim.trace, failures, sim)


def _expect(sim: Simulator, d: Directive, last_ping) -> Optional[ExpectationFailed]:
    kind, host = d.args[0], d.args[1]
    flow = int(d.args[2]) if len(d.args) > 2 else 0
    st = sim.flow_state(host, flow)
    actual = "no such flow" if st is None else f"{st.kind.name} local={st.local_addr} remote={st.remote_addr}"
    if kind == "pong":
        since = last_ping.get((host, flow), 0)
        pongs = [t for t, _ in sim.app_events(host, flow, proto.PongReceived) if t >= since]
        if pongs:
            return None
        return ExpectationFailed(d.line, f"a pong on {host} flow {flow}", f"none ({actual})")
    if kind in ("failed", "established"):
        want = K.FAILED if kind == "failed" else K.ESTABLISHED
        ok = st is not None and st.kind == want
        return None if ok else ExpectationFailed(d.line, f"{host} flow {flow} {want.name}", actual)
    if kind == "state":
        want = K[d.args[3].upper()]
        ok = st is not None and st.kind == want
        return None if ok else ExpectationFailed(d.line, f"{host} flow {flow} {want.name}", actual)
    want_addr = Address.parse(d.args[3])
    ok = st is not None and st.remote_addr == want_addr
    return None if ok else ExpectationFailed(d.line, f"{host} flow {flow} remote {want_addr}", actual)


# ---------------------------------------------------------------------------
# Checker scripts


def to_checker_script(sc: Scenario) -> Script:
    """The connect/addflow/ping skeleton of a scenario, for the model checker.

    Timing, faults and migrations are not taken from the script: the checker
    explores all of them.
    """
    if len(sc.hosts) != 2:
        raise ParseError(0, "the checker needs exactly two hosts")
    connects = [d for d in sc.directives if d.op == "connect"]
    if len(connects) != 1:
        raise ParseError(connects[1].line if connects else 0, "the checker needs exactly one connect")
    names = (connects[0].args[0], connects[0].args[1])
    cmds: Tuple[list, list] = ([], [])
    for d in sc.directives:
        if d.op == "connect":
            cmds[0].append(Cmd("connect"))
        elif d.op == "addflow":
            cmds[names.index(d.args[0])].append(Cmd("addflow"))
        elif d.op == "ping":
            count = int(d.args[2]) if len(d.args) > 2 else 1
            flow = int(d.args[1]) if len(d.args) > 1 else 0
            cmds[names.index(d.args[0])].extend([Cmd("ping", flow)] * count)
    try:
        return Script(names, (tuple(cmds[0]), tuple(cmds[1])))
    except ValueError as exc:
        raise ParseError(0, str(exc)) from None
