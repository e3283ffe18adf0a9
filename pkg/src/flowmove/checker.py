"""Explicit-state model checker for two hosts over the mailbox network.

Each transition runs the production :func:`flowmove.proto.transition`.  A
global state bundles both connection states, the network, armed timers, the
fairness token and the script positions; its canonical byte encoding is the
key of the visited set.

Choice points are message delivery (any in-flight message, with a fault
decision drawn from the budgets), timer expiry, scripted commands and
migrations.  Timers only expire when no message is in flight, the same rule
SPIN applies to its ``timeout`` guard.  In fair mode a round-robin token
decides which host's timer may expire.
"""

from __future__ import annotations

import json
import resource
import struct
import time
from array import array
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

from . import codec, proto
from .packet import UNBOUND, Address, Packet
from .proto import MIGRATABLE, ConnectionState, FlowIds, K
from .simnet import FaultDecision, Message, NetworkState, _with_mailbox, bind, charge, deliverable, rebind, send, take

# ---------------------------------------------------------------------------
# Script and configuration


class Cmd(NamedTuple):
    op: str  # "connect", "addflow" or "ping"
    arg: int = 0  # ping: flow index on the issuing host


@dataclass(frozen=True)
class Script:
    """Scripted commands per host.  Host 0 opens the connection, host 1 listens."""

    names: Tuple[str, str] = ("x", "y")
    commands: Tuple[Tuple[Cmd, ...], Tuple[Cmd, ...]] = ((Cmd("connect"), Cmd("ping", 0)), ())

    def __post_init__(self):
        if len(self.names) != 2 or len(self.commands) != 2:
            raise ValueError("the checker handles exactly two hosts")
        if any(c.op == "connect" for c in self.commands[1]):
            raise ValueError("only the first host may connect")


CONNECT_PING = Script()
TWO_FLOWS = Script(commands=((Cmd("connect"), Cmd("addflow"), Cmd("ping", 0), Cmd("ping", 1)), ()))


@dataclass(frozen=True)
class CheckerConfig:
    max_migrations: int = 1
    loss_budget: int = 2
    dup_budget: int = 1
    fair_timeouts: bool = True
    implicit_ack: bool = False
    # None: retransmit forever.  Otherwise a flow fails after this many retries.
    max_retries: Optional[int] = None
    memory_budget: int = 4 << 30
    max_states: Optional[int] = None
    # Initial versions sit near the wrap point on purpose.
    initial_versions: Tuple[int, int] = (0xFFFFFFFF, 0x7FFFFFFF)
    nonces: Tuple[int, int] = (0x1111111111111111, 0x2222222222222222)

    def __post_init__(self):
        if self.max_migrations < 0 or self.loss_budget < 0 or self.dup_budget < 0:
            raise ValueError("caps and budgets must be non-negative")


def host_addr(host: int, generation: int) -> Address:
    """Address of ``host`` after ``generation`` migrations."""
    return Address(0x0A000000 | (host + 1) << 8 | (generation + 1), 5000)


def flow_id(host: int, n: int) -> int:
    return (host + 1) * 100 + n + 1


# ---------------------------------------------------------------------------
# Global state and moves


Timer = Tuple[int, int, int]  # (host, flowID, retries so far)


class GlobalState(NamedTuple):
    conns: Tuple[Optional[ConnectionState], Optional[ConnectionState]]
    net: NetworkState
    timers: Tuple[Timer, ...]
    token: int
    cmd_pos: Tuple[int, int]
    migrations: Tuple[int, int]

    def addr(self, host: int) -> Address:
        return host_addr(host, self.migrations[host])

    def canonical(self) -> bytes:
        out = [struct.pack(">BBBBBH", self.token, *self.cmd_pos, *self.migrations, len(self.timers))]
        out.extend(struct.pack(">BIH", *t) for t in self.timers)
        for c in self.conns:
            if c is None:
                out.append(b"\x00")
            else:
                enc = c.canonical()
                out.append(b"\x01" + struct.pack(">H", len(enc)) + enc)
        out.append(self.net.canonical())
        return b"".join(out)


class Move(NamedTuple):
    kind: str  # "cmd", "migrate", "deliver", "ageout", "timeout"
    host: int
    addr: Address = UNBOUND
    msg: Optional[Message] = None
    decision: int = FaultDecision.DELIVER
    flow_id: int = 0

    def to_json(self):
        d = {"kind": self.kind, "host": self.host}
        if self.msg is not None:
            d.update(
                addr=str(self.addr), data=self.msg.data.hex(), sender=str(self.msg.sender),
                decision=FaultDecision(self.decision).name,
            )
        if self.flow_id:
            d["flow_id"] = self.flow_id
        return d

    @classmethod
    def from_json(cls, d) -> "Move":
        msg = None
        addr = UNBOUND
        decision = FaultDecision.DELIVER
        if "data" in d:
            addr = Address.parse(d["addr"])
            msg = Message(bytes.fromhex(d["data"]), Address.parse(d["sender"]))
            decision = FaultDecision[d["decision"]]
        return cls(d["kind"], d["host"], addr, msg, int(decision), d.get("flow_id", 0))


class Step(NamedTuple):
    state: GlobalState
    progress: bool
    log: Tuple[str, ...]


@lru_cache(maxsize=1 << 16)
def _decode(data: bytes) -> Packet:
    return codec.decode(data)


def initial_state(script: Script, cfg: CheckerConfig) -> GlobalState:
    net = NetworkState(loss_budget=cfg.loss_budget, dup_budget=cfg.dup_budget)
    for h in (0, 1):
        net = bind(net, script.names[h], host_addr(h, 0))
    listener = proto.listen((host_addr(1, 0),), cfg.nonces[1], cfg.initial_versions[1], implicit_ack=cfg.implicit_ack)
    return GlobalState((None, listener), net, (), 0, (0, 0), (0, 0))


# ---------------------------------------------------------------------------
# Enabled moves


def _cmd_enabled(g: GlobalState, host: int, cmd: Cmd) -> bool:
    conn = g.conns[host]
    if cmd.op == "connect":
        return conn is None
    if conn is None:
        return False
    if cmd.op == "addflow":
        return conn.peer_nonce is not None and bool(conn.peer_ilist) and any(f.kind == K.ESTABLISHED for f in conn.flows)
    if cmd.op == "ping":
        return cmd.arg < len(conn.flows) and conn.flows[cmd.arg].kind == K.ESTABLISHED
    raise ValueError(f"unknown command {cmd.op}")


def _migration_enabled(g: GlobalState, host: int, cfg: CheckerConfig) -> bool:
    if g.migrations[host] >= cfg.max_migrations:
        return False
    conn = g.conns[host]
    if conn is None or not conn.flows:
        return False
    peer = g.addr(1 - host)
    # Only move while we know where the peer is; this rules out simultaneous movement.
    return all(f.kind in MIGRATABLE and f.remote_addr == peer for f in conn.flows)


def _timer_hosts(g: GlobalState, cfg: CheckerConfig) -> Sequence[int]:
    armed = {t[0] for t in g.timers}
    if not cfg.fair_timeouts:
        return sorted(armed)
    for k in range(2):
        h = (g.token + k) % 2
        if h in armed:
            return (h,)
    return ()


def enabled_moves(g: GlobalState, script: Script, cfg: CheckerConfig) -> List[Move]:
    moves: List[Move] = []
    for h in (0, 1):
        cmds = script.commands[h]
        if g.cmd_pos[h] < len(cmds) and _cmd_enabled(g, h, cmds[g.cmd_pos[h]]):
            moves.append(Move("cmd", h))
    for h in (0, 1):
        if _migration_enabled(g, h, cfg):
            moves.append(Move("migrate", h))
    net = g.net
    for addr, msg in deliverable(net):
        owner = net.owner(addr)
        if owner is None:
            moves.append(Move("ageout", -1, addr, msg))
            continue
        h = script.names.index(owner)
        moves.append(Move("deliver", h, addr, msg, FaultDecision.DELIVER))
        if net.loss_budget > 0:
            moves.append(Move("deliver", h, addr, msg, FaultDecision.DROP))
        if net.dup_budget > 0:
            moves.append(Move("deliver", h, addr, msg, FaultDecision.DUPLICATE))
    if net.empty:
        for h in _timer_hosts(g, cfg):
            for t in g.timers:
                if t[0] == h:
                    moves.append(Move("timeout", h, flow_id=t[1]))
    return moves


# ---------------------------------------------------------------------------
# Applying moves


def _kinds(conn: Optional[ConnectionState]) -> str:
    if conn is None:
        return "-"
    return ",".join(f"{f.local_flow_id}:{f.kind.name}" for f in conn.flows) or "LISTEN"


def _apply_actions(g: GlobalState, host: int, actions: proto.Actions, log: Optional[List[str]], name: str):
    net = g.net
    timers = g.timers
    if actions.timers:
        table = {(t[0], t[1]): t[2] for t in timers}
        for t in actions.timers:
            if t.op == "set":
                table[(host, t.flow_id)] = 0
            else:
                table.pop((host, t.flow_id), None)
        timers = tuple(sorted((h, f, r) for (h, f), r in table.items()))
    for e in actions.emit:
        if log is not None:
            log.append(f"  {name} sends {e.packet.describe()} {e.src}>{e.dst}")
        if net.owner(e.dst) is None:
            # Addresses are never reused, so nothing can ever receive this.
            if log is not None:
                log.append(f"  ageout at {e.dst}")
            continue
        net = send(net, codec.encode(e.packet), e.src, e.dst)
    if log is not None:
        for ev in actions.app_events:
            log.append(f"  {name} app {type(ev).__name__} flow={ev.flow_id}")
        for d in actions.drops:
            log.append(f"  {name} ignores: {d}")
    progress = any(isinstance(ev, proto.PongReceived) for ev in actions.app_events)
    return net, timers, progress


def _set_conn(g: GlobalState, host: int, conn: ConnectionState) -> Tuple:
    return (conn, g.conns[1]) if host == 0 else (g.conns[0], conn)


def apply_move(g: GlobalState, move: Move, script: Script, cfg: CheckerConfig, trace: bool = True) -> Step:
    """Execute one move.  With ``trace`` off no log text is built (the search path)."""
    h = move.host
    log: Optional[List[str]] = [] if trace else None
    progress = False
    if move.kind == "ageout":
        if trace:
            log.append(f"ageout {_decode(move.msg.data).describe()} at {move.addr}")
        return Step(g._replace(net=take(g.net, move.addr, move.msg)), False, tuple(log or ()))

    name = script.names[h]
    conn = g.conns[h]
    before = _kinds(conn) if trace else ""

    if move.kind == "cmd":
        cmd = script.commands[h][g.cmd_pos[h]]
        if trace:
            log.append(f"{name} command {cmd.op}" + (f" {cmd.arg}" if cmd.op == "ping" else ""))
        n = len(conn.flows) if conn is not None else 0
        if cmd.op == "connect":
            ids = FlowIds(flow_id(h, n), cfg.nonces[h], cfg.initial_versions[h])
            conn, actions = proto.initiate_connection(g.addr(h), g.addr(1 - h), ids, implicit_ack=cfg.implicit_ack)
        elif cmd.op == "addflow":
            conn, actions = proto.add_flow(conn, g.addr(h), conn.peer_ilist[0], FlowIds(flow_id(h, n)))
        else:
            conn, actions = proto.transition(conn, proto.Ping(conn.flows[cmd.arg].local_flow_id))
        pos = (g.cmd_pos[0] + 1, g.cmd_pos[1]) if h == 0 else (g.cmd_pos[0], g.cmd_pos[1] + 1)
        g = g._replace(conns=_set_conn(g, h, conn), cmd_pos=pos)
        net, timers, progress = _apply_actions(g, h, actions, log, name)
        g = g._replace(net=net, timers=timers)

    elif move.kind == "migrate":
        old = g.addr(h)
        mig = (g.migrations[0] + 1, g.migrations[1]) if h == 0 else (g.migrations[0], g.migrations[1] + 1)
        g = g._replace(migrations=mig)
        new = g.addr(h)
        net = rebind(g.net, name, old, new)
        if trace:
            log.append(f"{name} migrates {old} -> {new}")
            for msg in net.mailbox(old):
                log.append(f"  ageout {_decode(msg.data).describe()} at {old}")
        net = _with_mailbox(net, old, ())
        g = g._replace(net=net)
        for f in conn.flows:
            conn, actions = proto.transition(conn, proto.Migrate(f.local_flow_id, new, (new,)))
            g = g._replace(conns=_set_conn(g, h, conn))
            net, timers, _ = _apply_actions(g, h, actions, log, name)
            g = g._replace(net=net, timers=timers)

    elif move.kind == "deliver":
        decision = move.decision
        pkt = _decode(move.msg.data)
        net = charge(g.net, decision)
        if decision != FaultDecision.DUPLICATE:
            net = take(net, move.addr, move.msg)
        g = g._replace(net=net)
        if decision == FaultDecision.DROP:
            if trace:
                log.append(f"lose {pkt.describe()} {move.msg.sender}>{move.addr}")
            return Step(g, True, tuple(log or ()))
        if trace:
            tag = "" if decision == FaultDecision.DELIVER else " [DUPLICATE]"
            log.append(f"{name} receives {pkt.describe()} {move.msg.sender}>{move.addr}{tag}")
        fresh = flow_id(h, len(conn.flows))
        conn, actions = proto.transition(conn, proto.PacketArrival(pkt, move.msg.sender, move.addr, fresh))
        g = g._replace(conns=_set_conn(g, h, conn))
        net, timers, progress = _apply_actions(g, h, actions, log, name)
        g = g._replace(net=net, timers=timers)
        progress = progress or decision == FaultDecision.DUPLICATE

    elif move.kind == "timeout":
        retries = next(t[2] for t in g.timers if t[0] == h and t[1] == move.flow_id)
        give_up = cfg.max_retries is not None and retries >= cfg.max_retries
        if trace:
            log.append(f"{name} timeout flow={move.flow_id}" + (" (give up)" if give_up else ""))
        conn, actions = proto.transition(conn, proto.TimerFire(move.flow_id, give_up))
        g = g._replace(conns=_set_conn(g, h, conn))
        net, timers, progress = _apply_actions(g, h, actions, log, name)
        if cfg.max_retries is not None and not give_up:
            timers = tuple(
                (th, tf, tr + 1) if (th, tf) == (h, move.flow_id) else (th, tf, tr) for th, tf, tr in timers
            )
        token = (h + 1) % 2 if cfg.fair_timeouts else 0
        g = g._replace(net=net, timers=timers, token=token)
    else:
        raise ValueError(f"unknown move {move.kind}")

    if trace:
        after = _kinds(g.conns[h])
        if after != before:
            log.append(f"  {name} {before} => {after}")
    return Step(g, progress, tuple(log or ()))


# ---------------------------------------------------------------------------
# End states


def end_state_problems(g: GlobalState, script: Script) -> List[str]:
    """Why ``g`` is not a valid end state (empty when it is)."""
    problems = []
    for h in (0, 1):
        if g.cmd_pos[h] < len(script.commands[h]):
            problems.append(f"{script.names[h]} has unissued commands")
    if not g.net.empty:
        problems.append("messages in flight")
    if g.timers:
        problems.append("timers armed")
    x, y = g.conns
    if x is None:
        return problems
    if len(x.flows) != len(y.flows):
        problems.append("flow count differs")
        return problems
    ys = {f.local_flow_id: f for f in y.flows}
    for fx in x.flows:
        fy = ys.get(fx.remote_flow_id)
        if fy is None or fy.remote_flow_id != fx.local_flow_id:
            problems.append(f"flow {fx.local_flow_id} has no matching peer flow")
            continue
        if fx.kind == K.FAILED and fy.kind == K.FAILED:
            continue
        if fx.kind != K.ESTABLISHED or fy.kind != K.ESTABLISHED:
            problems.append(f"flow {fx.local_flow_id}: {fx.kind.name}/{fy.kind.name}")
            continue
        if fx.local_addr != fy.remote_addr or fy.local_addr != fx.remote_addr:
            problems.append(f"flow {fx.local_flow_id}: address views disagree")
    if x.peer_ilist != y.local_ilist or y.peer_ilist != x.local_ilist:
        problems.append("interface lists disagree")
    return problems


def concurrent_migration(g: GlobalState) -> bool:
    """Both ends of some flow are migrating at once, one of them with its own RSYN answered-but-pending."""
    x, y = g.conns
    if x is None:
        return False
    ys = {f.local_flow_id: f for f in y.flows}
    for fx in x.flows:
        fy = ys.get(fx.remote_flow_id)
        if fy is None:
            continue
        kinds = {fx.kind, fy.kind}
        if kinds == {K.RSYN_SENT_RCVD} or kinds == {K.RSYN_SENT_RCVD, K.RSYN_SENT}:
            return True
    return False


# ---------------------------------------------------------------------------
# Verdicts


@dataclass
class Stats:
    states: int = 0
    transitions: int = 0
    depth: int = 0
    end_states: int = 0
    concurrent_migration_states: int = 0
    elapsed: float = 0.0
    peak_rss_mb: float = 0.0


@dataclass
class Pass:
    stats: Stats
    max_migrations: int

    ok = True

    def summary(self) -> str:
        s = self.stats
        return (
            f"PASS states={s.states} transitions={s.transitions} depth={s.depth} "
            f"max_migrations={self.max_migrations} (cap enforced) elapsed={s.elapsed:.1f}s peak_rss={s.peak_rss_mb:.0f}MB"
        )


@dataclass
class DeadlockTrace:
    moves: List[Move]
    log: List[str]
    problems: List[str]
    stats: Stats

    ok = False

    def summary(self) -> str:
        return f"DEADLOCK after {len(self.moves)} moves: {'; '.join(self.problems)}"


@dataclass
class NonProgressCycleTrace:
    moves: List[Move]  # prefix followed by the cycle
    cycle_start: int
    log: List[str]
    stats: Stats

    ok = False

    def summary(self) -> str:
        return (
            f"NON-PROGRESS CYCLE: {self.cycle_start} move prefix, "
            f"{len(self.moves) - self.cycle_start} move cycle"
        )


Verdict = Union[Pass, DeadlockTrace, NonProgressCycleTrace]


class CheckerError(Exception):
    pass


class MemoryBudgetExceeded(CheckerError):
    def __init__(self, stats: Stats, frontier: int):
        super().__init__(f"memory budget exceeded after {stats.states} states (frontier {frontier})")
        self.stats = stats
        self.frontier = frontier


class TraceDiverged(CheckerError):
    pass


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024


# ---------------------------------------------------------------------------
# Exploration


@dataclass
class _Graph:
    """BFS tree plus non-progress edges, stored compactly."""

    parent: array = field(default_factory=lambda: array("i"))
    parent_move: array = field(default_factory=lambda: array("i"))
    depth: array = field(default_factory=lambda: array("H"))
    edge_start: array = field(default_factory=lambda: array("q"))
    edge_to: array = field(default_factory=lambda: array("i"))
    edge_move: array = field(default_factory=lambda: array("H"))


class _Explorer:
    def __init__(self, script: Script, cfg: CheckerConfig, keep_edges: bool):
        self.script, self.cfg, self.keep_edges = script, cfg, keep_edges
        self.stats = Stats()
        self.graph = _Graph()
        self.init = initial_state(script, cfg)

    def run(self):
        """Breadth-first search.  Returns the index of the first deadlock state, or None."""
        t0 = time.monotonic()
        g0 = self.graph
        index: Dict[bytes, int] = {self.init.canonical(): 0}
        g0.parent.append(-1)
        g0.parent_move.append(-1)
        g0.depth.append(0)
        queue = deque([(0, self.init)])
        deadlock = None
        script, cfg = self.script, self.cfg
        while queue:
            i, g = queue.popleft()
            if self.keep_edges:
                g0.edge_start.append(len(g0.edge_to))
            moves = enabled_moves(g, script, cfg)
            if concurrent_migration(g):
                self.stats.concurrent_migration_states += 1
            if not moves:
                if end_state_problems(g, script):
                    if deadlock is None:
                        deadlock = i
                        if not self.keep_edges:
                            break
                else:
                    self.stats.end_states += 1
            for m_idx, move in enumerate(moves):
                step = apply_move(g, move, script, cfg, trace=False)
                self.stats.transitions += 1
                key = step.state.canonical()
                j = index.get(key)
                if j is None:
                    j = len(index)
                    index[key] = j
                    g0.parent.append(i)
                    g0.parent_move.append(m_idx)
                    d = g0.depth[i] + 1
                    g0.depth.append(d)
                    queue.append((j, step.state))
                    if cfg.max_states is not None and j >= cfg.max_states:
                        raise CheckerError(f"state cap {cfg.max_states} reached")
                if self.keep_edges and not step.progress:
                    g0.edge_to.append(j)
                    g0.edge_move.append(m_idx)
            if i % 4096 == 0 and _peak_rss_mb() * (1 << 20) > cfg.memory_budget:
                self.stats.states = len(index)
                raise MemoryBudgetExceeded(self.stats, len(queue))
        if self.keep_edges:
            g0.edge_start.append(len(g0.edge_to))
        self.stats.states = len(index)
        self.stats.depth = max(g0.depth) if len(g0.depth) else 0
        self.stats.elapsed = time.monotonic() - t0
        self.stats.peak_rss_mb = _peak_rss_mb()
        return deadlock

    # -- traces ------------------------------------------------------------

    def path_to(self, i: int) -> List[int]:
        """Move indices along the BFS tree from the initial state to state ``i``."""
        out = []
        while i > 0:
            out.append(self.graph.parent_move[i])
            i = self.graph.parent[i]
        out.reverse()
        return out

    def materialize(self, move_indices: Sequence[int]) -> Tuple[GlobalState, List[Move], List[str]]:
        g = self.init
        moves, log = [], []
        for k in move_indices:
            move = enabled_moves(g, self.script, self.cfg)[k]
            step = apply_move(g, move, self.script, self.cfg)
            moves.append(move)
            log.extend(step.log)
            g = step.state
        return g, moves, log

    def successors(self, i: int):
        g0 = self.graph
        for e in range(g0.edge_start[i], g0.edge_start[i + 1]):
            yield g0.edge_to[e], g0.edge_move[e]

    def find_cycle(self):
        """Locate a cycle of non-progress edges; returns (entry state, move indices around it)."""
        n = len(self.graph.parent)
        comp = _tarjan(n, self.successors)
        best = None
        for root, members in comp.items():
            if len(members) > 1 or any(j == root for j, _ in self.successors(root)):
                entry = min(members)
                if best is None or entry < best[0]:
                    best = (entry, members)
        if best is None:
            return None
        entry, members = best
        # Shortest way around the cycle inside the component.
        prev = {entry: None}
        queue = deque([entry])
        while queue:
            u = queue.popleft()
            for v, m in self.successors(u):
                if v not in members:
                    continue
                if v == entry:
                    path = [m]
                    while prev[u] is not None:
                        u, mm = prev[u]
                        path.append(mm)
                    path.reverse()
                    return entry, path
                if v not in prev:
                    prev[v] = (u, m)
                    queue.append(v)
        raise AssertionError("component without a cycle")


def _tarjan(n: int, successors) -> Dict[int, set]:
    """Iterative Tarjan SCC.  Returns components keyed by their root."""
    index = array("i", [-1]) * n
    low = array("i", [0]) * n
    on_stack = bytearray(n)
    stack: List[int] = []
    comps: Dict[int, set] = {}
    counter = 0
    for start in range(n):
        if index[start] != -1:
            continue
        work = [(start, iter(list(successors(start))))]
        index[start] = low[start] = counter
        counter += 1
        stack.append(start)
        on_stack[start] = 1
        while work:
            v, it = work[-1]
            advanced = False
            for w, _ in it:
                if index[w] == -1:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = 1
                    work.append((w, iter(list(successors(w)))))
                    advanced = True
                    break
                if on_stack[w]:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                members = set()
                while True:
                    w = stack.pop()
                    on_stack[w] = 0
                    members.add(w)
                    if w == v:
                        break
                if len(members) > 1 or any(j == v for j, _ in successors(v)):
                    comps[v] = members
    return comps


def check_safety(script: Script = CONNECT_PING, cfg: CheckerConfig = CheckerConfig()) -> Verdict:
    ex = _Explorer(script, cfg, keep_edges=False)
    dead = ex.run()
    if dead is None:
        return Pass(ex.stats, cfg.max_migrations)
    g, moves, log = ex.materialize(ex.path_to(dead))
    return DeadlockTrace(moves, log, end_state_problems(g, script), ex.stats)


def check_liveness(script: Script = CONNECT_PING, cfg: CheckerConfig = CheckerConfig()) -> Verdict:
    ex = _Explorer(script, cfg, keep_edges=True)
    ex.run()
    found = ex.find_cycle()
    if found is None:
        return Pass(ex.stats, cfg.max_migrations)
    entry, cycle = found
    prefix = ex.path_to(entry)
    _, moves, log = ex.materialize(prefix + cycle)
    log.insert(_log_offset(ex, prefix), "-- cycle starts --")
    return NonProgressCycleTrace(moves, len(prefix), log, ex.stats)


def _log_offset(ex: _Explorer, prefix: Sequence[int]) -> int:
    return len(ex.materialize(prefix)[2])


def check(script: Script = CONNECT_PING, cfg: CheckerConfig = CheckerConfig(), liveness: bool = True) -> Verdict:
    """Safety first, then (optionally) liveness."""
    verdict = check_safety(script, cfg)
    if not verdict.ok or not liveness:
        return verdict
    return check_liveness(script, cfg)


# ---------------------------------------------------------------------------
# Replay


@dataclass
class Replay:
    state: GlobalState
    log: List[str]
    states: List[GlobalState]


def replay(moves: Sequence[Move], script: Script, cfg: CheckerConfig) -> Replay:
    """Re-execute a move sequence from the initial state, checking each move is enabled."""
    g = initial_state(script, cfg)
    states, log = [g], []
    for n, move in enumerate(moves):
        if move not in enabled_moves(g, script, cfg):
            raise TraceDiverged(f"move {n} ({move.kind} by host {move.host}) is not enabled")
        step = apply_move(g, move, script, cfg)
        log.extend(step.log)
        g = step.state
        states.append(g)
    return Replay(g, log, states)


def confirm(verdict: Verdict, script: Script, cfg: CheckerConfig) -> bool:
    """Replay a failing verdict and check the violation recurs."""
    if isinstance(verdict, Pass):
        return True
    r = replay(verdict.moves, script, cfg)
    if isinstance(verdict, DeadlockTrace):
        return not enabled_moves(r.state, script, cfg) and bool(end_state_problems(r.state, script))
    return r.states[verdict.cycle_start].canonical() == r.state.canonical()


# ---------------------------------------------------------------------------
# Trace files


def dump_trace(verdict: Verdict, script: Script, cfg: CheckerConfig) -> str:
    doc = {
        "verdict": type(verdict).__name__,
        "script": {"names": list(script.names), "commands": [[list(c) for c in cmds] for cmds in script.commands]},
        "config": {
            "max_migrations": cfg.max_migrations, "loss_budget": cfg.loss_budget, "dup_budget": cfg.dup_budget,
            "fair_timeouts": cfg.fair_timeouts, "implicit_ack": cfg.implicit_ack, "max_retries": cfg.max_retries,
            "initial_versions": list(cfg.initial_versions), "nonces": list(cfg.nonces),
        },
        "moves": [m.to_json() for m in getattr(verdict, "moves", [])],
        "cycle_start": getattr(verdict, "cycle_start", None),
    }
    return json.dumps(doc, indent=1)


def load_trace(text: str):
    doc = json.loads(text)
    s = doc["script"]
    script = Script(tuple(s["names"]), tuple(tuple(Cmd(*c) for c in cmds) for cmds in s["commands"]))
    c = doc["config"]
    cfg = CheckerConfig(
        max_migrations=c["max_migrations"], loss_budget=c["loss_budget"], dup_budget=c["dup_budget"],
        fair_timeouts=c["fair_timeouts"], implicit_ack=c["implicit_ack"], max_retries=c["max_retries"],
        initial_versions=tuple(c["initial_versions"]), nonces=tuple(c["nonces"]),
    )
    moves = [Move.from_json(m) for m in doc["moves"]]
    return doc["verdict"], script, cfg, moves, doc["cycle_start"]
