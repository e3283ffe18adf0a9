"""Simulated network.

Two layers live here.  :class:`NetworkState` is an immutable mailbox model
used by the model checker: every address owns a multiset of in-flight
messages, any of which may be delivered next, and loss or duplication draw on
finite budgets.  :class:`Simulator` is the scenario-mode discrete-event
engine that drives real :class:`~flowmove.runtime.Endpoint` objects over
simulated time with seeded latency jitter.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

from . import codec, proto
from .middlebox import Forward, RedirectionCache
from .packet import Address, PacketType
from .runtime import Endpoint, EndpointConfig, EndpointError, RetransmitPolicy


class FaultDecision(enum.IntEnum):
    DELIVER = 0
    DROP = 1
    DUPLICATE = 2


class NetError(Exception):
    pass


class BudgetExhausted(NetError):
    pass


class EmptyNetwork(NetError):
    pass


class NotBound(NetError):
    pass


class Message(NamedTuple):
    data: bytes
    sender: Address


Mailboxes = Tuple[Tuple[Address, Tuple[Message, ...]], ...]


@dataclass(frozen=True)
class NetworkState:
    """Per-address multisets of in-flight messages plus fault budgets.

    Mailboxes are kept sorted, so two states holding the same messages in a
    different arrival order are equal.
    """

    mailboxes: Mailboxes = ()
    loss_budget: int = 0
    dup_budget: int = 0
    bindings: Tuple[Tuple[Address, str], ...] = ()

    def mailbox(self, addr: Address) -> Tuple[Message, ...]:
        for a, msgs in self.mailboxes:
            if a == addr:
                return msgs
        return ()

    @property
    def empty(self) -> bool:
        return not self.mailboxes

    def owner(self, addr: Address) -> Optional[str]:
        for a, host in self.bindings:
            if a == addr:
                return host
        return None

    def canonical(self) -> bytes:
        out = [struct.pack(">HHH", self.loss_budget, self.dup_budget, len(self.mailboxes))]
        for addr, msgs in self.mailboxes:
            out.append(struct.pack(">IHH", addr.host, addr.port, len(msgs)))
            for m in msgs:
                out.append(struct.pack(">IHH", m.sender.host, m.sender.port, len(m.data)) + m.data)
        out.append(struct.pack(">H", len(self.bindings)))
        for addr, host in self.bindings:
            name = host.encode()
            out.append(struct.pack(">IHB", addr.host, addr.port, len(name)) + name)
        return b"".join(out)


def _with_mailbox(net: NetworkState, addr: Address, msgs: Tuple[Message, ...]) -> NetworkState:
    boxes = dict(net.mailboxes)
    if msgs:
        boxes[addr] = tuple(sorted(msgs))
    else:
        boxes.pop(addr, None)
    return replace(net, mailboxes=tuple(sorted(boxes.items())))


def charge(net: NetworkState, decision: FaultDecision) -> NetworkState:
    """Spend the budget a fault decision needs."""
    if decision == FaultDecision.DROP:
        if net.loss_budget <= 0:
            raise BudgetExhausted("loss budget exhausted")
        return replace(net, loss_budget=net.loss_budget - 1)
    if decision == FaultDecision.DUPLICATE:
        if net.dup_budget <= 0:
            raise BudgetExhausted("duplication budget exhausted")
        return replace(net, dup_budget=net.dup_budget - 1)
    return net


def send(
    net: NetworkState, data: bytes, src: Address, dst: Address, decision: FaultDecision = FaultDecision.DELIVER
) -> NetworkState:
    net = charge(net, decision)
    copies = {FaultDecision.DELIVER: 1, FaultDecision.DROP: 0, FaultDecision.DUPLICATE: 2}[decision]
    if not copies:
        return net
    return _with_mailbox(net, dst, net.mailbox(dst) + (Message(data, src),) * copies)


def deliverable(net: NetworkState) -> List[Tuple[Address, Message]]:
    """Distinct (address, message) choices, in canonical order."""
    out = []
    for addr, msgs in net.mailboxes:
        prev = None
        for m in msgs:
            if m != prev:
                out.append((addr, m))
            prev = m
    return out


def take(net: NetworkState, addr: Address, msg: Message) -> NetworkState:
    """Remove one copy of ``msg`` from ``addr``'s mailbox."""
    msgs = list(net.mailbox(addr))
    try:
        msgs.remove(msg)
    except ValueError:
        raise NetError(f"no such message at {addr}") from None
    return _with_mailbox(net, addr, tuple(msgs))


def deliver_any(net: NetworkState, choice: int = 0) -> Tuple[Address, Message, NetworkState]:
    """Remove the ``choice``-th deliverable message; every index is a legal outcome."""
    options = deliverable(net)
    if not options:
        raise EmptyNetwork("no message in flight")
    addr, msg = options[choice]
    return addr, msg, take(net, addr, msg)


def bind(net: NetworkState, host: str, addr: Address) -> NetworkState:
    binds = dict(net.bindings)
    binds[addr] = host
    return replace(net, bindings=tuple(sorted(binds.items())))


def rebind(net: NetworkState, host: str, old: Address, new: Address) -> NetworkState:
    """Move ``host`` from ``old`` to ``new``; messages still queued at ``old`` stay there."""
    if net.owner(old) != host:
        raise NotBound(f"{host} is not bound to {old}")
    binds = dict(net.bindings)
    del binds[old]
    binds[new] = host
    return replace(net, bindings=tuple(sorted(binds.items())))


# ---------------------------------------------------------------------------
# Scenario mode


US = 1_000_000


def fmt_time(us: int) -> str:
    return f"{us / 1000:.3f}"


class _Handle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class Host:
    name: str
    endpoint: Endpoint
    addrs: List[Address]
    flows: List[int] = field(default_factory=list)
    events: List[Tuple[int, object]] = field(default_factory=list)

    def flow_index(self, fid: int) -> int:
        if fid not in self.flows:
            self.flows.append(fid)
        return self.flows.index(fid)


@dataclass
class _Fault:
    ptype: Optional[PacketType]
    remaining: int


class _HostTransport:
    def __init__(self, sim: "Simulator", host: str):
        self.sim, self.host = sim, host

    def send(self, data, src, dst):
        self.sim.transmit(self.host, data, src, dst)

    def bind(self, addr):
        self.sim.bind(self.host, addr)

    def unbind(self, addr):
        self.sim.unbind(self.host, addr)

    def register_redirect(self, middlebox, old, new):
        self.sim.register_redirect(self.host, middlebox, old, new)


class _SimClock:
    def __init__(self, sim: "Simulator"):
        self.sim = sim

    def now(self) -> float:
        return self.sim.now / US

    def call_later(self, delay, callback):
        return self.sim.schedule(round(delay * US), callback)


class Simulator:
    """Deterministic discrete-event run of endpoints over a lossy, reordering network."""

    def __init__(
        self,
        seed: int = 0,
        latency_us: int = 10_000,
        jitter_us: int = 5_000,
        age_out_us: int = 1_000_000,
        retransmit: Optional[RetransmitPolicy] = None,
        implicit_ack: bool = False,
    ):
        self.seed = seed
        self.rng = random.Random(seed)
        self.latency_us = latency_us
        self.jitter_us = jitter_us
        self.age_out_us = age_out_us
        self.retransmit = retransmit or RetransmitPolicy()
        self.implicit_ack = implicit_ack
        self.now = 0
        self.trace: List[str] = []
        self.hosts: Dict[str, Host] = {}
        self.middleboxes: Dict[str, Tuple[Address, RedirectionCache]] = {}
        self.bindings: Dict[Address, str] = {}
        self.drop_faults: List[_Fault] = []
        self.dup_faults: List[_Fault] = []
        self._queue: list = []
        self._seq = itertools.count()
        self._parked: Dict[Address, Dict[int, Tuple[bytes, Address]]] = {}
        self._msg_ids = itertools.count(1)

    # -- bookkeeping -------------------------------------------------------

    def log(self, kind: str, details: str) -> None:
        self.trace.append(f"{fmt_time(self.now)} {kind} {details}")

    def schedule(self, delay_us: int, callback: Callable[[], None]) -> _Handle:
        handle = _Handle()
        heapq.heappush(self._queue, (self.now + max(0, delay_us), next(self._seq), callback, handle))
        return handle

    def run_for(self, duration_us: int) -> None:
        self.run_until(self.now + duration_us)

    def run_until(self, end_us: int) -> None:
        while self._queue and self._queue[0][0] <= end_us:
            t, _, callback, handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            self.now = t
            callback()
        self.now = max(self.now, end_us)

    # -- topology ------------------------------------------------------------

    def add_host(self, name: str, addrs, seed: Optional[int] = None, **config) -> Host:
        if name in self.hosts or name in self.middleboxes:
            raise ValueError(f"duplicate name {name}")
        addrs = list(addrs)
        if seed is None:
            seed = self.seed * 1000 + len(self.hosts) + 1
        cfg = EndpointConfig(
            ilist=tuple(addrs), seed=seed, retransmit=self.retransmit, implicit_ack=self.implicit_ack, **config
        )
        host = Host(name, None, addrs)
        host.endpoint = Endpoint(cfg, _HostTransport(self, name), _SimClock(self), lambda ev: self._app(host, ev))
        self.hosts[name] = host
        for a in addrs:
            self.bind(name, a)
        return host

    def add_middlebox(self, name: str, addr: Address, ttl: float = 5.0) -> None:
        if name in self.hosts or name in self.middleboxes:
            raise ValueError(f"duplicate name {name}")
        self.middleboxes[name] = (addr, RedirectionCache(ttl))

    def bind(self, host: str, addr: Address) -> None:
        self.bindings[addr] = host
        self.log("bind", f"{host} {addr}")
        self._flush(addr)

    def unbind(self, host: str, addr: Address) -> None:
        if self.bindings.get(addr) != host:
            raise NotBound(f"{host} is not bound to {addr}")
        del self.bindings[addr]
        self.log("unbind", f"{host} {addr}")

    def register_redirect(self, host: str, mbox_addr: Address, old: Address, new: Address) -> None:
        for name, (addr, cache) in self.middleboxes.items():
            if addr == mbox_addr:
                cache.register(old, new, self.now / US)
                self.log("register", f"{name} {old}->{new} by {host}")
                self._flush(old)
                return
        self.log("register", f"ignored {old}->{new} by {host}: no middlebox at {mbox_addr}")

    # -- faults --------------------------------------------------------------

    def drop_next(self, ptype: Optional[PacketType] = None, count: int = 1) -> None:
        self.drop_faults.append(_Fault(ptype, count))

    def dup_next(self, ptype: Optional[PacketType] = None, count: int = 1) -> None:
        self.dup_faults.append(_Fault(ptype, count))

    @staticmethod
    def _consume(faults: List[_Fault], ptype: Optional[PacketType]) -> bool:
        for f in faults:
            if f.remaining > 0 and (f.ptype is None or f.ptype == ptype):
                f.remaining -= 1
                if f.remaining == 0:
                    faults.remove(f)
                return True
        return False

    # -- packet path ---------------------------------------------------------

    def transmit(self, host: str, data: bytes, src: Address, dst: Address) -> None:
        desc, ptype = _describe(data)
        self.log("send", f"{host} {src}>{dst} {desc}")
        if self._consume(self.drop_faults, ptype):
            self.log("drop", f"{src}>{dst} {desc}")
            return
        copies = 1
        if self._consume(self.dup_faults, ptype):
            self.log("dup", f"{src}>{dst} {desc}")
            copies = 2
        for _ in range(copies):
            self._in_flight(data, src, dst)

    def _in_flight(self, data: bytes, src: Address, dst: Address) -> None:
        delay = self.latency_us + (self.rng.randrange(self.jitter_us + 1) if self.jitter_us else 0)
        self.schedule(delay, lambda: self._arrive(data, src, dst))

    def _claimant(self, addr: Address):
        if addr in self.bindings:
            return self.bindings[addr]
        for name, (_, cache) in self.middleboxes.items():
            if cache.claims(addr, self.now / US):
                return name
        return None

    def _arrive(self, data: bytes, src: Address, dst: Address) -> None:
        who = self._claimant(dst)
        if who is None:
            mid = next(self._msg_ids)
            self._parked.setdefault(dst, {})[mid] = (data, src)
            self.schedule(self.age_out_us, lambda: self._age_out(dst, mid))
            return
        desc, _ = _describe(data)
        if who in self.middleboxes:
            _, cache = self.middleboxes[who]
            verdict = cache.handle(data, dst, self.now / US)
            if isinstance(verdict, Forward):
                self.log("forward", f"{who} {src}>{dst}->{verdict.to} {desc}")
                self._in_flight(data, src, verdict.to)
            else:
                self.log("mbdrop", f"{who} {src}>{dst} {desc}: {verdict.reason}")
            return
        host = self.hosts[who]
        self.log("recv", f"{who} {src}>{dst} {desc}")
        ep = host.endpoint
        before = sum(ep.drops.values())
        ep.on_packet(data, src, dst)
        if sum(ep.drops.values()) > before:
            self.log("ignore", f"{who} {ep.last_drop}")

    def _flush(self, addr: Address) -> None:
        parked = self._parked.pop(addr, None)
        if parked:
            for data, src in parked.values():
                self._arrive(data, src, addr)

    def _age_out(self, addr: Address, mid: int) -> None:
        parked = self._parked.get(addr)
        if parked and mid in parked:
            data, src = parked.pop(mid)
            if not parked:
                del self._parked[addr]
            self.log("ageout", f"{src}>{addr} {_describe(data)[0]}")

    # -- application events --------------------------------------------------

    def _app(self, host: Host, ev) -> None:
        fid = ev.flow_id
        idx = host.flow_index(fid)
        host.events.append((self.now, ev))
        name = type(ev).__name__
        extra = ""
        if isinstance(ev, proto.Migrated):
            extra = f" {ev.local_addr}"
        elif isinstance(ev, proto.PeerMigrated):
            extra = f" {ev.remote_addr}"
        self.log("app", f"{host.name} flow{idx} {name}{extra}")

    # -- commands --------------------------------------------------------------

    def connect(self, a: str, b: str, local: Optional[Address] = None, remote: Optional[Address] = None) -> None:
        ha, hb = self.hosts[a], self.hosts[b]
        if hb.endpoint.conn is None:
            hb.endpoint.listen()
        local = local or ha.addrs[0]
        remote = remote or hb.addrs[0]
        self.log("cmd", f"connect {a} {local} -> {b} {remote}")
        fid = ha.endpoint.connect(local, remote)
        ha.flow_index(fid)

    def add_flow(self, host: str, local: Address, remote: Address) -> None:
        h = self.hosts[host]
        self.log("cmd", f"addflow {host} {local} -> {remote}")
        try:
            fid = h.endpoint.add_flow(local, remote)
        except proto.ProtocolError as exc:
            self.log("error", f"addflow {host}: {exc}")
            return
        h.flow_index(fid)

    def migrate(self, host: str, old: Address, new: Address, ilist=None) -> None:
        h = self.hosts[host]
        self.log("cmd", f"migrate {host} {old} -> {new}")
        try:
            h.endpoint.migrate_interface(old, new, tuple(ilist) if ilist else None)
        except Exception as exc:  # surfaced in the trace, scenario continues
            self.log("error", f"migrate {host}: {exc}")
            return
        h.addrs = [new if a == old else a for a in h.addrs]

    def ping(self, host: str, flow: int = 0) -> Optional[int]:
        h = self.hosts[host]
        self.log("cmd", f"ping {host} flow{flow}")
        try:
            fid = h.flows[flow]
            return h.endpoint.ping(fid)
        except (IndexError, EndpointError) as exc:
            self.log("error", f"ping {host} flow{flow}: {type(exc).__name__} {exc}")
            return None

    # -- queries ---------------------------------------------------------------

    def flow_state(self, host: str, flow: int = 0) -> Optional[proto.FlowState]:
        h = self.hosts[host]
        if flow >= len(h.flows):
            return None
        return h.endpoint.flow(h.flows[flow])

    def app_events(self, host: str, flow: Optional[int] = None, kind=None):
        h = self.hosts[host]
        out = []
        for t, ev in h.events:
            if flow is not None and h.flow_index(ev.flow_id) != flow:
                continue
            if kind is not None and not isinstance(ev, kind):
                continue
            out.append((t, ev))
        return out

    def count(self, kind: str, host: Optional[str] = None, ptype: Optional[str] = None) -> int:
        """Count trace lines of a kind, optionally for one host and packet type."""
        n = 0
        for line in self.trace:
            parts = line.split(" ")
            if parts[1] != kind:
                continue
            if host is not None and parts[2] != host:
                continue
            if ptype is not None and ptype not in parts[3:5]:
                continue
            n += 1
        return n


def _describe(data: bytes):
    try:
        p = codec.decode(data)
    except codec.DecodeError as exc:
        return f"<undecodable {len(data)}B: {exc}>", None
    return p.describe(), p.ptype
