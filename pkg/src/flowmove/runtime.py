"""Endpoint driver: binds a proto-core connection to a transport and a clock.

The endpoint owns retransmission.  proto-core only says "arm" or "cancel" a
flow's timer; the endpoint counts retries, applies backoff, and tells the
state machine to give up once the budget is spent.
"""

from __future__ import annotations

import logging
import random
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Tuple

from . import codec, proto
from .packet import Address, IList
from .proto import ConnectionState, FlowIds, K, PacketArrival

log = logging.getLogger(__name__)


class Transport(Protocol):
    def send(self, data: bytes, src: Address, dst: Address) -> None: ...

    def bind(self, addr: Address) -> None: ...

    def unbind(self, addr: Address) -> None: ...

    def register_redirect(self, middlebox: Address, old: Address, new: Address) -> None: ...


class TimerHandle(Protocol):
    def cancel(self) -> None: ...


class Scheduler(Protocol):
    def now(self) -> float: ...

    def call_later(self, delay: float, callback: Callable[[], None]) -> TimerHandle: ...


@dataclass(frozen=True)
class RetransmitPolicy:
    base_timeout: float = 0.2
    backoff: float = 2.0
    max_retries: int = 8

    def __post_init__(self):
        if self.max_retries < 1:
            raise ValueError("max_retries must be at least 1")
        if self.base_timeout <= 0:
            raise ValueError("base_timeout must be positive")

    def delay(self, retry: int) -> float:
        return self.base_timeout * self.backoff**retry


@dataclass
class EndpointConfig:
    ilist: IList = ()
    seed: int = 0
    retransmit: RetransmitPolicy = field(default_factory=RetransmitPolicy)
    middlebox_notify: Optional[Address] = None
    # Delay between an interface change and the RSYN it triggers.
    migration_delay: float = 0.0
    implicit_ack: bool = False
    policy: Optional[proto.Policy] = None


class EndpointError(Exception):
    pass


class NoFlowsOnInterface(EndpointError):
    pass


class FlowNotEstablished(EndpointError):
    pass


class Allocator:
    """Seeded source of flowIDs, nonces and initial versions."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)
        self._used = set()

    def flow_id(self) -> int:
        while True:
            fid = self._rng.randint(1, 0xFFFFFFFF)
            if fid not in self._used:
                self._used.add(fid)
                return fid

    def nonce(self) -> int:
        return self._rng.getrandbits(64)

    def version(self) -> int:
        return self._rng.getrandbits(32)


@dataclass
class _Timer:
    handle: TimerHandle
    retries: int


_TICKET = struct.Struct(">Q")


class Endpoint:
    """One host's side of a single connection."""

    def __init__(
        self,
        config: EndpointConfig,
        transport: Transport,
        scheduler: Scheduler,
        on_event: Optional[Callable[[proto.AppEvent], None]] = None,
    ):
        self.config = config
        self.transport = transport
        self.sched = scheduler
        self.on_event = on_event
        self.alloc = Allocator(config.seed)
        self.conn: Optional[ConnectionState] = None
        self.drops: Counter = Counter()
        self.last_drop = ""
        self.sent: Counter = Counter()
        self.rtts: Dict[int, float] = {}
        self._timers: Dict[int, _Timer] = {}
        self._pings: Dict[int, float] = {}
        self._next_ticket = 1

    # -- setup -----------------------------------------------------------

    def listen(self) -> None:
        self.conn = proto.listen(
            self.config.ilist, self.alloc.nonce(), self.alloc.version(),
            self.config.policy, self.config.implicit_ack,
        )

    def connect(self, local: Address, remote: Address) -> int:
        ids = FlowIds(self.alloc.flow_id(), self.alloc.nonce(), self.alloc.version())
        self.conn, actions = proto.initiate_connection(
            local, remote, ids, self.config.ilist or (local,), self.config.implicit_ack
        )
        self._apply(actions)
        return ids.flow_id

    def add_flow(self, local: Address, remote_hint: Address) -> int:
        if self.conn is None:
            raise proto.NoEstablishedConnection("no connection")
        fid = self.alloc.flow_id()
        self.conn, actions = proto.add_flow(self.conn, local, remote_hint, FlowIds(fid))
        self._apply(actions)
        return fid

    # -- inputs ----------------------------------------------------------

    def on_packet(self, data: bytes, src: Address, dst: Address = proto.UNBOUND) -> List[proto.AppEvent]:
        try:
            pkt = codec.decode(data)
        except codec.DecodeError as exc:
            self._drop("decode", str(exc))
            return []
        if self.conn is None:
            self._drop("protocol", "not listening")
            return []
        fresh = 0
        if proto.demux(self.conn.flow_table, pkt) is proto.LISTENER:
            fresh = self.alloc.flow_id()
        self.conn, actions = proto.transition(self.conn, PacketArrival(pkt, src, dst, fresh))
        return self._apply(actions)

    def on_timer(self, flow_id: int) -> List[proto.AppEvent]:
        timer = self._timers.get(flow_id)
        if timer is None or self.conn is None:
            return []
        give_up = timer.retries >= self.config.retransmit.max_retries
        self.conn, actions = proto.transition(self.conn, proto.TimerFire(flow_id, give_up))
        if give_up or any(t.op == "cancel" for t in actions.timers):
            return self._apply(actions)
        timer.retries += 1
        self._arm(flow_id, timer.retries)
        return self._apply(actions)

    # -- commands --------------------------------------------------------

    def migrate_interface(self, old: Address, new: Address, new_ilist: Optional[IList] = None) -> List[int]:
        """Move every flow leaving from ``old`` to ``new``; returns their flowIDs."""
        if self.conn is None:
            raise NoFlowsOnInterface(f"no flows on {old}")
        flows = [f.local_flow_id for f in proto.flows_on(self.conn, old)]
        if not flows:
            raise NoFlowsOnInterface(f"no flows on {old}")
        if new_ilist is None:
            new_ilist = tuple(new if a == old else a for a in self.conn.local_ilist)
            if new not in new_ilist:
                new_ilist = (new,) + new_ilist
        if new != old:
            self.transport.bind(new)
            if old not in new_ilist:
                self.transport.unbind(old)
            if self.config.middlebox_notify is not None:
                self.transport.register_redirect(self.config.middlebox_notify, old, new)

        def issue():
            for fid in flows:
                self.conn, actions = proto.transition(self.conn, proto.Migrate(fid, new, new_ilist))
                self._apply(actions)

        if self.config.migration_delay > 0:
            self.sched.call_later(self.config.migration_delay, issue)
        else:
            issue()
        return flows

    def ping(self, flow_id: Optional[int] = None) -> int:
        """Send a ping and return a ticket; :meth:`rtt` reports its round trip once answered."""
        f = self._flow(flow_id)
        if f is None or f.kind != K.ESTABLISHED:
            raise FlowNotEstablished(f"flow {flow_id} is not established")
        ticket = self._next_ticket
        self._next_ticket += 1
        self._pings[ticket] = self.sched.now()
        self.conn, actions = proto.transition(self.conn, proto.Ping(f.local_flow_id, _TICKET.pack(ticket)))
        self._apply(actions)
        return ticket

    def rtt(self, ticket: int) -> Optional[float]:
        return self.rtts.get(ticket)

    def close(self, flow_id: int) -> None:
        self.conn, actions = proto.transition(self.conn, proto.Close(flow_id))
        self._apply(actions)

    # -- queries ---------------------------------------------------------

    def flow(self, flow_id: Optional[int] = None) -> Optional[proto.FlowState]:
        return self._flow(flow_id)

    def flow_ids(self) -> Tuple[int, ...]:
        return tuple(f.local_flow_id for f in self.conn.flows) if self.conn else ()

    def armed(self, flow_id: int) -> bool:
        return flow_id in self._timers

    # -- internals -------------------------------------------------------

    def _flow(self, flow_id):
        if self.conn is None or not self.conn.flows:
            return None
        if flow_id is None:
            return self.conn.flows[0]
        return self.conn.flow(flow_id)

    def _drop(self, kind: str, reason: str) -> None:
        self.drops[kind] += 1
        self.last_drop = reason
        log.debug("drop (%s): %s", kind, reason)

    def _arm(self, flow_id: int, retries: int) -> None:
        old = self._timers.pop(flow_id, None)
        if old is not None:
            old.handle.cancel()
        delay = self.config.retransmit.delay(retries)
        handle = self.sched.call_later(delay, lambda: self.on_timer(flow_id))
        self._timers[flow_id] = _Timer(handle, retries)

    def _apply(self, actions: proto.Actions) -> List[proto.AppEvent]:
        for reason in actions.drops:
            self._drop("protocol", reason)
        for t in actions.timers:
            if t.op == "set":
                self._arm(t.flow_id, 0)
            else:
                timer = self._timers.pop(t.flow_id, None)
                if timer is not None:
                    timer.handle.cancel()
        for e in actions.emit:
            self.sent[e.packet.ptype.name] += 1
            self.transport.send(codec.encode(e.packet), e.src, e.dst)
        events = list(actions.app_events)
        for ev in events:
            if isinstance(ev, proto.PongReceived) and len(ev.payload) == _TICKET.size:
                (ticket,) = _TICKET.unpack(ev.payload)
                start = self._pings.pop(ticket, None)
                if start is not None:
                    self.rtts[ticket] = self.sched.now() - start
            if self.on_event is not None:
                self.on_event(ev)
        return events
