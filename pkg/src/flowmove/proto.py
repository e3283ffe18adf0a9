"""Pure connection-control state machine.

Everything here is a function of its arguments: no clock, no sockets, no
randomness.  Flow identifiers, nonces and initial versions are injected by the
caller.  :func:`transition` maps ``(ConnectionState, event)`` to a successor
state plus the :class:`Actions` the caller must carry out (packets to emit,
timers to arm or cancel, application events).

A connection holds one or more flows.  Each flow is an address pair with two
flowIDs, one chosen by each end.  Migration is per flow: a host that moves
sends an RSYN from its new address, the peer answers with an RSYN-ACK, and
the mover finishes with an explicit ACK carrying the migration's version.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Mapping, NamedTuple, Optional, Tuple, Union

from .packet import UNBOUND, Address, Flags, IList, Packet, PacketType, make_ilist
from .serial import version_gt, version_next

# ---------------------------------------------------------------------------
# State


class FlowStateKind(enum.IntEnum):
    CLOSED = 0
    SYN_SENT = 1
    SYN_RCVD = 2
    ESTABLISHED = 3
    RSYN_SENT = 4
    RSYN_RCVD = 5
    RSYN_SENT_RCVD = 6
    FAILED = 7


K = FlowStateKind

# States with a control packet awaiting acknowledgment (a retransmission timer is armed).
PENDING = frozenset({K.SYN_SENT, K.SYN_RCVD, K.RSYN_SENT, K.RSYN_RCVD, K.RSYN_SENT_RCVD})
# States in which our own RSYN is outstanding.
MOVING = frozenset({K.RSYN_SENT, K.RSYN_SENT_RCVD})
# States in which we owe the peer an acknowledged RSYN-ACK.
ACKING = frozenset({K.RSYN_RCVD, K.RSYN_SENT_RCVD})
# States a Migrate command is accepted in.
MIGRATABLE = frozenset({K.ESTABLISHED, K.RSYN_SENT, K.RSYN_RCVD, K.RSYN_SENT_RCVD})


@dataclass(frozen=True, slots=True)
class FlowState:
    kind: FlowStateKind
    local_flow_id: int
    remote_flow_id: int
    local_addr: Address
    remote_addr: Address
    # Address we are moving to; valid while our RSYN is outstanding.
    pending_local_addr: Address = UNBOUND
    # Version carried by our latest SYN/RSYN on this flow (echoed in our ACKs).
    pending_version: int = 0
    # Version of the latest SYN/RSYN accepted from the peer on this flow.
    peer_flow_version: int = 0

    @property
    def source_addr(self) -> Address:
        """Address our packets on this flow leave from."""
        return self.pending_local_addr if self.kind in MOVING else self.local_addr


@dataclass(frozen=True, slots=True)
class FirstEntry:
    pass


@dataclass(frozen=True, slots=True)
class RoundRobin:
    counter: int = 0

    def advance(self) -> "RoundRobin":
        return RoundRobin(self.counter + 1)


Policy = Union[FirstEntry, RoundRobin]


@dataclass(frozen=True, slots=True)
class ConnectionState:
    my_version: int
    peer_version: int
    my_nonce: int
    peer_nonce: Optional[int]
    flows: Tuple[FlowState, ...]
    peer_ilist: IList
    local_ilist: IList
    # Responder-side interface choice for new flows; None replies from the arrival address.
    policy: Optional[Policy] = None
    # Replace the explicit migration ACK with "any packet from the new address acknowledges".
    implicit_ack: bool = False

    def flow(self, flow_id: int) -> Optional[FlowState]:
        for f in self.flows:
            if f.local_flow_id == flow_id:
                return f
        return None

    @property
    def flow_table(self) -> dict:
        return {f.local_flow_id: f for f in self.flows}

    def with_flow(self, flow: FlowState) -> "ConnectionState":
        flows = [f for f in self.flows if f.local_flow_id != flow.local_flow_id]
        flows.append(flow)
        flows.sort(key=lambda f: f.local_flow_id)
        return replace(self, flows=tuple(flows))

    def canonical(self) -> bytes:
        """Canonical byte encoding; equal states encode identically."""
        out = [
            _CONN.pack(
                self.my_version,
                self.peer_version,
                self.my_nonce,
                -1 if self.peer_nonce is None else self.peer_nonce,
                len(self.flows),
                self.implicit_ack,
            ),
            _pack_ilist(self.peer_ilist),
            _pack_ilist(self.local_ilist),
            _pack_policy(self.policy),
        ]
        for f in self.flows:
            out.append(
                _FLOW.pack(
                    f.kind,
                    f.local_flow_id,
                    f.remote_flow_id,
                    *f.local_addr,
                    *f.remote_addr,
                    *f.pending_local_addr,
                    f.pending_version,
                    f.peer_flow_version,
                )
            )
        return b"".join(out)


_CONN = struct.Struct(">IIQqB?")
_FLOW = struct.Struct(">BII" + "IH" * 3 + "II")


def _pack_ilist(ilist: IList) -> bytes:
    return bytes((len(ilist),)) + b"".join(struct.pack(">IH", *a) for a in ilist)


def _pack_policy(policy: Optional[Policy]) -> bytes:
    if policy is None:
        return b"\x00"
    if isinstance(policy, FirstEntry):
        return b"\x01"
    return b"\x02" + struct.pack(">Q", policy.counter)


class FlowIds(NamedTuple):
    """Identifiers injected by the caller's allocator."""

    flow_id: int
    nonce: int = 0
    init_version: int = 0


# ---------------------------------------------------------------------------
# Events and actions


@dataclass(frozen=True, slots=True)
class PacketArrival:
    packet: Packet
    src: Address
    dst: Address = UNBOUND
    # Flow identifier to use if this packet creates a flow (passive SYN).
    fresh_flow_id: int = 0


@dataclass(frozen=True, slots=True)
class Migrate:
    flow_id: int
    new_addr: Address
    new_ilist: Optional[IList] = None


@dataclass(frozen=True, slots=True)
class Ping:
    flow_id: int
    payload: bytes = b""


@dataclass(frozen=True, slots=True)
class Close:
    flow_id: int


@dataclass(frozen=True, slots=True)
class TimerFire:
    flow_id: int
    give_up: bool = False


Command = Union[Migrate, Ping, Close]
Event = Union[PacketArrival, Migrate, Ping, Close, TimerFire]


class Emit(NamedTuple):
    packet: Packet
    src: Address
    dst: Address


class TimerCmd(NamedTuple):
    op: str  # "set" or "cancel"
    flow_id: int


@dataclass(frozen=True, slots=True)
class FlowEstablished:
    flow_id: int


@dataclass(frozen=True, slots=True)
class Migrated:
    flow_id: int
    local_addr: Address


@dataclass(frozen=True, slots=True)
class PeerMigrated:
    flow_id: int
    remote_addr: Address


@dataclass(frozen=True, slots=True)
class PongReceived:
    flow_id: int
    payload: bytes = b""


@dataclass(frozen=True, slots=True)
class FlowFailed:
    flow_id: int


AppEvent = Union[FlowEstablished, Migrated, PeerMigrated, PongReceived, FlowFailed]


@dataclass(frozen=True, slots=True)
class Actions:
    emit: Tuple[Emit, ...] = ()
    timers: Tuple[TimerCmd, ...] = ()
    app_events: Tuple[AppEvent, ...] = ()
    drops: Tuple[str, ...] = ()


@dataclass
class _Out:
    emit: List[Emit] = field(default_factory=list)
    timers: List[TimerCmd] = field(default_factory=list)
    app_events: List[AppEvent] = field(default_factory=list)
    drops: List[str] = field(default_factory=list)

    def freeze(self) -> Actions:
        return Actions(tuple(self.emit), tuple(self.timers), tuple(self.app_events), tuple(self.drops))


NO_ACTIONS = Actions()


class ProtocolError(Exception):
    pass


class NoEstablishedConnection(ProtocolError):
    pass


class HintNotInIList(ProtocolError):
    pass


class EmptyIList(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# Interface selection


def select_remote_interface(policy: Policy, ilist: IList) -> Address:
    if not ilist:
        raise EmptyIList("cannot pick an interface from an empty list")
    if isinstance(policy, RoundRobin):
        return ilist[policy.counter % len(ilist)]
    return ilist[0]


# ---------------------------------------------------------------------------
# Demultiplexing


class _Route(enum.Enum):
    DROP = "drop"
    LISTENER = "listener"


DROP = _Route.DROP
LISTENER = _Route.LISTENER


def demux(table: Mapping[int, FlowState], pkt: Packet):
    """Return the local flowID a packet belongs to, LISTENER for an initial SYN, or DROP."""
    if pkt.dst_flow_id == 0:
        return LISTENER if pkt.ptype == PacketType.SYN else DROP
    return pkt.dst_flow_id if pkt.dst_flow_id in table else DROP


# ---------------------------------------------------------------------------
# Packet builders


def _syn(conn: ConnectionState, f: FlowState) -> Packet:
    return Packet(
        PacketType.SYN, Flags.VERSION | Flags.ILIST, 0, f.local_flow_id, conn.my_nonce,
        f.pending_version, conn.local_ilist,
    )


def _syn_ack(conn: ConnectionState, f: FlowState) -> Packet:
    return Packet(
        PacketType.SYN_ACK, Flags.VERSION | Flags.ILIST, f.remote_flow_id, f.local_flow_id,
        conn.my_nonce, f.pending_version, conn.local_ilist,
    )


def _ack(conn: ConnectionState, f: FlowState) -> Packet:
    return Packet(PacketType.ACK, Flags.VERSION, f.remote_flow_id, f.local_flow_id, conn.my_nonce, f.pending_version)


def _rsyn(conn: ConnectionState, f: FlowState) -> Packet:
    return Packet(
        PacketType.RSYN, Flags.VERSION | Flags.ILIST, f.remote_flow_id, f.local_flow_id,
        conn.my_nonce, f.pending_version, conn.local_ilist,
    )


def _rsyn_ack(conn: ConnectionState, f: FlowState) -> Packet:
    return Packet(
        PacketType.RSYN_ACK, Flags.VERSION, f.remote_flow_id, f.local_flow_id, conn.my_nonce, f.peer_flow_version
    )


def _data(conn: ConnectionState, f: FlowState, flags: int = 0, payload: bytes = b"") -> Packet:
    return Packet(PacketType.DATA, flags, f.remote_flow_id, f.local_flow_id, conn.my_nonce, payload=payload)


def migration_ack(conn: ConnectionState, f: FlowState) -> Optional[Packet]:
    """Packet the mover sends once its RSYN is acknowledged.

    With explicit acknowledgments this is an ACK carrying the migration's
    version; the implicit variant sends an ordinary data packet instead.
    """
    if conn.implicit_ack:
        return _data(conn, f)
    return _ack(conn, f)


# ---------------------------------------------------------------------------
# Connection setup


def initiate_connection(
    local: Address,
    remote: Address,
    ids: FlowIds,
    local_ilist: Optional[IList] = None,
    implicit_ack: bool = False,
) -> Tuple[ConnectionState, Actions]:
    """Start a connection with one flow in SYN_SENT and emit its SYN."""
    if ids.flow_id == 0:
        raise ValueError("flowID 0 is reserved")
    flow = FlowState(K.SYN_SENT, ids.flow_id, 0, local, remote, pending_version=ids.init_version)
    conn = ConnectionState(
        my_version=ids.init_version,
        peer_version=0,
        my_nonce=ids.nonce,
        peer_nonce=None,
        flows=(flow,),
        peer_ilist=(),
        local_ilist=make_ilist(local_ilist if local_ilist is not None else (local,)),
        implicit_ack=implicit_ack,
    )
    actions = Actions(emit=(Emit(_syn(conn, flow), local, remote),), timers=(TimerCmd("set", ids.flow_id),))
    return conn, actions


def listen(
    local_ilist: IList,
    nonce: int,
    init_version: int = 0,
    policy: Optional[Policy] = None,
    implicit_ack: bool = False,
) -> ConnectionState:
    """A passive connection waiting for its first SYN."""
    return ConnectionState(
        my_version=init_version,
        peer_version=0,
        my_nonce=nonce,
        peer_nonce=None,
        flows=(),
        peer_ilist=(),
        local_ilist=make_ilist(local_ilist),
        policy=policy,
        implicit_ack=implicit_ack,
    )


def add_flow(conn: ConnectionState, local: Address, remote_hint: Address, ids: FlowIds) -> Tuple[ConnectionState, Actions]:
    """Open another flow on a live connection.

    The SYN carries the connection's nonce so the peer binds it to this
    connection; the peer picks its own interface when it answers.
    """
    if conn.peer_nonce is None or not any(f.kind == K.ESTABLISHED for f in conn.flows):
        raise NoEstablishedConnection("add_flow needs an established flow")
    if remote_hint not in conn.peer_ilist:
        raise HintNotInIList(f"{remote_hint} is not in the peer interface list")
    if ids.flow_id == 0 or conn.flow(ids.flow_id) is not None:
        raise ValueError(f"flowID {ids.flow_id} is reserved or already in use")
    flow = FlowState(K.SYN_SENT, ids.flow_id, 0, local, remote_hint, pending_version=conn.my_version)
    conn = conn.with_flow(flow)
    actions = Actions(emit=(Emit(_syn(conn, flow), local, remote_hint),), timers=(TimerCmd("set", ids.flow_id),))
    return conn, actions


# ---------------------------------------------------------------------------
# Transition function


def transition(conn: ConnectionState, ev: Event) -> Tuple[ConnectionState, Actions]:
    out = _Out()
    if isinstance(ev, PacketArrival):
        conn = _on_packet(conn, ev, out)
    elif isinstance(ev, TimerFire):
        conn = _on_timer(conn, ev, out)
    elif isinstance(ev, Migrate):
        conn = _on_migrate(conn, ev, out)
    elif isinstance(ev, Ping):
        conn = _on_ping(conn, ev, out)
    elif isinstance(ev, Close):
        conn = _on_close(conn, ev, out)
    else:
        raise TypeError(f"not an event: {ev!r}")
    return conn, out.freeze()


def _on_packet(conn: ConnectionState, ev: PacketArrival, out: _Out) -> ConnectionState:
    pkt = ev.packet
    route = demux(conn.flow_table, pkt)
    if route is LISTENER:
        return _on_syn(conn, ev, out)
    if route is DROP:
        out.drops.append(f"no flow {pkt.dst_flow_id}")
        return conn
    f = conn.flow(route)
    if conn.peer_nonce is not None and pkt.nonce != conn.peer_nonce:
        out.drops.append("nonce mismatch")
        return conn
    if f.remote_flow_id and pkt.src_flow_id != f.remote_flow_id:
        out.drops.append("peer flowID mismatch")
        return conn
    if f.kind in (K.CLOSED, K.FAILED):
        out.drops.append(f"flow {f.local_flow_id} is {f.kind.name}")
        return conn
    if (
        conn.implicit_ack
        and f.kind in ACKING
        and ev.src == f.remote_addr
        and not (pkt.ptype == PacketType.RSYN and version_gt(pkt.version, f.peer_flow_version))
    ):
        f = _peer_migration_done(f, out)
        conn = conn.with_flow(f)
    handler = _HANDLERS[pkt.ptype]
    return handler(conn, f, ev, out)


def _peer_migration_done(f: FlowState, out: _Out) -> FlowState:
    if f.kind == K.RSYN_RCVD:
        out.timers.append(TimerCmd("cancel", f.local_flow_id))
        f = replace(f, kind=K.ESTABLISHED)
    else:
        f = replace(f, kind=K.RSYN_SENT)
    out.app_events.append(PeerMigrated(f.local_flow_id, f.remote_addr))
    return f


def _choose_local(conn: ConnectionState, arrival: Address) -> Tuple[Address, Optional[Policy]]:
    if conn.policy is None:
        if arrival.bound:
            return arrival, None
        return select_remote_interface(FirstEntry(), conn.local_ilist), None
    choice = select_remote_interface(conn.policy, conn.local_ilist)
    policy = conn.policy.advance() if isinstance(conn.policy, RoundRobin) else conn.policy
    return choice, policy


def _on_syn(conn: ConnectionState, ev: PacketArrival, out: _Out) -> ConnectionState:
    pkt = ev.packet
    if conn.peer_nonce is not None:
        if pkt.nonce != conn.peer_nonce:
            out.drops.append("nonce mismatch")
            return conn
        for f in conn.flows:
            if f.remote_flow_id == pkt.src_flow_id:
                if f.kind == K.SYN_RCVD:
                    out.emit.append(Emit(_syn_ack(conn, f), f.local_addr, f.remote_addr))
                else:
                    out.drops.append("duplicate SYN")
                return conn
    elif conn.flows:
        out.drops.append("SYN for an active opener")
        return conn
    fid = ev.fresh_flow_id
    if fid == 0 or conn.flow(fid) is not None:
        out.drops.append("no flowID available for new flow")
        return conn
    local, policy = _choose_local(conn, ev.dst)
    f = FlowState(
        K.SYN_RCVD, fid, pkt.src_flow_id, local, ev.src,
        pending_version=conn.my_version, peer_flow_version=pkt.version,
    )
    if conn.peer_nonce is None:
        conn = replace(conn, peer_nonce=pkt.nonce, peer_version=pkt.version, peer_ilist=pkt.ilist)
    elif version_gt(pkt.version, conn.peer_version):
        conn = replace(conn, peer_version=pkt.version, peer_ilist=pkt.ilist)
    conn = replace(conn, policy=policy).with_flow(f)
    out.emit.append(Emit(_syn_ack(conn, f), local, ev.src))
    out.timers.append(TimerCmd("set", fid))
    return conn


def _on_syn_ack(conn: ConnectionState, f: FlowState, ev: PacketArrival, out: _Out) -> ConnectionState:
    pkt = ev.packet
    if f.kind == K.SYN_SENT:
        f = replace(
            f, kind=K.ESTABLISHED, remote_flow_id=pkt.src_flow_id, remote_addr=ev.src, peer_flow_version=pkt.version
        )
        if conn.peer_nonce is None:
            conn = replace(conn, peer_nonce=pkt.nonce, peer_version=pkt.version, peer_ilist=pkt.ilist)
        elif version_gt(pkt.version, conn.peer_version):
            conn = replace(conn, peer_version=pkt.version, peer_ilist=pkt.ilist)
        conn = conn.with_flow(f)
        out.emit.append(Emit(_ack(conn, f), f.local_addr, f.remote_addr))
        out.timers.append(TimerCmd("cancel", f.local_flow_id))
        out.app_events.append(FlowEstablished(f.local_flow_id))
        return conn
    if f.kind == K.ESTABLISHED:
        # Our ACK was lost and the responder retransmitted.
        out.emit.append(Emit(_ack(conn, f), f.local_addr, f.remote_addr))
        return conn
    out.drops.append(f"SYN-ACK in {f.kind.name}")
    return conn


def _on_ack(conn: ConnectionState, f: FlowState, ev: PacketArrival, out: _Out) -> ConnectionState:
    pkt = ev.packet
    if pkt.version != f.peer_flow_version:
        out.drops.append(f"ACK v={pkt.version} does not match awaited v={f.peer_flow_version}")
        return conn
    if f.kind == K.SYN_RCVD:
        out.timers.append(TimerCmd("cancel", f.local_flow_id))
        out.app_events.append(FlowEstablished(f.local_flow_id))
        return conn.with_flow(replace(f, kind=K.ESTABLISHED))
    if f.kind in ACKING:
        return conn.with_flow(_peer_migration_done(f, out))
    out.drops.append(f"duplicate ACK in {f.kind.name}")
    return conn


def _on_rsyn(conn: ConnectionState, f: FlowState, ev: PacketArrival, out: _Out) -> ConnectionState:
    pkt = ev.packet
    if f.kind == K.SYN_SENT:
        out.drops.append("RSYN before handshake")
        return conn
    if not version_gt(pkt.version, f.peer_flow_version):
        if pkt.version == f.peer_flow_version and f.kind in ACKING and ev.src == f.remote_addr:
            out.emit.append(Emit(_rsyn_ack(conn, f), f.source_addr, f.remote_addr))
        else:
            out.drops.append(f"stale RSYN v={pkt.version}")
        return conn
    kind = K.RSYN_SENT_RCVD if f.kind in MOVING else K.RSYN_RCVD
    f = replace(f, kind=kind, remote_addr=ev.src, peer_flow_version=pkt.version)
    if version_gt(pkt.version, conn.peer_version):
        conn = replace(conn, peer_version=pkt.version, peer_ilist=pkt.ilist)
        # A SYN still aimed at an interface the peer gave up would never be answered.
        for g in conn.flows:
            if g.kind == K.SYN_SENT and g.remote_addr not in pkt.ilist:
                conn = conn.with_flow(replace(g, remote_addr=ev.src))
    conn = conn.with_flow(f)
    out.emit.append(Emit(_rsyn_ack(conn, f), f.source_addr, f.remote_addr))
    out.timers.append(TimerCmd("set", f.local_flow_id))
    return conn


def _on_rsyn_ack(conn: ConnectionState, f: FlowState, ev: PacketArrival, out: _Out) -> ConnectionState:
    pkt = ev.packet
    if f.kind in MOVING and pkt.version == f.pending_version:
        kind = K.ESTABLISHED if f.kind == K.RSYN_SENT else K.RSYN_RCVD
        f = replace(f, kind=kind, local_addr=f.pending_local_addr, pending_local_addr=UNBOUND)
        conn = conn.with_flow(f)
        ack = migration_ack(conn, f)
        if ack is not None:
            out.emit.append(Emit(ack, f.local_addr, f.remote_addr))
        if kind == K.ESTABLISHED:
            out.timers.append(TimerCmd("cancel", f.local_flow_id))
        out.app_events.append(Migrated(f.local_flow_id, f.local_addr))
        return conn
    if f.kind in (K.ESTABLISHED, K.RSYN_RCVD) and pkt.version == f.pending_version:
        # Duplicate: the peer has not seen our ACK yet.
        ack = migration_ack(conn, f)
        if ack is not None:
            out.emit.append(Emit(ack, f.local_addr, f.remote_addr))
        return conn
    out.drops.append(f"RSYN-ACK v={pkt.version} in {f.kind.name}")
    return conn


def _on_data(conn: ConnectionState, f: FlowState, ev: PacketArrival, out: _Out) -> ConnectionState:
    pkt = ev.packet
    if f.kind == K.SYN_SENT:
        out.drops.append("DATA before handshake")
        return conn
    if pkt.is_ping:
        out.emit.append(Emit(_data(conn, f, Flags.PONG, pkt.payload), f.source_addr, f.remote_addr))
    elif pkt.is_pong:
        out.app_events.append(PongReceived(f.local_flow_id, pkt.payload))
    return conn


_HANDLERS = {
    PacketType.SYN_ACK: _on_syn_ack,
    PacketType.ACK: _on_ack,
    PacketType.RSYN: _on_rsyn,
    PacketType.RSYN_ACK: _on_rsyn_ack,
    PacketType.DATA: _on_data,
}


def _on_migrate(conn: ConnectionState, ev: Migrate, out: _Out) -> ConnectionState:
    f = conn.flow(ev.flow_id)
    if f is None:
        out.drops.append(f"migrate: no flow {ev.flow_id}")
        return conn
    if f.kind not in MIGRATABLE:
        out.drops.append(f"migrate rejected in {f.kind.name}")
        return conn
    version = version_next(conn.my_version)
    kind = K.RSYN_SENT_RCVD if f.kind in ACKING else K.RSYN_SENT
    ilist = make_ilist(ev.new_ilist) if ev.new_ilist is not None else conn.local_ilist
    conn = replace(conn, my_version=version, local_ilist=ilist)
    f = replace(f, kind=kind, pending_local_addr=ev.new_addr, pending_version=version)
    conn = conn.with_flow(f)
    out.emit.append(Emit(_rsyn(conn, f), ev.new_addr, f.remote_addr))
    out.timers.append(TimerCmd("set", f.local_flow_id))
    return conn


def _on_ping(conn: ConnectionState, ev: Ping, out: _Out) -> ConnectionState:
    f = conn.flow(ev.flow_id)
    if f is None or f.kind != K.ESTABLISHED:
        out.drops.append(f"ping: flow {ev.flow_id} not established")
        return conn
    out.emit.append(Emit(_data(conn, f, Flags.PING, ev.payload), f.local_addr, f.remote_addr))
    return conn


def _on_close(conn: ConnectionState, ev: Close, out: _Out) -> ConnectionState:
    f = conn.flow(ev.flow_id)
    if f is None or f.kind in (K.CLOSED, K.FAILED):
        out.drops.append(f"close: no open flow {ev.flow_id}")
        return conn
    if f.kind in PENDING:
        out.timers.append(TimerCmd("cancel", f.local_flow_id))
    return conn.with_flow(replace(f, kind=K.CLOSED))


def pending_packets(conn: ConnectionState, f: FlowState) -> List[Emit]:
    """Control packets of a flow that await acknowledgment, in emission order."""
    k = f.kind
    if k == K.SYN_SENT:
        return [Emit(_syn(conn, f), f.local_addr, f.remote_addr)]
    if k == K.SYN_RCVD:
        return [Emit(_syn_ack(conn, f), f.local_addr, f.remote_addr)]
    emits = []
    if k in MOVING:
        emits.append(Emit(_rsyn(conn, f), f.pending_local_addr, f.remote_addr))
    if k in ACKING:
        emits.append(Emit(_rsyn_ack(conn, f), f.source_addr, f.remote_addr))
    return emits


def _on_timer(conn: ConnectionState, ev: TimerFire, out: _Out) -> ConnectionState:
    f = conn.flow(ev.flow_id)
    if f is None or f.kind not in PENDING:
        out.timers.append(TimerCmd("cancel", ev.flow_id))
        out.drops.append(f"timer for settled flow {ev.flow_id}")
        return conn
    if ev.give_up:
        out.timers.append(TimerCmd("cancel", f.local_flow_id))
        out.app_events.append(FlowFailed(f.local_flow_id))
        return conn.with_flow(replace(f, kind=K.FAILED))
    out.emit.extend(pending_packets(conn, f))
    return conn


def flows_on(conn: ConnectionState, local: Address) -> Iterable[FlowState]:
    """Flows whose traffic currently leaves from ``local``."""
    return (f for f in conn.flows if f.source_addr == local and f.kind not in (K.CLOSED, K.FAILED))
