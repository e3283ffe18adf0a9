"""Run endpoints over real UDP sockets with asyncio.

A node keeps one datagram socket per local address it has bound.  Migrating
binds the new address and closes the old one.  The middlebox role listens on
a control address for registrations, then claims each registered old address
and relays RSYNs arriving there to the new address inside a small envelope
that carries the original source (see :mod:`flowmove.middlebox`).
"""

from __future__ import annotations

import asyncio
import functools
import logging
import sys
from typing import Callable, Dict, Optional

from . import codec, middlebox, proto
from .middlebox import RedirectionCache
from .packet import Address, Flags, Packet, PacketType
from .runtime import Endpoint, EndpointConfig, FlowNotEstablished

log = logging.getLogger(__name__)

# Interactive roles talk to pipes as often as to terminals.
_say = functools.partial(print, flush=True)


class BindFailed(Exception):
    pass


class PeerUnreachable(Exception):
    pass


class _Proto(asyncio.DatagramProtocol):
    def __init__(self, on_datagram: Callable[[bytes, Address], None]):
        self.on_datagram = on_datagram

    def datagram_received(self, data, addr):
        self.on_datagram(data, Address.from_socket(addr[:2]))

    def error_received(self, exc):
        log.debug("socket error: %s", exc)


class _LoopClock:
    def __init__(self, loop):
        self.loop = loop

    def now(self) -> float:
        return self.loop.time()

    def call_later(self, delay, callback):
        return self.loop.call_later(delay, callback)


class LiveNode:
    """An endpoint bound to UDP sockets."""

    def __init__(self, config: EndpointConfig, out: Callable[[str], None] = print):
        self.loop = asyncio.get_running_loop()
        self.out = out
        self.sockets: Dict[Address, asyncio.DatagramTransport] = {}
        self.endpoint = Endpoint(config, self, _LoopClock(self.loop), self._event)
        self.failed = asyncio.Event()
        self.established = asyncio.Event()
        self._pongs: Dict[int, asyncio.Future] = {}

    # -- transport interface ---------------------------------------------------

    def send(self, data: bytes, src: Address, dst: Address) -> None:
        sock = self.sockets.get(src)
        if sock is None:
            log.debug("no socket for %s, dropping", src)
            return
        sock.sendto(data, dst.to_socket())

    def bind(self, addr: Address) -> None:
        # Migration binds synchronously; the socket is created on the running loop.
        if addr not in self.sockets:
            self.loop.create_task(self.open(addr))

    def unbind(self, addr: Address) -> None:
        sock = self.sockets.pop(addr, None)
        if sock is not None:
            sock.close()

    def register_redirect(self, mbox: Address, old: Address, new: Address) -> None:
        sock = self.sockets.get(new) or next(iter(self.sockets.values()), None)
        if sock is not None:
            sock.sendto(middlebox.encode_registration(old, new), mbox.to_socket())

    # -- sockets ---------------------------------------------------------------

    async def open(self, addr: Address) -> None:
        if addr in self.sockets:
            return
        try:
            transport, _ = await self.loop.create_datagram_endpoint(
                lambda: _Proto(lambda data, src: self._datagram(data, src, addr)), local_addr=addr.to_socket()
            )
        except OSError as exc:
            raise BindFailed(f"cannot bind {addr}: {exc}") from exc
        self.sockets[addr] = transport

    def _datagram(self, data: bytes, src: Address, dst: Address) -> None:
        fwd = middlebox.decode_forward(data)
        if fwd is not None:
            src, data = fwd
        self.endpoint.on_packet(data, src, dst)

    def close(self) -> None:
        for sock in self.sockets.values():
            sock.close()
        self.sockets.clear()

    # -- events ----------------------------------------------------------------

    def _event(self, ev) -> None:
        if isinstance(ev, proto.FlowEstablished):
            self.established.set()
        elif isinstance(ev, proto.FlowFailed):
            self.failed.set()
        elif isinstance(ev, proto.PongReceived):
            for ticket, fut in list(self._pongs.items()):
                if self.endpoint.rtt(ticket) is not None and not fut.done():
                    fut.set_result(self.endpoint.rtt(ticket))
                    del self._pongs[ticket]
        self.out(f"event {type(ev).__name__} flow={ev.flow_id}")

    async def ping(self, timeout: float = 1.0) -> Optional[float]:
        """Round trip in seconds, or None if no pong arrived in time."""
        ticket = self.endpoint.ping()
        fut = self.loop.create_future()
        self._pongs[ticket] = fut
        try:
            return await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            self._pongs.pop(ticket, None)
            return None

    def forge(self) -> None:
        """Send an RSYN with a corrupted nonce on the first flow (tests the peer's nonce gate)."""
        conn = self.endpoint.conn
        f = conn.flows[0]
        pkt = Packet(
            PacketType.RSYN, Flags.VERSION | Flags.ILIST, f.remote_flow_id, f.local_flow_id,
            conn.my_nonce ^ 0xDEADBEEF, (conn.my_version + 1) & 0xFFFFFFFF, conn.local_ilist,
        )
        self.send(codec.encode(pkt), f.source_addr, f.remote_addr)

    def status(self) -> str:
        ep = self.endpoint
        lines = []
        if ep.conn is not None:
            for f in ep.conn.flows:
                lines.append(f"flow {f.local_flow_id} {f.kind.name} local={f.source_addr} remote={f.remote_addr}")
        lines.append(f"drops decode={ep.drops['decode']} protocol={ep.drops['protocol']}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Middlebox role


class LiveMiddlebox:
    def __init__(self, control: Address, ttl: float = 5.0, out: Callable[[str], None] = print):
        self.loop = asyncio.get_running_loop()
        self.control = control
        self.cache = RedirectionCache(ttl)
        self.out = out
        self.sockets: Dict[Address, asyncio.DatagramTransport] = {}

    async def start(self) -> None:
        await self._open(self.control)

    async def _open(self, addr: Address) -> None:
        try:
            transport, _ = await self.loop.create_datagram_endpoint(
                lambda: _Proto(lambda data, src: self._datagram(data, src, addr)), local_addr=addr.to_socket()
            )
        except OSError as exc:
            raise BindFailed(f"cannot bind {addr}: {exc}") from exc
        self.sockets[addr] = transport

    def _datagram(self, data: bytes, src: Address, dst: Address) -> None:
        now = self.loop.time()
        if dst == self.control:
            reg = middlebox.decode_registration(data)
            if reg is None:
                return
            old, new = reg
            self.cache.register(old, new, now)
            self.out(f"register {old} -> {new}")
            if old not in self.sockets:
                self.loop.create_task(self._claim(old))
            return
        verdict = self.cache.handle(data, dst, now)
        if isinstance(verdict, middlebox.Forward):
            self.sockets[self.control].sendto(middlebox.encode_forward(src, data), verdict.to.to_socket())
            self.out(f"forward {src} {dst} -> {verdict.to}")
        else:
            self.out(f"drop at {dst}: {verdict.reason}")

    async def _claim(self, addr: Address) -> None:
        # The departed host may still hold the socket briefly.
        for _ in range(20):
            try:
                await self._open(addr)
                self.out(f"claimed {addr}")
                return
            except BindFailed:
                await asyncio.sleep(0.05)
        self.out(f"could not claim {addr}")

    def close(self) -> None:
        for sock in self.sockets.values():
            sock.close()


# ---------------------------------------------------------------------------
# Interactive runner


async def _stdin_lines():
    loop = asyncio.get_running_loop()
    while True:
        line = await loop.run_in_executor(None, sys.stdin.readline)
        if not line:
            return
        yield line.strip()


async def run_node(
    role: str,
    local: Address,
    peer: Optional[Address],
    config: EndpointConfig,
    corrupt_nonce: bool = False,
    out: Callable[[str], None] = _say,
) -> int:
    node = LiveNode(config, out)
    await node.open(local)
    try:
        if role == "client":
            node.endpoint.connect(local, peer)
        else:
            node.endpoint.listen()
        out(f"{role} listening on {local}")
        if role == "client":
            await asyncio.wait(
                [asyncio.ensure_future(node.established.wait()), asyncio.ensure_future(node.failed.wait())],
                return_when=asyncio.FIRST_COMPLETED,
            )
            if node.failed.is_set():
                raise PeerUnreachable(f"no answer from {peer}")
            if corrupt_nonce:
                node.forge()
                out("sent forged RSYN")
        async for line in _stdin_lines():
            if not line:
                continue
            cmd, _, arg = line.partition(" ")
            if cmd == "ping":
                count = int(arg) if arg else 1
                for _ in range(count):
                    try:
                        rtt = await node.ping()
                    except FlowNotEstablished as exc:
                        out(f"ping failed: {exc}")
                        continue
                    out("ping lost" if rtt is None else f"pong rtt={rtt * 1000:.3f}ms")
            elif cmd == "migrate":
                new = Address.parse(arg)
                f = node.endpoint.conn.flows[0]
                await node.open(new)
                node.endpoint.migrate_interface(f.source_addr, new)
                out(f"migrating to {new}")
            elif cmd == "status":
                out(node.status())
            elif cmd == "forge":
                node.forge()
                out("sent forged RSYN")
            elif cmd in ("quit", "exit"):
                break
            else:
                out(f"unknown command {cmd!r}")
            if node.failed.is_set():
                raise PeerUnreachable("flow failed")
        return 0
    finally:
        node.close()


async def run_middlebox(control: Address, ttl: float = 5.0, out: Callable[[str], None] = _say) -> int:
    mb = LiveMiddlebox(control, ttl, out)
    await mb.start()
    out(f"middlebox on {control}")
    try:
        async for line in _stdin_lines():
            if line in ("quit", "exit"):
                break
            if line == "status":
                out(f"entries={len(mb.cache.entries)}")
        return 0
    finally:
        mb.close()


# ---------------------------------------------------------------------------
# Scripted loopback demo


async def demo(
    pings: int = 100,
    migrate_at: int = 50,
    client_addr: Address = Address.parse("127.0.0.1:47001"),
    server_addr: Address = Address.parse("127.0.0.1:47002"),
    server_new: Address = Address.parse("127.0.0.2:47002"),
    seed: int = 0,
    out: Callable[[str], None] = lambda s: None,
) -> dict:
    """Client pings the server; the server moves to a second address part way through."""
    server = LiveNode(EndpointConfig(ilist=(server_addr,), seed=seed + 1), lambda s: out("server " + s))
    client = LiveNode(EndpointConfig(ilist=(client_addr,), seed=seed + 2), lambda s: out("client " + s))
    await server.open(server_addr)
    await client.open(client_addr)
    server.endpoint.listen()
    client.endpoint.connect(client_addr, server_addr)
    lost = 0
    rtts = []
    try:
        await asyncio.wait_for(client.established.wait(), 5)
        for i in range(pings):
            if i == migrate_at:
                await server.open(server_new)
                server.endpoint.migrate_interface(server_addr, server_new)
            for _ in range(200):
                try:
                    rtt = await client.ping(timeout=0.5)
                    break
                except FlowNotEstablished:
                    # Mid-migration; the app waits for the flow to settle.
                    await asyncio.sleep(0.005)
            else:
                rtt = None
            if rtt is None:
                lost += 1
            else:
                rtts.append(rtt)
            if client.failed.is_set() or server.failed.is_set():
                break
        return {
            "answered": len(rtts),
            "lost": lost,
            "failed": client.failed.is_set() or server.failed.is_set(),
            "client_remote": client.endpoint.conn.flows[0].remote_addr,
            "server_local": server.endpoint.conn.flows[0].local_addr,
            "client_drops": dict(client.endpoint.drops),
            "server_drops": dict(server.endpoint.drops),
        }
    finally:
        client.close()
        server.close()
