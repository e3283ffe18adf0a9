"""Addresses, interface lists and the Packet record shared by every layer."""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass
from typing import NamedTuple, Tuple

MAX_ILIST = 8
MAX_PAYLOAD = 0xFFFF
U32 = 0xFFFFFFFF
U64 = 0xFFFFFFFFFFFFFFFF


class Address(NamedTuple):
    """A network attachment point: 32-bit host identifier plus 16-bit port.

    ``host == 0`` means unbound.
    """

    host: int
    port: int

    def __str__(self) -> str:
        return f"{ipaddress.IPv4Address(self.host)}:{self.port}"

    @property
    def bound(self) -> bool:
        return self.host != 0

    @classmethod
    def parse(cls, text: str) -> "Address":
        """Parse ``a.b.c.d:port`` (port defaults to 0 when omitted)."""
        host, sep, port = text.strip().rpartition(":")
        if not sep:
            host, port = port, "0"
        try:
            return cls(int(ipaddress.IPv4Address(host)), int(port))
        except (ValueError, ipaddress.AddressValueError) as exc:
            raise ValueError(f"bad address {text!r}") from exc

    def to_socket(self) -> Tuple[str, int]:
        return str(ipaddress.IPv4Address(self.host)), self.port

    @classmethod
    def from_socket(cls, addr: Tuple[str, int]) -> "Address":
        return cls(int(ipaddress.IPv4Address(addr[0])), addr[1])


UNBOUND = Address(0, 0)

# An interface list is an ordered tuple of at most MAX_ILIST addresses.
IList = Tuple[Address, ...]


def make_ilist(addrs) -> IList:
    ilist = tuple(addrs)
    if len(ilist) > MAX_ILIST:
        raise ValueError(f"interface list holds at most {MAX_ILIST} entries")
    return ilist


class PacketType(enum.IntEnum):
    SYN = 1
    SYN_ACK = 2
    ACK = 3
    RSYN = 4
    RSYN_ACK = 5
    DATA = 6


class Flags(enum.IntFlag):
    VERSION = 0x01
    ILIST = 0x02
    PING = 0x04
    PONG = 0x08


KNOWN_FLAGS = int(Flags.VERSION | Flags.ILIST | Flags.PING | Flags.PONG)

# Control packets always carry the sender's version; these also carry an IList.
VERSIONED = frozenset(
    {PacketType.SYN, PacketType.SYN_ACK, PacketType.ACK, PacketType.RSYN, PacketType.RSYN_ACK}
)
WITH_ILIST = frozenset({PacketType.SYN, PacketType.SYN_ACK, PacketType.RSYN})


@dataclass(frozen=True, slots=True)
class Packet:
    """One wire message.

    ``version`` and ``ilist`` are meaningful only when the matching flag bit
    is set; otherwise they hold 0 and ``()`` so that equal packets compare
    equal after a codec round trip.
    """

    ptype: PacketType
    flags: int
    dst_flow_id: int
    src_flow_id: int
    nonce: int
    version: int = 0
    ilist: IList = ()
    payload: bytes = b""

    @property
    def has_version(self) -> bool:
        return bool(self.flags & Flags.VERSION)

    @property
    def has_ilist(self) -> bool:
        return bool(self.flags & Flags.ILIST)

    @property
    def is_ping(self) -> bool:
        return self.ptype == PacketType.DATA and bool(self.flags & Flags.PING)

    @property
    def is_pong(self) -> bool:
        return self.ptype == PacketType.DATA and bool(self.flags & Flags.PONG)

    def problems(self):
        """Yield human-readable reasons this packet violates the wire invariants."""
        if self.flags & ~KNOWN_FLAGS:
            yield f"unknown flag bits 0x{self.flags & ~KNOWN_FLAGS:02x}"
        if self.ptype in VERSIONED and not self.has_version:
            yield f"{self.ptype.name} must carry a version"
        if self.ptype in WITH_ILIST and not self.has_ilist:
            yield f"{self.ptype.name} must carry an interface list"
        if self.flags & (Flags.PING | Flags.PONG):
            if self.ptype != PacketType.DATA:
                yield "ping/pong flags are only valid on DATA"
            elif self.flags & Flags.PING and self.flags & Flags.PONG:
                yield "a DATA packet is either ping or pong, not both"
        if not self.has_version and self.version:
            yield "version value without version flag"
        if not self.has_ilist and self.ilist:
            yield "interface list without ilist flag"
        if len(self.ilist) > MAX_ILIST:
            yield f"interface list longer than {MAX_ILIST}"
        if self.ptype != PacketType.DATA and self.payload:
            yield "payload on a control packet"
        if len(self.payload) > MAX_PAYLOAD:
            yield "payload too long"
        if self.ptype != PacketType.SYN and self.dst_flow_id == 0:
            yield "destination flowID 0 is only valid on SYN"
        for name, value, limit in (
            ("dst_flow_id", self.dst_flow_id, U32),
            ("src_flow_id", self.src_flow_id, U32),
            ("nonce", self.nonce, U64),
            ("version", self.version, U32),
        ):
            if not 0 <= value <= limit:
                yield f"{name} out of range"
        if self.src_flow_id == 0:
            yield "source flowID must be nonzero"
        for a in self.ilist:
            if not (0 <= a.host <= U32 and 0 <= a.port <= 0xFFFF):
                yield f"address {a!r} out of range"

    def describe(self) -> str:
        parts = [self.ptype.name, f"dst={self.dst_flow_id}", f"src={self.src_flow_id}"]
        if self.has_version:
            parts.append(f"v={self.version}")
        if self.has_ilist:
            parts.append("ilist=(" + ",".join(str(a) for a in self.ilist) + ")")
        if self.is_ping:
            parts.append("ping")
        if self.is_pong:
            parts.append("pong")
        if self.payload:
            parts.append(f"len={len(self.payload)}")
        return " ".join(parts)
