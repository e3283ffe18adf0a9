"""Redirection middlebox: a short-lived map from a departed host's old address to its new one.

Only RSYN packets are forwarded, verbatim.  Everything else sent to a claimed
address is dropped.  Nonces are not checked here; the endpoint does that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Union

from . import codec
from .packet import Address, PacketType

DEFAULT_TTL = 5.0


class Entry(NamedTuple):
    new: Address
    expiry: float


@dataclass(frozen=True)
class Forward:
    to: Address


@dataclass(frozen=True)
class Drop:
    reason: str


Verdict = Union[Forward, Drop]


@dataclass
class RedirectionCache:
    ttl: float = DEFAULT_TTL
    entries: Dict[Address, Entry] = field(default_factory=dict)

    def register(self, old: Address, new: Address, now: float) -> None:
        self.entries[old] = Entry(new, now + self.ttl)

    def lookup(self, old: Address, now: float):
        entry = self.entries.get(old)
        if entry is None or now >= entry.expiry:
            return None
        return entry.new

    def claims(self, addr: Address, now: float) -> bool:
        return self.lookup(addr, now) is not None

    def handle(self, data: bytes, dst: Address, now: float) -> Verdict:
        target = self.lookup(dst, now)
        if target is None:
            return Drop("no live entry")
        try:
            ptype = codec.decode(data).ptype
        except codec.DecodeError as exc:
            return Drop(f"undecodable: {exc}")
        if ptype != PacketType.RSYN:
            return Drop(f"{ptype.name} is not forwarded")
        return Forward(target)

    def expire(self, now: float) -> None:
        for old in [a for a, e in self.entries.items() if now >= e.expiry]:
            del self.entries[old]


# Control datagrams for the live runner.  A registration is
#   b"REG" old_host(u32) old_port(u16) new_host(u32) new_port(u16)
# and a forwarded RSYN travels as
#   b"FWD" orig_host(u32) orig_port(u16) <packet bytes>
# because a plain UDP socket cannot forge the original source address.
REG_MAGIC = b"REG"
FWD_MAGIC = b"FWD"


def encode_registration(old: Address, new: Address) -> bytes:
    return REG_MAGIC + codec.encode_address(old) + codec.encode_address(new)


def decode_registration(data: bytes):
    if len(data) != 15 or not data.startswith(REG_MAGIC):
        return None
    return _addr(data[3:9]), _addr(data[9:15])


def encode_forward(orig: Address, packet: bytes) -> bytes:
    return FWD_MAGIC + codec.encode_address(orig) + packet


def decode_forward(data: bytes):
    if len(data) < 9 or not data.startswith(FWD_MAGIC):
        return None
    return _addr(data[3:9]), data[9:]


def _addr(b: bytes) -> Address:
    return Address(int.from_bytes(b[:4], "big"), int.from_bytes(b[4:6], "big"))
