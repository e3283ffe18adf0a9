"""Bit-exact wire encoding of :class:`~flowmove.packet.Packet`.

Layout (all integers big-endian)::

    magic 0xEC | proto 0x01 | ptype u8 | flags u8 | dst_flow_id u32 |
    src_flow_id u32 | nonce u64 | [version u32] | [count u8, (host u32, port u16)*] |
    [payload_len u16, payload]   (DATA only)

See ``docs/wire.md`` for the normative description.
"""

from __future__ import annotations

import struct

from .packet import (
    KNOWN_FLAGS,
    MAX_ILIST,
    Address,
    Flags,
    Packet,
    PacketType,
)

MAGIC = 0xEC
PROTO_VERSION = 0x01

_HEADER = struct.Struct(">BBBBIIQ")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")
_ADDR = struct.Struct(">IH")

HEADER_LEN = _HEADER.size


class DecodeError(ValueError):
    """Base class for every way a byte string can fail to be a packet."""


class BadMagic(DecodeError):
    pass


class BadType(DecodeError):
    pass


class TruncatedPacket(DecodeError):
    pass


class InconsistentFlags(DecodeError):
    pass


class TrailingBytes(DecodeError):
    pass


class InvalidField(DecodeError):
    """A well-framed packet whose field values break the wire invariants."""


def encoded_length(ptype: int, flags: int, ilist_len: int, payload_len: int) -> int:
    n = HEADER_LEN
    if flags & Flags.VERSION:
        n += 4
    if flags & Flags.ILIST:
        n += 1 + _ADDR.size * ilist_len
    if ptype == PacketType.DATA:
        n += 2 + payload_len
    return n


def encode_address(a: Address) -> bytes:
    return _ADDR.pack(a.host, a.port)


def encode_ilist(ilist) -> bytes:
    return bytes((len(ilist),)) + b"".join(_ADDR.pack(a.host, a.port) for a in ilist)


def encode(p: Packet) -> bytes:
    """Serialize a packet; raises ValueError if it breaks the wire invariants."""
    problems = list(p.problems())
    if problems:
        raise ValueError("invalid packet: " + "; ".join(problems))
    out = [_HEADER.pack(MAGIC, PROTO_VERSION, p.ptype, p.flags, p.dst_flow_id, p.src_flow_id, p.nonce)]
    if p.flags & Flags.VERSION:
        out.append(_U32.pack(p.version))
    if p.flags & Flags.ILIST:
        out.append(encode_ilist(p.ilist))
    if p.ptype == PacketType.DATA:
        out.append(_U16.pack(len(p.payload)))
        out.append(p.payload)
    return b"".join(out)


def decode(b: bytes) -> Packet:
    """Parse a byte string into a packet or raise a :class:`DecodeError`."""
    b = bytes(b)
    if len(b) < 2:
        raise TruncatedPacket("shorter than the magic and protocol bytes")
    if b[0] != MAGIC or b[1] != PROTO_VERSION:
        raise BadMagic(f"header {b[0]:02x} {b[1]:02x}")
    if len(b) < HEADER_LEN:
        raise TruncatedPacket(f"header needs {HEADER_LEN} bytes, have {len(b)}")
    _, _, raw_type, flags, dst, src, nonce = _HEADER.unpack_from(b, 0)
    try:
        ptype = PacketType(raw_type)
    except ValueError:
        raise BadType(f"packet type {raw_type}") from None
    if flags & ~KNOWN_FLAGS:
        raise InconsistentFlags(f"unknown flag bits 0x{flags:02x}")
    off = HEADER_LEN
    version = 0
    ilist: tuple = ()
    payload = b""
    if flags & Flags.VERSION:
        if len(b) < off + 4:
            raise TruncatedPacket("version field cut short")
        (version,) = _U32.unpack_from(b, off)
        off += 4
    if flags & Flags.ILIST:
        if len(b) < off + 1:
            raise TruncatedPacket("interface list count missing")
        count = b[off]
        off += 1
        if count > MAX_ILIST:
            raise InconsistentFlags(f"interface list count {count} exceeds {MAX_ILIST}")
        if len(b) < off + count * _ADDR.size:
            raise TruncatedPacket("interface list cut short")
        ilist = tuple(Address(*_ADDR.unpack_from(b, off + i * _ADDR.size)) for i in range(count))
        off += count * _ADDR.size
    if ptype == PacketType.DATA:
        if len(b) < off + 2:
            raise TruncatedPacket("payload length missing")
        (n,) = _U16.unpack_from(b, off)
        off += 2
        if len(b) < off + n:
            raise TruncatedPacket("payload cut short")
        payload = b[off : off + n]
        off += n
    if off != len(b):
        raise TrailingBytes(f"{len(b) - off} bytes after packet end")
    p = Packet(ptype, flags, dst, src, nonce, version, ilist, payload)
    problems = list(p.problems())
    if problems:
        if any("flag" in m or "must carry" in m for m in problems):
            raise InconsistentFlags("; ".join(problems))
        raise InvalidField("; ".join(problems))
    return p


def peek_type(b: bytes):
    """Return the packet type of an encoded packet without a full decode, or None."""
    if len(b) >= 3 and b[0] == MAGIC and b[1] == PROTO_VERSION:
        try:
            return PacketType(b[2])
        except ValueError:
            return None
    return None
