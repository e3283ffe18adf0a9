import pytest
from hypothesis import given, strategies as st

from flowmove import codec
from flowmove.codec import (
    BadMagic,
    BadType,
    DecodeError,
    InconsistentFlags,
    TrailingBytes,
    TruncatedPacket,
    decode,
    encode,
    encoded_length,
)
from flowmove.packet import Address, Flags, Packet, PacketType

from .strategies import packets


def test_minimal_ack_layout():
    p = Packet(PacketType.ACK, Flags.VERSION, 7, 9, 0x0102030405060708, version=2)
    # Hand-encoded against the layout table.
    expected = bytes.fromhex("EC 01 03 01 00000007 00000009 0102030405060708 00000002")
    assert encode(p) == expected
    assert decode(expected) == p


def test_syn_zero_destination():
    p = Packet(PacketType.SYN, Flags.VERSION | Flags.ILIST, 0, 5, 1, 0, (Address(1, 1),))
    assert encode(p)[4:8] == bytes.fromhex("00000000")


def test_ilist_layout():
    ilist = (Address(0x0A000001, 5001), Address(0x0A000002, 5002))
    p = Packet(PacketType.RSYN, Flags.VERSION | Flags.ILIST, 3, 4, 0, 1, ilist)
    tail = encode(p)[20 + 4 :]
    assert tail == bytes.fromhex("02 0A000001 1389 0A000002 138A")


def test_data_payload_layout():
    p = Packet(PacketType.DATA, Flags.PING, 3, 4, 0, payload=b"hi")
    assert encode(p)[20:] == bytes.fromhex("0002 6869")


def test_bad_magic():
    good = encode(Packet(PacketType.ACK, Flags.VERSION, 7, 9, 1, version=2))
    with pytest.raises(BadMagic):
        decode(b"\xED" + good[1:])
    with pytest.raises(BadMagic):
        decode(good[:1] + b"\x02" + good[2:])


def test_bad_type():
    good = bytearray(encode(Packet(PacketType.ACK, Flags.VERSION, 7, 9, 1, version=2)))
    for t in (0, 7, 255):
        good[2] = t
        with pytest.raises(BadType):
            decode(bytes(good))


def test_truncated_ilist():
    p = Packet(PacketType.SYN, Flags.VERSION | Flags.ILIST, 0, 5, 1, 0, (Address(1, 1), Address(2, 2)))
    b = encode(p)
    with pytest.raises(TruncatedPacket):
        decode(b[:-3])
    with pytest.raises(TruncatedPacket):
        decode(b[: codec.HEADER_LEN + 4])


def test_trailing_bytes_rejected():
    b = encode(Packet(PacketType.ACK, Flags.VERSION, 7, 9, 1, version=2))
    with pytest.raises(TrailingBytes):
        decode(b + b"\x00")


def test_inconsistent_flags():
    # SYN without the ilist flag.
    b = bytearray(encode(Packet(PacketType.ACK, Flags.VERSION, 7, 9, 1, version=2)))
    b[2] = PacketType.SYN
    with pytest.raises(InconsistentFlags):
        decode(bytes(b))
    # unknown flag bit
    b = bytearray(encode(Packet(PacketType.ACK, Flags.VERSION, 7, 9, 1, version=2)))
    b[3] |= 0x80
    with pytest.raises(InconsistentFlags):
        decode(bytes(b))


def test_encode_rejects_invalid_packets():
    with pytest.raises(ValueError):
        encode(Packet(PacketType.RSYN, Flags.VERSION, 1, 2, 3, 4))  # no ilist
    with pytest.raises(ValueError):
        encode(Packet(PacketType.ACK, 0, 1, 2, 3))  # no version
    with pytest.raises(ValueError):
        encode(Packet(PacketType.DATA, Flags.PING | Flags.PONG, 1, 2, 3))


@given(packets())
def test_round_trip(p):
    assert decode(encode(p)) == p


@given(packets())
def test_length_is_function_of_shape(p):
    assert len(encode(p)) == encoded_length(p.ptype, p.flags, len(p.ilist), len(p.payload))


@given(packets())
def test_every_truncation_is_a_decode_error(p):
    b = encode(p)
    for n in range(len(b)):
        with pytest.raises(DecodeError):
            decode(b[:n])


@given(st.binary(max_size=80))
def test_arbitrary_bytes_never_crash(b):
    try:
        p = decode(b)
    except DecodeError:
        return
    assert encode(p) == b
