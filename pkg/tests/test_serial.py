import logging

import pytest
from hypothesis import given, strategies as st

from flowmove.serial import SERIAL_MOD, version_ge, version_gt, version_next


def newer_8bit(a: int, b: int) -> bool:
    """Brute force: a is newer than b if b reaches a in 1..127 forward steps."""
    x = b
    for _ in range(127):
        x = (x + 1) % 256
        if x == a:
            return True
    return False


def lift(v8: int, low: int = 0) -> int:
    """Embed an 8-bit serial value in 32 bits, preserving serial order."""
    return (v8 << 24) | low


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (5, 3, True),
        (3, 3, False),
        (1, 4294967295, True),
        (3, 5, False),
        (4294967295, 1, False),
        (0, 4294967295, True),
    ],
)
def test_examples(a, b, expected):
    assert version_gt(a, b) is expected


def test_half_window_is_false_and_logged(caplog):
    with caplog.at_level(logging.WARNING, logger="flowmove.serial"):
        assert not version_gt(2**31, 0)
        assert not version_gt(0, 2**31)
    assert "half-window" in caplog.text


def test_oracle_sanity():
    assert newer_8bit(1, 255)
    assert not newer_8bit(255, 1)
    assert not newer_8bit(7, 7)
    assert not newer_8bit(128, 0)  # exactly half the space is never newer


@pytest.mark.parametrize("low", [0, 1, 0xABCDEF, 0xFFFFFF])
def test_agrees_with_8bit_oracle_on_all_pairs(low):
    mismatches = [
        (a, b)
        for a in range(256)
        for b in range(256)
        if version_gt(lift(a, low), lift(b, low)) != newer_8bit(a, b)
    ]
    assert mismatches == []


@given(st.integers(0, SERIAL_MOD - 1), st.integers(1, 2**31 - 1))
def test_forward_steps_are_newer(v, k):
    w = (v + k) % SERIAL_MOD
    assert version_gt(w, v)
    assert not version_gt(v, w)


@given(st.integers(0, SERIAL_MOD - 1))
def test_next_is_newer_and_wraps(v):
    assert version_gt(version_next(v), v)
    assert version_ge(v, v)
    assert version_next(SERIAL_MOD - 1) == 0
