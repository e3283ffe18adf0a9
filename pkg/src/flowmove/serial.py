"""32-bit serial-number arithmetic for connection version numbers.

Version numbers wrap around the same way TCP sequence numbers do: ``a`` is
newer than ``b`` when the forward distance from ``b`` to ``a`` is in
``(0, 2**31)``.
"""

import logging

logger = logging.getLogger(__name__)

SERIAL_BITS = 32
SERIAL_MOD = 1 << SERIAL_BITS
HALF_WINDOW = 1 << (SERIAL_BITS - 1)


def version_gt(a: int, b: int) -> bool:
    """Return True iff version ``a`` is serially newer than ``b``.

    The comparison is undefined when the two values are exactly half the
    number space apart; that case returns False and logs a diagnostic.
    """
    distance = (a - b) % SERIAL_MOD
    if distance == HALF_WINDOW:
        logger.warning("version comparison at half-window distance: %d vs %d", a, b)
        return False
    return 0 < distance < HALF_WINDOW


def version_ge(a: int, b: int) -> bool:
    return a == b or version_gt(a, b)


def version_next(v: int) -> int:
    return (v + 1) % SERIAL_MOD
