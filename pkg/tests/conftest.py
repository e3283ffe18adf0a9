from hypothesis import HealthCheck, settings

from flowmove.packet import Address

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def addr(n: int, port: int = 5001) -> Address:
    """Interface addresses A1..A6 as 10.0.0.n."""
    return Address(0x0A000000 + n, port)


A1, A2, A3, A4, A5, A6 = (addr(i) for i in range(1, 7))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.VERDICTS):
            terminalreporter.write_line(line)
