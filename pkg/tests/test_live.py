import asyncio
import socket
import subprocess
import sys

from flowmove import live
from flowmove.packet import Address
from flowmove.proto import K
from flowmove.runtime import EndpointConfig


def free_port():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_demo_survives_server_move():
    stats = asyncio.run(live.demo(pings=20, migrate_at=10, client_addr=Address.parse(f"127.0.0.1:{free_port()}"),
                                  server_addr=Address.parse(f"127.0.0.1:{free_port()}"),
                                  server_new=Address.parse(f"127.0.0.2:{free_port()}")))
    assert not stats["failed"]
    assert stats["answered"] + stats["lost"] == 20 and stats["lost"] <= 2
    assert stats["client_remote"].host == Address.parse("127.0.0.2:1").host


async def _forged_rsyn():
    s_addr = Address.parse(f"127.0.0.1:{free_port()}")
    c_addr = Address.parse(f"127.0.0.1:{free_port()}")
    server = live.LiveNode(EndpointConfig(ilist=(s_addr,), seed=1), lambda s: None)
    client = live.LiveNode(EndpointConfig(ilist=(c_addr,), seed=2), lambda s: None)
    await server.open(s_addr)
    await client.open(c_addr)
    try:
        server.endpoint.listen()
        client.endpoint.connect(c_addr, s_addr)
        await asyncio.wait_for(server.established.wait(), 2)
        await asyncio.wait_for(client.established.wait(), 2)
        before = server.endpoint.conn
        client.forge()
        await asyncio.sleep(0.1)
        rtt = await client.ping(1.0)
        return server, before, rtt
    finally:
        client.close()
        server.close()


def test_forged_rsyn_ignored():
    server, before, rtt = asyncio.run(_forged_rsyn())
    assert server.endpoint.drops["protocol"] == 1
    assert server.endpoint.conn.flows[0].remote_addr == before.flows[0].remote_addr
    assert server.endpoint.conn.flows[0].kind == K.ESTABLISHED
    assert rtt is not None


def test_cli_client_server():
    port = free_port()
    server = subprocess.Popen(
        [sys.executable, "-m", "flowmove", "live", "server", "--local", f"127.0.0.1:{port}"],
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
    )
    try:
        assert "listening" in server.stdout.readline()
        client = subprocess.run(
            [sys.executable, "-m", "flowmove", "live", "client", "--local", f"127.0.0.1:{free_port()}",
             "--peer", f"127.0.0.1:{port}", "--corrupt-nonce"],
            input="ping 3\nstatus\nquit\n", capture_output=True, text=True, timeout=30,
        )
        assert client.returncode == 0, client.stderr
        assert client.stdout.count("pong rtt=") == 3
        out, _ = server.communicate("status\nquit\n", timeout=30)
        assert server.returncode == 0
        assert "drops decode=0 protocol=1" in out
        assert "ESTABLISHED" in out
    finally:
        if server.poll() is None:
            server.kill()


def test_bind_conflict_is_usage_error():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        out = subprocess.run([sys.executable, "-m", "flowmove", "live", "server", "--local", f"127.0.0.1:{port}"],
                             input="", capture_output=True, text=True, timeout=30)
    assert out.returncode == 2 and "cannot bind" in out.stderr
