"""Drive two proto-core connections by hand, delivering emitted packets explicitly."""

from flowmove import proto
from flowmove.proto import FlowIds, PacketArrival, initiate_connection, listen, transition

from .conftest import A1, A3

CLIENT_FID, SERVER_FID = 7, 9
CLIENT_NONCE, SERVER_NONCE = 0x1111, 0x2222


def arrival(emit, fresh=0):
    return PacketArrival(emit.packet, emit.src, emit.dst, fresh)


def handshake(client_addr=A1, server_addr=A3, client_v=0, server_v=100, server_ilist=None):
    """Return (client, server) after a lossless three-way handshake."""
    client, a = initiate_connection(client_addr, server_addr, FlowIds(CLIENT_FID, CLIENT_NONCE, client_v))
    server = listen(server_ilist or (server_addr,), SERVER_NONCE, server_v)
    server, b = transition(server, arrival(a.emit[0], SERVER_FID))
    client, c = transition(client, arrival(b.emit[0]))
    server, _ = transition(server, arrival(c.emit[0]))
    assert client.flows[0].kind == proto.K.ESTABLISHED
    assert server.flows[0].kind == proto.K.ESTABLISHED
    return client, server


def deliver(conn, actions, i=0):
    return transition(conn, arrival(actions.emit[i]))
