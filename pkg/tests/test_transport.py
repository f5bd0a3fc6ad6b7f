import socket
import threading

import numpy as np
import pytest

from convshard.errors import ConfigurationError, ConnectionLostError, TransportError, TransportTimeout
from convshard.protocol import ConvResult, Direction, Hello, recv_message, send_message
from convshard.transport import (
    DEFAULT_PORT,
    accept,
    connect,
    default_port,
    listen,
    loopback_pair,
    parse_address,
)


@pytest.fixture
def tcp_pair():
    srv = listen(0, "127.0.0.1")
    port = srv.getsockname()[1]
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("conn", accept(srv, 5.0)))
    t.start()
    client = connect(("127.0.0.1", port), timeout=5.0)
    t.join()
    srv.close()
    yield client, box["conn"]
    client.close()
    box["conn"].close()


def both_kinds(tcp_pair):
    return {"loopback": loopback_pair(), "tcp": tcp_pair}


def test_port_defaults_and_environment(monkeypatch):
    monkeypatch.delenv("CONVSHARD_PORT", raising=False)
    assert default_port() == DEFAULT_PORT
    monkeypatch.setenv("CONVSHARD_PORT", "9123")
    assert default_port() == 9123
    assert parse_address("node7") == ("node7", 9123)
    monkeypatch.setenv("CONVSHARD_PORT", "abc")
    with pytest.raises(ConfigurationError):
        default_port()


def test_parse_address():
    assert parse_address("10.0.0.2:8000") == ("10.0.0.2", 8000)
    assert parse_address(" host ", 1) == ("host", 1)
    with pytest.raises(ConfigurationError):
        parse_address("host:port")


@pytest.mark.parametrize("kind", ["loopback", "tcp"])
def test_messages_cross_both_transports_identically(kind, tcp_pair):
    a, b = both_kinds(tcp_pair)[kind]
    big = ConvResult(1, Direction.FORWARD, np.random.default_rng(0).random((4, 8, 32, 32)))
    n1 = send_message(a, Hello("dev"))
    n2 = send_message(a, big)
    assert recv_message(b) == Hello("dev")
    assert recv_message(b) == big
    assert a.bytes_sent == b.bytes_received == n1 + n2


@pytest.mark.parametrize("kind", ["loopback", "tcp"])
def test_read_timeout(kind, tcp_pair):
    _, b = both_kinds(tcp_pair)[kind]
    b.settimeout(0.05)
    with pytest.raises(TransportTimeout):
        b.recv_exact(1)


@pytest.mark.parametrize("kind", ["loopback", "tcp"])
def test_peer_close_mid_read(kind, tcp_pair):
    a, b = both_kinds(tcp_pair)[kind]
    b.settimeout(2.0)
    a.sendall(b"abc")
    a.close()
    with pytest.raises(ConnectionLostError):
        b.recv_exact(10)


def test_loopback_reader_gets_a_private_copy():
    a, b = loopback_pair()
    data = bytearray(1 << 17)
    a.sendall(data)
    got = b.recv_exact(len(data))
    got[0] = 7
    assert data[0] == 0


def test_loopback_write_after_close_fails():
    a, _ = loopback_pair()
    a.close()
    with pytest.raises(ConnectionLostError):
        a.sendall(b"x")


def test_connect_to_closed_port_fails_fast():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(TransportError, match=f"127.0.0.1:{port}"):
        connect(("127.0.0.1", port), connect_timeout=0.3, retry_interval=0.05)


def test_accept_times_out():
    srv = listen(0, "127.0.0.1")
    try:
        with pytest.raises(TransportTimeout):
            accept(srv, 0.05)
    finally:
        srv.close()
