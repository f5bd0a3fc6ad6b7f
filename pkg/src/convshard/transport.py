"""Stream connections: real TCP sockets and an in-memory loopback pair.

Both expose the same small surface used by the protocol layer:
``sendall(data)``, ``recv_exact(n)``, ``settimeout(seconds)``, ``close()``,
plus ``bytes_sent`` / ``bytes_received`` counters.
"""
import collections
import os
import socket
import threading
import time

from .errors import ConfigurationError, ConnectionLostError, TransportError, TransportTimeout

DEFAULT_PORT = 7077
DEFAULT_TIMEOUT = 300.0


def default_port():
    value = os.environ.get("CONVSHARD_PORT")
    if not value:
        return DEFAULT_PORT
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"CONVSHARD_PORT must be an integer, got {value!r}") from None


def parse_address(text, port=None):
    """``"host:port"`` or ``"host"`` -> ``(host, port)``."""
    port = default_port() if port is None else port
    host, sep, p = text.strip().rpartition(":")
    if not sep:
        return text.strip(), port
    try:
        return host, int(p)
    except ValueError:
        raise ConfigurationError(f"bad address {text!r}") from None


class SocketConnection:
    def __init__(self, sock, peer=""):
        self.sock = sock
        self.peer = peer
        self.bytes_sent = 0
        self.bytes_received = 0
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def settimeout(self, seconds):
        self.sock.settimeout(seconds)

    def sendall(self, data):
        try:
            self.sock.sendall(data)
        except socket.timeout:
            raise TransportTimeout(f"send to {self.peer} timed out") from None
        except OSError as exc:
            raise ConnectionLostError(f"send to {self.peer} failed: {exc}") from exc
        self.bytes_sent += len(data)

    def recv_exact(self, n):
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            try:
                k = self.sock.recv_into(view[got:])
            except socket.timeout:
                raise TransportTimeout(f"no data from {self.peer} within timeout") from None
            except OSError as exc:
                raise ConnectionLostError(f"receive from {self.peer} failed: {exc}") from exc
            if k == 0:
                raise ConnectionLostError(f"{self.peer} closed the connection after {got} of {n} bytes")
            got += k
        self.bytes_received += n
        return buf

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _Pipe:
    """One direction of a loopback connection: an unbounded queue of byte chunks.

    Large chunks are queued by reference rather than copied, so a sender must
    not modify a buffer after handing it to ``write``.  Readers always get a
    fresh copy.
    """

    COPY_BELOW = 1 << 16

    def __init__(self):
        self.chunks = collections.deque()
        self.head = 0  # bytes already consumed from chunks[0]
        self.size = 0
        self.cond = threading.Condition()
        self.closed = False

    def write(self, data):
        view = memoryview(data).cast("B")
        if view.nbytes < self.COPY_BELOW:
            view = memoryview(bytes(view))
        with self.cond:
            if self.closed:
                raise ConnectionLostError("write to a closed loopback connection")
            if view.nbytes:
                self.chunks.append(view)
                self.size += view.nbytes
                self.cond.notify_all()

    def read_exact(self, n, timeout):
        deadline = None if timeout is None else time.monotonic() + timeout
        with self.cond:
            while self.size < n and not self.closed:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TransportTimeout("no data on loopback connection within timeout")
                self.cond.wait(remaining)
            if self.size < n:
                raise ConnectionLostError(f"loopback peer closed with {self.size} of {n} bytes pending")
            out = bytearray(n)
            got = 0
            while got < n:
                chunk = self.chunks[0]
                k = min(n - got, chunk.nbytes - self.head)
                out[got : got + k] = chunk[self.head : self.head + k]
                got += k
                self.head += k
                if self.head == chunk.nbytes:
                    self.chunks.popleft()
                    self.head = 0
            self.size -= n
            return out

    def close(self):
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class LoopbackConnection:
    """In-process stream endpoint; behaves like a connected TCP socket."""

    def __init__(self, outgoing, incoming, peer="loopback"):
        self._out = outgoing
        self._in = incoming
        self.peer = peer
        self.timeout = None
        self.bytes_sent = 0
        self.bytes_received = 0

    def settimeout(self, seconds):
        self.timeout = seconds

    def sendall(self, data):
        self._out.write(data)
        self.bytes_sent += len(data)

    def recv_exact(self, n):
        out = self._in.read_exact(n, self.timeout)
        self.bytes_received += n
        return out

    def close(self):
        self._out.close()
        self._in.close()


def loopback_pair(name="loopback"):
    """Two connected in-memory endpoints ``(a, b)``."""
    ab, ba = _Pipe(), _Pipe()
    return LoopbackConnection(ab, ba, f"{name}/b"), LoopbackConnection(ba, ab, f"{name}/a")


def connect(address, timeout=DEFAULT_TIMEOUT, connect_timeout=10.0, retry_interval=0.2):
    """Open a TCP connection to ``(host, port)``, retrying until ``connect_timeout`` expires."""
    host, port = address
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            break
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
            time.sleep(retry_interval)
    conn = SocketConnection(sock, f"{host}:{port}")
    conn.settimeout(timeout)
    return conn


def listen(port, host="0.0.0.0"):
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    return srv


def accept(server, timeout=DEFAULT_TIMEOUT):
    server.settimeout(timeout)
    try:
        sock, (host, port) = server.accept()
    except socket.timeout:
        raise TransportTimeout("no incoming connection within timeout") from None
    conn = SocketConnection(sock, f"{host}:{port}")
    conn.settimeout(timeout)
    return conn


def measure_loopback_bandwidth(nbytes=64 << 20, chunk=1 << 20):
    """Throughput of a localhost TCP connection, in bits per second."""
    srv = listen(0, "127.0.0.1")
    port = srv.getsockname()[1]
    received = []

    def sink():
        conn = accept(srv, 30.0)
        got = 0
        while got < nbytes:
            got += len(conn.recv_exact(min(chunk, nbytes - got)))
        received.append(got)
        conn.sendall(b"k")
        conn.close()

    t = threading.Thread(target=sink, daemon=True)
    t.start()
    conn = connect(("127.0.0.1", port), timeout=30.0)
    payload = bytes(chunk)
    t0 = time.perf_counter()
    sent = 0
    while sent < nbytes:
        part = payload[: min(chunk, nbytes - sent)]
        conn.sendall(part)
        sent += len(part)
    conn.recv_exact(1)
    elapsed = time.perf_counter() - t0
    conn.close()
    t.join()
    srv.close()
    return nbytes * 8 / elapsed
