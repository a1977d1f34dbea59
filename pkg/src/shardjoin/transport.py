"""Byte-stream transports: TCP for real deployments, in-memory pipes for the simulator.

Both expose the same surface (``listen``/``connect`` returning listeners and
connections with ``sendall``/``readinto_exact``/``close``), which is all the
node runtime touches.
"""

from __future__ import annotations

import errno
import socket
from collections import deque

_RECV_CHUNK = 1 << 16


class ConnectionClosed(ConnectionError):
    """Peer closed the stream before the expected bytes arrived."""


class TransportError(ConnectionError):
    """Connection could not be established or was broken."""


class _Connection:
    bytes_sent = 0
    bytes_received = 0

    def read_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        self.readinto_exact(memoryview(buf))
        return bytes(buf)

    def readinto_exact(self, view: memoryview) -> None:
        view = view.cast("B") if view.format != "B" else view
        got = 0
        while got < len(view):
            n = self.readinto(view[got:])
            if n == 0:
                raise ConnectionClosed(f"stream ended after {got} of {len(view)} bytes")
            got += n


class TcpConnection(_Connection):
    def __init__(self, sock: socket.socket, io_timeout: float | None = 60.0):
        sock.settimeout(io_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._buf = bytearray(_RECV_CHUNK)
        self._start = 0
        self._end = 0
        self.bytes_sent = 0
        self.bytes_received = 0

    def sendall(self, data) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc
        self.bytes_sent += len(data) if not isinstance(data, memoryview) else data.nbytes

    def readinto(self, view: memoryview) -> int:
        if self._start < self._end:
            n = min(len(view), self._end - self._start)
            view[:n] = self._buf[self._start:self._start + n]
            self._start += n
            return n
        try:
            if len(view) >= _RECV_CHUNK:
                n = self._sock.recv_into(view)
                self.bytes_received += n
                return n
            filled = self._sock.recv_into(self._buf)
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        self.bytes_received += filled
        n = min(len(view), filled)
        view[:n] = self._buf[:n]
        self._start, self._end = n, filled
        return n

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def abort(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.close()


class TcpListener:
    def __init__(self, sock: socket.socket, io_timeout: float | None):
        self._sock = sock
        self._io_timeout = io_timeout
        self._closed = False
        sock.settimeout(0.2)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self) -> TcpConnection | None:
        """Next connection, or None once the listener is closed."""
        while not self._closed:
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                if self._closed:
                    return None
                raise
            return TcpConnection(conn, self._io_timeout)
        return None

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass


class TcpTransport:
    def __init__(self, io_timeout: float | None = 60.0, connect_timeout: float = 5.0):
        self.io_timeout = io_timeout
        self.connect_timeout = connect_timeout

    def listen(self, ip: str, port: int) -> TcpListener:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((ip, port))
        except OSError:
            sock.close()
            raise
        sock.listen(128)
        return TcpListener(sock, self.io_timeout)

    def connect(self, ip: str, port: int) -> TcpConnection:
        sock = socket.create_connection((ip, port), timeout=self.connect_timeout)
        return TcpConnection(sock, self.io_timeout)


class _Pipe:
    """One direction of an in-memory stream with a bounded byte buffer."""

    def __init__(self, runtime, capacity: int):
        self._cond = runtime.condition()
        self._checkpoint = runtime.checkpoint
        self._buf = bytearray()
        self._capacity = capacity
        self._eof = False
        self._broken = False

    def write(self, data) -> None:
        view = memoryview(data).cast("B")
        pos = 0
        while pos < len(view):
            self._checkpoint()
            with self._cond:
                while len(self._buf) >= self._capacity and not self._broken:
                    self._cond.wait()
                if self._broken or self._eof:
                    raise TransportError("pipe closed by peer")
                n = min(self._capacity - len(self._buf), len(view) - pos)
                self._buf += view[pos:pos + n]
                pos += n
                self._cond.notify_all()

    def readinto(self, view: memoryview) -> int:
        self._checkpoint()
        with self._cond:
            while not self._buf and not self._eof and not self._broken:
                self._cond.wait()
            if self._broken:
                raise TransportError("pipe aborted")
            n = min(len(view), len(self._buf))
            view[:n] = self._buf[:n]
            del self._buf[:n]
            self._cond.notify_all()
            return n

    def close_write(self) -> None:
        with self._cond:
            self._eof = True
            self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self._broken = True
            self._cond.notify_all()


class MemConnection(_Connection):
    def __init__(self, inbound: _Pipe, outbound: _Pipe):
        self._in = inbound
        self._out = outbound
        self.bytes_sent = 0
        self.bytes_received = 0

    def sendall(self, data) -> None:
        self._out.write(data)
        self.bytes_sent += memoryview(data).nbytes

    def readinto(self, view: memoryview) -> int:
        n = self._in.readinto(view)
        self.bytes_received += n
        return n

    def close(self) -> None:
        self._out.close_write()

    def abort(self) -> None:
        self._out.abort()
        self._in.abort()


class MemListener:
    def __init__(self, transport: MemTransport, key: tuple[str, int], runtime):
        self._transport = transport
        self._key = key
        self._cond = runtime.condition()
        self._backlog: deque[MemConnection] = deque()
        self._closed = False

    @property
    def address(self) -> tuple[str, int]:
        return self._key

    def _enqueue(self, conn: MemConnection) -> None:
        with self._cond:
            if self._closed:
                raise ConnectionRefusedError(errno.ECONNREFUSED, "listener closed")
            self._backlog.append(conn)
            self._cond.notify_all()

    def accept(self) -> MemConnection | None:
        with self._cond:
            while not self._backlog and not self._closed:
                self._cond.wait()
            if self._closed:
                return None
            return self._backlog.popleft()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            for conn in self._backlog:
                conn.abort()
            self._backlog.clear()
            self._cond.notify_all()
        self._transport._unregister(self._key)


class MemTransport:
    """In-process transport; addresses are plain ``(ip, port)`` keys."""

    def __init__(self, runtime, pipe_capacity: int = 64 * 1024):
        self.runtime = runtime
        self.pipe_capacity = pipe_capacity
        self._listeners: dict[tuple[str, int], MemListener] = {}
        self._lock = runtime.lock()
        self.connects = 0

    def listen(self, ip: str, port: int) -> MemListener:
        key = (ip, port)
        with self._lock:
            if key in self._listeners:
                raise OSError(errno.EADDRINUSE, f"address {ip}:{port} already in use")
            listener = MemListener(self, key, self.runtime)
            self._listeners[key] = listener
        return listener

    def _unregister(self, key: tuple[str, int]) -> None:
        with self._lock:
            self._listeners.pop(key, None)

    def connect(self, ip: str, port: int) -> MemConnection:
        with self._lock:
            listener = self._listeners.get((ip, port))
        if listener is None:
            raise ConnectionRefusedError(errno.ECONNREFUSED, f"nothing listening on {ip}:{port}")
        a_to_b = _Pipe(self.runtime, self.pipe_capacity)
        b_to_a = _Pipe(self.runtime, self.pipe_capacity)
        client = MemConnection(b_to_a, a_to_b)
        listener._enqueue(MemConnection(a_to_b, b_to_a))
        self.connects += 1
        return client


def connect_with_retry(transport, ip: str, port: int, *, initial_s: float = 0.05,
                       factor: float = 2.0, attempts: int = 10, sleep=None,
                       should_stop=None):
    """Connect, retrying refused/reset connections with exponential backoff.

    Raises :class:`TransportError` once ``attempts`` connects have failed.
    """
    delay = initial_s
    last: Exception | None = None
    for attempt in range(attempts):
        if should_stop is not None and should_stop():
            break
        try:
            return transport.connect(ip, port)
        except (ConnectionRefusedError, ConnectionResetError, socket.timeout, OSError) as exc:
            last = exc
        if attempt + 1 < attempts:
            sleep(delay)
            delay *= factor
    raise TransportError(f"could not connect to {ip}:{port} after {attempts} attempts: {last}")
