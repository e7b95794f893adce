"""Server-side WebSocket framing (RFC 6455) over plain sockets.

Just enough of the protocol for one service: HTTP upgrade handshake,
single-frame and fragmented messages, ping/pong, masked client frames,
and the close handshake. No extensions, no compression, no client role.
Text frames carry control/telemetry JSON; binary frames carry snapshot
payloads.
"""

from __future__ import annotations

import base64
import hashlib
import struct
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONTINUATION = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

_CONTROL_OPS = (OP_CLOSE, OP_PING, OP_PONG)
_DATA_OPS = (OP_TEXT, OP_BINARY)

MAX_MESSAGE_BYTES = 64 * 1024 * 1024
MAX_HEADER_BYTES = 64 * 1024


class ProtocolError(Exception):
    """Peer violated the framing rules; the connection is unusable."""


class ConnectionClosed(Exception):
    """The peer closed (or the socket died). `code` is the close code if any."""

    def __init__(self, code: Optional[int] = None, reason: str = ""):
        super().__init__(f"connection closed (code={code}, reason={reason!r})")
        self.code = code
        self.reason = reason


@dataclass
class HttpRequest:
    method: str
    target: str
    headers: dict  # keys lower-cased

    def header(self, name: str, default: str = "") -> str:
        return self.headers.get(name.lower(), default)


def read_http_request(rfile) -> HttpRequest:
    """Parse one HTTP/1.1 request head from a buffered binary file."""
    request_line = rfile.readline(MAX_HEADER_BYTES)
    if not request_line:
        raise ConnectionClosed()
    parts = request_line.decode("latin-1").strip().split()
    if len(parts) != 3 or not parts[2].startswith("HTTP/"):
        raise ProtocolError(f"malformed request line: {request_line!r}")
    headers = {}
    total = len(request_line)
    while True:
        line = rfile.readline(MAX_HEADER_BYTES)
        total += len(line)
        if total > MAX_HEADER_BYTES:
            raise ProtocolError("request head too large")
        if line in (b"\r\n", b"\n", b""):
            break
        name, _, value = line.decode("latin-1").partition(":")
        headers[name.strip().lower()] = value.strip()
    return HttpRequest(method=parts[0], target=parts[1], headers=headers)


def is_websocket_upgrade(request: HttpRequest) -> bool:
    connection = {t.strip().lower() for t in request.header("connection").split(",")}
    return (
        request.method == "GET"
        and request.header("upgrade").lower() == "websocket"
        and "upgrade" in connection
        and bool(request.header("sec-websocket-key"))
    )


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def handshake_response(request: HttpRequest) -> bytes:
    key = request.header("sec-websocket-key")
    return (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept_key(key)}\r\n"
        "\r\n"
    ).encode("ascii")


def _unmask(payload: bytes, mask: bytes) -> bytes:
    if not payload:
        return b""
    data = np.frombuffer(payload, dtype=np.uint8)
    keys = np.frombuffer(mask, dtype=np.uint8)
    return (data ^ np.resize(keys, data.shape[0])).tobytes()


@dataclass
class Frame:
    fin: bool
    opcode: int
    payload: bytes


class WebSocket:
    """One upgraded server-side connection.

    recv() returns complete application messages as (opcode, payload) and
    transparently answers pings and the close handshake. Sends are
    serialized with a lock so multiple threads may share the send side.
    """

    def __init__(self, sock, rfile=None):
        self._sock = sock
        self._rfile = rfile if rfile is not None else sock.makefile("rb")
        self._send_lock = threading.Lock()
        self._closed = False

    # -- receive path -------------------------------------------------------

    def _read_exact(self, n: int) -> bytes:
        data = self._rfile.read(n)
        if data is None or len(data) < n:
            raise ConnectionClosed()
        return data

    def _read_frame(self) -> Frame:
        head = self._read_exact(2)
        b0, b1 = head[0], head[1]
        if b0 & 0x70:
            raise ProtocolError("RSV bits set without a negotiated extension")
        fin = bool(b0 & 0x80)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        if length == 126:
            (length,) = struct.unpack("!H", self._read_exact(2))
        elif length == 127:
            (length,) = struct.unpack("!Q", self._read_exact(8))
        if length > MAX_MESSAGE_BYTES:
            raise ProtocolError(f"frame of {length} bytes exceeds limit")
        if opcode in _CONTROL_OPS and (not fin or length > 125):
            raise ProtocolError("control frames must be short and unfragmented")
        if not masked:
            raise ProtocolError("client frames must be masked")
        mask = self._read_exact(4)
        payload = _unmask(self._read_exact(length), mask) if length else b""
        return Frame(fin=fin, opcode=opcode, payload=payload)

    def recv(self) -> tuple[int, bytes]:
        """Next complete data message as (OP_TEXT|OP_BINARY, payload bytes)."""
        message_op: Optional[int] = None
        parts: list[bytes] = []
        size = 0
        while True:
            frame = self._read_frame()
            if frame.opcode == OP_PING:
                self._send_frame(OP_PONG, frame.payload)
                continue
            if frame.opcode == OP_PONG:
                continue
            if frame.opcode == OP_CLOSE:
                code, reason = None, ""
                if len(frame.payload) >= 2:
                    (code,) = struct.unpack("!H", frame.payload[:2])
                    reason = frame.payload[2:].decode("utf-8", "replace")
                self._reply_close(frame.payload[:2])
                raise ConnectionClosed(code, reason)
            if frame.opcode == OP_CONTINUATION:
                if message_op is None:
                    raise ProtocolError("continuation frame with nothing to continue")
            elif frame.opcode in _DATA_OPS:
                if message_op is not None:
                    raise ProtocolError("new data frame inside a fragmented message")
                message_op = frame.opcode
            else:
                raise ProtocolError(f"unknown opcode {frame.opcode:#x}")
            parts.append(frame.payload)
            size += len(frame.payload)
            if size > MAX_MESSAGE_BYTES:
                raise ProtocolError("fragmented message exceeds limit")
            if frame.fin:
                return message_op, b"".join(parts)

    def recv_text(self) -> str:
        opcode, payload = self.recv()
        if opcode != OP_TEXT:
            raise ProtocolError("expected a text message")
        return payload.decode("utf-8")

    # -- send path ----------------------------------------------------------

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        length = len(payload)
        if length < 126:
            header = struct.pack("!BB", 0x80 | opcode, length)
        elif length < 1 << 16:
            header = struct.pack("!BBH", 0x80 | opcode, 126, length)
        else:
            header = struct.pack("!BBQ", 0x80 | opcode, 127, length)
        with self._send_lock:
            self._sock.sendall(header + payload)

    def send_text(self, text: str) -> None:
        self._send_frame(OP_TEXT, text.encode("utf-8"))

    def send_binary(self, payload: bytes) -> None:
        self._send_frame(OP_BINARY, payload)

    def send_ping(self, payload: bytes = b"") -> None:
        self._send_frame(OP_PING, payload)

    def _send_close_frame(self, payload: bytes, timeout: float) -> None:
        """Best-effort close frame: never blocks past `timeout`.

        Another thread may be wedged inside sendall to a stalled peer while
        holding the send lock; a close must not wait behind it.
        """
        if not self._send_lock.acquire(timeout=timeout):
            return
        try:
            self._sock.settimeout(timeout)
            self._sock.sendall(struct.pack("!BB", 0x80 | OP_CLOSE, len(payload)) + payload)
        except OSError:
            pass
        finally:
            self._send_lock.release()

    def _reply_close(self, code_bytes: bytes) -> None:
        if self._closed:
            return
        self._closed = True
        self._send_close_frame(code_bytes, timeout=0.5)

    def send_close(self, code: int = 1000, reason: str = "", timeout: float = 0.5) -> None:
        if self._closed:
            return
        self._closed = True
        self._send_close_frame(struct.pack("!H", code) + reason.encode("utf-8"), timeout)

    def close_socket(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
