"""Shared builders for randomized test scenes, plus a tiny WebSocket client."""
from __future__ import annotations

import base64
import os
import socket
import struct

import numpy as np

from telesplat.core import CameraIntrinsics, Frame, Keyframe, PoseSE3, Quat, Vec3
from telesplat.gaussian_map import GaussianMap


def small_camera(width=64, height=48, fx=40.0, fy=42.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)


def random_pose(rng, max_angle=0.15, max_shift=0.1) -> PoseSE3:
    axis = Vec3(*rng.normal(size=3))
    return PoseSE3(
        rotation=Quat.from_axis_angle(axis, float(rng.uniform(-max_angle, max_angle))),
        translation=Vec3(*(rng.normal(size=3) * max_shift)),
    )


def random_map(rng, n, z_range=(1.5, 4.0), scale_range=(0.05, 0.25),
               logit_range=(-2.5, 1.5)) -> GaussianMap:
    """Gaussians scattered in front of the origin-facing camera."""
    m = GaussianMap()
    positions = np.column_stack([
        rng.uniform(-0.8, 0.8, n),
        rng.uniform(-0.6, 0.6, n),
        rng.uniform(*z_range, n),
    ])
    rotations = rng.normal(size=(n, 4))
    log_scales = np.log(rng.uniform(*scale_range, (n, 3)))
    logits = rng.uniform(*logit_range, n)
    colors = rng.uniform(0.05, 0.95, (n, 3))
    m.append_batch(positions, rotations, log_scales, logits, colors)
    return m


def random_keyframe(rng, intrinsics, pose=None, kf_id=0) -> Keyframe:
    h, w = intrinsics.height, intrinsics.width
    frame = Frame(
        timestamp_us=0,
        pose=pose if pose is not None else random_pose(rng),
        intrinsics=intrinsics,
        rgb=rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
        depth=np.zeros((h, w), dtype=np.float32),
    )
    return Keyframe(frame=frame, keyframe_id=kf_id)


class WsTestClient:
    """Minimal client-side WebSocket, independent of the server code.

    Masks outgoing frames as clients must, parses unmasked server frames,
    and exposes blocking recv with a timeout. Enough protocol for the
    service tests; not a general client.
    """

    OP_TEXT = 0x1
    OP_BINARY = 0x2
    OP_CLOSE = 0x8
    OP_PING = 0x9
    OP_PONG = 0xA

    def __init__(self, host: str, port: int, timeout: float = 5.0, path: str = "/"):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(timeout)
        key = base64.b64encode(os.urandom(16)).decode("ascii")
        request = (
            f"GET {path} HTTP/1.1\r\n"
            f"Host: {host}:{port}\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\n"
            "Sec-WebSocket-Version: 13\r\n\r\n"
        )
        self.sock.sendall(request.encode("ascii"))
        self._rfile = self.sock.makefile("rb")
        status = self._rfile.readline()
        if b"101" not in status:
            raise AssertionError(f"upgrade refused: {status!r}")
        while self._rfile.readline() not in (b"\r\n", b"\n", b""):
            pass

    def _read_exact(self, n: int) -> bytes:
        data = self._rfile.read(n)
        if data is None or len(data) < n:
            raise ConnectionError("server closed")
        return data

    def recv(self) -> tuple[int, bytes]:
        """Next data message (opcode, payload); answers pings silently."""
        while True:
            b0, b1 = self._read_exact(2)
            opcode = b0 & 0x0F
            length = b1 & 0x7F
            if length == 126:
                (length,) = struct.unpack("!H", self._read_exact(2))
            elif length == 127:
                (length,) = struct.unpack("!Q", self._read_exact(8))
            assert not (b1 & 0x80), "server frames must not be masked"
            payload = self._read_exact(length) if length else b""
            if opcode == self.OP_PING:
                self._send_frame(self.OP_PONG, payload)
                continue
            if opcode == self.OP_PONG:
                continue
            if opcode == self.OP_CLOSE:
                raise ConnectionError("server sent close")
            return opcode, payload

    def recv_text(self) -> str:
        opcode, payload = self.recv()
        assert opcode == self.OP_TEXT, f"expected text, got opcode {opcode}"
        return payload.decode("utf-8")

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        mask = os.urandom(4)
        length = len(payload)
        if length < 126:
            head = struct.pack("!BB", 0x80 | opcode, 0x80 | length)
        elif length < 1 << 16:
            head = struct.pack("!BBH", 0x80 | opcode, 0x80 | 126, length)
        else:
            head = struct.pack("!BBQ", 0x80 | opcode, 0x80 | 127, length)
        data = np.frombuffer(payload, dtype=np.uint8)
        keys = np.frombuffer(mask, dtype=np.uint8)
        masked = (data ^ np.resize(keys, data.shape[0])).tobytes() if length else b""
        self.sock.sendall(head + mask + masked)

    def send_text(self, text: str) -> None:
        self._send_frame(self.OP_TEXT, text.encode("utf-8"))

    def send_binary(self, payload: bytes) -> None:
        self._send_frame(self.OP_BINARY, payload)

    def close(self) -> None:
        try:
            self._send_frame(self.OP_CLOSE, struct.pack("!H", 1000))
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass
