"""Binary and text wire formats.

Three message families cross the process boundary:

* ``FrameMessage`` (binary, magic ``GSTF``): one posed RGB-D sensor frame,
  payloads optionally raw-DEFLATE compressed.
* ``SnapshotMessage`` (binary, magic ``GSSM``): full or append-since-epoch
  map sync payloads of packed 48-byte gaussian records.
* Control / telemetry (text): one JSON object per message.

All multi-byte integers are little-endian. Every encoder/decoder pair here
round-trips bit-exactly; that property is load-bearing (the frame log is
replayed byte-for-byte into benchmarks).

Frame streams persist to append-only log files (magic ``GSTL``) whose
payload is simply the concatenated encoded messages; messages are
self-delimiting, so replay needs no index.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

from .core import CameraIntrinsics, Frame, PoseSE3, Quat, Vec3
from .shared_map import RECORD_DTYPE, RECORD_SIZE

FRAME_MAGIC = b"GSTF"
SNAPSHOT_MAGIC = b"GSSM"
LOG_MAGIC = b"GSTL"
WIRE_VERSION = 1

FLAG_HAS_DEPTH = 1 << 0
FLAG_DEFLATE = 1 << 1

SNAPSHOT_FULL = 0
SNAPSHOT_APPEND = 1

_FRAME_HEADER = struct.Struct("<4sHHQ3d4d4fHHII")
_SNAPSHOT_HEADER = struct.Struct("<4sHBBQQI")
_LOG_HEADER = struct.Struct("<4sH10s")

QUAT_UNIT_TOL = 1e-6


class WireError(ValueError):
    """Malformed, truncated, or semantically invalid wire data."""


def _deflate(data: bytes) -> bytes:
    comp = zlib.compressobj(level=6, wbits=-15)
    return comp.compress(data) + comp.flush()


def _inflate(data: bytes) -> bytes:
    try:
        return zlib.decompress(data, wbits=-15)
    except zlib.error as exc:
        raise WireError(f"bad DEFLATE payload: {exc}") from exc


# ---------------------------------------------------------------------------
# FrameMessage


@dataclass(frozen=True)
class FrameMessage:
    """One posed sensor frame as it travels on the wire.

    Intrinsics are carried at float32 precision and the pose at float64;
    construct messages with float32-representable intrinsics if you need
    encode/decode to be an exact identity.
    """

    timestamp_us: int
    position: tuple  # (x, y, z) float64
    quaternion: tuple  # (w, x, y, z) float64, unit
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rgb: np.ndarray  # (h, w, 3) uint8
    depth: Optional[np.ndarray]  # (h, w) float32, 0 = invalid

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrameMessage):
            return NotImplemented
        if (
            self.timestamp_us != other.timestamp_us
            or self.position != other.position
            or self.quaternion != other.quaternion
            or (self.fx, self.fy, self.cx, self.cy) != (other.fx, other.fy, other.cx, other.cy)
            or (self.width, self.height) != (other.width, other.height)
        ):
            return False
        if not np.array_equal(self.rgb, other.rgb):
            return False
        if (self.depth is None) != (other.depth is None):
            return False
        return self.depth is None or bool(
            np.array_equal(
                self.depth.view(np.uint32), other.depth.view(np.uint32)
            )
        )


def encode_frame(msg: FrameMessage, compress: bool = True) -> bytes:
    rgb = np.ascontiguousarray(msg.rgb, dtype=np.uint8)
    if rgb.shape != (msg.height, msg.width, 3):
        raise WireError(f"rgb shape {rgb.shape} does not match {msg.height}x{msg.width}x3")
    rgb_payload = rgb.tobytes()

    flags = 0
    depth_payload = b""
    if msg.depth is not None:
        depth = np.ascontiguousarray(msg.depth, dtype="<f4")
        if depth.shape != (msg.height, msg.width):
            raise WireError(f"depth shape {depth.shape} does not match {msg.height}x{msg.width}")
        depth_payload = depth.tobytes()
        flags |= FLAG_HAS_DEPTH
    if compress:
        flags |= FLAG_DEFLATE
        rgb_payload = _deflate(rgb_payload)
        if depth_payload:
            depth_payload = _deflate(depth_payload)

    header = _FRAME_HEADER.pack(
        FRAME_MAGIC,
        WIRE_VERSION,
        flags,
        msg.timestamp_us,
        *msg.position,
        *msg.quaternion,
        np.float32(msg.fx),
        np.float32(msg.fy),
        np.float32(msg.cx),
        np.float32(msg.cy),
        msg.width,
        msg.height,
        len(rgb_payload),
        len(depth_payload),
    )
    return header + rgb_payload + depth_payload


def decode_frame(data: Union[bytes, memoryview]) -> FrameMessage:
    buf = memoryview(data)
    if len(buf) < _FRAME_HEADER.size:
        raise WireError("frame message shorter than header")
    (
        magic,
        version,
        flags,
        timestamp_us,
        px,
        py,
        pz,
        qw,
        qx,
        qy,
        qz,
        fx,
        fy,
        cx,
        cy,
        width,
        height,
        rgb_len,
        depth_len,
    ) = _FRAME_HEADER.unpack_from(buf, 0)
    if magic != FRAME_MAGIC:
        raise WireError(f"bad frame magic {magic!r}")
    if version != WIRE_VERSION:
        raise WireError(f"unsupported frame version {version}")
    expected = _FRAME_HEADER.size + rgb_len + depth_len
    if len(buf) != expected:
        raise WireError(f"frame length {len(buf)} != declared {expected}")

    norm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if abs(norm - 1.0) > QUAT_UNIT_TOL:
        raise WireError(f"non-unit quaternion on wire (|q| = {norm!r})")

    rgb_payload = bytes(buf[_FRAME_HEADER.size : _FRAME_HEADER.size + rgb_len])
    depth_payload = bytes(buf[_FRAME_HEADER.size + rgb_len : expected])
    if flags & FLAG_DEFLATE:
        rgb_payload = _inflate(rgb_payload)
        if depth_payload:
            depth_payload = _inflate(depth_payload)

    if len(rgb_payload) != width * height * 3:
        raise WireError("rgb payload size does not match resolution")
    rgb = np.frombuffer(rgb_payload, dtype=np.uint8).reshape(height, width, 3)

    depth = None
    if flags & FLAG_HAS_DEPTH:
        if len(depth_payload) != width * height * 4:
            raise WireError("depth payload size does not match resolution")
        depth = np.frombuffer(depth_payload, dtype="<f4").reshape(height, width)
    elif depth_len:
        raise WireError("depth payload present but depth flag clear")

    return FrameMessage(
        timestamp_us=timestamp_us,
        position=(px, py, pz),
        quaternion=(qw, qx, qy, qz),
        fx=float(np.float32(fx)),
        fy=float(np.float32(fy)),
        cx=float(np.float32(cx)),
        cy=float(np.float32(cy)),
        width=width,
        height=height,
        rgb=rgb,
        depth=depth,
    )


def frame_message_size(header: Union[bytes, memoryview]) -> int:
    """Total encoded size of the message whose first bytes are ``header``.

    Needs at least the fixed header; used to split concatenated streams.
    """
    if len(header) < _FRAME_HEADER.size:
        raise WireError("need full fixed header to size a frame message")
    fields = _FRAME_HEADER.unpack_from(header, 0)
    if fields[0] != FRAME_MAGIC:
        raise WireError(f"bad frame magic {fields[0]!r}")
    return _FRAME_HEADER.size + fields[-2] + fields[-1]


def frame_to_message(frame: Frame) -> FrameMessage:
    """Bridge an in-process sensor frame onto the wire representation."""
    p = frame.pose.translation
    q = frame.pose.rotation
    intr = frame.intrinsics
    return FrameMessage(
        timestamp_us=frame.timestamp_us,
        position=(p.x, p.y, p.z),
        quaternion=(q.w, q.x, q.y, q.z),
        fx=intr.fx,
        fy=intr.fy,
        cx=intr.cx,
        cy=intr.cy,
        width=intr.width,
        height=intr.height,
        rgb=frame.rgb,
        depth=frame.depth,
    )


def frame_from_message(msg: FrameMessage) -> Frame:
    """Inverse of frame_to_message; a missing depth plane becomes all-invalid."""
    pose = PoseSE3(
        rotation=Quat(*msg.quaternion),
        translation=Vec3(*msg.position),
    )
    intrinsics = CameraIntrinsics(
        fx=msg.fx, fy=msg.fy, cx=msg.cx, cy=msg.cy, width=msg.width, height=msg.height
    )
    depth = msg.depth
    if depth is None:
        depth = np.zeros((msg.height, msg.width), dtype=np.float32)
    return Frame(
        timestamp_us=msg.timestamp_us,
        pose=pose,
        intrinsics=intrinsics,
        rgb=msg.rgb,
        depth=depth,
    )


# ---------------------------------------------------------------------------
# SnapshotMessage


@dataclass(frozen=True)
class SnapshotMessage:
    kind: int  # SNAPSHOT_FULL or SNAPSHOT_APPEND
    epoch: int
    base_epoch: int  # meaningful for appends, 0 otherwise
    records: np.ndarray  # structured RECORD_DTYPE array

    @property
    def count(self) -> int:
        return self.records.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SnapshotMessage):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.epoch == other.epoch
            and self.base_epoch == other.base_epoch
            and self.records.tobytes() == other.records.tobytes()
        )


def encode_snapshot(msg: SnapshotMessage) -> bytes:
    if msg.kind not in (SNAPSHOT_FULL, SNAPSHOT_APPEND):
        raise WireError(f"bad snapshot kind {msg.kind}")
    base = msg.base_epoch if msg.kind == SNAPSHOT_APPEND else 0
    records = np.ascontiguousarray(msg.records, dtype=RECORD_DTYPE)
    header = _SNAPSHOT_HEADER.pack(
        SNAPSHOT_MAGIC, WIRE_VERSION, msg.kind, 0, msg.epoch, base, records.shape[0]
    )
    return header + records.tobytes()


def decode_snapshot(data: Union[bytes, memoryview]) -> SnapshotMessage:
    buf = memoryview(data)
    if len(buf) < _SNAPSHOT_HEADER.size:
        raise WireError("snapshot message shorter than header")
    magic, version, kind, _pad, epoch, base_epoch, count = _SNAPSHOT_HEADER.unpack_from(buf, 0)
    if magic != SNAPSHOT_MAGIC:
        raise WireError(f"bad snapshot magic {magic!r}")
    if version != WIRE_VERSION:
        raise WireError(f"unsupported snapshot version {version}")
    if kind not in (SNAPSHOT_FULL, SNAPSHOT_APPEND):
        raise WireError(f"bad snapshot kind {kind}")
    expected = _SNAPSHOT_HEADER.size + count * RECORD_SIZE
    if len(buf) != expected:
        raise WireError(f"snapshot length {len(buf)} != declared {expected}")
    records = np.frombuffer(buf, dtype=RECORD_DTYPE, count=count, offset=_SNAPSHOT_HEADER.size)
    return SnapshotMessage(
        kind=kind,
        epoch=epoch,
        base_epoch=base_epoch if kind == SNAPSHOT_APPEND else 0,
        records=records,
    )


class SnapshotAssembler:
    """Client-side state: folds full/append messages into current map state.

    ``apply`` returns True when the message advanced local state; a stale or
    out-of-sequence message returns False and leaves state untouched (the
    caller is expected to request a resync on a failed append).
    """

    def __init__(self) -> None:
        self.epoch = 0
        self.records = np.zeros(0, dtype=RECORD_DTYPE)

    def apply(self, msg: SnapshotMessage) -> bool:
        if msg.epoch <= self.epoch and not (msg.epoch == 0 and self.epoch == 0):
            return False  # stale
        if msg.kind == SNAPSHOT_FULL:
            self.records = msg.records
            self.epoch = msg.epoch
            return True
        if msg.base_epoch != self.epoch:
            return False  # append against a base we do not hold
        self.records = np.concatenate([self.records, msg.records])
        self.epoch = msg.epoch
        return True


# ---------------------------------------------------------------------------
# Control / telemetry JSON

_CONTROL_FIELDS = {
    "goal_vel": ("vx", "vy", "vz", "yaw_rate"),
    "goal_abs": ("x", "y", "z", "yaw"),
    "drop_marker": (),
    "return_home": (),
    # viewer-initiated recovery: asks the service for a fresh full snapshot
    # after an append could not be applied (missed base epoch)
    "resync": (),
}


def encode_control(msg: dict) -> str:
    parse_control_fields(msg)  # validate before sending
    return json.dumps(msg, sort_keys=True, separators=(",", ":"))


def parse_control_fields(obj: dict) -> dict:
    mtype = obj.get("type")
    if mtype not in _CONTROL_FIELDS:
        raise WireError(f"unknown control type {mtype!r}")
    out = {"type": mtype}
    for key in _CONTROL_FIELDS[mtype]:
        if key not in obj:
            raise WireError(f"control {mtype!r} missing field {key!r}")
        value = obj[key]
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise WireError(f"control field {key!r} must be a number")
        if not math.isfinite(value):
            raise WireError(f"control field {key!r} must be finite")
        out[key] = float(value)
    return out


def parse_control(text: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WireError(f"control message is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireError("control message must be a JSON object")
    return parse_control_fields(obj)


def encode_telemetry(
    ts_us: int,
    pose: tuple,
    goal: tuple,
    predicted_impact: Optional[tuple],
    n_gaussians: int,
    epoch: int,
    kf_count: int,
    map_loss: float,
) -> str:
    if len(pose) != 7:
        raise WireError("telemetry pose must have 7 entries (xyz + wxyz)")
    if len(goal) != 4:
        raise WireError("telemetry goal must have 4 entries (xyz + yaw)")
    obj = {
        "type": "state",
        "ts_us": int(ts_us),
        "pose": [float(v) for v in pose],
        "goal": [float(v) for v in goal],
        "predicted_impact": None
        if predicted_impact is None
        else [float(v) for v in predicted_impact],
        "n_gaussians": int(n_gaussians),
        "epoch": int(epoch),
        "kf_count": int(kf_count),
        "map_loss": float(map_loss),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_error(message: str) -> str:
    return json.dumps({"type": "error", "message": message}, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Frame log persistence

LOG_HEADER_SIZE = _LOG_HEADER.size
assert LOG_HEADER_SIZE == 16


class FrameLogWriter:
    """Append-only frame log. Payload = concatenated encoded FrameMessages."""

    def __init__(self, path: str):
        self._fh = open(path, "wb")
        self._fh.write(_LOG_HEADER.pack(LOG_MAGIC, WIRE_VERSION, b"\x00" * 10))
        self.count = 0

    def append(self, encoded_frame: bytes) -> None:
        # Cheap sanity check so a corrupt write is caught at the source.
        if encoded_frame[:4] != FRAME_MAGIC:
            raise WireError("frame log accepts encoded FrameMessages only")
        self._fh.write(encoded_frame)
        self.count += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self) -> "FrameLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class FrameLogReader:
    """Iterates encoded FrameMessages from a log file.

    Stops cleanly at the last complete message; ``truncated`` reports
    whether trailing partial bytes were discarded and ``count`` how many
    complete messages were yielded.
    """

    def __init__(self, path: str):
        self.path = path
        self.count = 0
        self.truncated = False
        with open(path, "rb") as fh:
            header = fh.read(LOG_HEADER_SIZE)
        if len(header) < LOG_HEADER_SIZE:
            raise WireError("frame log shorter than its header")
        magic, version, _reserved = _LOG_HEADER.unpack(header)
        if magic != LOG_MAGIC:
            raise WireError(f"bad log magic {magic!r}")
        if version != WIRE_VERSION:
            raise WireError(f"unsupported log version {version}")

    def __iter__(self) -> Iterator[bytes]:
        self.count = 0
        self.truncated = False
        with open(self.path, "rb") as fh:
            fh.seek(LOG_HEADER_SIZE)
            while True:
                head = fh.read(_FRAME_HEADER.size)
                if not head:
                    return
                if len(head) < _FRAME_HEADER.size:
                    self.truncated = True
                    return
                total = frame_message_size(head)
                rest = fh.read(total - _FRAME_HEADER.size)
                if len(rest) < total - _FRAME_HEADER.size:
                    self.truncated = True
                    return
                self.count += 1
                yield head + rest

    def read_all(self) -> list:
        return list(self)
