"""Service orchestration: simulator, mapper, and viewer endpoints in one process.

Lane layout (threads):

  sensor lane    fixed-rate sim stepping + frame emission -> bounded queue
  mapper lane    consumes frames, owns the map, publishes epochs
  snapshot lane  (decoupled mode) watches epochs, encodes snapshot messages
  telemetry lane 20 Hz state broadcast
  accept lane    socket accept + HTTP upgrade / static file serving
  per client     one reader thread (control) + one sender thread (flush slots)

Clients are isolated behind keep-latest slots: a stalled client's slot just
gets overwritten, it never backs data up into the mapper. In coupled mode
the snapshot lane disappears and the mapper lane itself encodes outgoing
snapshots between optimization steps, which is exactly the contention the
scheduling benchmark measures.

Frames between sensor and mapper are never dropped; when the mapper falls
behind, the bounded queue throttles the sensor lane instead (simulation
time then advances slower than wall time).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .core import Frame, Vec3
from .mapper import Mapper, MapperConfig
from .shared_map import MapSnapshot, SharedMap
from .sim import GoalState, SceneError, Simulator, load_scene, _wrap_angle
from .wire import (
    SNAPSHOT_APPEND,
    SNAPSHOT_FULL,
    FrameLogReader,
    FrameLogWriter,
    SnapshotMessage,
    WireError,
    encode_error,
    encode_frame,
    encode_snapshot,
    encode_telemetry,
    frame_from_message,
    frame_to_message,
    parse_control,
)
from . import ws

log = logging.getLogger("telesplat.service")

EXIT_CLEAN = 0
EXIT_CONFIG = 2
EXIT_FAULT = 3

_STATIC_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
    ".wasm": "application/wasm",
}


class ConfigError(Exception):
    """Bad configuration or unusable environment; maps to exit code 2."""


@dataclass(frozen=True)
class ServeConfig:
    scene_path: Optional[str] = None
    replay_path: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 8765
    width: int = 672
    height: int = 376
    mode: str = "decoupled"
    sensor_hz: float = 15.0
    max_gaussians: int = 200_000
    seed: int = 0
    record_path: Optional[str] = None
    ui_dir: Optional[str] = None
    snapshot_hz: float = 10.0
    telemetry_hz: float = 20.0
    iters_per_frame: int = 10
    goal_hold_timeout_s: float = 0.5
    frame_queue_size: int = 8

    def validate(self) -> None:
        if (self.scene_path is None) == (self.replay_path is None):
            raise ConfigError("exactly one of scene_path or replay_path is required")
        if self.mode not in ("decoupled", "coupled"):
            raise ConfigError(f"mode must be decoupled or coupled, not {self.mode!r}")
        if self.width < 16 or self.height < 16:
            raise ConfigError("resolution must be at least 16x16")
        if self.sensor_hz <= 0 or self.snapshot_hz <= 0 or self.telemetry_hz <= 0:
            raise ConfigError("rates must be positive")
        if not (0 <= self.port < 65536):  # 0 = kernel-assigned ephemeral port
            raise ConfigError(f"port {self.port} out of range")
        if self.max_gaussians < 1:
            raise ConfigError("max_gaussians must be positive")


def goal_integration(goal: GoalState, msg: dict, dt: float) -> GoalState:
    """Advance the goal proxy by one joystick velocity command.

    Velocities are expressed in the goal's own yaw frame, so pushing
    "forward" moves the goal the way it is facing.
    """
    vx, vy, vz = msg["vx"], msg["vy"], msg["vz"]
    yaw_rate = msg["yaw_rate"]
    if vx == 0.0 and vy == 0.0 and vz == 0.0 and yaw_rate == 0.0:
        return goal
    c, s = math.cos(goal.yaw), math.sin(goal.yaw)
    p = goal.position
    return GoalState(
        position=Vec3(
            p.x + (c * vx - s * vy) * dt,
            p.y + (s * vx + c * vy) * dt,
            p.z + vz * dt,
        ),
        yaw=_wrap_angle(goal.yaw + yaw_rate * dt),
    )


def _scale_intrinsics(intr, width: int, height: int):
    sx = width / intr.width
    sy = height / intr.height
    return replace(
        intr,
        fx=intr.fx * sx,
        fy=intr.fy * sy,
        cx=(intr.cx + 0.5) * sx - 0.5,
        cy=(intr.cy + 0.5) * sy - 0.5,
        width=width,
        height=height,
    )


def _snapshot_full_message(snap: MapSnapshot) -> bytes:
    return encode_snapshot(
        SnapshotMessage(kind=SNAPSHOT_FULL, epoch=snap.epoch, base_epoch=0, records=snap.records)
    )


class ClientSession:
    """One connected viewer: reader thread for control, sender for slots."""

    _ids = itertools.count(1)
    _ids_lock = threading.Lock()

    def __init__(self, service: "TeleopService", conn: ws.WebSocket, address):
        self.service = service
        self.ws = conn
        self.address = address
        with self._ids_lock:
            self.client_id = next(self._ids)
        self.alive = True
        self._lock = threading.Lock()
        self._wake = threading.Event()
        self._pending_snapshot: Optional[bytes] = None
        self._pending_texts: list[str] = []
        self._latest_telemetry: Optional[str] = None
        # epoch the sender lane will be at once the current slot flushes;
        # appends may only be queued when they chain off this value
        self.queued_epoch = 0
        self.sent_epochs: list[int] = []  # for tests/diagnostics
        self._reader = threading.Thread(
            target=self._reader_lane, name=f"client{self.client_id}-reader", daemon=True
        )
        self._sender = threading.Thread(
            target=self._sender_lane, name=f"client{self.client_id}-sender", daemon=True
        )

    def start(self) -> None:
        snap = self.service.shared.reader_acquire()
        # handshake contract: one full snapshot (maybe empty epoch 0) first
        self.ws.send_binary(_snapshot_full_message(snap))
        self.queued_epoch = snap.epoch
        self.sent_epochs.append(snap.epoch)
        self._reader.start()
        self._sender.start()

    # -- feeding the slots (called by service lanes) -------------------------

    def offer_snapshot(self, encoded: bytes, epoch: int, chained_to: Optional[int]) -> None:
        """Keep-latest: a still-pending older snapshot is simply replaced.

        `chained_to` is the append's base epoch, or None for full messages
        which are always applicable.
        """
        with self._lock:
            if chained_to is not None and (
                self._pending_snapshot is not None or self.queued_epoch != chained_to
            ):
                return  # the service will fall back to offering a full message
            self._pending_snapshot = encoded
            self.queued_epoch = epoch
        self._wake.set()

    def offer_telemetry(self, text: str) -> None:
        with self._lock:
            self._latest_telemetry = text
        self._wake.set()

    def send_event(self, text: str) -> None:
        """Reliable ordered delivery for replies and one-shot events."""
        with self._lock:
            self._pending_texts.append(text)
        self._wake.set()

    # -- lanes ----------------------------------------------------------------

    def _sender_lane(self) -> None:
        try:
            while self.alive and not self.service.stopping:
                self._wake.wait(timeout=0.05)
                self._wake.clear()
                while True:
                    with self._lock:
                        snapshot = self._pending_snapshot
                        texts = self._pending_texts
                        telemetry = self._latest_telemetry
                        self._pending_snapshot = None
                        self._pending_texts = []
                        self._latest_telemetry = None
                    if snapshot is None and not texts and telemetry is None:
                        break
                    if snapshot is not None:
                        self.ws.send_binary(snapshot)
                    for text in texts:
                        self.ws.send_text(text)
                    if telemetry is not None:
                        self.ws.send_text(telemetry)
        except (ws.ConnectionClosed, OSError):
            pass
        finally:
            self._shutdown()

    def _reader_lane(self) -> None:
        try:
            while self.alive and not self.service.stopping:
                opcode, payload = self.ws.recv()
                if opcode != ws.OP_TEXT:
                    self.send_event(encode_error("binary messages are not accepted"))
                    continue
                try:
                    msg = parse_control(payload.decode("utf-8"))
                except WireError as exc:
                    self.send_event(encode_error(str(exc)))
                    continue
                self.service.handle_control(self, msg)
        except (ws.ConnectionClosed, ws.ProtocolError, OSError):
            pass
        finally:
            self._shutdown()

    def _shutdown(self) -> None:
        if not self.alive:
            return
        self.alive = False
        self._wake.set()
        self.ws.send_close()
        self.ws.close_socket()
        self.service._forget_client(self)

    def close(self) -> None:
        self._shutdown()

    def join(self, timeout: float = 2.0) -> None:
        for t in (self._sender, self._reader):
            if t.is_alive() and t is not threading.current_thread():
                t.join(timeout)


class TeleopService:
    """The running process behind `teleop serve` and `teleop replay`."""

    def __init__(self, config: ServeConfig):
        config.validate()
        self.config = config
        self.stopping = False
        self._stop_event = threading.Event()
        self._fault: Optional[BaseException] = None

        self.shared = SharedMap()
        mapper_cfg = MapperConfig(
            max_gaussians=config.max_gaussians, iters_per_frame=config.iters_per_frame
        )
        self.mapper = Mapper(config=mapper_cfg, shared_map=self.shared, seed=config.seed)
        self._frame_queue: queue.Queue = queue.Queue(maxsize=config.frame_queue_size)

        self.sim: Optional[Simulator] = None
        self._replay_reader: Optional[FrameLogReader] = None
        if config.scene_path is not None:
            try:
                scene = load_scene(config.scene_path)
            except (OSError, SceneError) as exc:
                raise ConfigError(f"cannot load scene: {exc}") from exc
            intr = _scale_intrinsics(scene.intrinsics, config.width, config.height)
            scene = replace(scene, intrinsics=intr)
            self.sim = Simulator(scene, seed=config.seed)
        else:
            try:
                self._replay_reader = FrameLogReader(config.replay_path)
            except (OSError, WireError) as exc:
                raise ConfigError(f"cannot open replay log: {exc}") from exc

        self._recorder: Optional[FrameLogWriter] = None
        if config.record_path is not None:
            if config.scene_path is None:
                raise ConfigError("--record only applies to live simulation")
            self._recorder = FrameLogWriter(config.record_path)

        self._ui_root: Optional[Path] = None
        if config.ui_dir is not None:
            root = Path(config.ui_dir).resolve()
            if not root.is_dir():
                raise ConfigError(f"ui dir {config.ui_dir!r} is not a directory")
            self._ui_root = root

        self._sim_lock = threading.Lock()
        self._held_vel: Optional[dict] = None
        self._held_vel_at = 0.0
        self._last_pose = None  # replay telemetry source
        self._stats_lock = threading.Lock()
        self._last_stats = {"n_gaussians": 0, "loss": None, "epoch": 0, "kf_count": 0, "ts": 0}
        self._last_sim_time_us = 0

        self._clients: list[ClientSession] = []
        self._clients_lock = threading.Lock()
        self._prev_snapshot: Optional[MapSnapshot] = None
        self._server_socket: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self.frames_ingested = 0
        self.replay_finished = threading.Event()

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((self.config.host, self.config.port))
            sock.listen(8)
        except OSError as exc:
            raise ConfigError(f"cannot listen on {self.config.host}:{self.config.port}: {exc}") from exc
        self._server_socket = sock

        lanes = [("accept", self._accept_lane), ("mapper", self._mapper_lane),
                 ("telemetry", self._telemetry_lane)]
        if self.sim is not None:
            lanes.append(("sensor", self._sensor_lane))
        else:
            lanes.append(("replay", self._replay_lane))
        if self.config.mode == "decoupled":
            lanes.append(("snapshot", self._snapshot_lane))
        for name, fn in lanes:
            t = threading.Thread(target=self._guard(fn), name=f"teleop-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("serving on %s:%d (%s mode)", self.config.host, self.config.port, self.config.mode)

    @property
    def port(self) -> int:
        assert self._server_socket is not None
        return self._server_socket.getsockname()[1]

    def _guard(self, fn):
        def runner():
            try:
                fn()
            except Exception as exc:  # lane crash = runtime fault
                if not self.stopping:
                    log.exception("lane %s failed", threading.current_thread().name)
                    self._fault = exc
                    self._stop_event.set()

        return runner

    def wait(self, timeout: Optional[float] = None) -> Optional[int]:
        """Block until stopped or faulted; returns the exit code, or None if
        the timeout expired with the service still running."""
        if not self._stop_event.wait(timeout):
            return None
        self.stop()
        return EXIT_FAULT if self._fault is not None else EXIT_CLEAN

    def stop(self) -> None:
        """Drain in deterministic order: clients, then mapper, then sim."""
        if self.stopping:
            self._stop_event.set()
            return
        self.stopping = True
        self._stop_event.set()
        if self._server_socket is not None:
            try:
                self._server_socket.close()
            except OSError:
                pass
        with self._clients_lock:
            clients = list(self._clients)
        for client in clients:
            client.close()
        for client in clients:
            client.join()
        ordered = {"teleop-mapper": 0, "teleop-sensor": 1, "teleop-replay": 1}
        for t in sorted(self._threads, key=lambda t: ordered.get(t.name, -1)):
            if t.is_alive() and t is not threading.current_thread():
                t.join(timeout=5.0)
        if self._recorder is not None:
            self._recorder.close()
            self._recorder = None

    # -- sensor / replay lanes -------------------------------------------------

    def _sensor_lane(self) -> None:
        assert self.sim is not None
        period = 1.0 / self.config.sensor_hz
        next_tick = time.monotonic()
        while not self._stop_event.is_set():
            with self._sim_lock:
                held = self._held_vel
                if held is not None:
                    if time.monotonic() - self._held_vel_at > self.config.goal_hold_timeout_s:
                        self._held_vel = None
                    else:
                        self.sim.goal = goal_integration(self.sim.goal, held, period)
                self.sim.advance(period)
                frame = self.sim.emit_frame()
                self._last_sim_time_us = frame.timestamp_us
            if self._recorder is not None:
                self._recorder.append(encode_frame(frame_to_message(frame)))
            self._enqueue_frame(frame)
            next_tick = max(next_tick + period, time.monotonic())
            self._sleep_until(next_tick)

    def _replay_lane(self) -> None:
        assert self._replay_reader is not None
        prev_ts: Optional[int] = None
        for msg in self._replay_reader:
            if self._stop_event.is_set():
                return
            frame = frame_from_message(msg)
            if prev_ts is not None:
                delta = max(0.0, min(1.0, (frame.timestamp_us - prev_ts) / 1e6))
                self._sleep_for(delta)
            prev_ts = frame.timestamp_us
            with self._sim_lock:
                self._last_pose = frame.pose
                self._last_sim_time_us = frame.timestamp_us
            self._enqueue_frame(frame)
        self.replay_finished.set()  # service keeps running for connected viewers

    def _enqueue_frame(self, frame: Frame) -> None:
        while not self._stop_event.is_set():
            try:
                self._frame_queue.put(frame, timeout=0.1)
                return
            except queue.Full:
                continue

    def _sleep_until(self, deadline: float) -> None:
        while not self._stop_event.is_set():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return
            time.sleep(min(remaining, 0.05))

    def _sleep_for(self, seconds: float) -> None:
        self._sleep_until(time.monotonic() + seconds)

    # -- mapper lane -------------------------------------------------------------

    def _mapper_lane(self) -> None:
        min_gap = 1.0 / self.config.snapshot_hz
        last_coupled_dispatch = 0.0
        while not self._stop_event.is_set():
            try:
                frame = self._frame_queue.get(timeout=0.1)
            except queue.Empty:
                continue
            stats = self.mapper.process_frame(frame)
            self.frames_ingested += 1
            with self._stats_lock:
                self._last_stats = stats
            if self.config.mode == "coupled":
                # the mapper thread itself prepares viewer payloads: the
                # single-renderer scheduling the decoupled design replaces
                now = time.monotonic()
                if now - last_coupled_dispatch >= min_gap:
                    self._dispatch_snapshots()
                    last_coupled_dispatch = now

    # -- snapshot distribution ----------------------------------------------------

    def _snapshot_lane(self) -> None:
        period = 1.0 / self.config.snapshot_hz
        while not self._stop_event.is_set():
            self._dispatch_snapshots()
            self._sleep_for(period)

    def _dispatch_snapshots(self) -> None:
        snap = self.shared.reader_acquire()
        prev = self._prev_snapshot
        if prev is not None and snap.epoch == prev.epoch:
            return
        append_encoded: Optional[bytes] = None
        if (
            prev is not None
            and snap.gaussian_count >= prev.gaussian_count
            and snap.records[: prev.gaussian_count].tobytes() == prev.records.tobytes()
        ):
            append_encoded = encode_snapshot(
                SnapshotMessage(
                    kind=SNAPSHOT_APPEND,
                    epoch=snap.epoch,
                    base_epoch=prev.epoch,
                    records=snap.records[prev.gaussian_count :],
                )
            )
        full_encoded: Optional[bytes] = None
        with self._clients_lock:
            clients = list(self._clients)
        for client in clients:
            if append_encoded is not None:
                client.offer_snapshot(append_encoded, snap.epoch, chained_to=prev.epoch)
                if client.queued_epoch == snap.epoch:
                    continue  # append accepted
            if full_encoded is None:
                full_encoded = _snapshot_full_message(snap)
            client.offer_snapshot(full_encoded, snap.epoch, chained_to=None)
        self._prev_snapshot = snap

    # -- telemetry lane --------------------------------------------------------------

    def _telemetry_state(self) -> str:
        with self._sim_lock:
            if self.sim is not None:
                pose = self.sim.state.pose
                goal = self.sim.goal
                impact = self.sim.predicted_impact()
                goal_tuple = (goal.position.x, goal.position.y, goal.position.z, goal.yaw)
            else:
                pose = self._last_pose
                impact = None
                goal_tuple = (0.0, 0.0, 0.0, 0.0)
            ts_us = self._last_sim_time_us
        if pose is None:
            pose_tuple = (0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
        else:
            t, q = pose.translation, pose.rotation
            pose_tuple = (t.x, t.y, t.z, q.w, q.x, q.y, q.z)
        impact_tuple = None if impact is None else (impact.x, impact.y, impact.z)
        with self._stats_lock:
            stats = dict(self._last_stats)
        loss = stats.get("loss")
        return encode_telemetry(
            ts_us=ts_us,
            pose=pose_tuple,
            goal=goal_tuple,
            predicted_impact=impact_tuple,
            n_gaussians=stats.get("n_gaussians", 0),
            epoch=self.shared.epoch,
            kf_count=stats.get("kf_count", 0),
            map_loss=float(loss) if loss is not None else 0.0,
        )

    def _telemetry_lane(self) -> None:
        period = 1.0 / self.config.telemetry_hz
        while not self._stop_event.is_set():
            text = self._telemetry_state()
            with self._clients_lock:
                clients = list(self._clients)
            for client in clients:
                client.offer_telemetry(text)
            self._sleep_for(period)

    # -- control dispatch ----------------------------------------------------------

    def handle_control(self, client: ClientSession, msg: dict) -> None:
        mtype = msg["type"]
        if mtype == "resync":
            client.offer_snapshot(
                _snapshot_full_message(self.shared.reader_acquire()),
                self.shared.epoch,
                chained_to=None,
            )
            return
        if self.sim is None:
            client.send_event(encode_error(f"{mtype!r} is not available during replay"))
            return
        if mtype == "goal_vel":
            with self._sim_lock:
                self._held_vel = msg
                self._held_vel_at = time.monotonic()
        elif mtype == "goal_abs":
            try:
                goal = GoalState(
                    position=Vec3(msg["x"], msg["y"], msg["z"]),
                    yaw=_wrap_angle(msg["yaw"]),
                )
            except ValueError as exc:
                client.send_event(encode_error(str(exc)))
                return
            with self._sim_lock:
                self.sim.goal = goal
                self._held_vel = None
        elif mtype == "drop_marker":
            with self._sim_lock:
                result = self.sim.drop()
            client.send_event(_drop_result_json(result))
        elif mtype == "return_home":
            with self._sim_lock:
                self.sim.return_home()
                self._held_vel = None

    # -- accept lane --------------------------------------------------------------

    def _accept_lane(self) -> None:
        assert self._server_socket is not None
        while not self._stop_event.is_set():
            try:
                conn, address = self._server_socket.accept()
            except OSError:
                return  # socket closed during shutdown
            threading.Thread(
                target=self._handle_connection,
                args=(conn, address),
                name="teleop-upgrade",
                daemon=True,
            ).start()

    def _handle_connection(self, conn: socket.socket, address) -> None:
        try:
            conn.settimeout(5.0)
            rfile = conn.makefile("rb")
            request = ws.read_http_request(rfile)
            if ws.is_websocket_upgrade(request):
                conn.sendall(ws.handshake_response(request))
                conn.settimeout(None)
                session = ClientSession(self, ws.WebSocket(conn, rfile), address)
                with self._clients_lock:
                    self._clients.append(session)
                session.start()
                return
            self._serve_static(conn, request)
            conn.close()
        except (ws.ProtocolError, ws.ConnectionClosed, OSError):
            try:
                conn.close()
            except OSError:
                pass

    def _forget_client(self, client: ClientSession) -> None:
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)

    def _serve_static(self, conn: socket.socket, request: ws.HttpRequest) -> None:
        def respond(status: str, body: bytes, ctype: str = "text/plain") -> None:
            head = (
                f"HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\n"
                f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n"
            )
            conn.sendall(head.encode("ascii") + body)

        if request.method != "GET":
            respond("405 Method Not Allowed", b"only GET is supported")
            return
        if self._ui_root is None:
            respond("404 Not Found", b"no ui directory configured")
            return
        target = request.target.split("?", 1)[0]
        if target.endswith("/"):
            target += "index.html"
        candidate = (self._ui_root / target.lstrip("/")).resolve()
        if not str(candidate).startswith(str(self._ui_root) + os.sep) and candidate != self._ui_root:
            respond("403 Forbidden", b"path escapes ui root")
            return
        if not candidate.is_file():
            respond("404 Not Found", b"no such file")
            return
        ctype = _STATIC_TYPES.get(candidate.suffix.lower(), "application/octet-stream")
        respond("200 OK", candidate.read_bytes(), ctype)


def _drop_result_json(result) -> str:
    return json.dumps(
        {
            "type": "drop_result",
            "impact": [result.impact.x, result.impact.y, result.impact.z],
            "fall_time_s": result.fall_time,
            "target_id": result.target_id,
            "distance": result.distance,
            "hit": result.hit,
        },
        sort_keys=True,
        separators=(",", ":"),
    )
