"""Single-writer / multi-reader map sharing.

The optimizer lane owns the working map and periodically publishes an
immutable snapshot of it; any number of viewer lanes acquire the latest
snapshot without ever blocking the writer (or each other). Publication is
a double-buffered full copy: the writer packs the map into a fresh record
array, then installs it with one reference assignment. Readers grab the
current reference; snapshots they already hold are never mutated.

A snapshot's payload is a contiguous array of 48-byte packed records whose
layout is shared verbatim with the network snapshot message, so serializing
a snapshot for a remote viewer is a plain byte copy.

Also home to the coupled baseline: a scheduler that forces optimizer and
viewer renders to alternate on one execution lane, reproducing the
interference the decoupled design removes.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Union

import numpy as np

from .gaussian_map import GaussianMap, MapArrays

# Packed record layout, little-endian, 48 bytes. Field order and widths are
# part of the external snapshot format and must not change.
RECORD_DTYPE = np.dtype(
    [
        ("position", "<f4", (3,)),
        ("rotation", "<f4", (4,)),
        ("log_scale", "<f4", (3,)),
        ("opacity_logit", "<f4"),
        ("rgb", "u1", (3,)),
        ("pad", "u1"),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize
assert RECORD_SIZE == 48


def pack_records(view: MapArrays) -> np.ndarray:
    """Pack map arrays into a read-only structured record array."""
    n = view.n
    records = np.zeros(n, dtype=RECORD_DTYPE)
    if n:
        records["position"] = view.positions.astype(np.float32)
        records["rotation"] = view.rotations.astype(np.float32)
        records["log_scale"] = view.log_scales.astype(np.float32)
        records["opacity_logit"] = view.opacity_logits.astype(np.float32)
        rgb = np.clip(np.rint(view.colors * 255.0), 0.0, 255.0)
        records["rgb"] = rgb.astype(np.uint8)
    records.flags.writeable = False
    return records


def unpack_records(records: np.ndarray) -> MapArrays:
    """Decode packed records back into float64 arrays ready for rendering.

    Ids are synthesized as 0..n-1: record order is the map's insertion
    order, so depth ties resolve the same way they do on the writer side.
    """
    n = records.shape[0]
    return MapArrays(
        positions=np.ascontiguousarray(records["position"], dtype=np.float64),
        rotations=np.ascontiguousarray(records["rotation"], dtype=np.float64),
        log_scales=np.ascontiguousarray(records["log_scale"], dtype=np.float64),
        opacity_logits=np.ascontiguousarray(records["opacity_logit"], dtype=np.float64),
        colors=np.ascontiguousarray(records["rgb"], dtype=np.float64) / 255.0,
        ids=np.arange(n, dtype=np.int64),
    )


class MapEpoch(NamedTuple):
    epoch: int
    gaussian_count: int
    timestamp_us: int


_EMPTY_RECORDS = np.zeros(0, dtype=RECORD_DTYPE)
_EMPTY_RECORDS.flags.writeable = False


@dataclass(frozen=True)
class MapSnapshot:
    """Immutable epoch-tagged copy of the map.

    ``checksum`` is the crc32 of the packed record bytes, fixed at publish
    time; a reader can recompute it at any point to prove the snapshot it
    holds was never torn or mutated.
    """

    epoch: int
    gaussian_count: int
    timestamp_us: int
    records: np.ndarray
    checksum: int

    @property
    def info(self) -> MapEpoch:
        return MapEpoch(self.epoch, self.gaussian_count, self.timestamp_us)

    def tobytes(self) -> bytes:
        return self.records.tobytes()

    def verify(self) -> bool:
        return zlib.crc32(self.records.tobytes()) == self.checksum

    def arrays(self) -> MapArrays:
        return unpack_records(self.records)


def _empty_snapshot() -> MapSnapshot:
    return MapSnapshot(
        epoch=0,
        gaussian_count=0,
        timestamp_us=time.time_ns() // 1000,
        records=_EMPTY_RECORDS,
        checksum=zlib.crc32(b""),
    )


class SharedMap:
    """One writer, many readers, nobody waits.

    The writer packs a fresh immutable snapshot and swaps a single
    reference; readers load that reference. Attribute load/store of an
    object reference is atomic in CPython, so acquisition is wait-free and
    a reader can never observe a half-installed snapshot. Snapshots stay
    valid for as long as any reader keeps one.
    """

    def __init__(self) -> None:
        self._snapshot = _empty_snapshot()

    def writer_publish(self, working_map: Union[GaussianMap, MapArrays]) -> MapEpoch:
        """Install a new snapshot of ``working_map``. Writer lane only."""
        view = working_map.views() if isinstance(working_map, GaussianMap) else working_map
        records = pack_records(view)
        snapshot = MapSnapshot(
            epoch=self._snapshot.epoch + 1,
            gaussian_count=records.shape[0],
            timestamp_us=time.time_ns() // 1000,
            records=records,
            checksum=zlib.crc32(records.tobytes()),
        )
        self._snapshot = snapshot
        return snapshot.info

    def reader_acquire(self) -> MapSnapshot:
        """Return the latest published snapshot (epoch 0 before any publish)."""
        return self._snapshot

    @property
    def epoch(self) -> int:
        return self._snapshot.epoch


# ---------------------------------------------------------------------------
# Coupled baseline


@dataclass(frozen=True)
class TraceEntry:
    kind: str  # "optimizer" or "viewer"
    index: int
    started_us: int
    finished_us: int

    @property
    def duration_us(self) -> int:
        return self.finished_us - self.started_us


@dataclass
class ExecutionTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]

    def viewer_gaps_us(self) -> list[int]:
        """Completion-to-completion gaps between consecutive viewer frames."""
        done = [e.finished_us for e in self.entries if e.kind == "viewer"]
        return [b - a for a, b in zip(done, done[1:])]


def coupled_scheduler(
    render_requests: Iterable[Callable[[], object]],
    optimizer_steps: Iterable[Callable[[], object]],
) -> ExecutionTrace:
    """Run both workloads on one lane, alternating strictly while both have
    work pending. Viewer frame time in this mode includes whatever optimizer
    render happened in between; that interference is the point of the
    baseline.
    """
    trace = ExecutionTrace()
    viewer = list(render_requests)
    optim = list(optimizer_steps)
    vi = oi = 0

    def run(kind: str, index: int, task: Callable[[], object]) -> None:
        started = time.perf_counter_ns() // 1000
        task()
        finished = time.perf_counter_ns() // 1000
        trace.entries.append(TraceEntry(kind, index, started, finished))

    while vi < len(viewer) or oi < len(optim):
        if oi < len(optim):
            run("optimizer", oi, optim[oi])
            oi += 1
        if vi < len(viewer):
            run("viewer", vi, viewer[vi])
            vi += 1
    return trace
