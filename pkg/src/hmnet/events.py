"""Event data model, file codecs, synthetic stream generation, time-step
slicing, and per-cell spatial window indexing.

Streams are stored column-wise (numpy arrays) for speed; ``Event`` is the
scalar view used at API boundaries. All values are immutable by convention:
functions never mutate a stream they received.

File formats
------------
CSV: header line ``t_us,x,y,p``, one event per line, ``p`` in {-1, 1}.

HMEV binary: 20-byte header = magic ``HMEV`` + version (u16 LE, =1) +
width (u16 LE) + height (u16 LE) + 2 reserved zero bytes + event count
(u64 LE); then 16-byte records: t (u64 LE, microseconds), x (u16 LE),
y (u16 LE), p (i8, -1/+1), 3 zero padding bytes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DecodeError, HmnetError, ShapeError

HMEV_MAGIC = b"HMEV"
HMEV_VERSION = 1
# magic, version, width, height, 2 reserved zero bytes, count -> 20 bytes
HMEV_HEADER = struct.Struct("<4sHHH2xQ")
HMEV_RECORD = struct.Struct("<QHHb3x")   # t, x, y, p, padding
CSV_HEADER = "t_us,x,y,p"

US_PER_MS = 1_000


class Event(NamedTuple):
    """One camera event: timestamp (microseconds), pixel, polarity (+-1)."""

    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-ordered event columns plus the sensor geometry."""

    sensor_width: int
    sensor_height: int
    t: np.ndarray  # uint64, non-decreasing
    x: np.ndarray  # uint16
    y: np.ndarray  # uint16
    p: np.ndarray  # int8, -1/+1

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ShapeError("event columns have mismatched lengths")
        if n:
            if self.x.max(initial=0) >= self.sensor_width or self.y.max(initial=0) >= self.sensor_height:
                raise ShapeError("event coordinates out of sensor bounds")
            if not np.all(np.abs(self.p.astype(np.int16)) == 1):
                raise ShapeError("polarity outside {-1, +1}")
            if np.any(np.diff(self.t.astype(np.int64)) < 0):
                raise ShapeError("timestamps decrease")

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        events = list(events)
        return cls(
            width,
            height,
            np.array([e[0] for e in events], dtype=np.uint64),
            np.array([e[1] for e in events], dtype=np.uint16),
            np.array([e[2] for e in events], dtype=np.uint16),
            np.array([e[3] for e in events], dtype=np.int8),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EventStream)
            and self.sensor_width == other.sensor_width
            and self.sensor_height == other.sensor_height
            and len(self) == len(other)
            and bool(np.all(self.t == other.t))
            and bool(np.all(self.x == other.x))
            and bool(np.all(self.y == other.y))
            and bool(np.all(self.p == other.p))
        )


@dataclass(frozen=True)
class EventSlice:
    """Events of one time step, covering the interval (t_start, t_end].

    The first slice of a stream may additionally contain an event at exactly
    t == t_start == 0 (timestamps are unsigned, so there is no step before).
    """

    t_start: int
    t_end: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise ShapeError("slice interval is empty or inverted")
        if len(self.t):
            tmin, tmax = int(self.t.min()), int(self.t.max())
            lo_ok = tmin > self.t_start or (tmin == 0 and self.t_start == 0)
            if not (lo_ok and tmax <= self.t_end):
                raise ShapeError("slice contains events outside its interval")

    @property
    def duration_us(self) -> int:
        return self.t_end - self.t_start

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, t_start: int, t_end: int) -> "EventSlice":
        return cls(
            t_start, t_end,
            np.empty(0, np.uint64), np.empty(0, np.uint16),
            np.empty(0, np.uint16), np.empty(0, np.int8),
        )


@dataclass(frozen=True)
class WindowIndex:
    """Per-cell event index for one slice at spatial stride ``s``.

    ``cells`` lists the active cells in row-major order; ``starts`` are CSR
    offsets into ``order`` which holds event positions (into the slice) in
    within-slice order. Cells with no events are absent.
    """

    stride: int
    grid_rows: int
    grid_cols: int
    cells: np.ndarray   # (C, 2) int64, rows (j) / cols (k), row-major sorted
    starts: np.ndarray  # (C + 1,) int64
    order: np.ndarray   # (N,) int64 event positions grouped by cell

    @property
    def n_active(self) -> int:
        return len(self.cells)

    def cell_events(self, i: int) -> np.ndarray:
        """Event positions (into the slice) of the i-th active cell."""
        return self.order[self.starts[i]:self.starts[i + 1]]

    def as_dict(self) -> dict[tuple[int, int], list[int]]:
        return {
            (int(j), int(k)): self.cell_events(i).tolist()
            for i, (j, k) in enumerate(self.cells)
        }


# ---------------------------------------------------------------------------
# codecs


def parse_event_file(data: bytes, fmt: str) -> EventStream:
    """Decode CSV or HMEV bytes into a validated stream."""
    if fmt == "csv":
        return _parse_csv(data)
    if fmt == "hmev-binary":
        return _parse_hmev(data)
    raise HmnetError(f"unknown event file format {fmt!r}")


def encode_event_file(stream: EventStream, fmt: str) -> bytes:
    """Bit-exact inverse of :func:`parse_event_file` on valid inputs."""
    if fmt == "csv":
        return _encode_csv(stream)
    if fmt == "hmev-binary":
        return _encode_hmev(stream)
    raise HmnetError(f"unknown event file format {fmt!r}")


def _validated_stream(width, height, t, x, y, p, fmt: str) -> EventStream:
    # Re-raise invariant violations as decode errors with the record index.
    if len(t):
        bad = np.nonzero(np.abs(np.asarray(p, np.int16)) != 1)[0]
        if len(bad):
            raise DecodeError(f"polarity {int(p[bad[0]])} outside {{-1, +1}}", int(bad[0]))
        bad = np.nonzero((np.asarray(x, np.int64) >= width) | (np.asarray(y, np.int64) >= height))[0]
        if len(bad):
            raise DecodeError(
                f"coordinates ({int(x[bad[0]])}, {int(y[bad[0]])}) outside {width}x{height}",
                int(bad[0]),
            )
        dt = np.diff(np.asarray(t, np.int64))
        bad = np.nonzero(dt < 0)[0]
        if len(bad):
            raise DecodeError("timestamps decrease", int(bad[0]) + 1)
    return EventStream(
        width, height,
        np.asarray(t, np.uint64), np.asarray(x, np.uint16),
        np.asarray(y, np.uint16), np.asarray(p, np.int8),
    )


def _parse_csv(data: bytes) -> EventStream:
    """CSV carries no geometry; sensor dims are the tight bounding box."""
    text = data.decode("utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != CSV_HEADER:
        raise DecodeError(f"missing CSV header {CSV_HEADER!r}", 0)
    t, x, y, p = [], [], [], []
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != 4:
            raise DecodeError(f"expected 4 fields, got {len(parts)}", i)
        try:
            vals = [int(v) for v in parts]
        except ValueError:
            raise DecodeError(f"non-integer field in {line!r}", i) from None
        if vals[0] < 0 or vals[1] < 0 or vals[2] < 0:
            raise DecodeError("negative timestamp or coordinate", i)
        t.append(vals[0]); x.append(vals[1]); y.append(vals[2]); p.append(vals[3])
    if p and any(abs(v) != 1 for v in p):
        bad = next(i for i, v in enumerate(p) if abs(v) != 1)
        raise DecodeError(f"polarity {p[bad]} outside {{-1, +1}}", bad)
    width = (max(x) + 1) if x else 1
    height = (max(y) + 1) if y else 1
    return _validated_stream(width, height, t, x, y, p, "csv")


def _encode_csv(stream: EventStream) -> bytes:
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for e in stream:
        out.write(f"{e.t},{e.x},{e.y},{e.p}\n")
    return out.getvalue().encode("utf-8")


def _parse_hmev(data: bytes) -> EventStream:
    if len(data) < HMEV_HEADER.size:
        raise DecodeError("truncated header")
    magic, version, width, height, count = HMEV_HEADER.unpack_from(data, 0)
    if magic != HMEV_MAGIC:
        raise DecodeError("bad magic")
    if version != HMEV_VERSION:
        raise DecodeError(f"unsupported version {version}")
    body = data[HMEV_HEADER.size:]
    if len(body) != count * HMEV_RECORD.size:
        raise DecodeError(
            f"payload is {len(body)} bytes, expected {count * HMEV_RECORD.size} for {count} records"
        )
    if count == 0:
        return EventStream(width, height, np.empty(0, np.uint64), np.empty(0, np.uint16),
                           np.empty(0, np.uint16), np.empty(0, np.int8))
    rec = np.frombuffer(body, dtype=np.dtype([
        ("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3"),
    ]))
    return _validated_stream(width, height, rec["t"], rec["x"], rec["y"], rec["p"], "hmev-binary")


def _encode_hmev(stream: EventStream) -> bytes:
    out = bytearray(HMEV_HEADER.pack(
        HMEV_MAGIC, HMEV_VERSION, stream.sensor_width, stream.sensor_height, len(stream)))
    rec = np.zeros(len(stream), dtype=np.dtype([
        ("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3"),
    ]))
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    out.extend(rec.tobytes())
    return bytes(out)


# ---------------------------------------------------------------------------
# synthetic streams


@dataclass(frozen=True)
class MovingObject:
    """Axis-aligned bright rectangle moving at constant velocity (px/s).

    A 1x1 rectangle is a dot; a thin full-height rectangle is a bar.
    """

    x0: float
    y0: float
    width: float
    height: float
    vx: float = 0.0
    vy: float = 0.0

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))


@dataclass(frozen=True)
class SceneParams:
    sensor_width: int
    sensor_height: int
    duration_ms: int
    objects: tuple[MovingObject, ...]


@dataclass(frozen=True)
class GroundTruth:
    """Per-millisecond scalar object speed (px/ms); the regression target."""

    speed_px_per_ms: np.ndarray  # (duration_ms,)

    def speed_for_interval(self, t0_us: int, t1_us: int) -> float:
        ms0 = max(0, t0_us // US_PER_MS)
        ms1 = min(len(self.speed_px_per_ms), -(-t1_us // US_PER_MS))
        if ms1 <= ms0:
            return float(self.speed_px_per_ms[-1]) if len(self.speed_px_per_ms) else 0.0
        return float(self.speed_px_per_ms[ms0:ms1].mean())


def _render_frame(scene: SceneParams, t_ms: float) -> np.ndarray:
    """Binary intensity image of the scene at time t (unit-brightness objects)."""
    img = np.zeros((scene.sensor_height, scene.sensor_width), dtype=np.float64)
    t_s = t_ms / 1000.0
    for ob in scene.objects:
        x = ob.x0 + ob.vx * t_s
        y = ob.y0 + ob.vy * t_s
        c0 = int(np.floor(x)); c1 = int(np.floor(x + ob.width - 1e-9))
        r0 = int(np.floor(y)); r1 = int(np.floor(y + ob.height - 1e-9))
        c0 = max(c0, 0); r0 = max(r0, 0)
        c1 = min(c1, scene.sensor_width - 1); r1 = min(r1, scene.sensor_height - 1)
        if c1 >= c0 and r1 >= r0:
            img[r0:r1 + 1, c0:c1 + 1] = 1.0
    return img


def generate_synthetic_stream(
    scene: SceneParams, noise_rate: float, seed: int
) -> tuple[EventStream, GroundTruth]:
    """Render the scene at 1 ms sub-frames and emit +-1 events on intensity
    changes, plus homogeneous Poisson noise at ``noise_rate`` events/px/s
    with random polarity. Deterministic for a fixed seed."""
    for ob in scene.objects:
        if ob.width <= 0 or ob.height <= 0:
            raise HmnetError("zero-area scene object")
    if noise_rate < 0:
        raise HmnetError("noise rate must be >= 0")

    rng = np.random.default_rng(seed)
    t_list, x_list, y_list, p_list = [], [], [], []

    prev = _render_frame(scene, 0.0)
    for k in range(1, scene.duration_ms + 1):
        cur = _render_frame(scene, float(k))
        diff = cur - prev
        ys, xs = np.nonzero(diff)
        if len(ys):
            t_list.append(np.full(len(ys), k * US_PER_MS, dtype=np.uint64))
            x_list.append(xs.astype(np.uint16))
            y_list.append(ys.astype(np.uint16))
            p_list.append(np.where(diff[ys, xs] > 0, 1, -1).astype(np.int8))
        prev = cur

    n_px = scene.sensor_width * scene.sensor_height
    dur_s = scene.duration_ms / 1000.0
    n_noise = rng.poisson(noise_rate * n_px * dur_s)
    if n_noise:
        t_list.append(rng.integers(1, scene.duration_ms * US_PER_MS + 1, n_noise).astype(np.uint64))
        x_list.append(rng.integers(0, scene.sensor_width, n_noise).astype(np.uint16))
        y_list.append(rng.integers(0, scene.sensor_height, n_noise).astype(np.uint16))
        p_list.append((rng.integers(0, 2, n_noise) * 2 - 1).astype(np.int8))

    if t_list:
        t = np.concatenate(t_list)
        x = np.concatenate(x_list)
        y = np.concatenate(y_list)
        p = np.concatenate(p_list)
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    else:
        t = np.empty(0, np.uint64); x = np.empty(0, np.uint16)
        y = np.empty(0, np.uint16); p = np.empty(0, np.int8)

    speeds = np.zeros(scene.duration_ms, dtype=np.float64)
    if scene.objects:
        mean_speed = float(np.mean([ob.speed for ob in scene.objects])) / 1000.0  # px/ms
        speeds[:] = mean_speed
    stream = EventStream(scene.sensor_width, scene.sensor_height, t, x, y, p)
    return stream, GroundTruth(speeds)


# ---------------------------------------------------------------------------
# slicing and window indexing


def slice_stream(stream: EventStream, dt_us: int) -> list[EventSlice]:
    """Split a stream into consecutive slices of width ``dt_us``; slice n
    covers ((n-1)*dt, n*dt]. Interior empty slices are emitted so that real
    time keeps flowing; the trailing partial interval becomes the final
    slice. Events at t == 0 join the first slice."""
    if dt_us <= 0:
        raise HmnetError("dt must be positive")
    if len(stream) == 0:
        return []
    t = stream.t.astype(np.int64)
    # slice index (1-based): smallest n with t <= n*dt, i.e. ceil(t/dt); t=0 -> 1
    idx = np.maximum((t + dt_us - 1) // dt_us, 1)
    n_slices = int(idx.max())
    bounds = np.searchsorted(idx, np.arange(1, n_slices + 2))
    out = []
    for n in range(1, n_slices + 1):
        lo, hi = bounds[n - 1], bounds[n]
        out.append(EventSlice(
            (n - 1) * dt_us, n * dt_us,
            stream.t[lo:hi], stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi],
        ))
    return out


def build_window_index(sl: EventSlice, stride: int, grid_dims: tuple[int, int]) -> WindowIndex:
    """Group the slice's events by the s x s window of the memory cell they
    fall in. Within-cell order preserves within-slice order."""
    rows, cols = grid_dims
    if stride < 1:
        raise HmnetError("stride must be >= 1")
    if len(sl) == 0:
        return WindowIndex(stride, rows, cols,
                           np.empty((0, 2), np.int64), np.zeros(1, np.int64), np.empty(0, np.int64))
    j = sl.y.astype(np.int64) // stride
    k = sl.x.astype(np.int64) // stride
    if j.max() >= rows or k.max() >= cols:
        raise ShapeError("event outside the sensor bounds implied by grid_dims")
    cell_id = j * cols + k
    order = np.argsort(cell_id, kind="stable")
    sorted_ids = cell_id[order]
    uniq, starts_rel = np.unique(sorted_ids, return_index=True)
    starts = np.concatenate([starts_rel, [len(order)]]).astype(np.int64)
    cells = np.stack([uniq // cols, uniq % cols], axis=1).astype(np.int64)
    return WindowIndex(stride, rows, cols, cells, starts, order.astype(np.int64))
