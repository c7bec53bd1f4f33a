"""Event and calibration types plus their on-disk formats.

Two event formats are supported:

* CSV: whitespace separated ``t x y p`` per line, ``#`` starts a comment.
* binary: packed little-endian records ``<f8 t, <f4 x, <f4 y, <i1 p`` with no
  header.

Polarity may be stored as {0, 1} or {-1, +1}; 0 is mapped to -1 on load.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

RECORD_DTYPE = np.dtype([("t", "<f8"), ("x", "<f4"), ("y", "<f4"), ("p", "i1")])


class EventParseError(ValueError):
    """Malformed event or calibration input."""


class CalibrationError(ValueError):
    pass


class Event(NamedTuple):
    x: float
    y: float
    t: float
    p: int


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EventSlice:
    """A time-sorted window of events stored column-wise.

    ``t0``/``tN`` are the first and last timestamps, both 0 for an empty
    slice.  ``warnings`` collects non-fatal loader diagnostics.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    t0: float = 0.0
    tN: float = 0.0
    warnings: tuple[str, ...] = ()

    @classmethod
    def from_arrays(cls, x, y, t, p, warnings=()) -> "EventSlice":
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        p = np.asarray(p).reshape(-1)
        if not (len(x) == len(y) == len(t) == len(p)):
            raise ValueError("event columns differ in length")
        p = normalize_polarity(p)
        warnings = tuple(warnings)
        if len(t) > 1 and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            x, y, t, p = x[order], y[order], t[order], p[order]
            warnings += ("timestamps were not sorted; events reordered by time",)
        if len(t):
            t0, tN = float(t[0]), float(t[-1])
        else:
            t0 = tN = 0.0
        return cls(
            _readonly(x, np.float64),
            _readonly(y, np.float64),
            _readonly(t, np.float64),
            _readonly(p, np.int8),
            t0,
            tN,
            warnings,
        )

    @classmethod
    def empty(cls) -> "EventSlice":
        return cls.from_arrays([], [], [], [])

    @classmethod
    def from_events(cls, events) -> "EventSlice":
        events = list(events)
        if not events:
            return cls.empty()
        x, y, t, p = zip(*((e.x, e.y, e.t, e.p) for e in events))
        return cls.from_arrays(x, y, t, p)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(float(self.x[i]), float(self.y[i]), float(self.t[i]), int(self.p[i]))

    @property
    def events(self) -> list[Event]:
        return list(self)

    @property
    def duration(self) -> float:
        return self.tN - self.t0

    def head(self, n: int) -> "EventSlice":
        """First ``n`` events, e.g. to cap a window at a fixed event count."""
        return EventSlice.from_arrays(self.x[:n], self.y[:n], self.t[:n], self.p[:n], self.warnings)

    def concat(self, other: "EventSlice") -> "EventSlice":
        return EventSlice.from_arrays(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.t, other.t]),
            np.concatenate([self.p, other.p]),
        )


def normalize_polarity(p) -> np.ndarray:
    p = np.asarray(p)
    if p.size == 0:
        return p.astype(np.int8)
    pf = p.astype(np.float64)
    bad = ~np.isin(pf, (-1.0, 0.0, 1.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EventParseError(f"polarity {p[i]!r} at index {i} is not one of -1, 0, 1")
    return np.where(pf > 0, 1, -1).astype(np.int8)


def _detect_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    return "binary" if ext in (".bin", ".raw", ".dat") else "csv"


def load_events(path, format: str | None = None) -> EventSlice:
    fmt = format or _detect_format(path)
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown event format {fmt!r}")


def _load_csv(path) -> EventSlice:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise EventParseError(f"{path}:{lineno}: expected 4 fields 't x y p', got {len(parts)}")
            try:
                t, x, y = float(parts[0]), float(parts[1]), float(parts[2])
                p = float(parts[3])
            except ValueError as exc:
                raise EventParseError(f"{path}:{lineno}: {exc}") from None
            if p not in (-1.0, 0.0, 1.0):
                raise EventParseError(f"{path}:{lineno}: polarity {parts[3]!r} not in {{-1, 0, 1}}")
            if not all(math.isfinite(v) for v in (t, x, y)):
                raise EventParseError(f"{path}:{lineno}: non-finite value")
            rows.append((t, x, y, p))
    if not rows:
        return EventSlice.empty()
    a = np.array(rows, dtype=np.float64)
    return EventSlice.from_arrays(a[:, 1], a[:, 2], a[:, 0], a[:, 3])


def _load_binary(path) -> EventSlice:
    raw = open(path, "rb").read()
    rem = len(raw) % RECORD_DTYPE.itemsize
    if rem:
        offset = len(raw) - rem
        raise EventParseError(
            f"{path}: truncated record at byte offset {offset} "
            f"(record size {RECORD_DTYPE.itemsize})"
        )
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
    bad = ~np.isin(rec["p"], (-1, 0, 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EventParseError(
            f"{path}: polarity {int(rec['p'][i])} in record {i} "
            f"(byte offset {i * RECORD_DTYPE.itemsize})"
        )
    if not np.all(np.isfinite(rec["t"])):
        i = int(np.flatnonzero(~np.isfinite(rec["t"]))[0])
        raise EventParseError(f"{path}: non-finite timestamp at byte offset {i * RECORD_DTYPE.itemsize}")
    return EventSlice.from_arrays(rec["x"], rec["y"], rec["t"], rec["p"])


def save_events(slice: EventSlice, path, format: str | None = None) -> None:
    fmt = format or _detect_format(path)
    if fmt == "csv":
        with open(path, "w", encoding="utf-8") as f:
            for t, x, y, p in zip(slice.t.tolist(), slice.x.tolist(), slice.y.tolist(), slice.p.tolist()):
                f.write(f"{t!r} {x!r} {y!r} {p}\n")
    elif fmt == "binary":
        # x, y are narrowed to float32 by the record layout
        rec = np.empty(len(slice), dtype=RECORD_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = slice.t, slice.x, slice.y, slice.p
        with open(path, "wb") as f:
            f.write(rec.tobytes())
    else:
        raise ValueError(f"unknown event format {fmt!r}")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise CalibrationError(f"resolution must be >= 1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def centered(cls, f: float, width: int, height: int) -> "CameraIntrinsics":
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass(frozen=True)
class StereoRig:
    left: CameraIntrinsics
    right: CameraIntrinsics
    baseline_m: float
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not self.baseline_m > 0:
            raise CalibrationError(f"baseline must be positive, got {self.baseline_m}")

    @classmethod
    def monocular(cls, K: CameraIntrinsics, baseline_m: float = 1.0) -> "StereoRig":
        return cls(K, K, baseline_m)


_CAM_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def load_calibration(path) -> StereoRig:
    """Read ``key = value`` calibration.

    Unprefixed camera keys (``fx``, ...) apply to both cameras; ``left.fx`` or
    ``right.fx`` override one camera.  ``baseline`` is in meters.  A repeated
    key keeps its last value and records a warning.
    """
    values: dict[str, str] = {}
    warnings = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise EventParseError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in values and values[key] != val:
                warnings.append(f"duplicate key {key!r} (line {lineno}): {values[key]!r} replaced by {val!r}")
            values[key] = val

    def number(key):
        try:
            return float(values[key])
        except KeyError:
            raise CalibrationError(f"{path}: missing key {key!r}") from None
        except ValueError:
            raise CalibrationError(f"{path}: key {key!r} is not a number: {values[key]!r}") from None

    def camera(side):
        kw = {}
        for k in _CAM_KEYS:
            name = f"{side}.{k}" if f"{side}.{k}" in values else k
            kw[k] = number(name)
        kw["width"], kw["height"] = int(kw["width"]), int(kw["height"])
        return CameraIntrinsics(**kw)

    return StereoRig(camera("left"), camera("right"), number("baseline"), tuple(warnings))


def save_calibration(rig: StereoRig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for side in ("left", "right"):
            cam = getattr(rig, side)
            for k in _CAM_KEYS:
                f.write(f"{side}.{k} = {getattr(cam, k)!r}\n")
        f.write(f"baseline = {rig.baseline_m!r}\n")
