"""Trajectory ingestion, windowing, frame graphs, splits and synthetic scenes."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._kv import format_kv, read_kv
from .errors import ConfigError, FormatError, ParseError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("frame_id", "subject_id", "x", "y")
DOMAINS = ("vehicle_birdseye", "pedestrian_birdseye", "pedestrian_highangle")
UNITS = ("meters", "pixels")


def subject_key(subject_id: str):
    """Sort numeric ids numerically, everything else lexically after them."""
    return (0, int(subject_id), "") if subject_id.isdigit() else (1, 0, subject_id)


@dataclass(frozen=True)
class TrackPoint:
    frame_id: int
    subject_id: str
    x: float
    y: float


def _sort_tracks(tracks: Iterable[TrackPoint]) -> list[TrackPoint]:
    return sorted(tracks, key=lambda p: (subject_key(p.subject_id), p.frame_id))


def load_tracks(path) -> list[TrackPoint]:
    """Parse a ``frame_id,subject_id,x,y`` CSV into points sorted by (subject, frame).

    Extra columns are ignored with a warning. Duplicate (frame, subject) pairs
    are rejected.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise FormatError(f"{path}: missing column {col!r}")
        extra = [h for h in header if h not in REQUIRED_COLUMNS]
        if extra:
            logger.warning("%s: ignoring extra columns %s", path, ", ".join(extra))
        idx = {col: header.index(col) for col in REQUIRED_COLUMNS}

        points = []
        seen: set[tuple[int, str]] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                frame_id = int(row[idx["frame_id"]])
            except ValueError:
                raise ParseError(f"non-integer frame_id {row[idx['frame_id']]!r}", lineno) from None
            if frame_id < 0:
                raise ParseError(f"negative frame_id {frame_id}", lineno)
            coords = []
            for col in ("x", "y"):
                try:
                    value = float(row[idx[col]])
                except ValueError:
                    raise ParseError(f"non-numeric {col} {row[idx[col]]!r}", lineno) from None
                if not math.isfinite(value):
                    raise ParseError(f"non-finite {col} {row[idx[col]]!r}", lineno)
                coords.append(value)
            subject = row[idx["subject_id"]].strip()
            if (frame_id, subject) in seen:
                raise FormatError(f"{path}: duplicate row for (frame_id={frame_id}, subject_id={subject})")
            seen.add((frame_id, subject))
            points.append(TrackPoint(frame_id, subject, coords[0], coords[1]))
    return _sort_tracks(points)


def write_tracks(path, tracks: Sequence[TrackPoint]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REQUIRED_COLUMNS)
        for p in tracks:
            writer.writerow([p.frame_id, p.subject_id, repr(p.x), repr(p.y)])


def frame_stride(native_fps: float, target_fps: float) -> int:
    if native_fps <= 0 or target_fps <= 0:
        raise ConfigError(f"fps must be positive, got native {native_fps}, target {target_fps}")
    ratio = native_fps / target_fps
    stride = round(ratio)
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ConfigError(f"native_fps {native_fps} is not an integer multiple of target_fps {target_fps}")
    return stride


def downsample(tracks: Sequence[TrackPoint], native_fps: float, target_fps: float) -> list[TrackPoint]:
    """Keep frames whose id is a multiple of ``native_fps / target_fps``.

    Frame ids are left untouched, so kept frames are spaced by the stride.
    """
    stride = frame_stride(native_fps, target_fps)
    if stride == 1:
        return list(tracks)
    return [p for p in tracks if p.frame_id % stride == 0]


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    domain: str
    units: str
    native_fps: float
    target_fps: float
    t_in: int
    t_out: int

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain: must be one of {', '.join(DOMAINS)}, got {self.domain!r}")
        if self.units not in UNITS:
            raise ConfigError(f"units: must be one of {', '.join(UNITS)}, got {self.units!r}")
        if self.t_in < 2:
            raise ConfigError(f"t_in: must be >= 2, got {self.t_in}")
        if self.t_out < 1:
            raise ConfigError(f"t_out: must be >= 1, got {self.t_out}")
        frame_stride(self.native_fps, self.target_fps)

    @property
    def frame_step(self) -> int:
        """Frame-id spacing of consecutive samples after downsampling."""
        return frame_stride(self.native_fps, self.target_fps)

    @property
    def window_length(self) -> int:
        return self.t_in + self.t_out


PRESETS = {
    "vehicle": DatasetSpec("vehicle", "vehicle_birdseye", "meters", 5.0, 5.0, 15, 25),
    "pedestrian_birdseye": DatasetSpec("pedestrian_birdseye", "pedestrian_birdseye", "meters", 2.5, 2.5, 8, 12),
    "pedestrian_highangle": DatasetSpec("pedestrian_highangle", "pedestrian_highangle", "pixels", 2.5, 2.5, 8, 12),
}
PRESETS["pedestrian"] = PRESETS["pedestrian_birdseye"]


def preset(name: str) -> DatasetSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"preset: unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


_SPEC_TYPES = {f.name: f.type for f in fields(DatasetSpec)}


def dataset_spec_from_mapping(values: dict) -> DatasetSpec:
    kwargs = {}
    for name, kind in _SPEC_TYPES.items():
        if name not in values:
            raise ConfigError(f"{name}: missing from dataset spec")
        raw = values[name]
        try:
            kwargs[name] = int(raw) if kind == "int" else float(raw) if kind == "float" else str(raw)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return DatasetSpec(**kwargs)


def load_dataset_spec(path) -> DatasetSpec:
    return dataset_spec_from_mapping(read_kv(path))


def save_dataset_spec(spec: DatasetSpec, path) -> None:
    Path(path).write_text(format_kv(asdict(spec).items()), encoding="utf-8")


# -- windows and frames ------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryWindow:
    """One subject's observed history and ground-truth future around ``anchor_frame``.

    ``relative[k] = observed[k] - observed[0]``.
    """

    subject_id: str
    anchor_frame: int
    observed: np.ndarray
    relative: np.ndarray
    future: np.ndarray

    def translated(self, offset: np.ndarray) -> "TrajectoryWindow":
        return replace(self, observed=self.observed + offset, future=self.future + offset)


def make_window(subject_id: str, anchor_frame: int, observed, future) -> TrajectoryWindow:
    observed = np.asarray(observed, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    return TrajectoryWindow(subject_id, anchor_frame, observed, observed - observed[0], future)


def _group_by_subject(tracks: Iterable[TrackPoint]) -> dict[str, list[TrackPoint]]:
    by_subject: dict[str, list[TrackPoint]] = defaultdict(list)
    for p in tracks:
        by_subject[p.subject_id].append(p)
    return by_subject


def build_windows(tracks: Sequence[TrackPoint], spec: DatasetSpec, stride: int = 1) -> list[TrajectoryWindow]:
    """Slide a ``t_in + t_out`` window over every subject's track.

    Windows start on a global grid: a start frame ``f`` is eligible when
    ``(f // frame_step) % stride == 0``, so subjects share anchors. Spans
    containing a missing frame are skipped.
    """
    if stride < 1:
        raise ConfigError(f"stride: must be >= 1, got {stride}")
    step = spec.frame_step
    length = spec.window_length
    windows = []
    by_subject = _group_by_subject(tracks)
    for subject in sorted(by_subject, key=subject_key):
        pts = sorted(by_subject[subject], key=lambda p: p.frame_id)
        frames = np.array([p.frame_id for p in pts], dtype=np.int64)
        xy = np.array([[p.x, p.y] for p in pts], dtype=np.float64).reshape(-1, 2)
        if len(pts) < length:
            continue
        consecutive = np.diff(frames) == step
        # breaks[i] counts gaps among the first i transitions
        breaks = np.concatenate([[0], np.cumsum(~consecutive)])
        for i in range(len(pts) - length + 1):
            if frames[i] % step or (frames[i] // step) % stride:
                continue
            if breaks[i + length - 1] != breaks[i]:
                continue
            obs = xy[i : i + spec.t_in]
            fut = xy[i + spec.t_in : i + length]
            windows.append(make_window(subject, int(frames[i + spec.t_in - 1]), obs, fut))
    return windows


@dataclass
class FrameSample:
    """All subjects sharing one anchor frame; the node set of a fully connected graph.

    Absolute coordinates are stored translated by ``-normalization_offset``.
    """

    anchor_frame: int
    windows: list[TrajectoryWindow]
    normalization_offset: np.ndarray
    scene: str = ""

    def __len__(self) -> int:
        return len(self.windows)

    @cached_property
    def observed(self) -> np.ndarray:
        return np.stack([w.observed for w in self.windows]) if self.windows else np.zeros((0, 0, 2))

    @cached_property
    def relative(self) -> np.ndarray:
        return np.stack([w.relative for w in self.windows]) if self.windows else np.zeros((0, 0, 2))

    @cached_property
    def future(self) -> np.ndarray:
        return np.stack([w.future for w in self.windows]) if self.windows else np.zeros((0, 0, 2))

    @property
    def subject_ids(self) -> list[str]:
        return [w.subject_id for w in self.windows]

    def denormalized(self) -> list[TrajectoryWindow]:
        return [w.translated(self.normalization_offset) for w in self.windows]

    def permuted(self, order: Sequence[int]) -> "FrameSample":
        return FrameSample(self.anchor_frame, [self.windows[i] for i in order], self.normalization_offset, self.scene)


def make_frame(windows: Sequence[TrajectoryWindow], scene: str = "") -> FrameSample:
    """Normalize absolute windows sharing one anchor into a :class:`FrameSample`."""
    anchors = {w.anchor_frame for w in windows}
    if len(anchors) != 1:
        raise ConfigError(f"windows span anchors {sorted(anchors)}")
    offset = np.mean([w.observed[-1] for w in windows], axis=0)
    return FrameSample(anchors.pop(), [w.translated(-offset) for w in windows], offset, scene)


def group_frames(windows: Iterable[TrajectoryWindow], scene: str = "") -> list[FrameSample]:
    buckets: dict[int, list[TrajectoryWindow]] = defaultdict(list)
    for w in windows:
        buckets[w.anchor_frame].append(w)
    return [
        make_frame(sorted(buckets[anchor], key=lambda w: subject_key(w.subject_id)), scene)
        for anchor in sorted(buckets)
    ]


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class RatioSplit:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2


@dataclass(frozen=True)
class LeaveOneOut:
    scene: str


def split_dataset(samples: Sequence[FrameSample], policy) -> tuple[list, list, list]:
    """Chronological ratio split, or hold out one scene entirely.

    Ratio splits order frames by ``(anchor_frame, scene)`` and cut contiguous
    blocks of ``round(fraction * n)`` frames; the test block takes the rest.
    Leave-one-out returns an empty validation list.
    """
    if isinstance(policy, RatioSplit):
        fracs = (policy.train, policy.val, policy.test)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split: fractions {fracs} must be non-negative and sum to 1")
        ordered = sorted(samples, key=lambda f: (f.anchor_frame, f.scene))
        n = len(ordered)
        n_train = round(policy.train * n)
        n_val = min(round(policy.val * n), n - n_train)
        return ordered[:n_train], ordered[n_train : n_train + n_val], ordered[n_train + n_val :]
    if isinstance(policy, LeaveOneOut):
        scenes = {f.scene for f in samples}
        if policy.scene not in scenes:
            raise ConfigError(f"split: unknown scene {policy.scene!r}; have {sorted(scenes)}")
        train = [f for f in samples if f.scene != policy.scene]
        test = [f for f in samples if f.scene == policy.scene]
        return train, [], test
    raise ConfigError(f"split: unsupported policy {policy!r}")


# -- synthetic scenes --------------------------------------------------------

SYNTH_KINDS = ("constant_velocity", "turning", "crossing")


def constant_velocity_track(start, velocity, n_frames: int) -> np.ndarray:
    k = np.arange(n_frames, dtype=np.float64)[:, None]
    return np.asarray(start, dtype=np.float64) + k * np.asarray(velocity, dtype=np.float64)


def turning_track(start, speed: float, heading: float, omega: float, n_frames: int) -> np.ndarray:
    """Constant-speed arc; the tangent heading at frame ``k`` is ``heading + k*omega``."""
    start = np.asarray(start, dtype=np.float64)
    k = np.arange(n_frames, dtype=np.float64)
    if omega == 0.0:
        return constant_velocity_track(start, speed * np.array([math.cos(heading), math.sin(heading)]), n_frames)
    radius = speed / omega
    h = heading + k * omega
    dx = radius * (np.sin(h) - math.sin(heading))
    dy = radius * (math.cos(heading) - np.cos(h))
    return start + np.stack([dx, dy], axis=1)


def _to_points(paths: Sequence[np.ndarray]) -> list[TrackPoint]:
    return [
        TrackPoint(k, str(i), float(xy[0]), float(xy[1]))
        for i, path in enumerate(paths)
        for k, xy in enumerate(path)
    ]


def synth_scene(
    kind: str,
    n_subjects: int,
    n_frames: int,
    seed: int,
    noise: float = 0.0,
    speed: tuple[float, float] = (0.5, 1.5),
    extent: float = 20.0,
) -> list[TrackPoint]:
    """Deterministic synthetic corpus; every subject is present in every frame.

    ``noise`` adds i.i.d. Gaussian jitter (std, in position units) to each
    sample after the ideal path is generated.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"kind: must be one of {', '.join(SYNTH_KINDS)}, got {kind!r}")
    if n_subjects < 1:
        raise ConfigError(f"n_subjects: must be >= 1, got {n_subjects}")
    if n_frames < 2:
        raise ConfigError(f"n_frames: must be >= 2, got {n_frames}")
    if noise < 0:
        raise ConfigError(f"noise: must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)

    def heading_velocity():
        h = rng.uniform(0.0, 2 * math.pi)
        s = rng.uniform(*speed)
        return h, s, s * np.array([math.cos(h), math.sin(h)])

    paths = []
    if kind == "constant_velocity":
        for _ in range(n_subjects):
            start = rng.uniform(-extent, extent, size=2)
            _, _, v = heading_velocity()
            paths.append(constant_velocity_track(start, v, n_frames))
    elif kind == "turning":
        for _ in range(n_subjects):
            start = rng.uniform(-extent, extent, size=2)
            h, s, _ = heading_velocity()
            omega = rng.choice([-1.0, 1.0]) * rng.uniform(0.02, 0.1)
            paths.append(turning_track(start, s, h, omega, n_frames))
    else:
        meet = n_frames // 2
        while len(paths) < n_subjects:
            centre = rng.uniform(-extent, extent, size=2)
            h, s, v = heading_velocity()
            paths.append(constant_velocity_track(centre - meet * v, v, n_frames))
            if len(paths) == n_subjects:
                break
            h2 = h + rng.uniform(math.pi / 4, 3 * math.pi / 4)
            s2 = rng.uniform(*speed)
            v2 = s2 * np.array([math.cos(h2), math.sin(h2)])
            # the second walker reaches the crossing point a few frames apart
            meet2 = meet + int(rng.integers(-3, 4))
            paths.append(constant_velocity_track(centre - meet2 * v2, v2, n_frames))
    if noise > 0:
        paths = [p + rng.normal(0.0, noise, size=p.shape) for p in paths]
    return _to_points(paths)


# -- windowed-dataset cache --------------------------------------------------

CACHE_MAGIC = b"PSHGWIN\n"
CACHE_VERSION = 1


def write_cache(path, spec: DatasetSpec, frames: Sequence[FrameSample]) -> None:
    """Binary cache: magic, version, JSON header, then little-endian float64 payload."""
    header = {
        "spec": asdict(spec),
        "frames": [
            {"anchor": f.anchor_frame, "scene": f.scene, "subjects": f.subject_ids} for f in frames
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQ", CACHE_VERSION, len(blob)))
        fh.write(blob)
        for f in frames:
            for arr in (f.normalization_offset, f.observed, f.relative, f.future):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_cache(path) -> tuple[DatasetSpec, list[FrameSample]]:
    raw = Path(path).read_bytes()
    if raw[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a windowed-dataset cache")
    pos = len(CACHE_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: cache format version {version}, expected {CACHE_VERSION}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    spec = dataset_spec_from_mapping(header["spec"])
    payload = np.frombuffer(raw, dtype="<f8", offset=pos)
    cursor = 0

    def take(shape):
        nonlocal cursor
        size = int(np.prod(shape))
        if cursor + size > payload.size:
            raise FormatError(f"{path}: truncated payload")
        out = payload[cursor : cursor + size].astype(np.float64).reshape(shape)
        cursor += size
        return out

    frames = []
    for meta in header["frames"]:
        n = len(meta["subjects"])
        offset = take((2,))
        observed = take((n, spec.t_in, 2))
        relative = take((n, spec.t_in, 2))
        future = take((n, spec.t_out, 2))
        windows = [
            TrajectoryWindow(sid, meta["anchor"], observed[i], relative[i], future[i])
            for i, sid in enumerate(meta["subjects"])
        ]
        frames.append(FrameSample(meta["anchor"], windows, offset, meta["scene"]))
    if cursor != payload.size:
        raise FormatError(f"{path}: {payload.size - cursor} trailing values")
    return spec, frames
