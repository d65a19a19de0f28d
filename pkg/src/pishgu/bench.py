"""Per-sample latency and frame-throughput measurement.

Throughput is derived from per-sample latency and the mean number of subjects
per frame: ``fps = 1000 / (latency_ms * samples_per_frame)``.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from ._kv import format_kv
from .errors import ConfigError
from .model import forward

MIN_REPS = 30


def fps_from_latency(latency_ms_per_sample: float, samples_per_frame: float) -> float:
    return 1000.0 / (latency_ms_per_sample * samples_per_frame)


def samples_per_frame(frames: Sequence) -> float:
    if not frames:
        raise ConfigError("frames: need at least one frame")
    return sum(len(f) for f in frames) / len(frames)


@dataclass
class BenchReport:
    latency_ms_mean: float
    latency_ms_std: float
    samples_per_frame: float
    warmup_reps: int
    measured_reps: int

    @property
    def fps(self) -> float:
        return fps_from_latency(self.latency_ms_mean, self.samples_per_frame)

    def items(self):
        return [
            ("latency_ms_per_sample_mean", repr(self.latency_ms_mean)),
            ("latency_ms_per_sample_std", repr(self.latency_ms_std)),
            ("samples_per_frame", repr(self.samples_per_frame)),
            ("fps", repr(self.fps)),
            ("warmup_reps", self.warmup_reps),
            ("measured_reps", self.measured_reps),
        ]

    def to_text(self) -> str:
        return format_kv(self.items())

    def to_json(self) -> str:
        doc = {
            "latency_ms_per_sample": {"mean": self.latency_ms_mean, "std": self.latency_ms_std},
            "samples_per_frame": self.samples_per_frame,
            "fps": self.fps,
            "warmup_reps": self.warmup_reps,
            "measured_reps": self.measured_reps,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text(), encoding="utf-8")
        js.write_text(self.to_json(), encoding="utf-8")
        return txt, js


def bench_forward(
    params,
    frames: Sequence,
    warmup: int = 5,
    reps: int = MIN_REPS,
    predict: Callable | None = None,
) -> BenchReport:
    """Time ``reps`` passes over ``frames``, one frame graph per call.

    Each pass yields one latency sample (pass wall time / subjects in the
    pass). ``predict(frame, params)`` defaults to the model forward; no tape
    is active, so nothing is recorded for differentiation.
    """
    frames = [f for f in frames if len(f)]
    if not frames:
        raise ConfigError("frames: need at least one non-empty frame")
    if reps < MIN_REPS:
        raise ConfigError(f"reps: must be >= {MIN_REPS}, got {reps}")
    if warmup < 0:
        raise ConfigError(f"warmup: must be >= 0, got {warmup}")
    predict = predict or forward
    subjects = sum(len(f) for f in frames)
    for _ in range(warmup):
        for f in frames:
            predict(f, params)
    per_sample = []
    for _ in range(reps):
        start = time.perf_counter()
        for f in frames:
            predict(f, params)
        elapsed = time.perf_counter() - start
        per_sample.append(1000.0 * elapsed / subjects)
    return BenchReport(
        statistics.fmean(per_sample),
        statistics.stdev(per_sample),
        samples_per_frame(frames),
        warmup,
        reps,
    )
