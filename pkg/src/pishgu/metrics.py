"""Displacement-error metrics and closed-form baseline predictors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kv import format_kv
from .errors import ConfigError, ContractError


def _check_pair(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ContractError(f"truth shape {truth.shape} != prediction shape {pred.shape}")
    if truth.ndim != 3 or truth.shape[2] != 2 or truth.shape[0] < 1 or truth.shape[1] < 1:
        raise ContractError(f"expected n x T_out x 2 with n, T_out >= 1, got {truth.shape}")
    return truth, pred


def displacement(truth, pred) -> np.ndarray:
    """Per-subject, per-step L2 error, shape ``n x T_out``."""
    truth, pred = _check_pair(truth, pred)
    return np.linalg.norm(truth - pred, axis=2)


def ade(truth, pred) -> float:
    """Mean L2 error over all subjects and predicted steps."""
    return float(displacement(truth, pred).mean())


def fde(truth, pred) -> float:
    """Mean L2 error at the final predicted step."""
    return float(displacement(truth, pred)[:, -1].mean())


def horizon_steps(t_out: int, fps: float) -> list[int]:
    """1-based step index of each whole-second horizon within ``t_out`` steps."""
    per_second = round(fps)
    if fps <= 0 or abs(fps - per_second) > 1e-9 or t_out % per_second:
        raise ConfigError(f"fps {fps} does not divide t_out {t_out} into whole seconds")
    return list(range(per_second, t_out + 1, per_second))


def rmse_curve(truth, pred, fps: float) -> list[tuple[float, float]]:
    """Root-mean-square Euclidean error across subjects at every whole second."""
    truth, pred = _check_pair(truth, pred)
    sq = ((truth - pred) ** 2).sum(axis=2)
    per_second = round(fps)
    return [
        (float(step // per_second), float(math.sqrt(sq[:, step - 1].mean())))
        for step in horizon_steps(truth.shape[1], fps)
    ]


def _unpack(window, t_out):
    # accepts a TrajectoryWindow or a raw T_in x 2 array plus t_out
    if hasattr(window, "observed"):
        return np.asarray(window.observed, dtype=np.float64), t_out or len(window.future)
    if t_out is None:
        raise ContractError("t_out is required when passing a raw observed array")
    return np.asarray(window, dtype=np.float64), t_out


def constant_velocity_predict(window, t_out: int | None = None) -> np.ndarray:
    """Extrapolate the last observed displacement for ``t_out`` steps."""
    observed, t_out = _unpack(window, t_out)
    if observed.shape[0] < 2:
        raise ContractError("constant-velocity baseline needs at least 2 observed steps")
    last = observed[-1]
    v = last - observed[-2]
    steps = np.arange(1, t_out + 1, dtype=np.float64)[:, None]
    return last + steps * v


def linear_fit_predict(window, t_out: int | None = None) -> np.ndarray:
    """Least-squares line per axis over the observed steps, extrapolated ``t_out`` steps."""
    observed, t_out = _unpack(window, t_out)
    t_in = observed.shape[0]
    if t_in < 2:
        raise ContractError("linear baseline needs at least 2 observed steps")
    t = np.arange(t_in, dtype=np.float64)
    design = np.stack([np.ones(t_in), t], axis=1)
    coef, *_ = np.linalg.lstsq(design, observed, rcond=None)
    future_t = np.arange(t_in, t_in + t_out, dtype=np.float64)
    return np.stack([np.ones(t_out), future_t], axis=1) @ coef


@dataclass
class MetricReport:
    ade: float
    fde: float
    rmse_per_second: list[tuple[float, float]] = field(default_factory=list)
    n_subjects: int = 0
    units: str = "meters"
    parameter_count: int | None = None

    def __post_init__(self):
        horizons = [h for h, _ in self.rmse_per_second]
        if any(b <= a for a, b in zip(horizons, horizons[1:])):
            raise ContractError(f"rmse horizons must be strictly increasing, got {horizons}")

    def items(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = [
            ("ade", repr(self.ade)),
            ("fde", repr(self.fde)),
        ]
        for horizon, value in self.rmse_per_second:
            out.append((f"rmse_{horizon:g}s", repr(value)))
        out += [("n_subjects", self.n_subjects), ("units", self.units)]
        if self.parameter_count is not None:
            out.append(("parameter_count", self.parameter_count))
        return out

    def to_text(self) -> str:
        return format_kv(self.items())

    def to_json(self) -> str:
        doc = {
            "ade": self.ade,
            "fde": self.fde,
            "rmse_per_second": [[h, v] for h, v in self.rmse_per_second],
            "n_subjects": self.n_subjects,
            "units": self.units,
        }
        if self.parameter_count is not None:
            doc["parameter_count"] = self.parameter_count
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.txt`` and ``<stem>.json``; returns both paths."""
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text(), encoding="utf-8")
        js.write_text(self.to_json(), encoding="utf-8")
        return txt, js


def report(truth, pred, fps: float | None = None, units: str = "meters") -> MetricReport:
    """Aggregate all metrics; RMSE is omitted when ``fps`` does not give whole-second horizons."""
    truth, pred = _check_pair(truth, pred)
    curve: list[tuple[float, float]] = []
    if fps is not None:
        try:
            curve = rmse_curve(truth, pred, fps)
        except ConfigError:
            curve = []
    return MetricReport(ade(truth, pred), fde(truth, pred), curve, truth.shape[0], units)
