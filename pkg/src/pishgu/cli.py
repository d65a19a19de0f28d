"""Command-line front end: synth, prepare, train, eval, predict, bench.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then ``--key value`` flags. Exit statuses: 0 success,
2 missing input file, 3 invalid configuration or input, 4 contract violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import bench, data, metrics, model, training
from ._kv import read_kv
from .errors import ConfigError, ContractError, FormatError

log = logging.getLogger("pishgu")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_CONTRACT = 0, 2, 3, 4


class MissingInput(Exception):
    def __init__(self, path):
        super().__init__(f"input file not found: {path}")
        self.path = path


def _bool(raw: str) -> bool:
    value = str(raw).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _int_tuple(raw) -> tuple[int, ...]:
    if isinstance(raw, tuple):
        return raw
    return tuple(int(v) for v in str(raw).replace(" ", "").split(","))


def _optional_float(raw):
    if raw is None or str(raw).strip().lower() in ("", "none", "off"):
        return None
    return float(raw)


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any
    help: str


KEYS: dict[str, Key] = {
    "preset": Key(str, None, "domain preset: vehicle, pedestrian_birdseye, pedestrian_highangle"),
    # dataset spec
    "name": Key(str, None, "dataset name (defaults to the preset)"),
    "domain": Key(str, None, "vehicle_birdseye | pedestrian_birdseye | pedestrian_highangle"),
    "units": Key(str, None, "meters | pixels"),
    "native_fps": Key(float, None, "frame rate of the input CSV"),
    "target_fps": Key(float, None, "sampling rate after downsampling"),
    "t_in": Key(int, None, "observed steps"),
    "t_out": Key(int, None, "predicted steps"),
    # model
    "features_per_step": Key(int, 8, "GIN output features per time step"),
    "embed_dim": Key(int, None, "input embedding width (default features_per_step*t_in)"),
    "mlp_hidden": Key(int, None, "GIN MLP hidden width (default 2*features_per_step*t_in)"),
    "conv_channels": Key(_int_tuple, (16, 32, 32), "three conv widths, comma separated"),
    "cbam_reduction": Key(int, 8, "channel-attention reduction ratio"),
    # training
    "epochs": Key(int, None, "training epochs (default from preset)"),
    "learning_rate": Key(float, None, "Adam learning rate (default from preset)"),
    "beta1": Key(float, 0.9, "Adam beta1"),
    "beta2": Key(float, 0.999, "Adam beta2"),
    "epsilon": Key(float, 1e-8, "Adam epsilon"),
    "seed": Key(int, 0, "random seed"),
    "gradient_clip": Key(_optional_float, None, "global gradient-norm clip (none = off)"),
    "eval_every": Key(int, 1, "epochs between validation passes"),
    "save_intermediate": Key(_bool, False, "also write a checkpoint every eval_every epochs"),
    # files
    "input": Key(str, None, "input trajectory CSV"),
    "data": Key(str, None, "windowed-dataset cache"),
    "checkpoint": Key(str, None, "model checkpoint"),
    "out": Key(str, None, "output path (file, or stem for .txt/.json reports)"),
    "log": Key(str, None, "training log CSV (default <out>.log.csv)"),
    "overlay": Key(str, None, "optional per-frame trajectory overlay JSON"),
    # dataset handling
    "scene": Key(str, "", "scene label stored with every frame"),
    "stride": Key(int, 1, "window start stride in sampled frames"),
    "split": Key(str, "0.7,0.1,0.2", "train,val,test fractions (chronological)"),
    "holdout": Key(str, None, "leave-one-out scene; overrides split"),
    "subset": Key(str, None, "train | val | test | all"),
    # synthetic scenes
    "kind": Key(str, "constant_velocity", "constant_velocity | turning | crossing"),
    "n_subjects": Key(int, 5, "subjects per synthetic scene"),
    "n_frames": Key(int, None, "frames per synthetic scene (default t_in+t_out+3)"),
    "noise": Key(float, 0.0, "Gaussian position jitter std"),
    "speed_min": Key(float, 0.5, "minimum synthetic speed per frame"),
    "speed_max": Key(float, 1.5, "maximum synthetic speed per frame"),
    "extent": Key(float, 20.0, "half-width of the synthetic start box"),
    # benchmark
    "warmup": Key(int, 5, "untimed warm-up passes"),
    "reps": Key(int, 30, "timed passes (>= 30)"),
}

SPEC_KEYS = ["name", "domain", "units", "native_fps", "target_fps", "t_in", "t_out"]
MODEL_KEYS = ["features_per_step", "embed_dim", "mlp_hidden", "conv_channels", "cbam_reduction"]
TRAIN_KEYS = ["epochs", "learning_rate", "beta1", "beta2", "epsilon", "seed", "gradient_clip", "eval_every"]
SELECT_KEYS = ["split", "holdout", "subset"]

COMMANDS: dict[str, tuple[str, list[str]]] = {
    "synth": (
        "write a synthetic trajectory CSV",
        ["preset", "t_in", "t_out", "kind", "n_subjects", "n_frames", "seed", "noise", "speed_min", "speed_max", "extent", "out"],
    ),
    "prepare": (
        "window a trajectory CSV into a dataset cache",
        ["preset", *SPEC_KEYS, "input", "out", "scene", "stride"],
    ),
    "train": (
        "train a model on a dataset cache",
        ["preset", "data", "out", "log", "save_intermediate", *SELECT_KEYS, *MODEL_KEYS, *TRAIN_KEYS],
    ),
    "eval": ("write ADE/FDE/RMSE reports", ["data", "checkpoint", "out", *SELECT_KEYS]),
    "predict": ("write denormalized predictions", ["data", "checkpoint", "out", "overlay", *SELECT_KEYS]),
    "bench": ("measure latency and frame throughput", ["data", "checkpoint", "out", "warmup", "reps", *SELECT_KEYS]),
}

SUBSET_DEFAULTS = {"train": "train", "eval": "test", "predict": "test", "bench": "all"}
REQUIRED = {
    "synth": ["out"],
    "prepare": ["input", "out"],
    "train": ["data", "out"],
    "eval": ["data", "checkpoint", "out"],
    "predict": ["data", "checkpoint", "out"],
    "bench": ["data", "checkpoint", "out"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pishgu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value settings file")
        for key in keys:
            flags = [f"--{key}"]
            if "_" in key:
                flags.append(f"--{key.replace('_', '-')}")
            p.add_argument(*flags, dest=key, default=None, metavar="VALUE", help=KEYS[key].help)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file and flags into typed settings; validates every key."""
    allowed = COMMANDS[command][1]
    raw: dict[str, Any] = {}
    if ns.config:
        path = Path(ns.config)
        if not path.exists():
            raise MissingInput(path)
        for key, value in read_kv(path).items():
            if key not in KEYS:
                raise ConfigError(f"{key}: unknown setting in {path}")
            if key in allowed:
                raw[key] = value
    for key in allowed:
        value = getattr(ns, key, None)
        if value is not None:
            raw[key] = value
    settings: dict[str, Any] = {}
    for key in allowed:
        spec = KEYS[key]
        if key in raw:
            try:
                settings[key] = spec.parse(raw[key])
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: cannot parse {raw[key]!r}") from None
        else:
            settings[key] = spec.default
    for key in REQUIRED[command]:
        if not settings.get(key):
            raise ConfigError(f"{key}: required for '{command}'")
    if "subset" in settings:
        settings["subset"] = settings["subset"] or SUBSET_DEFAULTS[command]
        if settings["subset"] not in ("train", "val", "test", "all"):
            raise ConfigError(f"subset: must be train, val, test or all, got {settings['subset']!r}")
    if "split" in settings:
        settings["split_policy"] = _split_policy(settings)
    return settings


def _split_policy(settings):
    if settings.get("holdout"):
        return data.LeaveOneOut(settings["holdout"])
    try:
        fracs = [float(v) for v in settings["split"].split(",")]
    except ValueError:
        raise ConfigError(f"split: cannot parse {settings['split']!r}") from None
    if len(fracs) != 3:
        raise ConfigError(f"split: need three fractions, got {settings['split']!r}")
    policy = data.RatioSplit(*fracs)
    if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split: fractions {fracs} must be non-negative and sum to 1")
    return policy


def _dataset_spec(settings) -> data.DatasetSpec:
    base = data.preset(settings.get("preset") or "vehicle")
    values = {k: getattr(base, k) for k in SPEC_KEYS}
    for key in SPEC_KEYS:
        if settings.get(key) is not None:
            values[key] = settings[key]
    return data.DatasetSpec(**values)


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(path)
    return path


def _select(frames, settings):
    subset = settings["subset"]
    if subset == "all":
        return list(frames)
    train, val, test = data.split_dataset(frames, settings["split_policy"])
    return {"train": train, "val": val, "test": test}[subset]


def _load_dataset(settings):
    spec, frames = data.read_cache(_require_file(settings["data"]))
    return spec, frames


def _load_compatible_checkpoint(settings, spec):
    params = model.load_checkpoint(_require_file(settings["checkpoint"]))
    cfg = params.config
    for key in ("t_in", "t_out"):
        if getattr(cfg, key) != getattr(spec, key):
            raise ConfigError(f"{key}: checkpoint has {getattr(cfg, key)}, dataset has {getattr(spec, key)}")
    return params


# -- commands ----------------------------------------------------------------


def cmd_synth(settings) -> None:
    spec = _dataset_spec(settings)
    n_frames = settings["n_frames"] or spec.window_length + 3
    tracks = data.synth_scene(
        settings["kind"],
        settings["n_subjects"],
        n_frames,
        settings["seed"],
        noise=settings["noise"],
        speed=(settings["speed_min"], settings["speed_max"]),
        extent=settings["extent"],
    )
    data.write_tracks(settings["out"], tracks)
    print(f"wrote {len(tracks)} points to {settings['out']}")


def cmd_prepare(settings) -> None:
    spec = _dataset_spec(settings)
    if settings["stride"] < 1:
        raise ConfigError(f"stride: must be >= 1, got {settings['stride']}")
    tracks = data.load_tracks(_require_file(settings["input"]))
    tracks = data.downsample(tracks, spec.native_fps, spec.target_fps)
    windows = data.build_windows(tracks, spec, stride=settings["stride"])
    frames = data.group_frames(windows, scene=settings["scene"])
    data.write_cache(settings["out"], spec, frames)
    print(f"wrote {len(frames)} frames ({len(windows)} windows) to {settings['out']}")


def cmd_train(settings) -> None:
    spec, frames = _load_dataset(settings)
    model_cfg = model.ModelConfig(
        t_in=spec.t_in,
        t_out=spec.t_out,
        **{k: settings[k] for k in MODEL_KEYS},
    )
    preset_name = settings["preset"] or (spec.name if spec.name in training.TRAIN_PRESETS else "vehicle")
    if preset_name not in training.TRAIN_PRESETS:
        raise ConfigError(f"preset: unknown preset {preset_name!r}")
    base = training.TRAIN_PRESETS[preset_name]
    train_cfg = training.TrainConfig(
        epochs=base.epochs if settings["epochs"] is None else settings["epochs"],
        learning_rate=base.learning_rate if settings["learning_rate"] is None else settings["learning_rate"],
        **{k: settings[k] for k in TRAIN_KEYS if k not in ("epochs", "learning_rate")},
    )
    train_frames = _select(frames, settings)
    val_frames = [] if settings["subset"] == "all" else data.split_dataset(frames, settings["split_policy"])[1]
    out = Path(settings["out"])
    log_path = Path(settings["log"]) if settings["log"] else out.with_name(out.name + ".log.csv")

    def on_epoch(record, params):
        if settings["save_intermediate"] and record.epoch % train_cfg.eval_every == 0 and record.epoch < train_cfg.epochs:
            model.save_checkpoint(params, out.with_name(f"{out.name}.epoch{record.epoch}"))

    params, history = training.train(train_frames, model_cfg, train_cfg, val=val_frames, on_epoch=on_epoch)
    model.save_checkpoint(params, out)
    training.write_training_log(history, log_path)
    final = history[-1].train_loss if history else float("nan")
    print(f"trained {train_cfg.epochs} epochs on {len(train_frames)} frames; final train loss {final:.6g}")
    print(f"wrote {out} and {log_path}")


def cmd_eval(settings) -> None:
    spec, frames = _load_dataset(settings)
    params = _load_compatible_checkpoint(settings, spec)
    frames = _select(frames, settings)
    result = training.evaluate(frames, params, spec)
    txt, js = result.write(settings["out"])
    print(f"ADE {result.ade:.6g} FDE {result.fde:.6g} over {result.n_subjects} subjects; wrote {txt} and {js}")


def cmd_predict(settings) -> None:
    spec, frames = _load_dataset(settings)
    params = _load_compatible_checkpoint(settings, spec)
    frames = [f for f in _select(frames, settings) if len(f)]
    overlay = []
    with Path(settings["out"]).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["window_id", "subject_id", "step", "x", "y"])
        window_id = 0
        for f in frames:
            pred = model.predict_absolute(f, params)
            entries = []
            for w, path in zip(f.denormalized(), pred):
                for step, (x, y) in enumerate(path, start=1):
                    writer.writerow([window_id, w.subject_id, step, repr(float(x)), repr(float(y))])
                entries.append(
                    {
                        "window_id": window_id,
                        "subject_id": w.subject_id,
                        "observed": w.observed.tolist(),
                        "future": w.future.tolist(),
                        "predicted": path.tolist(),
                    }
                )
                window_id += 1
            overlay.append({"anchor_frame": f.anchor_frame, "scene": f.scene, "subjects": entries})
    if settings["overlay"]:
        Path(settings["overlay"]).write_text(json.dumps({"frames": overlay}, indent=1) + "\n", encoding="utf-8")
    print(f"wrote predictions for {sum(len(f) for f in frames)} windows to {settings['out']}")


def cmd_bench(settings) -> None:
    spec, frames = _load_dataset(settings)
    params = _load_compatible_checkpoint(settings, spec)
    frames = _select(frames, settings)
    result = bench.bench_forward(params, frames, warmup=settings["warmup"], reps=settings["reps"])
    txt, js = result.write(settings["out"])
    print(
        f"{result.latency_ms_mean:.4f} ms/sample, {result.samples_per_frame:.3g} samples/frame, "
        f"{result.fps:.2f} FPS; wrote {txt} and {js}"
    )


HANDLERS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(ns.command, ns)
        HANDLERS[ns.command](settings)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
