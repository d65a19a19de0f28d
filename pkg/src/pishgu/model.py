"""Graph-isomorphism aggregation plus attentive CNN path predictor.

Pipeline for one frame graph with ``n`` subjects::

    [N_i ; dN_i] (4*T_in) --fc+relu--> D_e
      --GIN (one step, fully connected, no self in neighbour sum)--> F*T_in
      --reshape (T_in, F), concat dN_i (T_in, 2)--> 1 x T_in x (F+2)
      --[conv -> relu -> channel gate -> spatial gate] x 3--> C3 x T_in x (F+2)
      --mean over features, flatten--> C3*T_in --fc--> T_out x 2 offsets

Offsets are added to each subject's last observed position.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, EmptyFrameError, FormatError
from .numerics import Tensor

CHECKPOINT_MAGIC = "pishgu-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    t_in: int = 15
    t_out: int = 25
    features_per_step: int = 8
    embed_dim: int | None = None
    mlp_hidden: int | None = None
    conv_channels: tuple[int, int, int] = (16, 32, 32)
    cbam_reduction: int = 8
    spatial_kernel: int = 7

    def __post_init__(self):
        # derived defaults: D_e = F*T_in, hidden = 2*F*T_in
        gin_out = self.features_per_step * self.t_in
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", gin_out)
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 2 * gin_out)
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        self.validate()

    def validate(self) -> None:
        if self.t_in < 2:
            raise ConfigError(f"t_in: must be >= 2, got {self.t_in}")
        if self.t_out < 1:
            raise ConfigError(f"t_out: must be >= 1, got {self.t_out}")
        for name in ("features_per_step", "embed_dim", "mlp_hidden", "cbam_reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels: need three positive widths, got {self.conv_channels}")
        for c in self.conv_channels:
            if c % self.cbam_reduction:
                raise ConfigError(
                    f"cbam_reduction: {self.cbam_reduction} does not divide conv channel count {c}"
                )
        if self.spatial_kernel != 7:
            raise ConfigError(f"spatial_kernel: must be 7, got {self.spatial_kernel}")

    @property
    def gin_out(self) -> int:
        return self.features_per_step * self.t_in

    @classmethod
    def for_windows(cls, t_in: int, t_out: int, **overrides) -> "ModelConfig":
        return cls(t_in=t_in, t_out=t_out, **overrides)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (4 * cfg.t_in, cfg.embed_dim),
        "embed.bias": (cfg.embed_dim,),
    }
    for mlp in ("mlp0", "mlp1"):
        shapes[f"gin.{mlp}.w1"] = (cfg.embed_dim, cfg.mlp_hidden)
        shapes[f"gin.{mlp}.b1"] = (cfg.mlp_hidden,)
        shapes[f"gin.{mlp}.w2"] = (cfg.mlp_hidden, cfg.gin_out)
        shapes[f"gin.{mlp}.b2"] = (cfg.gin_out,)
    shapes["gin.theta"] = (1,)
    c_prev = 1
    kernels = [(2, 2), (2, 1), (2, 1)]
    k = cfg.spatial_kernel
    for layer, (c, (kh, kw)) in enumerate(zip(cfg.conv_channels, kernels), start=1):
        hidden = c // cfg.cbam_reduction
        shapes[f"conv{layer}.weight"] = (c, c_prev, kh, kw)
        shapes[f"conv{layer}.bias"] = (c,)
        shapes[f"cbam{layer}.channel.w1"] = (c, hidden)
        shapes[f"cbam{layer}.channel.b1"] = (hidden,)
        shapes[f"cbam{layer}.channel.w2"] = (hidden, c)
        shapes[f"cbam{layer}.channel.b2"] = (c,)
        shapes[f"cbam{layer}.spatial.weight"] = (1, 2, k, k)
        shapes[f"cbam{layer}.spatial.bias"] = (1,)
        c_prev = c
    shapes["head.weight"] = (cfg.conv_channels[-1] * cfg.t_in, 2 * cfg.t_out)
    shapes["head.bias"] = (2 * cfg.t_out,)
    return shapes


def _glorot_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


class ModelParams:
    """Named learnable tensors for one :class:`ModelConfig`.

    Tensors are tracked leaves; forward passes outside a :class:`~pishgu.numerics.Tape`
    never mutate them, so one instance may serve concurrent inference.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ContractError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ContractError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith("theta") or len(shape) == 1:
                data = np.zeros(shape)
            else:
                bound = _glorot_bound(shape)
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, tracked=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: Tensor(t.data.copy(), tracked=t.tracked) for k, t in self.tensors.items()}
        )


def parameter_count(params: ModelParams) -> int:
    return int(sum(t.size for t in params.tensors.values()))


# -- building blocks ---------------------------------------------------------


def _affine(x, w: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, w), b)


def _mlp(x, params: ModelParams, prefix: str) -> Tensor:
    hidden = nx.relu(_affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _affine(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def node_inputs(frame) -> np.ndarray:
    """``n x 4*T_in`` rows: flattened absolute positions then relative ones."""
    observed = frame.observed
    relative = frame.relative
    n = observed.shape[0]
    return np.concatenate([observed.reshape(n, -1), relative.reshape(n, -1)], axis=1)


def embed_inputs(frame, params: ModelParams) -> Tensor:
    cfg = params.config
    if len(frame.windows) == 0:
        raise EmptyFrameError("frame has no subjects")
    for w in frame.windows:
        if len(w.observed) != cfg.t_in:
            raise ContractError(f"window for subject {w.subject_id} has {len(w.observed)} observed steps, expected {cfg.t_in}")
    return nx.relu(_affine(node_inputs(frame), params["embed.weight"], params["embed.bias"]))


def gin_aggregate(features, params: ModelParams) -> Tensor:
    """One GIN step over a fully connected graph.

    ``f_i' = MLP0((1 + theta) f_i) + MLP1(sum_{j != i} f_j)``
    """
    features = nx._as_tensor(features)
    n = features.shape[0]
    if n == 0:
        raise EmptyFrameError("cannot aggregate an empty frame")
    adjacency = np.ones((n, n)) - np.eye(n)
    neighbours = nx.matmul(adjacency, features)
    scaled = nx.mul(features, nx.add(params["gin.theta"], 1.0))
    return nx.add(_mlp(scaled, params, "gin.mlp0"), _mlp(neighbours, params, "gin.mlp1"))


def channel_attention(fmap, params: ModelParams, layer: int) -> Tensor:
    """Per-channel gate in (0, 1): ``sigmoid(MLP(avg) + MLP(max))``, shape ``[N x] C``."""
    fmap = nx._as_tensor(fmap)
    c = params[f"cbam{layer}.channel.w1"].shape[0]
    if fmap.shape[-3] != c:
        raise ContractError(f"channel attention {layer} expects {c} channels, got {fmap.shape[-3]}")
    prefix = f"cbam{layer}.channel"
    avg = nx.pool_spatial(fmap, "avg")
    mx = nx.pool_spatial(fmap, "max")
    batched = avg.ndim == 2
    if not batched:
        avg, mx = nx.reshape(avg, (1, c)), nx.reshape(mx, (1, c))
    gate = nx.sigmoid(nx.add(_mlp(avg, params, prefix), _mlp(mx, params, prefix)))
    return gate if batched else nx.reshape(gate, (c,))


def spatial_attention(fmap, params: ModelParams, layer: int) -> Tensor:
    """Per-position gate in (0, 1), shape ``[N x] 1 x H x W``."""
    fmap = nx._as_tensor(fmap)
    pooled = nx.concat([nx.pool_channel(fmap, "avg"), nx.pool_channel(fmap, "max")], axis=-3)
    k = params.config.spatial_kernel
    half = k // 2
    logits = nx.conv2d(
        pooled,
        params[f"cbam{layer}.spatial.weight"],
        params[f"cbam{layer}.spatial.bias"],
        pad=(half, half, half, half),
    )
    return nx.sigmoid(logits)


def cbam(fmap, params: ModelParams, layer: int) -> Tensor:
    """Channel gate then spatial gate, applied sequentially."""
    gate_c = channel_attention(fmap, params, layer)
    refined = nx.mul(fmap, nx.reshape(gate_c, gate_c.shape + (1, 1)))
    return nx.mul(refined, spatial_attention(refined, params, layer))


_CONV_PADS = {1: (1, 1), 2: (1, 0), 3: (1, 0)}


def attentive_cnn(x, params: ModelParams) -> Tensor:
    """``n x 1 x T_in x (F+2)`` maps -> ``n x C3*T_in`` features."""
    h = nx._as_tensor(x)
    for layer in (1, 2, 3):
        h = nx.conv2d(h, params[f"conv{layer}.weight"], params[f"conv{layer}.bias"], pad=_CONV_PADS[layer])
        h = cbam(nx.relu(h), params, layer)
    pooled = nx.mean(h, axis=3)
    return nx.reshape(pooled, (pooled.shape[0], -1))


def cnn_input(gin_out, frame, cfg: ModelConfig) -> Tensor:
    n = gin_out.shape[0]
    per_step = nx.reshape(gin_out, (n, cfg.t_in, cfg.features_per_step))
    joined = nx.concat([per_step, frame.relative], axis=2)
    return nx.reshape(joined, (n, 1, cfg.t_in, cfg.features_per_step + 2))


def predict_offsets(frame, params: ModelParams) -> Tensor:
    cfg = params.config
    features = gin_aggregate(embed_inputs(frame, params), params)
    cnn = attentive_cnn(cnn_input(features, frame, cfg), params)
    offsets = _affine(cnn, params["head.weight"], params["head.bias"])
    return nx.reshape(offsets, (cnn.shape[0], cfg.t_out, 2))


def forward(frame, params: ModelParams) -> Tensor:
    """Predicted positions ``n x T_out x 2`` in the frame's normalized coordinates."""
    if len(frame.windows) == 0:
        raise EmptyFrameError("frame has no subjects")
    offsets = predict_offsets(frame, params)
    last = frame.observed[:, -1, :][:, None, :]
    return nx.add(offsets, last)


def predict_absolute(frame, params: ModelParams) -> np.ndarray:
    """Forward pass mapped back to dataset units (adds the normalization offset)."""
    return forward(frame, params).data + frame.normalization_offset


# -- checkpoints -------------------------------------------------------------

_CONFIG_KEYS = [f.name for f in fields(ModelConfig)]


def _format_config_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def save_checkpoint(params: ModelParams, path) -> None:
    """Plain-text checkpoint: header, ``key = value`` config, then named tensors.

    Each tensor is written as ``tensor <name> <dims...>`` followed by its
    row-major values, one per line, in round-trip ``repr`` form.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for key, value in asdict(params.config).items():
        lines.append(f"{key} = {_format_config_value(value)}")
    for name, t in params.tensors.items():
        lines.append(f"tensor {name} " + " ".join(str(d) for d in t.shape))
        lines.extend(repr(float(v)) for v in t.data.reshape(-1))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise FormatError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    pos = 1
    raw: dict[str, str] = {}
    while pos < len(text) and not text[pos].startswith("tensor "):
        key, sep, value = text[pos].partition("=")
        if not sep:
            raise FormatError(f"{path}: line {pos + 1}: expected 'key = value'")
        raw[key.strip()] = value.strip()
        pos += 1
    missing = [k for k in _CONFIG_KEYS if k not in raw]
    if missing:
        raise FormatError(f"{path}: config field(s) missing: {', '.join(missing)}")
    config = ModelConfig(
        t_in=int(raw["t_in"]),
        t_out=int(raw["t_out"]),
        features_per_step=int(raw["features_per_step"]),
        embed_dim=int(raw["embed_dim"]),
        mlp_hidden=int(raw["mlp_hidden"]),
        conv_channels=tuple(int(v) for v in raw["conv_channels"].split(",")),
        cbam_reduction=int(raw["cbam_reduction"]),
        spatial_kernel=int(raw["spatial_kernel"]),
    )
    expected = param_shapes(config)
    tensors: dict[str, Tensor] = {}
    while pos < len(text):
        parts = text[pos].split()
        if len(parts) < 2 or parts[0] != "tensor":
            raise FormatError(f"{path}: line {pos + 1}: expected tensor header")
        name, shape = parts[1], tuple(int(d) for d in parts[2:])
        if name not in expected:
            raise ContractError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise ContractError(f"{path}: tensor {name} has shape {shape}, config requires {expected[name]}")
        size = int(np.prod(shape))
        values = np.array([float(v) for v in text[pos + 1 : pos + 1 + size]], dtype=np.float64)
        if values.size != size:
            raise FormatError(f"{path}: tensor {name} truncated")
        tensors[name] = Tensor(values.reshape(shape), tracked=True)
        pos += 1 + size
    return ModelParams(config, tensors)
