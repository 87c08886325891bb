"""The three forecasting architectures, each with LSTM or GRU cells.

Every model maps an input window ``(I, C + 2)`` (C flow channels plus the
scaled weekday and timestamp) to a forecast ``(P, C)``.
"""

import dataclasses
import enum
import json
import os

import numpy as np

from trafficrnn.errors import DivergenceError, ShapeError
from trafficrnn.layers import (
    CellKind,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    MaxPool1D,
    Recurrent,
    RepeatVector,
    Reshape,
    SpatialDropout1D,
)
from trafficrnn.numeric import DTYPE

SIDE_FEATURES = 2


class Architecture(str, enum.Enum):
    CRNN = "crnn"
    ENCODER_DECODER = "encdec"
    VECTOR_OUTPUT = "vecout"


ARCH_LABELS = {
    Architecture.CRNN: "CRNN",
    Architecture.ENCODER_DECODER: "Encoder-Decoder",
    Architecture.VECTOR_OUTPUT: "Vector-Output",
}


@dataclasses.dataclass
class ModelConfig:
    architecture: Architecture
    cell: CellKind
    channels: int
    input_len: int
    pred_len: int
    filters1: int = 64
    filters2: int = 64
    kernel_size: int = 3
    pool_size: int = 2
    units: int = 128
    dense_units: int = 128
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)
        self.cell = CellKind(self.cell)
        for name in ("channels", "input_len", "pred_len", "filters1", "filters2",
                     "kernel_size", "pool_size", "units", "dense_units"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def label(self):
        return f"{ARCH_LABELS[self.architecture]}-{self.cell.name}"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["architecture"] = self.architecture.value
        d["cell"] = self.cell.value
        return d

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


def _layer_stack(cfg):
    P, C = cfg.pred_len, cfg.channels
    rec = lambda seq, name: Recurrent(cfg.cell, cfg.units, return_sequences=seq, name=name)  # noqa: E731
    if cfg.architecture is Architecture.CRNN:
        return [
            Conv1D(cfg.filters1, cfg.kernel_size, "relu", name="conv1"),
            Conv1D(cfg.filters2, cfg.kernel_size, "relu", name="conv2"),
            MaxPool1D(cfg.pool_size, name="pool"),
            Dropout(cfg.dropout, name="dropout"),
            Flatten(name="flatten"),
            RepeatVector(P, name="repeat"),
            rec(True, "recurrent1"),
            SpatialDropout1D(cfg.dropout, name="spatial_dropout1"),
            rec(True, "recurrent2"),
            SpatialDropout1D(cfg.dropout, name="spatial_dropout2"),
            Dense(cfg.dense_units, "relu", name="dense1"),
            Dense(C, "linear", name="dense2"),
        ]
    if cfg.architecture is Architecture.ENCODER_DECODER:
        return [
            rec(False, "encoder"),
            Dropout(cfg.dropout, name="dropout"),
            RepeatVector(P, name="repeat"),
            rec(True, "decoder"),
            Dense(cfg.dense_units, "relu", name="dense1"),
            Dense(C, "linear", name="dense2"),
        ]
    return [
        rec(True, "recurrent1"),
        rec(False, "recurrent2"),
        Dropout(cfg.dropout, name="dropout"),
        Dense(P * C, "linear", name="dense"),
        Reshape((P, C), name="reshape"),
    ]


class Model:
    """A sequential layer graph plus the generator that drives its dropout masks."""

    def __init__(self, cfg, layers):
        self.cfg = cfg
        self.layers = layers
        self.rng = np.random.default_rng([cfg.seed, 1])

    @property
    def input_shape(self):
        return (self.cfg.input_len, self.cfg.channels + SIDE_FEATURES)

    @property
    def output_shape(self):
        return (self.cfg.pred_len, self.cfg.channels)

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=DTYPE)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects input {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=self.rng)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("model produced non-finite predictions")
        return x[0] if single else x

    def backward(self, dy):
        dy = np.asarray(dy, dtype=DTYPE)
        if dy.ndim == 2:
            dy = dy[None]
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self):
        """Yield ``(key, param, grad, is_weight)`` for every trainable array."""
        for idx, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{idx}.{layer.name}.{name}", p, layer.grads[name], name in layer.weight_names

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def recurrent_param_count(self):
        return sum(layer.param_count() for layer in self.layers if isinstance(layer, Recurrent))

    def dense_param_count(self):
        return sum(layer.param_count() for layer in self.layers if isinstance(layer, Dense))

    def zero_(self):
        for _, p, _, _ in self.parameters():
            p[...] = 0.0

    def get_flat(self):
        return np.concatenate([p.ravel() for _, p, _, _ in self.parameters()])

    def set_flat(self, flat):
        offset = 0
        for _, p, _, _ in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise ShapeError(f"parameter vector has {flat.size} values, model needs {offset}")

    # serialization -------------------------------------------------------
    def manifest(self):
        index, offset = [], 0
        for key, p, _, is_weight in self.parameters():
            index.append({"name": key, "shape": list(p.shape), "offset": offset, "weight": is_weight})
            offset += p.size
        return {
            "format": "float64-le",
            "config": self.cfg.to_dict(),
            "n_params": offset,
            "params": index,
        }

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "model.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.get_flat().astype("<f8").tofile(os.path.join(directory, "params.bin"))


def build(cfg):
    """Wire the layer graph for ``cfg`` and initialise its parameters."""
    layers = _layer_stack(cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    shape = (cfg.input_len, cfg.channels + SIDE_FEATURES)
    for layer in layers:
        try:
            shape = layer.build(shape, rng)
        except ShapeError as exc:
            raise ShapeError(f"cannot wire layer {layer.name!r} of {cfg.label}: {exc}") from None
    if shape != (cfg.pred_len, cfg.channels):
        raise ShapeError(f"{cfg.label} produces {shape}, expected {(cfg.pred_len, cfg.channels)}")
    return Model(cfg, layers)


def load(directory):
    with open(os.path.join(directory, "model.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "float64-le":
        raise ValueError(f"unsupported model format {manifest.get('format')!r}")
    model = build(ModelConfig.from_dict(manifest["config"]))
    flat = np.fromfile(os.path.join(directory, "params.bin"), dtype="<f8").astype(DTYPE)
    model.set_flat(flat)
    return model


class PersistenceModel:
    """Forecasts the last observed row of every channel for all P steps."""

    def __init__(self, channels, input_len, pred_len):
        self.cfg = None
        self.channels = channels
        self.input_shape = (input_len, channels + SIDE_FEATURES)
        self.output_shape = (pred_len, channels)
        self.layers = []

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=DTYPE)
        P, C = self.output_shape
        last = x[..., -1:, :C]
        return np.repeat(last, P, axis=-2)

    def param_count(self):
        return 0
