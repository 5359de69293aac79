"""Sequential network container and the CNN + Bi-LSTM builder."""

from __future__ import annotations

import numpy as np

from ..montage import GRID_COLS, GRID_ROWS
from .layers import (
    ELU,
    BatchNorm,
    BiLSTM,
    Dense,
    Dropout,
    Layer,
    TimeDistConv3x3,
    TimeDistFlatten,
    softmax,
)
from .tensor import Tensor

EMBEDDING_TAP = "bilstm"


class ModelGraph:
    """Ordered layers run as a tape: ``forward`` records, ``backward`` replays
    in reverse. Named activations listed in ``tap_names`` are kept in ``taps``
    after each forward pass."""

    def __init__(self, layers: list[tuple[str, Layer]], builder: dict | None = None,
                 tap_names=(EMBEDDING_TAP,), task: str | None = None):
        self.layers = layers
        self.builder = builder or {}
        self.tap_names = tuple(tap_names)
        self.task = task
        self.taps: dict[str, np.ndarray] = {}
        self.training = False

    # -- mode -------------------------------------------------------------
    def train(self) -> "ModelGraph":
        self.training = True
        return self

    def eval(self) -> "ModelGraph":
        self.training = False
        return self

    @property
    def mode(self) -> str:
        return "train" if self.training else "inference"

    @property
    def dtype(self):
        return self.parameters()[0][1].data.dtype

    def astype(self, dtype) -> "ModelGraph":
        for _, layer in self.layers:
            layer.astype(dtype)
        return self

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{name}.{p.name}", p) for name, layer in self.layers for p in layer.params()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{name}.{b}", v) for name, layer in self.layers for b, v in layer.buffers().items()]

    def set_buffer(self, full_name: str, value: np.ndarray) -> None:
        name, buf = full_name.split(".", 1)
        dict(self.layers)[name].set_buffer(buf, value)

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def dropout_layers(self) -> list[Dropout]:
        return [layer for _, layer in self.layers if isinstance(layer, Dropout)]

    def reseed(self, seed) -> None:
        """Reset the dropout random stream."""
        rng = np.random.default_rng(seed)
        for layer in self.dropout_layers():
            layer.rng = rng

    # -- passes -----------------------------------------------------------
    def forward(self, x: np.ndarray, training: bool | None = None, stop_at: str | None = None) -> np.ndarray:
        training = self.training if training is None else training
        self.taps = {}
        for name, layer in self.layers:
            x = layer.forward(x, training)
            if name in self.tap_names:
                self.taps[name] = x
            if name == stop_at:
                break
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __call__(self, x, training=None):
        return self.forward(x, training)

    def predict_logits(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(x[s : s + batch_size], training=False) for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return softmax(self.predict_logits(x, batch_size))

    def tap(self, x: np.ndarray, name: str = EMBEDDING_TAP, batch_size: int = 64) -> np.ndarray:
        """Inference-mode activation at ``name`` without running later layers."""
        out = [self.forward(x[s : s + batch_size], training=False, stop_at=name)
               for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def layer_shapes(self, input_shape: tuple) -> list[tuple[str, str, tuple]]:
        rows, shape = [], tuple(input_shape)
        for name, layer in self.layers:
            shape = layer.output_shape(shape)
            rows.append((name, layer.kind, shape))
        return rows

    def manifest(self) -> list[dict]:
        return [{"name": name, "kind": layer.kind, **layer.config()} for name, layer in self.layers]


TABLE1_WIDTHS = (32, 64, 128, 256)


def build_table1_model(
    time_steps: int,
    n_classes: int,
    seed: int = 0,
    widths: tuple[int, ...] = TABLE1_WIDTHS,
    dense_units: int = 1024,
    hidden: int = 128,
    dropout: float = 0.5,
    dtype=np.float32,
    task: str | None = None,
) -> ModelGraph:
    """Four conv/BN/ELU blocks, time-distributed flatten, dense/dropout/BN/ELU,
    Bi-LSTM and the classifier.

    The defaults give the full-size network (flatten width 28160, Bi-LSTM
    output 256). ``widths``, ``dense_units`` and ``hidden`` shrink it for smoke
    runs. ``time_steps`` does not influence the parameter shapes; it is kept
    so the builder records the input geometry.
    """
    if time_steps < 1:
        raise ValueError("time_steps must be >= 1")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, Layer]] = []
    cin = 1
    for k, cout in enumerate(widths, start=1):
        layers += [
            (f"conv{k}", TimeDistConv3x3(cin, cout, rng)),
            (f"bn{k}", BatchNorm(cout)),
            (f"elu{k}", ELU()),
        ]
        cin = cout
    flat = GRID_ROWS * GRID_COLS * cin
    layers += [
        ("flatten", TimeDistFlatten()),
        ("fc1", Dense(flat, dense_units, rng)),
        ("dropout", Dropout(dropout, np.random.default_rng([seed, 1]))),
        ("bn5", BatchNorm(dense_units)),
        ("elu5", ELU()),
        (EMBEDDING_TAP, BiLSTM(dense_units, hidden, rng)),
        ("fc2", Dense(2 * hidden, n_classes, rng)),
    ]
    builder = {
        "time_steps": time_steps,
        "n_classes": n_classes,
        "seed": seed,
        "widths": list(widths),
        "dense_units": dense_units,
        "hidden": hidden,
        "dropout": dropout,
        "task": task,
    }
    model = ModelGraph(layers, builder=builder, task=task)
    if np.dtype(dtype) != np.float32:
        model.astype(dtype)
    return model


def model_from_builder(builder: dict, dtype=np.float32) -> ModelGraph:
    kwargs = dict(builder)
    kwargs["widths"] = tuple(kwargs["widths"])
    return build_table1_model(dtype=dtype, **kwargs)
