from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from fedsim.rngkit import RngStream

Shape = tuple[int, ...]
Layout = tuple[tuple[str, Shape], ...]


class ModelKind(str, enum.Enum):
    MLP = "mlp"
    SMALL_CNN = "small_cnn"
    WIDE_PAYLOAD = "wide_payload"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_shape: Shape
    n_classes: int
    dropout_rate: float = 0.0
    payload_width: int = 1
    hidden: int = 128

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.payload_width < 1:
            raise ValueError(f"payload_width must be >= 1, got {self.payload_width}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be positive [C, H, W], got {list(self.input_shape)}")
        if self.kind is ModelKind.SMALL_CNN and min(self.input_shape[1:]) < 4:
            raise ValueError("small_cnn needs H, W >= 4 for two 2x2 pools")

    @property
    def in_features(self) -> int:
        return math.prod(self.input_shape)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "dropout_rate": self.dropout_rate,
            "payload_width": self.payload_width,
            "hidden": self.hidden,
        }


def _cnn_feature_count(spec: ModelSpec) -> int:
    _, h, w = spec.input_shape
    return 32 * ((h // 2) // 2) * ((w // 2) // 2)


def layer_table(spec: ModelSpec) -> list[tuple[str, Shape, int | None]]:
    """``(name, shape, fan_in)`` in definition order; ``fan_in`` is None for biases.

    Dense weights are stored ``[in, out]``; conv weights ``[out, in, kh, kw]``.
    """
    c = spec.input_shape[0]
    if spec.kind is ModelKind.SMALL_CNN:
        flat = _cnn_feature_count(spec)
        return [
            ("conv1.weight", (16, c, 3, 3), c * 9),
            ("conv1.bias", (16,), None),
            ("conv2.weight", (32, 16, 3, 3), 16 * 9),
            ("conv2.bias", (32,), None),
            ("fc.weight", (flat, spec.n_classes), flat),
            ("fc.bias", (spec.n_classes,), None),
        ]
    table = [
        ("fc1.weight", (spec.in_features, spec.hidden), spec.in_features),
        ("fc1.bias", (spec.hidden,), None),
        ("fc2.weight", (spec.hidden, spec.n_classes), spec.hidden),
        ("fc2.bias", (spec.n_classes,), None),
    ]
    if spec.kind is ModelKind.WIDE_PAYLOAD:
        # Inert: never read by forward, so its gradient is always zero.
        table += [
            ("payload.weight", (spec.hidden, spec.payload_width), spec.hidden),
            ("payload.bias", (spec.payload_width,), None),
        ]
    return table


def model_layout(spec: ModelSpec) -> Layout:
    return tuple((name, shape) for name, shape, _ in layer_table(spec))


@dataclass(eq=False)
class ModelParams:
    """Flat parameter vector plus the ``(name, shape)`` layout that slices it."""

    layout: Layout
    values: np.ndarray
    _offsets: dict[str, tuple[int, int, Shape]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        if self.values.ndim != 1:
            raise ValueError("values must be a flat vector")
        offsets = {}
        pos = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            offsets[name] = (pos, pos + size, shape)
            pos += size
        if pos != self.values.shape[0]:
            raise ValueError(f"layout holds {pos} elements but values has {self.values.shape[0]}")
        self._offsets = offsets

    @classmethod
    def zeros(cls, layout: Layout, dtype=np.float32) -> ModelParams:
        size = sum(math.prod(s) for _, s in layout)
        return cls(layout, np.zeros(size, dtype=dtype))

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, shape = self._offsets[name]
        return self.values[lo:hi].reshape(shape)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def copy(self, dtype=None) -> ModelParams:
        values = self.values.astype(dtype or self.values.dtype, copy=True)
        return ModelParams(self.layout, values)

    def readonly(self) -> ModelParams:
        """A view that shares memory but refuses writes."""
        view = self.values.view()
        view.flags.writeable = False
        return ModelParams(self.layout, view)

    def same_bits(self, other: ModelParams) -> bool:
        return (
            self.layout == other.layout
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )


def init_params(spec: ModelSpec, stream: RngStream) -> ModelParams:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases.

    Uniforms are drawn tensor by tensor in layout order.
    """
    table = layer_table(spec)
    params = ModelParams.zeros(tuple((n, s) for n, s, _ in table))
    for name, shape, fan_in in table:
        if fan_in is None:
            continue
        bound = math.sqrt(6.0 / fan_in)
        u = stream.uniforms(math.prod(shape))
        params[name][...] = ((2.0 * u - 1.0) * bound).reshape(shape)
    return params
