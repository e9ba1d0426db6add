"""Gating network definition, validation and the ``.aknw`` weight container.

The container layout (little-endian)::

    b"AKNW" | version:u16 | header_len:u32 | header (UTF-8 JSON) |
    payload | crc32:u32

The payload holds, for every layer in order, each weight tensor as one signed
byte per value, followed by the bias as int32 values. The CRC covers every
byte that precedes it.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import (
    ChecksumMismatchError,
    GraphValidationError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .qtensor import ACC_LIMIT, QuantTensor, qrange

MAGIC = b"AKNW"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")

KINDS = ("conv2d", "separable_conv2d", "linear", "global_avg_pool")
ACTIVATIONS = ("relu_quant", "none")

# Separable blocks of MobileNet-v1 at width multiplier 0.5: (filters, stride).
AKIDANET05_BLOCKS = (
    (32, 1), (64, 2), (64, 1), (128, 2), (128, 1), (256, 2),
    (256, 1), (256, 1), (256, 1), (256, 1), (256, 1),
    (512, 2), (512, 1),
)
AKIDANET05_STEM_FILTERS = 16
_LOGIT_PEAK = 4.0


def conv_output_size(size: int, kernel: int, stride: int, same: bool) -> tuple[int, int]:
    """Return ``(out_size, pad_before)`` with TensorFlow-style padding."""
    if same:
        out = -(-size // stride)
        pad_total = max((out - 1) * stride + kernel - size, 0)
        return out, pad_total // 2
    return (size - kernel) // stride + 1, 0


@dataclass(eq=False)
class LayerSpec:
    """One layer of the gating network.

    ``weights`` is ``(out, in, k, k)`` for conv2d, ``(channels, k, k)`` for the
    depthwise half of a separable layer (whose ``(out, in)`` pointwise half
    lives in ``pointwise``) and ``(out, in_features)`` for linear. ``bias``
    is int32 in accumulator units, one entry per output channel.
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    stride: int = 1
    same_padding: bool = True
    activation: str = "relu_quant"
    out_bits: int = 4
    weights: QuantTensor | None = None
    pointwise: QuantTensor | None = None
    bias: np.ndarray | None = None
    out_scale: float = 1.0

    def weight_tensors(self) -> list[QuantTensor]:
        return [w for w in (self.weights, self.pointwise) if w is not None]

    def weight_scale(self) -> float:
        scale = 1.0
        for w in self.weight_tensors():
            scale *= w.scale
        return scale

    def parameter_count(self) -> int:
        n = sum(w.size for w in self.weight_tensors())
        return n + (0 if self.bias is None else int(np.asarray(self.bias).size))

    def expected_weight_shapes(self, in_features: int | None = None) -> list[tuple[int, ...]]:
        k = self.kernel_size
        if self.kind == "conv2d":
            return [(self.out_channels, self.in_channels, k, k)]
        if self.kind == "separable_conv2d":
            return [(self.in_channels, k, k), (self.out_channels, self.in_channels)]
        if self.kind == "linear":
            return [(self.out_channels, in_features if in_features is not None else self.in_channels)]
        return []

    def output_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        _, h, w = in_shape
        if self.kind in ("conv2d", "separable_conv2d"):
            oh, _ = conv_output_size(h, self.kernel_size, self.stride, self.same_padding)
            ow, _ = conv_output_size(w, self.kernel_size, self.stride, self.same_padding)
            return (self.out_channels, oh, ow)
        if self.kind == "global_avg_pool":
            return (in_shape[0], 1, 1)
        return (self.out_channels, 1, 1)


@dataclass(eq=False)
class ModelGraph:
    name: str
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int] = (3, 256, 256)
    input_bits: int = 8
    input_scale: float = 1.0 / 255.0
    metadata: dict = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)

    def shapes(self) -> list[tuple[int, int, int]]:
        """Input shape of every layer followed by the output shape of the last."""
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def input_scales(self) -> list[float]:
        scales = [self.input_scale]
        for layer in self.layers:
            scales.append(scales[-1] if layer.kind == "global_avg_pool" else layer.out_scale)
        return scales

    def input_bit_widths(self) -> list[int]:
        bits = [self.input_bits]
        for layer in self.layers:
            bits.append(bits[-1] if layer.kind == "global_avg_pool" else layer.out_bits)
        return bits

    def validate(self) -> "ModelGraph":
        """Check shape chaining, the binary head and the int32 accumulator bound."""
        if not self.layers:
            raise GraphValidationError("graph has no layers")
        shape = tuple(self.input_shape)
        in_bits = self.input_bits
        for i, layer in enumerate(self.layers):
            if layer.kind not in KINDS:
                raise GraphValidationError(f"unknown layer kind {layer.kind!r}", i)
            if layer.activation not in ACTIVATIONS:
                raise GraphValidationError(f"unknown activation {layer.activation!r}", i)
            if layer.kind != "linear" and layer.in_channels != shape[0]:
                raise GraphValidationError(
                    f"expects {layer.in_channels} input channels, receives {shape[0]}", i
                )
            if layer.kind in ("conv2d", "separable_conv2d"):
                if layer.kernel_size not in (1, 3) or layer.stride not in (1, 2):
                    raise GraphValidationError("kernel must be 1 or 3 and stride 1 or 2", i)
                if layer.kind == "separable_conv2d" and layer.kernel_size != 3:
                    raise GraphValidationError("separable layers use a 3x3 depthwise kernel", i)
                if layer.output_shape(shape)[1] < 1 or layer.output_shape(shape)[2] < 1:
                    raise GraphValidationError("spatial output collapses to zero", i)
            in_features = int(np.prod(shape))
            if layer.kind == "linear" and layer.in_channels != in_features:
                raise GraphValidationError(
                    f"expects {layer.in_channels} input features, receives {in_features}", i
                )
            tensors = layer.weight_tensors()
            expected = layer.expected_weight_shapes(in_features)
            if [t.shape for t in tensors] != expected:
                raise GraphValidationError(
                    f"weight shapes {[t.shape for t in tensors]} do not match {expected}", i
                )
            if any(not t.signed for t in tensors):
                raise GraphValidationError("weights must be signed", i)
            if layer.kind != "global_avg_pool":
                bias = np.asarray(layer.bias) if layer.bias is not None else None
                if bias is None or bias.shape != (layer.out_channels,):
                    raise GraphValidationError(f"bias must have shape ({layer.out_channels},)", i)
                if not (math.isfinite(layer.out_scale) and layer.out_scale > 0):
                    raise GraphValidationError("out_scale must be positive", i)
                qrange(layer.out_bits, False)
                bound = accumulator_bound(layer, in_bits, in_features)
                if bound >= ACC_LIMIT:
                    raise GraphValidationError(
                        f"accumulator bound {bound} overflows int32", i
                    )
                if layer.activation == "none" and i != len(self.layers) - 1:
                    raise GraphValidationError("only the last layer may skip activation", i)
            shape = layer.output_shape(shape)
            if layer.kind != "global_avg_pool":
                in_bits = layer.out_bits
        last = self.layers[-1]
        if last.kind != "linear" or last.out_channels != 1 or last.activation != "none":
            raise GraphValidationError(
                "last layer must be a linear head with one logit and no activation",
                len(self.layers) - 1,
            )
        return self


def accumulator_bound(layer: LayerSpec, in_bits: int, in_features: int) -> int:
    """Worst-case ``|acc|`` from fan-in, activation range and weight range."""
    x_max = qrange(in_bits, False)[1]
    bias_max = int(np.abs(np.asarray(layer.bias, dtype=np.int64)).max()) if layer.bias is not None and np.size(layer.bias) else 0
    w = layer.weights
    if layer.kind == "conv2d":
        return layer.kernel_size**2 * layer.in_channels * x_max * w.qmax + bias_max
    if layer.kind == "separable_conv2d":
        depthwise = layer.kernel_size**2 * x_max * w.qmax
        return layer.in_channels * depthwise * layer.pointwise.qmax + bias_max
    if layer.kind == "linear":
        return in_features * x_max * w.qmax + bias_max
    return 0


def _zero_weights(shape, bits):
    return QuantTensor(np.zeros(shape, dtype=np.int32), bits, True, 1.0)


def build_akidanet05(input_size: int = 256, weight_bits: int = 4, stem_weight_bits: int = 8) -> ModelGraph:
    """AkidaNet-0.5 layout with zero weights.

    A 3x3 stride-2 stem, thirteen separable blocks on the MobileNet-v1 filter
    schedule at width 0.5, global average pooling and a one-logit linear head.
    Use :func:`synth_weights` or :func:`load_model` to get usable weights.
    """
    layers = [
        LayerSpec(
            "conv2d", 3, AKIDANET05_STEM_FILTERS, kernel_size=3, stride=2,
            weights=_zero_weights((AKIDANET05_STEM_FILTERS, 3, 3, 3), stem_weight_bits),
            bias=np.zeros(AKIDANET05_STEM_FILTERS, dtype=np.int32),
        )
    ]
    channels = AKIDANET05_STEM_FILTERS
    for filters, stride in AKIDANET05_BLOCKS:
        layers.append(
            LayerSpec(
                "separable_conv2d", channels, filters, kernel_size=3, stride=stride,
                weights=_zero_weights((channels, 3, 3), weight_bits),
                pointwise=_zero_weights((filters, channels), weight_bits),
                bias=np.zeros(filters, dtype=np.int32),
            )
        )
        channels = filters
    layers.append(LayerSpec("global_avg_pool", channels, channels))
    layers.append(
        LayerSpec(
            "linear", channels, 1, activation="none",
            weights=_zero_weights((1, channels), weight_bits),
            bias=np.zeros(1, dtype=np.int32),
        )
    )
    graph = ModelGraph(
        "akidanet-0.5",
        layers,
        input_shape=(3, input_size, input_size),
        metadata={"weight_bits": weight_bits, "stem_weight_bits": stem_weight_bits, "activation_bits": 4},
    )
    graph.metadata["parameter_count"] = graph.parameter_count
    return graph.validate()


def _calibration_images(rng, n: int, shape: tuple[int, int, int], bits: int) -> np.ndarray:
    """Smooth scene-like images: flat per-channel level, a gentle ramp, sensor noise, one bright patch."""
    c, h, w = shape
    top = 2**bits - 1
    rows = np.linspace(-1.0, 1.0, h)[:, None]
    cols = np.linspace(-1.0, 1.0, w)[None, :]
    out = np.empty((n, c, h, w), dtype=np.int64)
    for i in range(n):
        level = rng.uniform(0.05, 0.6, size=(c, 1, 1)) * top
        ramp = rng.uniform(-0.1, 0.1, size=(c, 2, 1, 1)) * top
        img = level + ramp[:, 0] * rows + ramp[:, 1] * cols + rng.normal(0, 0.02 * top, size=(c, h, w))
        ph, pw = (int(rng.integers(max(h // 32, 1), max(h // 6, 2))), int(rng.integers(max(w // 32, 1), max(w // 6, 2))))
        r, q = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
        img[:, r:r + ph, q:q + pw] = rng.uniform(0.7, 1.0) * top
        out[i] = np.clip(np.rint(img), 0, top)
    return out


def synth_weights(template: ModelGraph, seed: int, sparsity_bias: float = 0.0, calibration_images: int = 4) -> ModelGraph:
    """Fill ``template`` with deterministic pseudo-random quantized weights.

    Weights are uniform over each tensor's signed range. Weight scales are
    calibrated layer by layer on seeded smooth scene-like images so hidden
    activations span ``[0, 1]`` in real units and the logit stays within a
    few units. Each biased layer gets a negative offset of
    ``sparsity_bias * depth_fraction * std(acc)``, which makes ReLU outputs
    sparser the deeper the layer.
    """
    from .event_engine import layer_accumulator, pool_activation, relu_quant

    if sparsity_bias < 0:
        raise ValueError("sparsity_bias must be non-negative")
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    c, h, w = template.input_shape
    if calibration_images < 1:
        raise ValueError("calibration_images must be at least 1")
    images = _calibration_images(rng, calibration_images, (c, h, w), template.input_bits)
    acts = [QuantTensor(img, template.input_bits, False, template.input_scale) for img in images]
    n_biased = sum(layer.kind != "global_avg_pool" for layer in template.layers)
    depth = 0
    layers = []
    for layer in template.layers:
        if layer.kind == "global_avg_pool":
            layers.append(replace(layer))
            acts = [pool_activation(a) for a in acts]
            continue
        depth += 1
        new = [
            QuantTensor(rng.integers(t.qmin, t.qmax + 1, size=t.shape), t.bit_width, True, 1.0)
            for t in layer.weight_tensors()
        ]
        spec = replace(
            layer,
            weights=new[0],
            pointwise=new[1] if len(new) > 1 else None,
            bias=np.zeros(layer.out_channels, dtype=np.int32),
        )
        accs = [layer_accumulator(spec, a).values for a in acts]
        per_channel = np.stack(accs).astype(np.float64).transpose(1, 0, 2, 3).reshape(layer.out_channels, -1)
        offset = sparsity_bias * (depth / n_biased) * per_channel.std(axis=1)
        spec.bias = (-np.rint(offset)).astype(np.int32)
        shifted = per_channel + spec.bias[:, None]
        if spec.activation == "none":
            peak = float(np.abs(shifted).max()) or 1.0
            target = _LOGIT_PEAK
        else:
            positive = shifted[shifted > 0]
            peak = max(float(np.percentile(positive, 99)), 1.0) if positive.size else 1.0
            target = 1.0
        # choose the last weight scale so the calibrated peak maps to `target`
        last = spec.weight_tensors()[-1]
        other = spec.weight_scale() / last.scale
        scaled = QuantTensor(last.values, last.bit_width, True, target / (peak * acts[0].scale * other))
        if spec.pointwise is not None:
            spec.pointwise = scaled
        else:
            spec.weights = scaled
        layers.append(spec)
        if spec.activation == "none":
            break
        spec.out_scale = 1.0 / qrange(spec.out_bits, False)[1]
        acts = [relu_quant(layer_accumulator(spec, a), spec.out_scale, spec.out_bits) for a in acts]
    metadata = dict(template.metadata)
    metadata.update({"seed": int(seed), "sparsity_bias": float(sparsity_bias), "synthetic": True})
    graph = ModelGraph(
        template.name, layers, tuple(template.input_shape), template.input_bits,
        template.input_scale, metadata,
    )
    graph.metadata["parameter_count"] = graph.parameter_count
    return graph.validate()


# --- container -------------------------------------------------------------

def _tensor_header(t: QuantTensor) -> dict:
    return {"shape": list(t.shape), "bit_width": t.bit_width, "signed": t.signed, "scale": t.scale}


def _header(graph: ModelGraph) -> dict:
    layers = []
    for layer in graph.layers:
        entry = {
            "kind": layer.kind,
            "in_channels": layer.in_channels,
            "out_channels": layer.out_channels,
            "kernel_size": layer.kernel_size,
            "stride": layer.stride,
            "same_padding": layer.same_padding,
            "activation": layer.activation,
            "out_bits": layer.out_bits,
            "out_scale": layer.out_scale,
            "tensors": [_tensor_header(t) for t in layer.weight_tensors()],
            "bias_len": 0 if layer.bias is None else int(np.asarray(layer.bias).size),
        }
        layers.append(entry)
    return {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "input_bits": graph.input_bits,
        "input_scale": graph.input_scale,
        "metadata": graph.metadata,
        "layers": layers,
    }


def dumps_model(graph: ModelGraph) -> bytes:
    header = json.dumps(_header(graph), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for layer in graph.layers:
        for t in layer.weight_tensors():
            parts.append(t.values.astype("<i1").tobytes())
        if layer.bias is not None:
            parts.append(np.asarray(layer.bias).astype("<i4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_model(data: bytes) -> ModelGraph:
    if len(data) < _PREAMBLE.size or data[:4] != MAGIC:
        raise MalformedHeaderError("missing AKNW magic bytes")
    _, version, header_len = _PREAMBLE.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    start = _PREAMBLE.size
    if len(data) < start + header_len:
        raise TruncatedPayloadError("file ends inside the header")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
        specs = header["layers"]
        sizes = [
            sum(int(np.prod(t["shape"])) for t in spec["tensors"]) + 4 * spec["bias_len"]
            for spec in specs
        ]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unreadable header: {exc}") from None
    offset = start + header_len
    expected = offset + sum(sizes) + 4
    if len(data) < expected:
        raise TruncatedPayloadError(f"expected {expected} bytes, file has {len(data)}")
    if len(data) > expected:
        raise MalformedHeaderError(f"{len(data) - expected} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if crc != zlib.crc32(data[:expected - 4]):
        raise ChecksumMismatchError("CRC32 does not match payload")

    layers = []
    for spec in specs:
        tensors = []
        for t in spec["tensors"]:
            n = int(np.prod(t["shape"]))
            values = np.frombuffer(data, dtype="<i1", count=n, offset=offset).reshape(t["shape"])
            offset += n
            tensors.append(QuantTensor(values, t["bit_width"], t["signed"], t["scale"]))
        bias = None
        if spec["bias_len"]:
            bias = np.frombuffer(data, dtype="<i4", count=spec["bias_len"], offset=offset).astype(np.int32)
            offset += 4 * spec["bias_len"]
        layers.append(
            LayerSpec(
                spec["kind"], spec["in_channels"], spec["out_channels"],
                kernel_size=spec["kernel_size"], stride=spec["stride"],
                same_padding=spec["same_padding"], activation=spec["activation"],
                out_bits=spec["out_bits"],
                weights=tensors[0] if tensors else None,
                pointwise=tensors[1] if len(tensors) > 1 else None,
                bias=bias, out_scale=spec["out_scale"],
            )
        )
    graph = ModelGraph(
        header["name"], layers, tuple(header["input_shape"]), header["input_bits"],
        header["input_scale"], header["metadata"],
    )
    return graph.validate()


def save_model(graph: ModelGraph, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_model(graph))
    return path


def load_model(path) -> ModelGraph:
    return loads_model(Path(path).read_bytes())


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Field-by-field comparison of two graphs, including every weight value."""
    if (a.name, tuple(a.input_shape), a.input_bits, a.input_scale, a.metadata) != (
        b.name, tuple(b.input_shape), b.input_bits, b.input_scale, b.metadata
    ):
        return False
    if len(a.layers) != len(b.layers):
        return False
    for x, y in zip(a.layers, b.layers):
        plain = ("kind", "in_channels", "out_channels", "kernel_size", "stride",
                 "same_padding", "activation", "out_bits", "out_scale")
        if any(getattr(x, f) != getattr(y, f) for f in plain):
            return False
        tx, ty = x.weight_tensors(), y.weight_tensors()
        if len(tx) != len(ty) or not all(p.equals(q) for p, q in zip(tx, ty)):
            return False
        if (x.bias is None) != (y.bias is None):
            return False
        if x.bias is not None and not np.array_equal(x.bias, y.bias):
            return False
    return True


def describe(graph: ModelGraph) -> dict:
    """Summary used by ``shipgate model --inspect``."""
    rows = []
    shapes = graph.shapes()
    for i, layer in enumerate(graph.layers):
        rows.append({
            "index": i,
            "kind": layer.kind,
            "input_shape": list(shapes[i]),
            "output_shape": list(shapes[i + 1]),
            "stride": layer.stride,
            "parameters": layer.parameter_count(),
            "weight_bits": [t.bit_width for t in layer.weight_tensors()],
            "out_bits": layer.out_bits,
        })
    return {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "input_bits": graph.input_bits,
        "parameter_count": graph.parameter_count,
        "metadata": graph.metadata,
        "layers": rows,
    }
