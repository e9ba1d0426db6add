"""Dense and event-driven integer inference over a :class:`ModelGraph`.

Both paths compute the same int32 accumulators. The dense path touches every
input position; the event path scatters each non-zero input into the outputs
its kernel reaches, so its work is proportional to the number of events.

Integer products and sums are carried in float64 so BLAS/sparse kernels can
be used. This is exact because the graph validation bound keeps every partial
sum below 2**31, far inside float64's 2**53 integer range.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit

from .energy import EventCostModel
from .exceptions import ShapeMismatchError
from .netdef import LayerSpec, ModelGraph, conv_output_size
from .qtensor import Accumulator, QuantTensor, requantize

MODES = ("dense", "events")


@dataclass(frozen=True, eq=False)
class EventList:
    """Non-zero entries of a ``(C, H, W)`` tensor in (channel, row, col) order."""

    channels: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    source_shape: tuple[int, int, int]

    def __len__(self):
        return int(self.values.size)

    @property
    def density(self) -> float:
        size = int(np.prod(self.source_shape))
        return len(self) / size if size else 0.0

    def as_tuples(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.channels.tolist(), self.rows.tolist(), self.cols.tolist(), self.values.tolist()))


@dataclass
class LayerStats:
    layer_index: int
    kind: str
    input_events: int
    input_size: int
    input_density: float
    synaptic_ops: int
    dense_ops: int
    bias_ops: int = 0
    latency_ms: float = 0.0
    energy_mJ: float = 0.0


@dataclass
class Trace:
    """Everything one forward pass produced."""

    logit: float
    score: float
    accumulators: list[np.ndarray]
    activations: list[QuantTensor]
    stats: list[LayerStats] = field(default_factory=list)


def to_events(t: QuantTensor) -> EventList:
    values = np.asarray(t.values)
    if values.ndim != 3:
        raise ShapeMismatchError(f"expected a (C, H, W) tensor, got shape {values.shape}")
    ch, r, c = np.nonzero(values)  # C-order nonzero is lexicographic
    return EventList(ch, r, c, values[ch, r, c].astype(np.int64), tuple(values.shape))


def relu_quant(acc: Accumulator, out_scale: float, out_bits: int) -> QuantTensor:
    clipped = Accumulator(np.maximum(acc.values, 0), acc.scale)
    return requantize(clipped, out_scale, out_bits, signed=False)


def pool_activation(x: QuantTensor) -> QuantTensor:
    """Integer global average pooling: per-channel sum, then round-half-even mean."""
    sums = x.values.astype(np.int64).sum(axis=(1, 2))
    return _pool_from_sums(sums, x)


def _pool_from_sums(sums: np.ndarray, x: QuantTensor) -> QuantTensor:
    n = x.shape[1] * x.shape[2]
    mean = np.rint(sums / n).astype(np.int32)
    return QuantTensor(mean.reshape(-1, 1, 1), x.bit_width, x.signed, x.scale)


# --- dense path ------------------------------------------------------------

def _pad(x: np.ndarray, layer: LayerSpec) -> tuple[np.ndarray, int, int]:
    _, h, w = x.shape
    k, s = layer.kernel_size, layer.stride
    oh, top = conv_output_size(h, k, s, layer.same_padding)
    ow, left = conv_output_size(w, k, s, layer.same_padding)
    bottom = max((oh - 1) * s + k - h - top, 0)
    right = max((ow - 1) * s + k - w - left, 0)
    return np.pad(x, ((0, 0), (top, bottom), (left, right))), oh, ow


def _taps(xp: np.ndarray, layer: LayerSpec, oh: int, ow: int):
    k, s = layer.kernel_size, layer.stride
    for ki in range(k):
        for kj in range(k):
            yield ki, kj, xp[:, ki:ki + s * (oh - 1) + 1:s, kj:kj + s * (ow - 1) + 1:s]


def _dense_layer(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Integer accumulator (without bias) of one layer on a dense input."""
    x = x.astype(np.float64)
    if layer.kind == "conv2d":
        xp, oh, ow = _pad(x, layer)
        w = layer.weights.values.astype(np.float64)
        acc = np.zeros((layer.out_channels, oh, ow))
        for ki, kj, patch in _taps(xp, layer, oh, ow):
            acc += np.tensordot(w[:, :, ki, kj], patch, axes=(1, 0))
        return acc
    if layer.kind == "separable_conv2d":
        return _dense_pointwise(layer, _dense_depthwise(layer, x))
    if layer.kind == "linear":
        w = layer.weights.values.astype(np.float64)
        return (w @ x.reshape(-1)).reshape(-1, 1, 1)
    raise ValueError(f"no accumulator for {layer.kind}")


def _dense_depthwise(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    xp, oh, ow = _pad(x, layer)
    dw = layer.weights.values.astype(np.float64)
    acc = np.zeros((layer.in_channels, oh, ow))
    for ki, kj, patch in _taps(xp, layer, oh, ow):
        acc += dw[:, ki, kj, None, None] * patch
    return acc


def _dense_pointwise(layer: LayerSpec, inter: np.ndarray) -> np.ndarray:
    pw = layer.pointwise.values.astype(np.float64)
    return np.tensordot(pw, inter, axes=(1, 0))


# --- event path ------------------------------------------------------------

def _tap_targets(rows, cols, layer: LayerSpec, in_hw, ki, kj):
    """Output positions reached by input events through kernel tap (ki, kj)."""
    k, s = layer.kernel_size, layer.stride
    oh, top = conv_output_size(in_hw[0], k, s, layer.same_padding)
    ow, left = conv_output_size(in_hw[1], k, s, layer.same_padding)
    num_r = rows + top - ki
    num_c = cols + left - kj
    orow, rem_r = np.divmod(num_r, s)
    ocol, rem_c = np.divmod(num_c, s)
    valid = (num_r >= 0) & (num_c >= 0) & (rem_r == 0) & (rem_c == 0) & (orow < oh) & (ocol < ow)
    return valid, orow[valid] * ow + ocol[valid], oh, ow


def _event_conv(layer: LayerSpec, ev: EventList) -> tuple[np.ndarray, int]:
    c_in, h, w = ev.source_shape
    weights = layer.weights.values.astype(np.float64)
    acc = None
    ops = 0
    for ki in range(layer.kernel_size):
        for kj in range(layer.kernel_size):
            valid, pos, oh, ow = _tap_targets(ev.rows, ev.cols, layer, (h, w), ki, kj)
            if acc is None:
                acc = np.zeros((oh * ow, layer.out_channels))
            n = int(valid.sum())
            if n == 0:
                continue
            scatter = sparse.csr_matrix(
                (ev.values[valid].astype(np.float64), (pos, ev.channels[valid])),
                shape=(oh * ow, c_in),
            )
            acc += scatter @ weights[:, :, ki, kj].T
            ops += n * layer.out_channels
    return acc.T.reshape(layer.out_channels, oh, ow), ops


def _event_depthwise(layer: LayerSpec, ev: EventList) -> tuple[np.ndarray, int]:
    c_in, h, w = ev.source_shape
    dw = layer.weights.values.astype(np.float64)
    acc = None
    ops = 0
    for ki in range(layer.kernel_size):
        for kj in range(layer.kernel_size):
            valid, pos, oh, ow = _tap_targets(ev.rows, ev.cols, layer, (h, w), ki, kj)
            if acc is None:
                acc = np.zeros(c_in * oh * ow)
            ch = ev.channels[valid]
            # one input pixel feeds at most one output per tap, so targets are unique
            acc[ch * (oh * ow) + pos] += ev.values[valid] * dw[ch, ki, kj]
            ops += int(valid.sum())
    return acc.reshape(c_in, oh, ow), ops


def _event_pointwise(layer: LayerSpec, inter: np.ndarray) -> tuple[np.ndarray, int]:
    c_in, oh, ow = inter.shape
    ch, r, c = np.nonzero(inter)
    scatter = sparse.csr_matrix((inter[ch, r, c], (r * ow + c, ch)), shape=(oh * ow, c_in))
    acc = scatter @ layer.pointwise.values.astype(np.float64).T
    return acc.T.reshape(layer.out_channels, oh, ow), int(ch.size) * layer.out_channels


def _event_linear(layer: LayerSpec, ev: EventList) -> tuple[np.ndarray, int]:
    _, h, w = ev.source_shape
    flat = (ev.channels * h + ev.rows) * w + ev.cols
    weights = layer.weights.values.astype(np.float64)
    acc = weights[:, flat] @ ev.values.astype(np.float64)
    return acc.reshape(-1, 1, 1), len(ev) * layer.out_channels


def _event_layer(layer: LayerSpec, ev: EventList) -> tuple[np.ndarray, int]:
    if layer.kind == "conv2d":
        return _event_conv(layer, ev)
    if layer.kind == "separable_conv2d":
        inter, dw_ops = _event_depthwise(layer, ev)
        acc, pw_ops = _event_pointwise(layer, inter)
        return acc, dw_ops + pw_ops
    if layer.kind == "linear":
        return _event_linear(layer, ev)
    raise ValueError(f"no accumulator for {layer.kind}")


# --- op counting -----------------------------------------------------------

def fanout_map(layer: LayerSpec, in_shape: tuple[int, int, int]) -> np.ndarray:
    """Synaptic ops triggered by one event at each ``(row, col)`` of the input.

    Counted directly from the output windows, independently of the scatter
    code: every output position adds one to each input pixel its kernel
    window covers.
    """
    _, h, w = in_shape
    if layer.kind == "global_avg_pool":
        return np.ones((h, w), dtype=np.int64)
    if layer.kind == "linear":
        return np.full((h, w), layer.out_channels, dtype=np.int64)
    k, s = layer.kernel_size, layer.stride
    oh, top = conv_output_size(h, k, s, layer.same_padding)
    ow, left = conv_output_size(w, k, s, layer.same_padding)
    cover_r = np.zeros(h, dtype=np.int64)
    cover_c = np.zeros(w, dtype=np.int64)
    for o in range(oh):
        cover_r[max(o * s - top, 0):max(o * s - top + k, 0)] += 1
    for o in range(ow):
        cover_c[max(o * s - left, 0):max(o * s - left + k, 0)] += 1
    # windows are products of row and column ranges
    cover = np.outer(cover_r, cover_c)
    per_event = 1 if layer.kind == "separable_conv2d" else layer.out_channels
    return cover * per_event


def dense_synaptic_ops(graph: ModelGraph) -> list[int]:
    """Ops of each layer when every input (and separable intermediate) is non-zero."""
    ops = []
    shapes = graph.shapes()
    for layer, shape in zip(graph.layers, shapes):
        n = int(fanout_map(layer, shape).sum()) * shape[0]
        if layer.kind == "separable_conv2d":
            out = layer.output_shape(shape)
            n += out[1] * out[2] * layer.in_channels * layer.out_channels
        ops.append(n)
    return ops


# --- forward passes --------------------------------------------------------

def _check_input(graph: ModelGraph, x: QuantTensor):
    if tuple(x.shape) != tuple(graph.input_shape):
        raise ShapeMismatchError(f"input shape {tuple(x.shape)} does not match graph input {tuple(graph.input_shape)}")
    if x.signed:
        raise ShapeMismatchError("graph input must be unsigned")


def layer_accumulator(layer: LayerSpec, x: QuantTensor) -> Accumulator:
    """Dense accumulator of a single layer, bias included."""
    acc = _dense_layer(layer, x.values) + np.asarray(layer.bias, dtype=np.float64)[:, None, None]
    return Accumulator(acc.astype(np.int64), x.scale * layer.weight_scale())


def trace(graph: ModelGraph, x: QuantTensor, mode: str = "events", cost: EventCostModel | None = None) -> Trace:
    """Run the graph in ``mode`` and keep accumulators, activations and stats."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    _check_input(graph, x)
    cost = cost or EventCostModel()
    dense_ops = dense_synaptic_ops(graph)
    shapes = graph.shapes()
    accumulators, activations, stats = [], [x], []
    act = x
    logit = None
    for i, layer in enumerate(graph.layers):
        n_events = int(np.count_nonzero(act.values))
        if mode == "events":
            ev = to_events(act)
            if layer.kind == "global_avg_pool":
                sums = np.bincount(ev.channels, weights=ev.values, minlength=act.shape[0]).astype(np.int64)
                raw, ops = sums, len(ev)
            else:
                raw, ops = _event_layer(layer, ev)
        else:
            if layer.kind == "global_avg_pool":
                raw = act.values.astype(np.int64).sum(axis=(1, 2))
            else:
                raw = _dense_layer(layer, act.values)
            ops = dense_ops[i]
        if layer.kind == "global_avg_pool":
            accumulators.append(np.asarray(raw, dtype=np.int64))
            act = _pool_from_sums(raw, act)
            bias_ops = 0
        else:
            acc = Accumulator(
                (raw + np.asarray(layer.bias, dtype=np.float64)[:, None, None]).astype(np.int64),
                act.scale * layer.weight_scale(),
            )
            accumulators.append(acc.values)
            bias_ops = int(acc.values.size)
            if layer.activation == "relu_quant":
                act = relu_quant(acc, layer.out_scale, layer.out_bits)
            else:
                logit = float(acc.values.reshape(-1)[0] * acc.scale)
        if layer.activation == "relu_quant" or layer.kind == "global_avg_pool":
            activations.append(act)
        in_size = int(np.prod(shapes[i]))
        stats.append(
            LayerStats(
                layer_index=i,
                kind=layer.kind,
                input_events=n_events,
                input_size=in_size,
                input_density=n_events / in_size,
                synaptic_ops=int(ops),
                dense_ops=dense_ops[i],
                bias_ops=bias_ops,
                latency_ms=cost.latency_ms(ops),
                energy_mJ=cost.layer_energy_mJ(n_events),
            )
        )
    return Trace(logit, float(expit(logit)), accumulators, activations, stats)


def forward_dense(graph: ModelGraph, x: QuantTensor) -> tuple[float, list[QuantTensor]]:
    """Dense reference pass; returns the logit and every activation tensor."""
    t = trace(graph, x, "dense")
    return t.logit, t.activations


def forward_events(graph: ModelGraph, x: QuantTensor, cost: EventCostModel | None = None) -> tuple[float, list[LayerStats]]:
    """Event-driven pass; returns the logit and per-layer statistics."""
    t = trace(graph, x, "events", cost)
    return t.logit, t.stats


def mean_density(stats: list[LayerStats]) -> float:
    """Arithmetic mean of per-layer input densities, the input layer included."""
    return float(np.mean([s.input_density for s in stats]))


def average_stats(runs: list[list[LayerStats]]) -> list[LayerStats]:
    """Per-layer mean over a batch of runs (counts become floats)."""
    out = []
    for layer_runs in zip(*runs):
        first = layer_runs[0]
        mean = lambda name: float(np.mean([getattr(s, name) for s in layer_runs]))  # noqa: E731
        out.append(
            LayerStats(
                first.layer_index, first.kind, mean("input_events"), first.input_size,
                mean("input_density"), mean("synaptic_ops"), first.dense_ops,
                mean("bias_ops"), mean("latency_ms"), mean("energy_mJ"),
            )
        )
    return out


def layer_breakdown(stats: list[LayerStats], cost: EventCostModel | None = None) -> dict:
    """Plot-ready series: cumulative latency, per-layer energy, per-layer input density.

    When ``cost`` is given, latency and energy are recomputed from it;
    otherwise the values already in ``stats`` are used.
    """
    if cost is not None:
        latency = [cost.latency_ms(s.synaptic_ops) for s in stats]
        energy = [cost.layer_energy_mJ(s.input_events) for s in stats]
    else:
        latency = [s.latency_ms for s in stats]
        energy = [s.energy_mJ for s in stats]
    return {
        "layer": [s.layer_index for s in stats],
        "cumulative_latency_ms": np.cumsum(latency).tolist(),
        "energy_mJ": list(energy),
        "input_density": [s.input_density for s in stats],
    }


STATS_COLUMNS = ("index", "kind", "events", "density", "ops", "latency_ms", "energy_mJ")


def stats_to_rows(stats: list[LayerStats]) -> list[dict]:
    return [
        {
            "index": s.layer_index, "kind": s.kind, "events": s.input_events,
            "density": s.input_density, "ops": s.synaptic_ops,
            "latency_ms": s.latency_ms, "energy_mJ": s.energy_mJ,
        }
        for s in stats
    ]


def stats_to_csv(stats: list[LayerStats]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=STATS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(stats_to_rows(stats))
    return buf.getvalue()


def stats_to_json(stats: list[LayerStats]) -> str:
    return json.dumps([asdict(s) for s in stats], indent=2)


def recount_ops(graph: ModelGraph, activations: list[QuantTensor]) -> list[int]:
    """Debug verifier: recount synaptic ops from activations via :func:`fanout_map`.

    ``activations`` are the layer inputs in order (as returned by
    :func:`forward_dense`). Separable layers add the pointwise work from a
    fresh depthwise pass.
    """
    counts = []
    for layer, act, shape in zip(graph.layers, activations, graph.shapes()):
        nz = np.count_nonzero(act.values, axis=0)
        n = int((nz * fanout_map(layer, shape)).sum())
        if layer.kind == "separable_conv2d":
            n += int(np.count_nonzero(_dense_depthwise(layer, act.values))) * layer.out_channels
        counts.append(n)
    return counts
