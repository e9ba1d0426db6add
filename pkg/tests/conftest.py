import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shipgate.netdef import LayerSpec, ModelGraph  # noqa: E402
from shipgate.qtensor import QuantTensor  # noqa: E402


def qt(values, bits=4, signed=True, scale=1.0):
    return QuantTensor(np.asarray(values), bits, signed, scale)


def random_weights(rng, shape, bits=4):
    hi = 2 ** (bits - 1) - 1
    return qt(rng.integers(-hi, hi + 1, size=shape), bits, True, float(rng.uniform(0.05, 0.5)))


def random_graph(rng, max_hidden=3):
    """Small random graph mixing every layer kind."""
    c = int(rng.integers(1, 4))
    h = int(rng.integers(3, 10))
    w = int(rng.integers(3, 10))
    in_bits = int(rng.choice([4, 8]))
    graph_layers = []
    shape = (c, h, w)
    scale = 1.0 / (2**in_bits - 1)
    for _ in range(int(rng.integers(1, max_hidden + 1))):
        kind = str(rng.choice(["conv2d", "separable_conv2d"]))
        out_c = int(rng.integers(1, 5))
        stride = int(rng.choice([1, 2]))
        same = bool(rng.random() < 0.8)
        k = 3 if kind == "separable_conv2d" else int(rng.choice([1, 3]))
        if not same and min(shape[1:]) < k:
            same = True
        if kind == "conv2d":
            layer = LayerSpec(kind, shape[0], out_c, k, stride, same,
                              weights=random_weights(rng, (out_c, shape[0], k, k)))
        else:
            layer = LayerSpec(kind, shape[0], out_c, k, stride, same,
                              weights=random_weights(rng, (shape[0], k, k)),
                              pointwise=random_weights(rng, (out_c, shape[0])))
        layer.bias = rng.integers(-20, 21, size=out_c).astype(np.int32)
        layer.out_scale = float(rng.uniform(0.02, 1.0))
        layer.out_bits = int(rng.choice([1, 2, 4]))
        graph_layers.append(layer)
        shape = layer.output_shape(shape)
    if rng.random() < 0.5:
        graph_layers.append(LayerSpec("global_avg_pool", shape[0], shape[0]))
        shape = (shape[0], 1, 1)
    features = int(np.prod(shape))
    head = LayerSpec("linear", features, 1, activation="none",
                     weights=random_weights(rng, (1, features)),
                     bias=rng.integers(-5, 6, size=1).astype(np.int32))
    graph_layers.append(head)
    return ModelGraph("random", graph_layers, (c, h, w), in_bits, scale).validate()


def random_input(rng, graph, density=None):
    c, h, w = graph.input_shape
    hi = 2**graph.input_bits - 1
    values = rng.integers(1, hi + 1, size=(c, h, w))
    if density is None:
        density = float(rng.choice([0.0, 0.1, 0.5, 1.0, rng.random()]))
    values = values * (rng.random((c, h, w)) < density)
    return qt(values, graph.input_bits, False, graph.input_scale)


def random_instance(rng):
    """Up to 10 images with up to 5 GT boxes each, jittered echoes and stray boxes."""
    n_img = int(rng.integers(1, 11))
    gt, rows = {}, []
    for i in range(n_img):
        image_id = f"im{i}"
        boxes = []
        for _ in range(int(rng.integers(0, 6))):
            x, y = rng.integers(0, 20, size=2)
            w, h = rng.integers(1, 8, size=2)
            boxes.append((int(x), int(y), int(x + w - 1), int(y + h - 1)))
        gt[image_id] = boxes
        for box in boxes:
            if rng.random() < 0.7:
                j = rng.integers(-2, 3, size=4)
                x0, y0 = max(box[0] + j[0], 0), max(box[1] + j[1], 0)
                rows.append((image_id, (int(x0), int(y0), int(max(box[2] + j[2], x0)), int(max(box[3] + j[3], y0)))))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.integers(0, 25, size=2)
            rows.append((image_id, (int(x), int(y), int(x + 3), int(y + 3))))
    # coarse confidences force ties so the tie-break order is exercised
    confs = np.round(rng.random(len(rows)), 1)
    return gt, [(float(c), i, b) for c, (i, b) in zip(confs, rows)]


@pytest.fixture
def rng():
    return np.random.default_rng(42)
