"""Desk-scale classifiers, input gradients, metrics and checkpoints."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .rng import stream

__all__ = [
    "SpecError",
    "ModelSpec",
    "ModelState",
    "Metrics",
    "init_model",
    "forward",
    "predict",
    "input_gradient",
    "batch_input_gradient",
    "loss_and_grads",
    "confusion_matrix",
    "metrics_from_confusion",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

HEAD_W, HEAD_B = "head.w", "head.b"


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "tiny_cnn"
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 3
    hidden: tuple[int, ...] = (8, 16)
    # fixed shift applied to pixels before the first layer
    input_offset: float = 0.5

    def __post_init__(self):
        if self.kind not in ("tiny_cnn", "mlp"):
            raise SpecError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (C, H, W) with positive dims, got {self.input_shape}")
        if any(h < 1 for h in self.hidden):
            raise SpecError(f"hidden sizes must be positive, got {self.hidden}")
        if self.kind == "tiny_cnn" and not self.hidden:
            raise SpecError("tiny_cnn needs at least one conv width")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        c, h, w = self.input_shape
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == "tiny_cnn":
            cin = c
            for i, f in enumerate(self.hidden, 1):
                shapes[f"conv{i}.w"] = (f, cin, 3, 3)
                shapes[f"conv{i}.b"] = (f, 1, 1)
                cin = f
                h, w = (h + 1) // 2, (w + 1) // 2
            features = cin * h * w
        else:
            features = c * h * w
            for i, f in enumerate(self.hidden, 1):
                shapes[f"fc{i}.w"] = (features, f)
                shapes[f"fc{i}.b"] = (f,)
                features = f
        shapes[HEAD_W] = (features, self.num_classes)
        shapes[HEAD_B] = (self.num_classes,)
        return shapes


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    head: tuple[str, ...] = (HEAD_W, HEAD_B)

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if k not in self.head]

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()}, self.head)

    def equals(self, other: "ModelState") -> bool:
        return (
            self.spec == other.spec
            and self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        f, c, kh, kw = shape
        return c * kh * kw, f * kh * kw
    return shape[0], shape[1]


def init_model(spec: ModelSpec, seed: int) -> ModelState:
    """Glorot-uniform weights, zero biases."""
    rng = stream(seed, "init_model")
    params = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(shape)
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return ModelState(spec, params)


def forward(graph: ad.Graph, state: ModelState, x: ad.Node, frozen=()) -> tuple[ad.Node, dict[str, ad.Node]]:
    """Build the forward pass on ``graph``; ``x`` is ``N x C x H x W``.

    Returns the ``N x K`` logits node and the parameter leaves.
    """
    p = {
        k: graph.leaf(v, name=k, requires_grad=k not in frozen) for k, v in state.params.items()
    }
    spec = state.spec
    h = x
    if spec.input_offset:
        h = ad.add(h, graph.leaf(-spec.input_offset, requires_grad=False))
    if spec.kind == "tiny_cnn":
        for i in range(1, len(spec.hidden) + 1):
            h = ad.conv2d(h, p[f"conv{i}.w"])
            h = ad.add(h, p[f"conv{i}.b"])
            h = ad.relu(h)
            h = ad.avgpool2(h)
        h = ad.flatten(h, batched=True)
    else:
        h = ad.flatten(h, batched=True)
        for i in range(1, len(spec.hidden) + 1):
            h = ad.relu(ad.add(ad.matmul(h, p[f"fc{i}.w"]), p[f"fc{i}.b"]))
    logits = ad.add(ad.matmul(h, p[HEAD_W]), p[HEAD_B])
    return logits, p


def features(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Encoder output (input to the head) for a batch."""
    g = ad.Graph()
    xb = _as_batch(state, x)
    logits, p = forward(g, state, g.leaf(xb, requires_grad=False), frozen=tuple(state.params))
    head_in = g.nodes[logits.inputs[0]].inputs[0]  # logits = add(matmul(h, W), b)
    return g.nodes[head_in].value


def _as_batch(state: ModelState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != tuple(state.spec.input_shape):
        raise ad.DimensionError(f"input shape {x.shape[1:]} does not match model {state.spec.input_shape}")
    return x


def predict(state: ModelState, x, batch_size: int = 256) -> np.ndarray:
    xb = _as_batch(state, x)
    outs = []
    for i in range(0, len(xb), batch_size):
        g = ad.Graph()
        logits, _ = forward(g, state, g.leaf(xb[i : i + batch_size], requires_grad=False), frozen=tuple(state.params))
        outs.append(logits.value)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, state.spec.num_classes))


def loss_and_grads(state: ModelState, x: np.ndarray, y: np.ndarray, frozen=()) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every trainable parameter."""
    g = ad.Graph()
    logits, p = forward(g, state, g.leaf(_as_batch(state, x), requires_grad=False), frozen)
    loss = ad.softmax_cross_entropy(logits, np.asarray(y, dtype=np.int64))
    grads = g.backward(loss)
    return float(loss.value), {k: grads[n.id] for k, n in p.items() if n.requires_grad}


def input_gradient(state: ModelState, x: np.ndarray, y: int, loss_scale: float = 1.0) -> np.ndarray:
    """d(loss_scale * CE(f(x), y)) / dx for one ``C x H x W`` image."""
    return batch_input_gradient(state, np.asarray(x)[None], np.array([y]), loss_scale)[0]


def batch_input_gradient(state: ModelState, x: np.ndarray, y: np.ndarray, loss_scale: float = 1.0) -> np.ndarray:
    """Per-example input gradients for a batch.

    Examples do not interact, so the gradient of the summed loss splits into
    the individual per-example gradients.
    """
    g = ad.Graph()
    xn = g.leaf(_as_batch(state, x))
    logits, _ = forward(g, state, xn, frozen=tuple(state.params))
    n = xn.value.shape[0]
    loss = ad.scale(ad.softmax_cross_entropy(logits, np.asarray(y, dtype=np.int64)), n * loss_scale)
    return g.backward(loss)[xn.id]


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    f1: dict[int, float] = field(default_factory=dict)
    n: int = 0

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1}


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    """Rows are true classes, columns predictions.

    Macro-F1 averages over classes that occur in the ground truth.
    """
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total == 0:
        raise ad.ContractError("evaluate: empty dataset")
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0).astype(float)
    true_pos = cm.sum(axis=1).astype(float)
    prec, rec, f1 = {}, {}, {}
    for c in range(cm.shape[0]):
        p = tp[c] / pred_pos[c] if pred_pos[c] else 0.0
        r = tp[c] / true_pos[c] if true_pos[c] else 0.0
        prec[c], rec[c] = p, r
        f1[c] = 2 * p * r / (p + r) if p + r > 0 else 0.0
    present = [c for c in range(cm.shape[0]) if true_pos[c] > 0]
    macro = float(np.mean([f1[c] for c in present]))
    return Metrics(float(tp.sum() / total), macro, prec, rec, f1, total)


def evaluate(state: ModelState, images: np.ndarray, labels: np.ndarray) -> Metrics:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ad.ContractError("evaluate: empty dataset")
    pred = predict(state, images).argmax(axis=1)
    return metrics_from_confusion(confusion_matrix(labels, pred, state.spec.num_classes))


# checkpoint layout (all little-endian):
#   b"DGAPCKPT" | u32 version | u32 header_len | header JSON (utf-8)
#   then per tensor: u16 name_len | name | u8 ndim | u32 dims... | float64 payload
_MAGIC = b"DGAPCKPT"
_VERSION = 1


def checkpoint_bytes(state: ModelState) -> bytes:
    spec = asdict(state.spec)
    header = json.dumps({"spec": spec, "head": list(state.head), "tensors": len(state.params)}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(header)))
    buf.write(header)
    for name in sorted(state.params):
        arr = np.ascontiguousarray(state.params[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path, state: ModelState) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off : off + hlen])
    off += hlen
    s = header["spec"]
    spec = ModelSpec(s["kind"], tuple(s["input_shape"]), s["num_classes"], tuple(s["hidden"]), s["input_offset"])
    params = {}
    for _ in range(header["tensors"]):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    return ModelState(spec, params, tuple(header["head"]))
