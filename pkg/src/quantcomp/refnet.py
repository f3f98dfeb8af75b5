"""Floating-point reference networks: layer kernels, bundle serialization, synthetic training.

A model lives on disk as a directory with a ``manifest.json`` and one raw
little-endian ``.bin`` blob per tensor.  In memory it is a :class:`ModelBundle`
(manifest dict + blob dict); layer views are resolved on demand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

KIND_TO_DTYPE = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("u1"),
    "u16": np.dtype("<u2"),
    "u32": np.dtype("<u4"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
DTYPE_TO_KIND = {v: k for k, v in KIND_TO_DTYPE.items()}

PARAM_OPS = ("linear", "conv2d")
ACTIVATION_OPS = ("relu", "gelu")
ALL_OPS = PARAM_OPS + ACTIVATION_OPS + ("avgpool", "flatten")


class BundleError(Exception):
    """Raised when a bundle violates its format contract."""


class ShapeError(Exception):
    """Shape/geometry mismatch; carries the offending layer index when known."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class TrainError(Exception):
    """Trainer failed to reach the accuracy floor; carries the final accuracy."""

    def __init__(self, message, accuracy):
        super().__init__(message)
        self.accuracy = accuracy


@dataclass
class LayerSpec:
    """One network layer. Weight layout is (C_out, C_in) or (C_out, C_in, k, k)."""

    op_kind: str
    in_channels: int = 0
    out_channels: int = 0
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    def validate(self, index=None):
        if self.op_kind not in ALL_OPS:
            raise ShapeError(f"unknown op_kind {self.op_kind!r}", index)
        if self.op_kind == "linear":
            if self.weight is None or self.weight.shape != (self.out_channels, self.in_channels):
                raise ShapeError("linear weight shape inconsistent with channel counts", index)
        elif self.op_kind == "conv2d":
            want = (self.out_channels, self.in_channels, self.kernel, self.kernel)
            if self.weight is None or self.weight.shape != want:
                raise ShapeError(f"conv2d weight shape {want} expected", index)
            if self.kernel < 1 or self.stride < 1 or self.pad < 0:
                raise ShapeError("bad conv2d geometry", index)
        if self.weight is not None and self.bias is not None:
            if self.bias.shape != (self.out_channels,):
                raise ShapeError("bias length must equal out_channels", index)


@dataclass
class ModelBundle:
    """Manifest + blobs; the single on-disk/in-memory model representation."""

    manifest: dict
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    def tensor(self, name):
        if name not in self.blobs:
            raise BundleError(f"manifest references missing blob {name!r}")
        return self.blobs[name]

    @property
    def layers(self):
        return [self._layer(i) for i in range(len(self.manifest["layers"]))]

    def _layer(self, i):
        entry = self.manifest["layers"][i]
        spec = LayerSpec(
            op_kind=entry["op_kind"],
            in_channels=entry.get("in_channels", 0),
            out_channels=entry.get("out_channels", 0),
            kernel=entry.get("kernel", 0),
            stride=entry.get("stride", 1),
            pad=entry.get("pad", 0),
        )
        if "weight" in entry:
            spec.weight = self.tensor(entry["weight"])
        if "bias" in entry:
            spec.bias = self.tensor(entry["bias"])
        return spec

    def param_layer_indices(self):
        return [i for i, e in enumerate(self.manifest["layers"]) if e["op_kind"] in PARAM_OPS]


# ---------------------------------------------------------------------------
# forward kernels


def gelu(x):
    """tanh-approximation gelu; the toolkit's only gelu definition."""
    x = np.asarray(x)
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def gelu_grad(x):
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * c * (1.0 + 3 * 0.044715 * x**2)


def im2col(x, kernel, stride, pad, pad_value=0.0):
    """(N, C, H, W) -> (N, P, C*k*k) patch matrix, P = H_out*W_out.

    ``pad_value`` lets the integer path pad with the zero-point code.
    """
    n, c, h, w = x.shape
    h_out = (h + 2 * pad - kernel) // stride + 1
    w_out = (w + 2 * pad - kernel) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv geometry leaves no output positions for input {x.shape}")
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), pad_value, dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    cols = np.empty((n, h_out * w_out, c * kernel * kernel), dtype=x.dtype)
    idx = 0
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[:, :, i * stride : i * stride + kernel, j * stride : j * stride + kernel]
            cols[:, idx, :] = patch.reshape(n, -1)
            idx += 1
    return cols, h_out, w_out


def layer_forward(layer: LayerSpec, x, index=None):
    """Run one layer on f32 input. conv2d goes through im2col + matrix product."""
    op = layer.op_kind
    if op == "linear":
        if x.ndim != 2 or x.shape[1] != layer.in_channels:
            raise ShapeError(f"linear expects (N, {layer.in_channels}), got {x.shape}", index)
        return x @ layer.weight.T + layer.bias
    if op == "conv2d":
        if x.ndim != 4 or x.shape[1] != layer.in_channels:
            raise ShapeError(f"conv2d expects (N, {layer.in_channels}, H, W), got {x.shape}", index)
        cols, h_out, w_out = im2col(x, layer.kernel, layer.stride, layer.pad)
        flat = cols @ layer.weight.reshape(layer.out_channels, -1).T + layer.bias
        return np.moveaxis(flat.reshape(x.shape[0], h_out, w_out, layer.out_channels), 3, 1)
    if op == "relu":
        return np.maximum(x, 0.0)
    if op == "gelu":
        return gelu(x).astype(x.dtype)
    if op == "avgpool":
        if x.ndim != 4:
            raise ShapeError(f"avgpool expects (N, C, H, W), got {x.shape}", index)
        cols, h_out, w_out = im2col(x, layer.kernel, layer.stride, 0)
        n, c = x.shape[0], x.shape[1]
        pooled = cols.reshape(n, h_out * w_out, c, layer.kernel * layer.kernel).mean(axis=3)
        return np.moveaxis(pooled.reshape(n, h_out, w_out, c), 3, 1)
    if op == "flatten":
        return x.reshape(x.shape[0], -1)
    raise ShapeError(f"unknown op_kind {op!r}", index)


def model_forward(bundle: ModelBundle, x):
    """Full deterministic forward pass; input shape checked against the manifest."""
    x = np.asarray(x, dtype=np.float32)
    want = tuple(bundle.manifest["input_shape"])
    if x.shape[1:] != want:
        raise ShapeError(f"input shape {x.shape[1:]} does not match manifest {want}")
    for i, layer in enumerate(bundle.layers):
        x = layer_forward(layer, x, index=i)
    return x


# ---------------------------------------------------------------------------
# bundle construction and serialization


def _tensor_entry(arr):
    return {"shape": list(arr.shape), "kind": DTYPE_TO_KIND[arr.dtype.newbyteorder("<")]}


def build_from_layers(layers, input_shape, name="model", metadata=None):
    """Assemble a ModelBundle from LayerSpec objects, registering blobs."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": name,
        "input_shape": list(input_shape),
        "metadata": metadata or {},
        "layers": [],
        "tensors": {},
    }
    blobs = {}
    for i, spec in enumerate(layers):
        spec.validate(i)
        entry = {"op_kind": spec.op_kind}
        if spec.op_kind in PARAM_OPS:
            entry["in_channels"] = spec.in_channels
            entry["out_channels"] = spec.out_channels
        if spec.op_kind == "conv2d" or spec.op_kind == "avgpool":
            entry["kernel"] = spec.kernel
            entry["stride"] = spec.stride
            entry["pad"] = spec.pad
        if spec.weight is not None:
            wname = f"layer{i}.weight"
            blobs[wname] = np.ascontiguousarray(spec.weight, dtype=np.float32)
            manifest["tensors"][wname] = _tensor_entry(blobs[wname])
            entry["weight"] = wname
        if spec.bias is not None:
            bname = f"layer{i}.bias"
            blobs[bname] = np.ascontiguousarray(spec.bias, dtype=np.float32)
            manifest["tensors"][bname] = _tensor_entry(blobs[bname])
            entry["bias"] = bname
        manifest["layers"].append(entry)
    bundle = ModelBundle(manifest, blobs)
    validate_bundle(bundle)
    return bundle


def build_mlp(dims, activation="relu", rng=None, weights=None):
    """Linear stack with ``activation`` between hidden layers.

    ``dims`` is (in, h1, ..., out).  Pass ``weights`` as [(W, b), ...] to pin
    parameters; otherwise they are He-initialized from ``rng``.
    """
    if rng is None and weights is None:
        rng = np.random.default_rng(0)
    layers = []
    for i in range(len(dims) - 1):
        cin, cout = dims[i], dims[i + 1]
        if weights is not None:
            w, b = weights[i]
            w = np.asarray(w, dtype=np.float32)
            b = np.asarray(b, dtype=np.float32)
        else:
            w = (rng.standard_normal((cout, cin)) * np.sqrt(2.0 / cin)).astype(np.float32)
            b = np.zeros(cout, dtype=np.float32)
        layers.append(LayerSpec("linear", cin, cout, weight=w, bias=b))
        if i < len(dims) - 2:
            layers.append(LayerSpec(activation))
    return build_from_layers(layers, (dims[0],))


def validate_bundle(bundle: ModelBundle):
    """Check blob references, byte lengths, and channel chaining."""
    m = bundle.manifest
    if m.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"unsupported format_version {m.get('format_version')!r}")
    for name, entry in m["tensors"].items():
        if name not in bundle.blobs:
            raise BundleError(f"manifest references missing blob {name!r}")
        arr = bundle.blobs[name]
        want = tuple(entry["shape"])
        if arr.shape != want:
            raise BundleError(f"blob {name!r} shape {arr.shape} != manifest {want}")
        if DTYPE_TO_KIND.get(arr.dtype.newbyteorder("<")) != entry["kind"]:
            raise BundleError(f"blob {name!r} kind mismatch")
    for name in bundle.blobs:
        if name not in m["tensors"]:
            raise BundleError(f"blob {name!r} not registered in manifest")
    # channel chaining: run a shape-only pass
    shape = tuple(m["input_shape"])
    for i, entry in enumerate(m["layers"]):
        op = entry["op_kind"]
        if op == "linear":
            if len(shape) != 1 or shape[0] != entry["in_channels"]:
                raise BundleError(f"layer {i}: linear in_channels {entry['in_channels']} does not chain from {shape}")
            shape = (entry["out_channels"],)
        elif op == "conv2d":
            if len(shape) != 3 or shape[0] != entry["in_channels"]:
                raise BundleError(f"layer {i}: conv2d in_channels does not chain from {shape}")
            k, s, p = entry["kernel"], entry["stride"], entry["pad"]
            h = (shape[1] + 2 * p - k) // s + 1
            w = (shape[2] + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise BundleError(f"layer {i}: conv2d geometry leaves no output")
            shape = (entry["out_channels"], h, w)
        elif op == "avgpool":
            k, s = entry["kernel"], entry["stride"]
            shape = (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
        elif op == "flatten":
            shape = (int(np.prod(shape)),)
    return shape


def _blob_filename(name):
    return name.replace("/", "_") + ".bin"


def save_bundle(bundle: ModelBundle, path, force=False):
    """Write manifest.json + raw little-endian blobs into a directory."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise BundleError(f"output directory {path} exists and is not empty (use force)")
    path.mkdir(parents=True, exist_ok=True)
    manifest = json.loads(json.dumps(bundle.manifest))  # detach
    for name, entry in manifest["tensors"].items():
        entry["file"] = _blob_filename(name)
        arr = bundle.blobs[name]
        data = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))
        (path / entry["file"]).write_bytes(data.tobytes())
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (path / "manifest.json").write_text(text)
    return path


def load_bundle(path) -> ModelBundle:
    """Read a bundle directory back; validates references and byte lengths."""
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise BundleError(f"no manifest.json under {path}")
    manifest = json.loads(mf.read_text())
    blobs = {}
    for name, entry in manifest.get("tensors", {}).items():
        fname = entry.get("file", _blob_filename(name))
        fpath = path / fname
        if not fpath.is_file():
            raise BundleError(f"manifest references missing blob file {fname!r}")
        dtype = KIND_TO_DTYPE[entry["kind"]]
        shape = tuple(entry["shape"])
        raw = fpath.read_bytes()
        want_bytes = int(np.prod(shape)) * dtype.itemsize
        if len(raw) != want_bytes:
            raise BundleError(f"blob {name!r}: {len(raw)} bytes on disk, manifest implies {want_bytes}")
        blobs[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        entry.pop("file", None)
    bundle = ModelBundle(manifest, blobs)
    validate_bundle(bundle)
    return bundle


def bundles_equal(a: ModelBundle, b: ModelBundle) -> bool:
    """Bit-exact equality of manifest and blobs."""
    if a.manifest != b.manifest:
        return False
    if set(a.blobs) != set(b.blobs):
        return False
    for name in a.blobs:
        x, y = a.blobs[name], b.blobs[name]
        if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# synthetic tasks and trainer


@dataclass(frozen=True)
class TaskSpec:
    """Classification task: k-class Gaussian blobs or the 2-class two-spiral set."""

    kind: str = "blobs"  # blobs | spirals
    classes: int = 10
    dim: int = 8
    train_n: int = 3000
    test_n: int = 1000
    noise: float = 1.0
    center_spread: float = 2.5
    center_offset: float = 0.0  # uncentered features stress offset errors under weight rounding
    hidden: tuple = (24, 24)
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("blobs", "spirals"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "spirals" and (self.classes != 2 or self.dim != 2):
            raise ValueError("spirals task is 2-class in 2-D")


def make_dataset(task: TaskSpec, seed: int):
    """Deterministic (X_train, y_train, X_test, y_test) for a task + seed."""
    rng = np.random.default_rng([seed, 0xDA7A])
    total = task.train_n + task.test_n
    if task.kind == "blobs":
        centers = task.center_offset + rng.standard_normal((task.classes, task.dim)) * task.center_spread
        y = rng.integers(0, task.classes, size=total)
        x = centers[y] + rng.standard_normal((total, task.dim)) * task.noise
    else:
        y = rng.integers(0, 2, size=total)
        t = rng.uniform(0.25, 3.0, size=total) * np.pi
        r = t + rng.standard_normal(total) * task.noise * 0.3
        sign = np.where(y == 0, 1.0, -1.0)
        x = np.stack([sign * r * np.cos(t), sign * r * np.sin(t)], axis=1)
    x = x.astype(np.float32)
    return (
        x[: task.train_n],
        y[: task.train_n].astype(np.int64),
        x[task.train_n :],
        y[task.train_n :].astype(np.int64),
    )


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_synthetic(
    task: TaskSpec,
    seed: int,
    epochs: int = 500,
    lr: float = 0.04,
    min_accuracy: float = 0.8,
    name=None,
) -> ModelBundle:
    """Train an MLP on the task with plain full-batch SGD; fully seed-deterministic.

    Raises TrainError (carrying the final accuracy) if the held-out accuracy
    lands below ``min_accuracy``.
    """
    x_tr, y_tr, x_te, y_te = make_dataset(task, seed)
    dims = (task.dim, *task.hidden, task.classes)
    rng = np.random.default_rng([seed, 0x1417])
    ws = [
        (rng.standard_normal((dims[i + 1], dims[i])) * np.sqrt(2.0 / dims[i])).astype(np.float64)
        for i in range(len(dims) - 1)
    ]
    bs = [np.zeros(dims[i + 1], dtype=np.float64) for i in range(len(dims) - 1)]
    act, act_grad = (
        (lambda v: np.maximum(v, 0.0), lambda v: (v > 0).astype(np.float64))
        if task.activation == "relu"
        else (gelu, gelu_grad)
    )
    xb = x_tr.astype(np.float64)
    onehot = np.eye(task.classes)[y_tr]
    n = xb.shape[0]
    for _ in range(epochs):
        # forward
        pre, post = [], [xb]
        h = xb
        for li in range(len(ws)):
            z = h @ ws[li].T + bs[li]
            pre.append(z)
            h = act(z) if li < len(ws) - 1 else z
            post.append(h)
        # backward (softmax cross-entropy)
        delta = (_softmax(post[-1]) - onehot) / n
        for li in reversed(range(len(ws))):
            gw = delta.T @ post[li]
            gb = delta.sum(axis=0)
            if li > 0:
                delta = (delta @ ws[li]) * act_grad(pre[li - 1])
            ws[li] -= lr * gw
            bs[li] -= lr * gb
    weights = [(w.astype(np.float32), b.astype(np.float32)) for w, b in zip(ws, bs)]
    bundle = build_mlp(dims, activation=task.activation, weights=weights)
    preds = model_forward(bundle, x_te).argmax(axis=1)
    acc = float((preds == y_te).mean())
    if acc < min_accuracy:
        raise TrainError(f"trainer stalled at held-out accuracy {acc:.3f} < {min_accuracy}", acc)
    bundle.manifest["name"] = name or f"{task.kind}-mlp-seed{seed}"
    bundle.manifest["metadata"] = {
        "task": asdict(task) | {"hidden": list(task.hidden)},
        "seed": seed,
        "trainer": {"epochs": epochs, "lr": lr},
        "held_out_accuracy": acc,
    }
    return bundle
