"""Dense and convolutional classifiers over the tensor core.

Parameters live in one flat float64 vector; :class:`Architecture` knows how
to slice it into per-layer weights.  A :class:`ModelSnapshot` freezes that
vector for margin evaluation, while training works on a plain mutable copy.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatch

SNAPSHOT_FORMAT = "margintrack.snapshot"
SNAPSHOT_VERSION = 1


class BadArchitecture(ValueError):
    pass


class ClassOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str  # dense | conv | relu | maxpool | flatten
    units: int = 0  # output features (dense) or filters (conv)
    kernel: int = 3  # conv kernel side / pooling window
    padding: str = "valid"

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind in ("dense", "conv"):
            d["units"] = self.units
        if self.kind in ("conv", "maxpool"):
            d["kernel"] = self.kernel
        if self.kind == "conv":
            d["padding"] = self.padding
        return d


def dense(units):
    return Layer("dense", units=units)


def conv(filters, kernel=3, padding="valid"):
    return Layer("conv", units=filters, kernel=kernel, padding=padding)


def relu():
    return Layer("relu")


def maxpool(size=2):
    return Layer("maxpool", kernel=size)


def flatten():
    return Layer("flatten")


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple
    layers: tuple
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.param_shapes()  # validates

    def param_shapes(self):
        """Shapes of every parameter array in flat-vector order."""
        shape = self.input_shape
        out = []
        if not self.layers:
            raise BadArchitecture("architecture has no layers")
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                if len(shape) != 1:
                    raise BadArchitecture(f"layer {i}: dense needs flat input, got {shape}")
                if layer.units < 1:
                    raise BadArchitecture(f"layer {i}: dense width must be positive")
                out += [(layer.units, shape[0]), (layer.units,)]
                shape = (layer.units,)
            elif layer.kind == "conv":
                if len(shape) != 3:
                    raise BadArchitecture(f"layer {i}: conv needs (C, H, W) input, got {shape}")
                if layer.padding not in ("valid", "same"):
                    raise BadArchitecture(f"layer {i}: unknown padding {layer.padding!r}")
                c, h, w = shape
                k = layer.kernel
                if layer.padding == "valid":
                    h, w = h - k + 1, w - k + 1
                if h < 1 or w < 1 or layer.units < 1 or k < 1:
                    raise BadArchitecture(f"layer {i}: conv {layer} does not fit input {shape}")
                out += [(layer.units, c, k, k), (layer.units,)]
                shape = (layer.units, h, w)
            elif layer.kind == "maxpool":
                if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
                    raise BadArchitecture(f"layer {i}: maxpool {layer.kernel} does not fit {shape}")
                shape = (shape[0], shape[1] // layer.kernel, shape[2] // layer.kernel)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "relu":
                pass
            else:
                raise BadArchitecture(f"layer {i}: unknown kind {layer.kind!r}")
        if shape != (self.num_classes,):
            raise BadArchitecture(f"final output {shape} != ({self.num_classes},)")
        return out

    @property
    def num_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes()))

    @property
    def input_size(self):
        return int(np.prod(self.input_shape))

    def to_dict(self):
        return {"input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        layers = [Layer(**{k: v for k, v in ld.items()}) for ld in d["layers"]]
        return cls(tuple(d["input_shape"]), tuple(layers), int(d.get("num_classes", 10)))


def dense_mnist(hidden=(256, 128), num_classes=10):
    layers = []
    for h in hidden:
        layers += [dense(h), relu()]
    layers.append(dense(num_classes))
    return Architecture((784,), tuple(layers), num_classes)


def cnn_mnist(num_classes=10):
    return Architecture((1, 28, 28), (
        conv(32, 3), relu(), conv(64, 3), relu(), maxpool(2), flatten(),
        dense(128), relu(), dense(num_classes)), num_classes)


ARCHITECTURES = {"dense": dense_mnist, "cnn": cnn_mnist}


def unpack(arch, flat):
    """Split a flat parameter vector into per-layer views."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (arch.num_params,):
        raise ShapeMismatch(f"expected {arch.num_params} parameters, got {flat.shape}")
    arrays, pos = [], 0
    for s in arch.param_shapes():
        n = int(np.prod(s))
        arrays.append(flat[pos:pos + n].reshape(s))
        pos += n
    return arrays


def forward(arch, params, x):
    """Logits for a batch.  ``params`` is a list of Tensors (or arrays) from :func:`unpack`."""
    h = x
    it = iter(params)
    for layer in arch.layers:
        if layer.kind == "dense":
            w, b = next(it), next(it)
            h = T.linear(h, w, b)
        elif layer.kind == "conv":
            w, b = next(it), next(it)
            h = T.conv2d(h, w, b, padding=layer.padding)
        elif layer.kind == "relu":
            h = T.relu(h)
        elif layer.kind == "maxpool":
            h = T.maxpool2d(h, layer.kernel)
        elif layer.kind == "flatten":
            h = T.flatten(h)
    return h


def as_batch(arch, x):
    """Reshape a batch of images (N, ...) to (N, *input_shape)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or int(np.prod(x.shape[1:])) != arch.input_size:
        raise ShapeMismatch(f"batch {x.shape} does not match input shape {arch.input_shape}")
    return x.reshape((x.shape[0],) + arch.input_shape)


def _as_single(arch, x):
    x = np.asarray(x, dtype=np.float64)
    if x.size != arch.input_size:
        raise ShapeMismatch(f"image {x.shape} does not match input shape {arch.input_shape}")
    return x.reshape((1,) + arch.input_shape)


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    architecture: Architecture
    parameters: np.ndarray
    epoch: int = 0
    _digest: str = field(default="", repr=False)

    def __post_init__(self):
        p = np.array(self.parameters, dtype=np.float64, copy=True)
        if p.shape != (self.architecture.num_params,):
            raise ShapeMismatch(f"expected {self.architecture.num_params} parameters, got {p.shape}")
        if self.epoch < 0:
            raise ValueError("epoch must be >= 0")
        p.flags.writeable = False
        object.__setattr__(self, "parameters", p)
        object.__setattr__(self, "_digest", hashlib.sha256(p.tobytes()).hexdigest())

    def digest(self):
        """sha256 of the parameter bytes as of now (compare with the creation-time :attr:`created_digest`)."""
        return hashlib.sha256(self.parameters.tobytes()).hexdigest()

    @property
    def created_digest(self):
        return self._digest

    @property
    def num_classes(self):
        return self.architecture.num_classes

    def weights(self):
        return unpack(self.architecture, self.parameters)

    def logits(self, xb):
        """Logits (N, c) for a batch of inputs, no graph recorded."""
        return forward(self.architecture, self.weights(), T.Tensor(as_batch(self.architecture, xb))).data

    def decide(self, xb):
        """Decided class per row; ties go to the lowest index."""
        return np.argmax(self.logits(xb), axis=1)


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    decided_class: int


def init_model(arch: Architecture, seed: int) -> ModelSnapshot:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for s in arch.param_shapes():
        if len(s) == 1:
            parts.append(np.zeros(s))
        else:
            fan_in = int(np.prod(s[1:]))
            parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=s))
    return ModelSnapshot(arch, np.concatenate([p.ravel() for p in parts]), epoch=0)


def predict(m: ModelSnapshot, x) -> Prediction:
    z = m.logits(_as_single(m.architecture, x))[0]
    return Prediction(z, T._softmax_np(z), int(np.argmax(z)))


def _check_classes(m, classes):
    classes = [int(k) for k in classes]
    for k in classes:
        if not 0 <= k < m.num_classes:
            raise ClassOutOfRange(f"class {k} not in 0..{m.num_classes - 1}")
    return classes


def batch_scores_and_gradients(m: ModelSnapshot, xb, classes=None):
    """Logits (N, c) and input gradients (N, len(classes), *input_shape) for a batch.

    One backward pass per requested class; rows of the batch do not interact,
    so the gradient of the batch sum of logit k is the per-image gradient.
    """
    classes = range(m.num_classes) if classes is None else classes
    classes = _check_classes(m, classes)
    arch = m.architecture
    x = T.Tensor(as_batch(arch, xb), requires_grad=True)
    out = forward(arch, m.weights(), x)
    grads = np.empty((x.shape[0], len(classes)) + arch.input_shape)
    for j, k in enumerate(classes):
        (g,) = T.grad(T.tsum(T.index(out, (slice(None), k))), [x],
                      retain_graph=j < len(classes) - 1)
        grads[:, j] = g
    return out.data, grads


def class_scores_and_gradients(m: ModelSnapshot, x, classes):
    """Scores f_k(x) and gradients grad_x f_k(x) for each k in ``classes`` (single image)."""
    x = np.asarray(x, dtype=np.float64)
    logits, grads = batch_scores_and_gradients(m, _as_single(m.architecture, x), classes)
    classes = list(classes)
    return logits[0, classes], grads[0].reshape((len(classes),) + x.shape)


def loss_and_param_grads(arch, flat_params, xb, labels):
    """Mean cross-entropy over a batch and its gradient w.r.t. the flat parameter vector."""
    weights = [T.Tensor(w, requires_grad=True) for w in unpack(arch, flat_params)]
    loss = T.cross_entropy(forward(arch, weights, T.Tensor(as_batch(arch, xb))), labels)
    grads = T.grad(loss, weights)
    return float(loss.data), np.concatenate([g.ravel() for g in grads])


def input_loss_grad(arch, flat_params, xb, labels):
    """Gradient of the summed per-image cross-entropy w.r.t. each input image."""
    x = T.Tensor(as_batch(arch, xb), requires_grad=True)
    loss = T.cross_entropy(forward(arch, unpack(arch, flat_params), x), labels)
    (g,) = T.grad(loss, [x])
    return g * x.shape[0]


def sgd_step(params, grads, lr, velocity=None, momentum=0.9):
    """Classic momentum: v <- momentum * v + g;  p <- p - lr * v.  Returns (params, velocity)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if velocity is None:
        velocity = np.zeros_like(params)
    if params.shape != grads.shape or velocity.shape != params.shape:
        raise ShapeMismatch(f"params {params.shape}, grads {grads.shape}, velocity {np.shape(velocity)}")
    v = momentum * velocity + grads
    return params - lr * v, v


# ---------------------------------------------------------------------------
# serialization


def snapshot_to_json(m: ModelSnapshot) -> str:
    """JSON container; parameters are base64 of little-endian float64 bytes."""
    raw = m.parameters.astype("<f8").tobytes()
    return json.dumps({
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "epoch": m.epoch,
        "architecture": m.architecture.to_dict(),
        "num_params": m.architecture.num_params,
        "sha256": hashlib.sha256(raw).hexdigest(),
        "parameters": base64.b64encode(raw).decode("ascii"),
    }, indent=1)


def snapshot_from_json(text: str) -> ModelSnapshot:
    d = json.loads(text)
    if d.get("format") != SNAPSHOT_FORMAT or int(d.get("version", -1)) != SNAPSHOT_VERSION:
        raise ValueError(f"not a version-{SNAPSHOT_VERSION} snapshot container")
    raw = base64.b64decode(d["parameters"])
    if hashlib.sha256(raw).hexdigest() != d["sha256"]:
        raise ValueError("snapshot checksum mismatch")
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ModelSnapshot(Architecture.from_dict(d["architecture"]), params, int(d["epoch"]))


def affine_model(w, b) -> ModelSnapshot:
    """Snapshot of the affine classifier f(x) = w @ x + b, ``w`` shaped (c, n)."""
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, n = w.shape
    arch = Architecture((n,), (dense(c),), num_classes=c)
    return ModelSnapshot(arch, np.concatenate([w.ravel(), b.ravel()]))
