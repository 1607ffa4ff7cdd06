"""Model definitions: dense feature stack, decomposed confidence head, box head.

The final confidence/logits layer is not a plain fully connected layer:
its matrix product is split into an element-wise multiply step (exposing
the per-dimension products M) and a sum step (recovering the usual output
p), so that a distribution regularizer can grab M during training. The
split is numerically exact: p equals the matmul result to f64 rounding.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    DimensionError,
    Tensor,
    ewmul,
    matmul,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    transpose,
)

WEIGHTS_MAGIC = b"EWML"
WEIGHTS_VERSION = 1


class ConfigError(ValueError):
    """Bad model or experiment configuration."""


class FormatError(ValueError):
    """A weight/dataset container is corrupt or structurally incompatible."""


def ewm_forward(f, weights):
    """Decomposed final layer: element-wise multiply, then sum.

    f: (batch, nd), weights: (nd, no). Returns (M, p) where
    M[b, o, d] = f[b, d] * weights[d, o] and p[b, o] = sum_d M[b, o, d].
    Gradients flow through both outputs.
    """
    if f.data.ndim != 2 or weights.data.ndim != 2 or f.data.shape[1] != weights.data.shape[0]:
        raise DimensionError(
            f"ewm_forward: incompatible shapes {f.data.shape} and {weights.data.shape}"
        )
    b, nd = f.data.shape
    no = weights.data.shape[1]
    m = ewmul(reshape(f, (b, 1, nd)), reshape(transpose(weights), (1, no, nd)))
    p = reduce_sum(m, axis=2)
    return m, p


def fc_equivalence_check(f_data, c_data):
    """Max abs difference between the decomposed head and plain matmul.

    Runs both graph constructions on the same (f, C), backpropagates
    sum(p) through each, and returns the largest discrepancy across the
    outputs and the gradients w.r.t. f and C.
    """
    f1 = Tensor(f_data, requires_grad=True)
    c1 = Tensor(c_data, requires_grad=True)
    _, p1 = ewm_forward(f1, c1)
    reduce_sum(p1).backward()

    f2 = Tensor(f_data, requires_grad=True)
    c2 = Tensor(c_data, requires_grad=True)
    p2 = matmul(f2, c2)
    reduce_sum(p2).backward()

    return max(
        float(np.max(np.abs(p1.data - p2.data), initial=0.0)),
        float(np.max(np.abs(f1.grad - f2.grad), initial=0.0)),
        float(np.max(np.abs(c1.grad - c2.grad), initial=0.0)),
    )


class DenseLayer:
    """Plain fully connected layer, W: (in, out) with optional bias."""

    def __init__(self, in_dim, out_dim, bias=True, requires_grad=True):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"dense layer dims must be positive, got {in_dim}x{out_dim}")
        self.w = Tensor(np.zeros((in_dim, out_dim)), requires_grad=requires_grad)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=requires_grad) if bias else None

    def forward(self, x):
        y = matmul(x, self.w)
        if self.bias is not None:
            y = y + self.bias
        return y


class EwmHead:
    """Final layer held as raw weights C: (nd, no), no bias, decomposed forward."""

    def __init__(self, feature_dim, out_dim, requires_grad=True):
        if feature_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"head dims must be positive, got {feature_dim}x{out_dim}")
        self.weights = Tensor(np.zeros((feature_dim, out_dim)), requires_grad=requires_grad)

    def forward(self, f):
        return ewm_forward(f, self.weights)


@dataclass
class ForwardPass:
    """Activations from one model forward that later stages consume."""

    features: Tensor  # (n, nd) last feature vector
    ewm: Tensor  # (n, no, nd) element-wise multiply activations
    logits: Tensor  # (n, no) pre-squash outputs
    conf: Tensor | None = None  # (n, 1) sigmoid confidence (detector)
    box: Tensor | None = None  # (n, 4) sigmoid box in window coords (detector)


class Model:
    """Feature extractor plus heads; kind is 'detector' or 'classifier'."""

    def __init__(self, arch, requires_grad=True):
        kind = arch["kind"]
        if kind not in ("detector", "classifier"):
            raise ConfigError(f"unknown model kind {kind!r}")
        widths = [arch["input_dim"], *arch["hidden"], arch["feature_dim"]]
        if any(w <= 0 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        self.arch = dict(arch)
        self.kind = kind
        self.feature_layers = [
            DenseLayer(widths[i], widths[i + 1], requires_grad=requires_grad)
            for i in range(len(widths) - 1)
        ]
        n_out = 1 if kind == "detector" else arch["n_classes"]
        self.conf_head = EwmHead(arch["feature_dim"], n_out, requires_grad=requires_grad)
        self.box_head = (
            DenseLayer(arch["feature_dim"], 4, requires_grad=requires_grad)
            if kind == "detector"
            else None
        )

    @property
    def feature_dim(self):
        return self.arch["feature_dim"]

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.feature_layers):
            out.append((f"feature.{i}.w", layer.w))
            out.append((f"feature.{i}.b", layer.bias))
        out.append(("conf.C", self.conf_head.weights))
        if self.box_head is not None:
            out.append(("box.w", self.box_head.w))
            out.append(("box.b", self.box_head.bias))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def features(self, x):
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.feature_layers:
            h = relu(layer.forward(h))
        return h

    def forward(self, x):
        f = self.features(x)
        m, p = self.conf_head.forward(f)
        if self.kind == "detector":
            return ForwardPass(
                features=f,
                ewm=m,
                logits=p,
                conf=sigmoid(p),
                box=sigmoid(self.box_head.forward(f)),
            )
        return ForwardPass(features=f, ewm=m, logits=p)


def build_detector(window_size=8, hidden=(32,), feature_dim=16):
    """Window detector: flattened window -> (4 box coords, 1 confidence)."""
    if window_size <= 0:
        raise ConfigError(f"window_size must be positive, got {window_size}")
    arch = {
        "kind": "detector",
        "input_dim": window_size * window_size,
        "hidden": list(hidden),
        "feature_dim": feature_dim,
        "window_size": window_size,
    }
    return Model(arch)


def build_classifier(input_dim, n_classes, hidden=(16,), feature_dim=8):
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    arch = {
        "kind": "classifier",
        "input_dim": input_dim,
        "hidden": list(hidden),
        "feature_dim": feature_dim,
        "n_classes": n_classes,
    }
    return Model(arch)


def init_weights(model, seed, scheme="uniform-scaled"):
    """Deterministic init: weights uniform in [-s, s], s = sqrt(6/(fan_in+fan_out))."""
    if scheme != "uniform-scaled":
        raise ConfigError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if p is None:
            continue
        if p.data.ndim == 2:
            fan_in, fan_out = p.data.shape
            s = np.sqrt(6.0 / (fan_in + fan_out))
            p.data = rng.uniform(-s, s, size=p.data.shape)
        else:
            p.data = np.zeros_like(p.data)


@dataclass
class ModelWeights:
    """Immutable snapshot of every parameter plus the architecture descriptor."""

    arch: dict
    tensors: dict = field(default_factory=dict)  # name -> ndarray, insertion-ordered

    @classmethod
    def from_model(cls, model):
        tensors = {name: p.data.copy() for name, p in model.named_parameters() if p is not None}
        return cls(arch=dict(model.arch), tensors=tensors)

    def build_model(self, requires_grad=True):
        model = Model(self.arch, requires_grad=requires_grad)
        self.apply_to(model)
        return model

    def apply_to(self, model):
        if model.arch != self.arch:
            raise FormatError(
                f"architecture mismatch: weights carry {self.arch}, model is {model.arch}"
            )
        for name, p in model.named_parameters():
            if p is None:
                continue
            if name not in self.tensors:
                raise FormatError(f"missing tensor {name!r} in weights")
            if self.tensors[name].shape != p.data.shape:
                raise FormatError(
                    f"tensor {name!r} shape {self.tensors[name].shape} != {p.data.shape}"
                )
            p.data = self.tensors[name].copy()

    def to_bytes(self):
        payload = b"".join(t.astype("<f8").tobytes() for t in self.tensors.values())
        header = json.dumps(
            {
                "arch": self.arch,
                "tensors": [{"name": n, "shape": list(t.shape)} for n, t in self.tensors.items()],
                "crc32": zlib.crc32(payload),
            },
            sort_keys=True,
        ).encode("utf-8")
        return struct.pack("<4sII", WEIGHTS_MAGIC, WEIGHTS_VERSION, len(header)) + header + payload

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < 12:
            raise FormatError("weight container too short")
        magic, version, hlen = struct.unpack("<4sII", blob[:12])
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weight file version {version}")
        if len(blob) < 12 + hlen:
            raise FormatError("truncated header")
        try:
            header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable header: {e}")
        payload = blob[12 + hlen :]
        expected = sum(int(np.prod(spec["shape"])) * 8 for spec in header["tensors"])
        if len(payload) != expected:
            raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
        if zlib.crc32(payload) != header["crc32"]:
            raise FormatError("payload checksum mismatch")
        tensors = {}
        offset = 0
        for spec in header["tensors"]:
            n = int(np.prod(spec["shape"]))
            arr = np.frombuffer(payload[offset : offset + n * 8], dtype="<f8")
            tensors[spec["name"]] = arr.astype(np.float64).reshape(spec["shape"])
            offset += n * 8
        return cls(arch=header["arch"], tensors=tensors)


def save_weights(model_or_weights, path):
    weights = (
        model_or_weights
        if isinstance(model_or_weights, ModelWeights)
        else ModelWeights.from_model(model_or_weights)
    )
    with open(path, "wb") as fh:
        fh.write(weights.to_bytes())
    return weights


def load_weights(path):
    with open(path, "rb") as fh:
        return ModelWeights.from_bytes(fh.read())
