"""Model zoo: the small MNIST CNN and configurable ResNets, plus checkpoints.

Design notes that matter elsewhere in the package:

* No batch normalization anywhere. Per-example loss geometry (gradient
  differences along a direction) must not couple examples within a batch,
  and double backprop stays much simpler without running statistics.
* Forward passes run in NHWC internally; the public tensor convention is
  NCHW, converted once at the model boundary so input-gradients come back
  in NCHW as well.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Expr, ParameterSet, Tensor

CHECKPOINT_MAGIC = b"CVTR"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str                      # "mnist-cnn" | "resnet"
    input_shape: tuple[int, int, int] = (1, 28, 28)   # (C, H, W)
    num_classes: int = 10
    depth: int = 2                 # resnet: basic blocks per stage
    width: int = 1                 # resnet: channel multiplier
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("mnist-cnn", "resnet"):
            raise ModelError(f"unknown architecture {self.arch!r}")
        if self.depth < 1 or self.width < 1:
            raise ModelError("depth and width must be >= 1")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "depth": self.depth,
            "width": self.width,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            arch=d["arch"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            depth=int(d["depth"]),
            width=int(d["width"]),
            seed=int(d["seed"]),
        )


# Layer plan descriptors. A plan is an ordered list of these; Residual
# carries a nested plan for its main branch.

@dataclass(frozen=True)
class Conv:
    w: str
    b: str
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dense:
    w: str
    b: str


@dataclass(frozen=True)
class Residual:
    branch: tuple
    projection: Conv | None = None


@dataclass
class Model:
    config: ModelConfig
    params: ParameterSet
    plan: tuple

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def with_params(self, params: ParameterSet) -> "Model":
        return Model(self.config, params, self.plan)

    def forward(self, images, depth: int = 1, params=None) -> Expr:
        return forward(self, images, depth=depth, params=params)


class _Builder:
    """Accumulates parameters with deterministic He-uniform initialization."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params = ParameterSet()

    def conv(self, name: str, cin: int, cout: int, k: int = 3,
             stride: int = 1, pad: int = 0) -> Conv:
        fan_in = k * k * cin
        limit = np.sqrt(6.0 / fan_in)
        self.params.add(name + ".w",
                        self.rng.uniform(-limit, limit, (k, k, cin, cout)))
        self.params.add(name + ".b", np.zeros(cout))
        return Conv(name + ".w", name + ".b", stride, pad)

    def dense(self, name: str, nin: int, nout: int) -> Dense:
        limit = np.sqrt(6.0 / nin)
        self.params.add(name + ".w", self.rng.uniform(-limit, limit, (nin, nout)))
        self.params.add(name + ".b", np.zeros(nout))
        return Dense(name + ".w", name + ".b")


def _mnist_cnn_plan(b: _Builder, cfg: ModelConfig) -> tuple:
    c, h, w = cfg.input_shape
    if (h, w) != (28, 28):
        raise ModelError("mnist-cnn expects 28x28 inputs")
    plan = [
        b.conv("conv1", c, 16), Relu(),
        b.conv("conv2", 16, 16), Relu(),
        MaxPool(),
        b.conv("conv3", 16, 32), Relu(),
        b.conv("conv4", 32, 32), Relu(),
        MaxPool(),
        Flatten(),
        b.dense("dense1", 32 * 4 * 4, 128), Relu(),
        b.dense("dense2", 128, cfg.num_classes),
    ]
    return tuple(plan)


def _resnet_plan(b: _Builder, cfg: ModelConfig) -> tuple:
    c, h, w = cfg.input_shape
    widths = [16 * cfg.width, 32 * cfg.width, 64 * cfg.width]
    plan: list = [b.conv("stem", c, widths[0], pad=1), Relu()]
    cin = widths[0]
    for s, cout in enumerate(widths):
        for i in range(cfg.depth):
            stride = 2 if (s > 0 and i == 0) else 1
            name = f"s{s}b{i}"
            branch = (
                b.conv(name + ".c1", cin, cout, stride=stride, pad=1), Relu(),
                b.conv(name + ".c2", cout, cout, pad=1),
            )
            proj = None
            if stride != 1 or cin != cout:
                proj = b.conv(name + ".proj", cin, cout, k=1, stride=stride)
            plan.append(Residual(branch, proj))
            plan.append(Relu())
            cin = cout
    plan += [GlobalAvgPool(), b.dense("head", cin, cfg.num_classes)]
    return tuple(plan)


def build_model(config: ModelConfig) -> Model:
    """Instantiate a model with seed-deterministic initial parameters."""
    b = _Builder(config.seed)
    if config.arch == "mnist-cnn":
        plan = _mnist_cnn_plan(b, config)
    else:
        plan = _resnet_plan(b, config)
    return Model(config, b.params, plan)


def parameter_count(config: ModelConfig) -> int:
    """Number of trainable scalars, a pure function of the config."""
    return build_model(config).params.count()


def param_leaves(model: Model, depth: int = 1) -> dict[str, Expr]:
    """Differentiable leaf expressions for every parameter, by name."""
    return {n: ad.leaf(v, depth=depth) for n, v in model.params}


def forward(model: Model, images, depth: int = 1, params=None) -> Expr:
    """Logits expression for a batch of NCHW images.

    ``images`` may be an array (wrapped as a leaf of the given depth) or an
    already-created leaf Expr, in which case the caller keeps the handle
    for input-gradients. ``params`` is an optional name->Expr mapping from
    :func:`param_leaves`; without it parameters enter as constants, which
    is cheaper and the right choice for attacks and evaluation.
    """
    cfg = model.config
    if isinstance(images, Expr):
        x = images
    else:
        x = ad.leaf(images, depth=depth)
    if x.value.ndim != 4 or tuple(x.value.shape[1:]) != cfg.input_shape:
        raise ModelError(
            f"input shape {x.value.shape} incompatible with {cfg.input_shape}")

    def p(name: str) -> Expr:
        if params is not None and name in params:
            return params[name]
        return ad.constant(model.params[name])

    def run(plan, h: Expr) -> Expr:
        for step in plan:
            if isinstance(step, Conv):
                h = ad.conv2d(h, p(step.w), stride=step.stride, pad=step.pad)
                h = ad.add(h, p(step.b))
            elif isinstance(step, Relu):
                h = ad.relu(h)
            elif isinstance(step, MaxPool):
                h = ad.max_pool2(h)
            elif isinstance(step, Flatten):
                n = h.value.shape[0]
                h = ad.reshape(h, (n, int(np.prod(h.value.shape[1:]))))
            elif isinstance(step, GlobalAvgPool):
                n, hh, ww, cc = h.value.shape
                s = ad.sum_to(h, (n, 1, 1, cc))
                h = ad.reshape(ad.scale(s, 1.0 / (hh * ww)), (n, cc))
            elif isinstance(step, Dense):
                h = ad.add(ad.matmul(h, p(step.w)), p(step.b))
            elif isinstance(step, Residual):
                inner = run(step.branch, h)
                shortcut = h
                if step.projection is not None:
                    pr = step.projection
                    shortcut = ad.add(
                        ad.conv2d(h, p(pr.w), stride=pr.stride, pad=pr.pad),
                        p(pr.b))
                h = ad.add(inner, shortcut)
            else:
                raise ModelError(f"unknown plan step {step!r}")
        return h

    nhwc = ad.transpose(x, (0, 2, 3, 1))
    return run(model.plan, nhwc)


def predict(model: Model, images: Tensor, batch_size: int = 256) -> np.ndarray:
    """Predicted labels for NCHW images, batched, parameters constant."""
    out = []
    for i in range(0, images.shape[0], batch_size):
        logits = forward(model, images[i:i + batch_size], depth=0)
        out.append(np.argmax(logits.value, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "CVTR" | u32le version | u32le header length | UTF-8 JSON header
# (config, metadata, ordered tensor manifest with shapes) | raw float64 LE
# tensor data, concatenated in manifest order.
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParameterSet
    meta: dict

    def model(self) -> Model:
        m = build_model(self.config)
        if m.params.names() != self.params.names():
            raise CheckpointError("checkpoint parameter names do not match "
                                  "the architecture built from its config")
        return m.with_params(self.params)


def save_checkpoint(model: Model, meta: dict | None = None) -> bytes:
    meta = dict(meta or {})
    manifest = [{"name": n, "shape": list(v.shape)} for n, v in model.params]
    header = json.dumps(
        {"config": model.config.to_dict(), "meta": meta, "manifest": manifest},
        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for _, v in model.params:
        buf.write(v.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def load_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint (no header)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["manifest"]
        meta = header["meta"]
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e

    params = ParameterSet()
    off = 12 + hlen
    for entry in manifest:
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(data):
            raise CheckpointError("truncated checkpoint tensor data")
        arr = np.frombuffer(data[off:end], dtype="<f8").reshape(shape)
        params.add(entry["name"], arr.copy())
        off = end
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint tensor data")
    return Checkpoint(config, params, meta)
