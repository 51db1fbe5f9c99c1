"""The three valuation architectures and their checkpoint format.

All models predict in transformed target space (z-scored log price); the
caller inverse-transforms to USD. The hedonic baseline is a closed-form
ridge solve, the other two are trained with the tensor_core layers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .data import FeatureSchema
from .errors import ConfigError, DataError, DimensionError, NumericalError

MODEL_KINDS = ("linreg", "mlp", "fusion")
CHECKPOINT_MAGIC = b"HEDON1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str
    tabular_dim: int
    image_size: int = 64
    conv_channels: tuple = (16, 32, 64, 64)
    tabular_hidden: tuple = (64, 32)
    head_hidden: tuple = (64,)
    ridge_lambda: float = 1e-8

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind '{self.kind}' (expected one of {MODEL_KINDS})")
        if self.tabular_dim < 1:
            raise ConfigError(f"tabular_dim must be >= 1, got {self.tabular_dim}")
        if self.kind == "fusion":
            factor = 2 ** len(self.conv_channels)
            if self.image_size % factor != 0:
                raise ConfigError(
                    f"fusion image_size {self.image_size} must be divisible by {factor} "
                    f"({len(self.conv_channels)} pooling stages)")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["tabular_hidden"] = list(self.tabular_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("conv_channels", "tabular_hidden", "head_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# hedonic linear baseline
# ---------------------------------------------------------------------------

def linreg_fit(x: np.ndarray, y: np.ndarray, ridge_lambda: float = 0.0) -> np.ndarray:
    """Solve (X'X + lambda*I) w = X'y with an appended, unpenalized intercept.

    Exact linear-system solve in float64; returns float32 weights of length
    d+1 with the intercept last.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"linreg_fit: X {x.shape} vs y {y.shape}")
    n, d = x.shape
    xd = np.concatenate([x, np.ones((n, 1))], axis=1)
    gram = xd.T @ xd
    if ridge_lambda > 0:
        penalty = np.eye(d + 1) * ridge_lambda
        penalty[d, d] = 0.0  # intercept unpenalized
        gram = gram + penalty
    try:
        w = np.linalg.solve(gram, xd.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "linreg_fit: singular normal equations; set ridge_lambda > 0") from exc
    if not np.all(np.isfinite(w)):
        raise NumericalError(
            "linreg_fit: non-finite solution; set ridge_lambda > 0")
    return w.astype(np.float32)


def linreg_predict(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """X @ w plus intercept; returns shape (n,)."""
    weights = np.asarray(weights)
    if x.ndim != 2 or x.shape[1] != weights.shape[0] - 1:
        raise DimensionError(
            f"linreg_predict: X {x.shape} incompatible with {weights.shape[0] - 1} weights")
    return x.astype(np.float64) @ weights[:-1].astype(np.float64) + float(weights[-1])


class LinearRegressionModel:
    kind = "linreg"

    def __init__(self, config: ModelConfig, schema: FeatureSchema | None = None):
        self.config = config
        self.schema = schema
        self.weights = np.zeros(config.tabular_dim + 1, dtype=np.float32)

    def fit(self, x, y):
        self.weights = linreg_fit(x, y, self.config.ridge_lambda)
        return self

    def forward(self, tabular, image=None):
        return linreg_predict(self.weights, tabular).astype(np.float32).reshape(-1, 1)

    def parameters(self):
        return [self.weights]

    def load_parameters(self, params):
        (w,) = params
        if w.shape != self.weights.shape:
            raise DataError(f"linreg: expected {self.weights.shape} weights, got {w.shape}")
        self.weights = w.astype(np.float32)

    @property
    def n_params(self):
        return self.weights.size


# ---------------------------------------------------------------------------
# neural models
# ---------------------------------------------------------------------------

def _dense_chain(rng, sizes):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = tc.glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out)
        b = np.zeros(fan_out, dtype=tc.DTYPE)
        layers.append(tc.Dense(w, b))
    return layers


class MLPModel:
    """Tabular-only network: dense/relu stack ending in one output unit."""

    kind = "mlp"

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 schema: FeatureSchema | None = None):
        self.config = config
        self.schema = schema
        sizes = [config.tabular_dim, *config.tabular_hidden, 1]
        self.denses = _dense_chain(rng, sizes)
        self.relus = [tc.ReLU() for _ in self.denses[:-1]]

    def forward(self, tabular, image=None):
        h = tabular
        for dense, relu in zip(self.denses[:-1], self.relus):
            h = relu.forward(dense.forward(h))
        return self.denses[-1].forward(h)

    def backward(self, dout):
        grads_rev = []
        g = self.denses[-1].backward(dout)
        grads_rev.append(g.param_grads)
        dh = g.input_grad
        for dense, relu in zip(reversed(self.denses[:-1]), reversed(self.relus)):
            dh = relu.backward(dh).input_grad
            g = dense.backward(dh)
            grads_rev.append(g.param_grads)
            dh = g.input_grad
        grads = []
        for pg in reversed(grads_rev):
            grads.extend(pg)
        return grads

    def parameters(self):
        return [p for layer in self.denses for p in layer.params]

    def load_parameters(self, params):
        own = self.parameters()
        if len(params) != len(own):
            raise DataError(f"mlp: expected {len(own)} parameter arrays, got {len(params)}")
        for dst, src in zip(own, params):
            if dst.shape != src.shape:
                raise DataError(f"mlp: parameter shape {src.shape}, expected {dst.shape}")
            dst[...] = src

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters())


class FusionModel:
    """One-stage joint network over an image branch and a tabular branch.

    Image branch: repeated conv3x3/relu/maxpool stages, then global average
    pooling. Tabular branch: dense/relu stack. The two embeddings are
    concatenated and regressed by a dense head.
    """

    kind = "fusion"

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 schema: FeatureSchema | None = None):
        config.validate()
        self.config = config
        self.schema = schema
        self.convs, self.conv_relus, self.pools = [], [], []
        cin = 3
        for cout in config.conv_channels:
            k = tc.glorot_uniform(rng, (cout, cin, 3, 3), cin * 9, cout * 9)
            self.convs.append(tc.Conv2d(k, np.zeros(cout, dtype=tc.DTYPE)))
            self.conv_relus.append(tc.ReLU())
            self.pools.append(tc.MaxPool2d())
            cin = cout
        self.gap = tc.GlobalAvgPool()
        tab_sizes = [config.tabular_dim, *config.tabular_hidden]
        self.tab_denses = _dense_chain(rng, tab_sizes)
        self.tab_relus = [tc.ReLU() for _ in self.tab_denses]
        self._img_dim = config.conv_channels[-1]
        self._tab_dim = config.tabular_hidden[-1]
        head_sizes = [self._img_dim + self._tab_dim, *config.head_hidden, 1]
        self.head_denses = _dense_chain(rng, head_sizes)
        self.head_relus = [tc.ReLU() for _ in self.head_denses[:-1]]

    def forward(self, tabular, image):
        # layers run channels-last; the public contract stays (n, 3, s, s)
        h = np.ascontiguousarray(image.transpose(0, 2, 3, 1))
        for conv, relu, pool in zip(self.convs, self.conv_relus, self.pools):
            h = pool.forward(relu.forward(conv.forward(h)))
        img_feat = self.gap.forward(h)
        t = tabular
        for dense, relu in zip(self.tab_denses, self.tab_relus):
            t = relu.forward(dense.forward(t))
        z = np.concatenate([img_feat, t], axis=1)
        for dense, relu in zip(self.head_denses[:-1], self.head_relus):
            z = relu.forward(dense.forward(z))
        return self.head_denses[-1].forward(z)

    def backward(self, dout):
        head_grads_rev = []
        g = self.head_denses[-1].backward(dout)
        head_grads_rev.append(g.param_grads)
        dz = g.input_grad
        for dense, relu in zip(reversed(self.head_denses[:-1]), reversed(self.head_relus)):
            dz = relu.backward(dz).input_grad
            g = dense.backward(dz)
            head_grads_rev.append(g.param_grads)
            dz = g.input_grad
        dimg = dz[:, :self._img_dim]
        dtab = dz[:, self._img_dim:]

        tab_grads_rev = []
        dh = dtab
        for dense, relu in zip(reversed(self.tab_denses), reversed(self.tab_relus)):
            dh = relu.backward(dh).input_grad
            g = dense.backward(dh)
            tab_grads_rev.append(g.param_grads)
            dh = g.input_grad

        conv_grads_rev = []
        dimg = self.gap.backward(dimg).input_grad
        n_stages = len(self.convs)
        for si, (conv, relu, pool) in enumerate(zip(reversed(self.convs),
                                                    reversed(self.conv_relus),
                                                    reversed(self.pools))):
            dimg = pool.backward(dimg).input_grad
            dimg = relu.backward(dimg).input_grad
            g = conv.backward(dimg, need_input_grad=si < n_stages - 1)
            conv_grads_rev.append(g.param_grads)
            dimg = g.input_grad

        grads = []
        for pg in reversed(conv_grads_rev):
            grads.extend(pg)
        for pg in reversed(tab_grads_rev):
            grads.extend(pg)
        for pg in reversed(head_grads_rev):
            grads.extend(pg)
        return grads

    def parameters(self):
        params = []
        for conv in self.convs:
            params.extend(conv.params)
        for dense in self.tab_denses:
            params.extend(dense.params)
        for dense in self.head_denses:
            params.extend(dense.params)
        return params

    def load_parameters(self, params):
        own = self.parameters()
        if len(params) != len(own):
            raise DataError(f"fusion: expected {len(own)} parameter arrays, got {len(params)}")
        for dst, src in zip(own, params):
            if dst.shape != src.shape:
                raise DataError(f"fusion: parameter shape {src.shape}, expected {dst.shape}")
            dst[...] = src

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters())


def build_model(config: ModelConfig, seed: int, schema: FeatureSchema | None = None):
    """Construct a model with deterministic initialization from the seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    if config.kind == "linreg":
        return LinearRegressionModel(config, schema)
    if config.kind == "mlp":
        return MLPModel(config, rng, schema)
    return FusionModel(config, rng, schema)


def predict(model, tabular: np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
    """Batch prediction in transformed target space, shape (batch, 1).

    An image batch is required for fusion and rejected for the other kinds.
    """
    if model.kind == "fusion":
        if image is None:
            raise ValueError("fusion model requires an image batch")
        if image.ndim != 4 or image.shape[0] != tabular.shape[0]:
            raise DimensionError(
                f"predict: image batch {image.shape} vs tabular batch {tabular.shape}")
        s = model.config.image_size
        if image.shape[1:] != (3, s, s):
            raise DimensionError(f"predict: image shape {image.shape[1:]}, expected (3, {s}, {s})")
        return model.forward(tabular, image)
    if image is not None:
        raise ValueError(f"{model.kind} model does not take images")
    if tabular.ndim != 2 or tabular.shape[1] != model.config.tabular_dim:
        raise DimensionError(
            f"predict: tabular {tabular.shape}, expected (*, {model.config.tabular_dim})")
    return model.forward(tabular)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    """Write magic, version, JSON header (config + schema), then parameters.

    Each parameter array is stored as a little-endian u32 element count
    followed by little-endian float32 values, in declaration order.
    """
    header = {
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict() if model.schema is not None else None,
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            arr = np.ascontiguousarray(p, dtype="<f4")
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint and rebuild the model it describes."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, blob_len = struct.unpack_from("<II", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[off:off + blob_len].decode("utf-8"))
    off += blob_len
    config = ModelConfig.from_dict(header["config"])
    schema = FeatureSchema.from_dict(header["schema"]) if header["schema"] else None
    model = build_model(config, seed=0, schema=schema)
    params = []
    for expect in model.parameters():
        if off + 4 > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        if count != expect.size:
            raise DataError(
                f"{path}: parameter count {count} does not match config layout ({expect.size})")
        end = off + 4 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw[off:end], dtype="<f4").reshape(expect.shape)
        params.append(arr.astype(np.float32))
        off += 4 * count
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes after parameters")
    model.load_parameters(params)
    return model
