"""Reference CNN: 210x210 sample matrix in, 7744 transfer features at the
flatten point, 3-way softmax head on top."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .audio_ingest import DatasetSplit, SampleMatrix, normalize_rows
from .binio import read_container, write_container
from .errors import CorruptCheckpoint, DivergenceError, EmptyDataset, ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RSCK0001"
CHECKPOINT_VERSION = 1

REFERENCE_LAYERS = (
    {"type": "conv", "filters": 16, "kernel": 11},
    {"type": "relu"},
    {"type": "pool", "window": 2},
    {"type": "conv", "filters": 16, "kernel": 9},
    {"type": "relu"},
    {"type": "pool", "window": 2},
    {"type": "conv", "filters": 16, "kernel": 3},
    {"type": "relu"},
    {"type": "pool", "window": 2},
    {"type": "flatten"},
    {"type": "dense", "units": 128},
    {"type": "relu"},
    {"type": "dense", "units": 3},
)

_FEATURE_TYPES = {"conv", "relu", "pool"}
_HEAD_TYPES = {"dense", "relu"}


@dataclass
class Architecture:
    """Ordered layer specs plus the input geometry.

    ``feature_length`` is the declared flatten width; construction fails if
    the traced geometry disagrees with it.
    """

    layers: list = field(default_factory=lambda: [dict(l) for l in REFERENCE_LAYERS])
    input_width: int = 210
    in_channels: int = 1
    feature_length: int | None = 7744

    def __post_init__(self):
        self.layers = [dict(l) for l in self.layers]
        self.trace()

    @property
    def n_classes(self) -> int:
        return self.layers[-1]["units"]

    def trace(self) -> list[tuple]:
        """Return the activation shape after every layer (input first)."""
        shape = (self.in_channels, self.input_width, self.input_width)
        shapes = [shape]
        seen_flatten = False
        for spec in self.layers:
            kind = spec.get("type")
            if kind == "flatten":
                if seen_flatten:
                    raise ShapeError("architecture has more than one flatten")
                seen_flatten = True
                shape = (int(np.prod(shape)),)
            elif not seen_flatten and kind in _FEATURE_TYPES:
                c, h, w = shape
                if kind == "conv":
                    k = spec["kernel"]
                    if k < 1 or h < k or w < k:
                        raise ShapeError(f"conv kernel {k} does not fit {h}x{w}")
                    shape = (spec["filters"], h - k + 1, w - k + 1)
                elif kind == "pool":
                    p = spec["window"]
                    if h < p or w < p:
                        raise ShapeError(f"pool window {p} does not fit {h}x{w}")
                    shape = (c, h // p, w // p)
            elif seen_flatten and kind in _HEAD_TYPES:
                if kind == "dense":
                    shape = (spec["units"],)
            else:
                raise ShapeError(f"layer {spec!r} not allowed {'after' if seen_flatten else 'before'} flatten")
            shapes.append(shape)
        if not seen_flatten:
            raise ShapeError("architecture has no flatten layer")
        if self.layers[-1].get("type") != "dense":
            raise ShapeError("architecture must end with a dense layer")
        width = self.flatten_width_from(shapes)
        if self.feature_length is not None and width != self.feature_length:
            raise ShapeError(f"traced flatten width {width} != declared feature length {self.feature_length}")
        return shapes

    def flatten_width_from(self, shapes) -> int:
        idx = next(i for i, l in enumerate(self.layers) if l["type"] == "flatten")
        return shapes[idx + 1][0]

    @property
    def flatten_width(self) -> int:
        return self.flatten_width_from(self.trace())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    float64: bool = False
    chunk_size: int = 8  # samples per forward/backward block inside a minibatch

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.chunk_size < 1:
            raise ValueError("batch_size and chunk_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    test_acc: float


@dataclass
class FeatureVector:
    values: np.ndarray
    label: int


@dataclass
class ModelCheckpoint:
    architecture: Architecture
    params: list
    seed: int
    history: list
    normalization: str = "standardize"


class _Relu:
    pass


class _Flatten:
    pass


class CNN:
    """Conv/pool feature stack followed by a dense softmax head."""

    def __init__(self, architecture: Architecture | None = None, seed: int = 0,
                 dtype=np.float32, params: list | None = None, normalization: str = "standardize"):
        self.architecture = architecture or Architecture()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.normalization = normalization
        self.history: list[EpochRecord] = []
        self.layers = self._build(np.random.default_rng(seed))
        n_feat = next(i for i, l in enumerate(self.layers) if isinstance(l, _Flatten))
        self.feature_layers = self.layers[:n_feat]
        self.head_layers = self.layers[n_feat + 1:]
        if params is not None:
            self.set_parameters(params)

    def _build(self, rng):
        shapes = self.architecture.trace()
        layers = []
        for spec, shape_in in zip(self.architecture.layers, shapes):
            kind = spec["type"]
            if kind == "conv":
                in_ch, k, out_ch = shape_in[0], spec["kernel"], spec["filters"]
                limit = np.sqrt(6.0 / (in_ch * k * k + out_ch * k * k))
                kernels = rng.uniform(-limit, limit, (out_ch, in_ch, k, k)).astype(self.dtype)
                layers.append(tc.ConvLayer(kernels, np.zeros(out_ch, self.dtype)))
            elif kind == "pool":
                layers.append(tc.PoolLayer(spec["window"]))
            elif kind == "relu":
                layers.append(_Relu())
            elif kind == "flatten":
                layers.append(_Flatten())
            elif kind == "dense":
                fan_in, fan_out = shape_in[0], spec["units"]
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, (fan_out, fan_in)).astype(self.dtype)
                layers.append(tc.DenseLayer(w, np.zeros(fan_out, self.dtype)))
        return layers

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if isinstance(layer, tc.ConvLayer):
                out += [layer.kernels, layer.bias]
            elif isinstance(layer, tc.DenseLayer):
                out += [layer.weights, layer.bias]
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        current = self.parameters()
        if len(params) != len(current):
            raise ShapeError(f"expected {len(current)} parameter tensors, got {len(params)}")
        for dst, src in zip(current, params):
            if dst.shape != tuple(src.shape):
                raise ShapeError(f"parameter shape {tuple(src.shape)} != {dst.shape}")
            dst[...] = src

    # -- forward / backward -------------------------------------------------

    def _as_batch(self, x) -> np.ndarray:
        if isinstance(x, SampleMatrix):
            x = x.data
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        w = self.architecture.input_width
        if x.shape[1:] != (self.architecture.in_channels, w, w):
            raise ShapeError(f"input {x.shape[1:]} does not match architecture input "
                             f"{(self.architecture.in_channels, w, w)}")
        return x

    def _features(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        for layer in self.feature_layers:
            if isinstance(layer, tc.ConvLayer):
                out, conv_cache = tc.conv_forward_cached(x, layer)
                if cache is not None:
                    cache.append(conv_cache)
                x = out
            elif isinstance(layer, tc.PoolLayer):
                x, mask = tc.maxpool_forward(x, layer)
                if cache is not None:
                    cache.append(mask)
            else:
                if cache is not None:
                    cache.append(x)
                x = tc.relu(x)
        if cache is not None:
            cache.append(x.shape)
        return tc.flatten(x)

    def _head(self, f: np.ndarray, cache: list | None = None) -> np.ndarray:
        for layer in self.head_layers:
            if cache is not None:
                cache.append(f)
            f = tc.dense_forward(f, layer) if isinstance(layer, tc.DenseLayer) else tc.relu(f)
        return f

    def logits(self, x, chunk: int = 16) -> np.ndarray:
        xb = self._as_batch(x)
        return np.concatenate([self._head(self._features(xb[i:i + chunk]))
                               for i in range(0, len(xb), chunk)])

    def predict_proba(self, x, chunk: int = 16) -> np.ndarray:
        return tc.softmax(self.logits(x, chunk))

    def predict(self, x, chunk: int = 16) -> np.ndarray:
        return self.logits(x, chunk).argmax(axis=1)

    def forward(self, matrix) -> np.ndarray:
        """Class probabilities for one W x W matrix."""
        return self.predict_proba(matrix)[0]

    def extract_features(self, matrix) -> FeatureVector:
        label = matrix.label if isinstance(matrix, SampleMatrix) else -1
        return FeatureVector(self._features(self._as_batch(matrix))[0], label)

    def features(self, x, chunk: int = 16) -> np.ndarray:
        xb = self._as_batch(x)
        return np.concatenate([self._features(xb[i:i + chunk]) for i in range(0, len(xb), chunk)])

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, scale_count: int | None = None):
        """Summed-over-batch softmax loss and parameter gradients.

        The logit gradient is divided by ``scale_count`` (default: batch size)
        so chunked calls can be accumulated into a batch-mean gradient.
        Returns ``(mean loss over x, logits, grads aligned with parameters())``.
        """
        x = self._as_batch(x)
        n = scale_count or len(x)
        fcache, hcache = [], []
        logits = self._head(self._features(x, fcache), hcache)
        loss, _, g = tc.softmax_cross_entropy(logits, y)
        g = g * (len(x) / n)

        grads: list[np.ndarray] = []
        for layer, inp in zip(reversed(self.head_layers), reversed(hcache)):
            if isinstance(layer, tc.DenseLayer):
                g, dw, db = tc.dense_backward(layer, inp, g)
                grads += [db, dw]
            else:
                g = tc.relu_backward(inp, g)

        g = tc.unflatten(g, fcache[-1])
        first_conv = next(i for i, l in enumerate(self.feature_layers) if isinstance(l, tc.ConvLayer))
        for i in range(len(self.feature_layers) - 1, -1, -1):
            layer, item = self.feature_layers[i], fcache[i]
            if isinstance(layer, tc.ConvLayer):
                g, dk, db = tc.conv_backward_cached(layer, item, g, input_grad=i > first_conv)
                grads += [db, dk]
            elif isinstance(layer, tc.PoolLayer):
                g = tc.maxpool_backward(item, g)
            else:
                g = tc.relu_backward(item, g)
        grads.reverse()
        return loss, logits, grads

    def checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint(copy.deepcopy(self.architecture), [p.copy() for p in self.parameters()],
                               self.seed, list(self.history), self.normalization)


def forward(model: CNN, matrix) -> np.ndarray:
    return model.forward(matrix)


def extract_features(model: CNN, matrix) -> FeatureVector:
    return model.extract_features(matrix)


def prepare_inputs(samples: np.ndarray, width: int, normalization: str = "standardize",
                   dtype=np.float32) -> np.ndarray:
    """Normalise rows of a (count, window_len) block and reshape to [count, W, W]."""
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[1] != width * width:
        raise ShapeError(f"segments of length {samples.shape[-1]} cannot form {width}x{width} matrices")
    return normalize_rows(samples, normalization).astype(dtype).reshape(len(samples), width, width)


def _stack(matrices) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([m.data for m in matrices]), np.array([m.label for m in matrices], dtype=np.int64)


def accuracy(model: CNN, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(model.predict(x) == y))


def train(model: CNN, split: DatasetSplit, cfg: TrainConfig, progress=None):
    """Minibatch SGD with momentum; returns ``(ModelCheckpoint, history)``.

    Each epoch shuffles with ``default_rng([seed, epoch])``. The recorded
    train accuracy is the running accuracy of the epoch's own forward passes
    (predictions made just before each update); test accuracy is a full
    evaluation after the epoch, NaN when the split has no test items.
    """
    if not split.train:
        raise EmptyDataset("training split is empty")
    dtype = np.float64 if cfg.float64 else np.float32
    if model.dtype != dtype:
        raise ValueError(f"model dtype {model.dtype} does not match config float width {np.dtype(dtype)}")
    x_train, y_train = _stack(split.train)
    x_train = x_train.astype(dtype)
    if split.test:
        x_test, y_test = _stack(split.test)
        x_test = x_test.astype(dtype)
    else:
        x_test, y_test = np.zeros((0,) + x_train.shape[1:], dtype), np.zeros(0, np.int64)

    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    model.seed = cfg.seed
    model.history = []
    n = len(x_train)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size), 1):
            idx = order[start:start + cfg.batch_size]
            total = None
            loss_sum = 0.0
            for c in range(0, len(idx), cfg.chunk_size):
                part = idx[c:c + cfg.chunk_size]
                loss, logits, grads = model.loss_and_grads(x_train[part], y_train[part], len(idx))
                loss_sum += loss * len(part)
                correct += int(np.sum(logits.argmax(axis=1) == y_train[part]))
                total = grads if total is None else [t + g for t, g in zip(total, grads)]
            loss = loss_sum / len(idx)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            for p, g, v in zip(params, total, velocity):
                tc.sgd_momentum_step(p, g.astype(p.dtype, copy=False), v, cfg.lr, cfg.momentum)
        rec = EpochRecord(epoch, correct / n, accuracy(model, x_test, y_test))
        model.history.append(rec)
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f", epoch, loss, rec.train_acc, rec.test_acc)
        if progress is not None:
            progress(rec)
    ckpt = model.checkpoint()
    return ckpt, list(model.history)


# -- persistence --------------------------------------------------------------

def save_checkpoint(model, path) -> None:
    ckpt = model.checkpoint() if isinstance(model, CNN) else model
    meta = {
        "architecture": ckpt.architecture.to_dict(),
        "seed": ckpt.seed,
        "normalization": ckpt.normalization,
        "history": [asdict(r) for r in ckpt.history],
    }
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, ckpt.params)


def load_checkpoint(path) -> CNN:
    _, meta, tensors = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CorruptCheckpoint)
    try:
        arch = Architecture.from_dict(meta["architecture"])
        model = CNN(arch, seed=meta["seed"], params=tensors, normalization=meta["normalization"])
    except (KeyError, TypeError) as e:
        raise CorruptCheckpoint(f"incomplete checkpoint metadata: {e}") from e
    model.history = [EpochRecord(**r) for r in meta["history"]]
    return model
