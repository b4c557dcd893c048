"""Network descriptions, builders, training loop and checkpoints.

A :class:`NetworkSpec` is a plain list of layer descriptors plus the input
shape; :class:`Network` instantiates parameters for it. The two-element
softmax head is class 0 = normal, class 1 = broken.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractViolation, DimensionError, TrainingDegeneracyError
from .optim import make_optimizer

CHECKPOINT_VERSION = 1


# ------------------------------------------------------------------ layers


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv:
    filters: int
    padding: str = "same"


@dataclass(frozen=True)
class Pool:
    kind: str = "max"


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Activation:
    kind: str


_LAYER_TYPES = {cls.__name__.lower(): cls for cls in (Dense, Conv, Pool, Flatten, BatchNorm, Dropout, Activation)}


def layer_to_dict(layer):
    return {"type": type(layer).__name__.lower(), **asdict(layer)}


def layer_from_dict(d):
    d = dict(d)
    cls = _LAYER_TYPES[d.pop("type")]
    return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates the chain

    def shapes(self):
        """Output shape (without batch axis) after every layer."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(layer, shape, i)
            out.append(shape)
        if len(self.layers) < 2 or self.layers[-2] != Dense(2) or self.layers[-1] != Activation("softmax"):
            raise ContractViolation("a network must end in Dense(2) followed by softmax")
        return out

    def flatten_width(self):
        for layer, shape in zip(self.layers, self.shapes()):
            if isinstance(layer, Flatten):
                return shape[0]
        return None

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": [layer_to_dict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(l) for l in d["layers"]), d.get("name", ""))


def _layer_output_shape(layer, shape, i):
    where = f"layer {i} ({type(layer).__name__})"
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise DimensionError(f"{where} needs a flat input, got {shape}")
        if layer.units <= 0:
            raise ContractViolation(f"{where}: units must be positive")
        return (layer.units,)
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise DimensionError(f"{where} needs (C, H, W), got {shape}")
        if layer.padding == "same":
            return (layer.filters, shape[1], shape[2])
        if layer.padding == "valid":
            if shape[1] < 3 or shape[2] < 3:
                raise DimensionError(f"{where}: {shape} smaller than the 3x3 kernel")
            return (layer.filters, shape[1] - 2, shape[2] - 2)
        raise ContractViolation(f"{where}: unknown padding {layer.padding!r}")
    if isinstance(layer, Pool):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise DimensionError(f"{where} cannot pool {shape}")
        if layer.kind not in ("max", "average"):
            raise ContractViolation(f"{where}: unknown pooling {layer.kind!r}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, BatchNorm):
        if len(shape) != 1:
            raise DimensionError(f"{where} supports flat inputs only, got {shape}")
        return shape
    if isinstance(layer, Dropout):
        if not 0 <= layer.rate < 1:
            raise ContractViolation(f"{where}: rate {layer.rate} outside [0, 1)")
        return shape
    if isinstance(layer, Activation):
        if layer.kind not in ("relu", "softmax"):
            raise ContractViolation(f"{where}: unknown activation {layer.kind!r}")
        return shape
    raise ContractViolation(f"{where}: unsupported layer")


# ---------------------------------------------------------------- builders

FCN_INPUT_WIDTH = 4
NCM_SHAPE = (1, 20, 20)
CNN_VARIANTS = ("cnn1", "cnn2", "cnn3", "cnn4")


def build_fcn(hidden_sizes=(64, 64, 32, 16), dropout_rate=0.2):
    """Four [dense -> batchnorm -> dropout -> relu] blocks and a softmax head."""
    hidden_sizes = tuple(hidden_sizes)
    if len(hidden_sizes) != 4:
        raise ContractViolation(f"the FCN has exactly four hidden blocks, got {len(hidden_sizes)} sizes")
    if any(int(s) != s or s <= 0 for s in hidden_sizes):
        raise ContractViolation(f"hidden sizes must be positive integers, got {hidden_sizes}")
    layers = []
    for units in hidden_sizes:
        layers += [Dense(int(units)), BatchNorm(), Dropout(dropout_rate), Activation("relu")]
    layers += [Dense(2), Activation("softmax")]
    return NetworkSpec((FCN_INPUT_WIDTH,), tuple(layers), name="fcn")


def build_cnn(variant="cnn2", dropout_rate=0.3):
    relu = Activation("relu")
    head = [Flatten(), Dense(64), relu, Dense(2), Activation("softmax")]
    if variant == "cnn1":
        body = [Conv(6), relu, Pool("average"), Conv(16), relu, Pool("average")]
    elif variant == "cnn2":
        body = [Conv(16), relu, Conv(16), relu, Pool("max"), Conv(32), relu, Conv(32), relu, Pool("max")]
    elif variant == "cnn4":
        body = [Conv(16, "valid"), relu, Pool("max"), Conv(32, "valid"), relu, Pool("max")]
    elif variant == "cnn3":
        drop = Dropout(dropout_rate)
        body = [Conv(16, "valid"), relu, Pool("max"), drop, Conv(32, "valid"), relu, Pool("max"), drop]
        head = [Flatten(), Dense(64), relu, drop, Dense(2), Activation("softmax")]
    else:
        raise ContractViolation(f"unknown CNN variant {variant!r}; expected one of {CNN_VARIANTS}")
    return NetworkSpec(NCM_SHAPE, tuple(body + head), name=variant)


# ----------------------------------------------------------------- network


class Network:
    """Parameters and running statistics for a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, rng):
        self.spec = spec
        self.layer_params = []
        self.bn_states = {}
        shape = spec.input_shape
        for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
            params = ()
            if isinstance(layer, Dense):
                w = T.glorot_uniform((shape[0], layer.units), rng)
                params = (T.Tensor(w, True), T.Tensor(np.zeros(layer.units), True))
            elif isinstance(layer, Conv):
                k = T.glorot_uniform((layer.filters, shape[0], 3, 3), rng)
                params = (T.Tensor(k, True), T.Tensor(np.zeros(layer.filters), True))
            elif isinstance(layer, BatchNorm):
                params = (T.Tensor(np.ones(shape[0]), True), T.Tensor(np.zeros(shape[0]), True))
                self.bn_states[i] = T.BatchNormState.fresh(shape[0])
            self.layer_params.append(params)
            shape = out_shape

    @property
    def params(self):
        return [p for ps in self.layer_params for p in ps]

    def forward(self, x, mode="infer", rng=None, logits=False):
        """Run the network on a batch; ``logits=True`` stops before the final softmax."""
        h = T.as_tensor(x)
        if h.shape[1:] != self.spec.input_shape:
            raise DimensionError(f"input batch {h.shape} does not match network input {self.spec.input_shape}")
        if len(self.spec.input_shape) == 3:
            h = T.transpose(h, (0, 2, 3, 1))  # feature maps stay channels-last until flatten
        last = len(self.spec.layers) - 1
        for i, layer in enumerate(self.spec.layers):
            params = self.layer_params[i]
            if isinstance(layer, Dense):
                h = T.bias_add(T.matmul(h, params[0]), params[1])
            elif isinstance(layer, Conv):
                h = T.bias_add(T.conv2d_nhwc(h, params[0], layer.padding), params[1])
            elif isinstance(layer, Pool):
                h = T.pool2d_nhwc(h, layer.kind)
            elif isinstance(layer, Flatten):
                h = T.flatten(h)
            elif isinstance(layer, BatchNorm):
                h = T.batchnorm(h, params[0], params[1], self.bn_states[i], mode)
            elif isinstance(layer, Dropout):
                h = T.dropout(h, layer.rate, mode, rng)
            elif layer.kind == "relu":
                h = T.relu(h)
            elif i == last and logits:
                return h
            else:
                h = T.softmax(h)
        return h

    def get_state(self):
        return (
            [tuple(p.data.copy() for p in ps) for ps in self.layer_params],
            {i: (s.running_mean.copy(), s.running_var.copy()) for i, s in self.bn_states.items()},
        )

    def set_state(self, state):
        params, bn = state
        for ps, values in zip(self.layer_params, params):
            for p, v in zip(ps, values):
                p.data = v.copy()
        for i, (mean, var) in bn.items():
            self.bn_states[i].running_mean = mean.copy()
            self.bn_states[i].running_var = var.copy()


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractViolation("batch size must be at least 2")
        if self.patience < 1:
            raise ContractViolation("patience must be at least 1")
        if self.max_epochs < 0:
            raise ContractViolation("max_epochs must be non-negative")


@dataclass
class TrainedModel:
    spec: NetworkSpec
    network: Network
    config: TrainConfig
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    normalizer: object = None
    fold: int | None = None

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x if self.normalizer is None else self.normalizer.transform(x)


def predict_proba(model: TrainedModel, x, chunk=1024):
    """Probability of class broken. A single sample gives a float, a batch an array."""
    x = np.asarray(x, dtype=np.float64)
    shape = model.spec.input_shape
    single = x.shape == shape
    if single:
        x = x[None]
    if x.shape[1:] != shape:
        raise DimensionError(f"input {x.shape} does not match network input {shape}")
    x = model.transform(x)
    out = np.empty(len(x))
    for start in range(0, len(x), chunk):
        out[start:start + chunk] = model.network.forward(x[start:start + chunk], "infer").data[:, 1]
    return float(out[0]) if single else out


def f_score(pred, y):
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def _batches(order, size):
    batches = [order[i:i + size] for i in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def train(spec: NetworkSpec, train_data, tune_data, cfg: TrainConfig, normalizer=None, fold=None):
    """Fit ``spec`` on ``train_data`` = (X, y), selecting the epoch with the best tune F-score.

    Ties on F-score go to the lower tune loss, then the earlier epoch.
    """
    x_train, y_train = (np.asarray(a) for a in train_data)
    x_tune, y_tune = (np.asarray(a) for a in tune_data)
    if len(x_train) == 0 or len(x_tune) == 0:
        raise ContractViolation("train and tune sets must be non-empty")
    if len(x_train) != len(y_train) or len(x_tune) != len(y_tune):
        raise DimensionError("features and labels differ in length")
    if len(np.unique(y_train)) < 2:
        raise TrainingDegeneracyError(f"training labels hold a single class ({int(y_train[0])})")
    rng = np.random.default_rng(cfg.seed)
    net = Network(spec, rng)
    model = TrainedModel(spec, net, cfg, normalizer=normalizer, fold=fold)
    xt = model.transform(x_train)
    y_train = y_train.astype(np.intp)
    y_tune = y_tune.astype(np.intp)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    params = net.params

    best = None
    since_best = 0
    for epoch in range(cfg.max_epochs):
        total = 0.0
        for idx in _batches(rng.permutation(len(xt)), cfg.batch_size):
            for p in params:
                p.grad = None
            with T.GradTape() as tape:
                logits = net.forward(xt[idx], "train", rng, logits=True)
                loss = T.softmax_cross_entropy(logits, y_train[idx])
            tape.backward(loss)
            opt.step(params)
            total += float(loss.data) * len(idx)
        p_tune = predict_proba(model, x_tune)
        tune_f = f_score((p_tune >= 0.5).astype(int), y_tune)
        p_true = np.where(y_tune == 1, p_tune, 1.0 - p_tune)
        tune_loss = math.fsum(-np.log(np.maximum(p_true, T.PROB_FLOOR))) / len(y_tune)
        model.history.append({"epoch": epoch, "loss": total / len(xt), "tune_f": tune_f, "tune_loss": tune_loss})
        key = (tune_f, -tune_loss)
        if best is None or key > best[0]:
            best = (key, epoch, net.get_state())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best is not None:
        net.set_state(best[2])
        model.best_epoch = best[1]
    return model


# ------------------------------------------------------------- checkpoints


def save_model(model: TrainedModel, path):
    """Write ``model`` to an ``.npz`` container; see README for the layout."""
    meta = {
        "format": "coilstack-model",
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "config": asdict(model.config),
        "history": model.history,
        "best_epoch": model.best_epoch,
        "fold": model.fold,
        "has_normalizer": model.normalizer is not None,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    params, bn = model.network.get_state()
    for i, ps in enumerate(params):
        for j, v in enumerate(ps):
            arrays[f"param_{i}_{j}"] = v
    for i, (mean, var) in bn.items():
        arrays[f"bn_mean_{i}"] = mean
        arrays[f"bn_var_{i}"] = var
    if model.normalizer is not None:
        arrays["norm_mean"] = model.normalizer.mean
        arrays["norm_std"] = model.normalizer.std
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> TrainedModel:
    from .preprocessing import Normalizer

    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != "coilstack-model" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} model checkpoint")
        spec = NetworkSpec.from_dict(meta["spec"])
        net = Network(spec, np.random.default_rng(0))
        params = [tuple(z[f"param_{i}_{j}"] for j in range(len(ps))) for i, ps in enumerate(net.layer_params)]
        bn = {i: (z[f"bn_mean_{i}"], z[f"bn_var_{i}"]) for i in net.bn_states}
        net.set_state((params, bn))
        normalizer = Normalizer(z["norm_mean"].copy(), z["norm_std"].copy()) if meta["has_normalizer"] else None
    return TrainedModel(
        spec, net, TrainConfig(**meta["config"]), meta["history"], meta["best_epoch"], normalizer, meta["fold"]
    )

