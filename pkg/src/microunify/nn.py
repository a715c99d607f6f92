"""A small trainable network engine with hand-written backpropagation.

Layers: fully-connected (``fc``), 2-d convolution (``conv``), ``relu``,
2x2 max pooling (``maxpool``) and ``flatten``.  Parameters are stored in the
model dtype (float32 by default); every layer computes in float64 and rounds
its output back, so a float64 model doubles as a gradient-check oracle.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .tensor import ShapeError, col2im_batch, conv_output_size, im2col_batch

LOSSES = ("softmax_cross_entropy", "mse")


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from before a weight update."""


# --- layers ----------------------------------------------------------------

class Dense:
    kind = "fc"
    trainable = True

    def __init__(self, out_features: int, in_features: int):
        self.out_features, self.in_features = out_features, in_features
        self.w = np.zeros((out_features, in_features))
        self.b = np.zeros(out_features)

    def out_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"fc expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def forward(self, x):
        y = x @ self.w.astype(np.float64).T + self.b
        return y, x

    def backward(self, x, dy):
        return dy @ self.w.astype(np.float64), (dy.T @ x, dy.sum(axis=0))

    def describe(self):
        return f"fc({self.out_features},{self.in_features})"


class Conv2d:
    kind = "conv"
    trainable = True

    def __init__(self, cout: int, cin: int, kh: int, kw: int, stride: int = 1, pad: int = 0):
        self.cout, self.cin, self.kh, self.kw = cout, cin, kh, kw
        self.stride, self.pad = stride, pad
        self.w = np.zeros((cout, cin, kh, kw))
        self.b = np.zeros(cout)

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.cin:
            raise ShapeError(f"conv expects ({self.cin}, H, W), got {tuple(shape)}")
        return (self.cout, conv_output_size(shape[1], self.kh, self.stride, self.pad),
                conv_output_size(shape[2], self.kw, self.stride, self.pad))

    def forward(self, x):
        n, _, h, w = x.shape
        cols = im2col_batch(x, (self.kh, self.kw), self.stride, self.pad)
        wm = self.w.reshape(self.cout, -1).astype(np.float64)
        y = np.einsum("ok,nkp->nop", wm, cols) + self.b[None, :, None]
        ho = conv_output_size(h, self.kh, self.stride, self.pad)
        wo = conv_output_size(w, self.kw, self.stride, self.pad)
        return y.reshape(n, self.cout, ho, wo), (x.shape, cols)

    def backward(self, cache, dy):
        x_shape, cols = cache
        n = dy.shape[0]
        dy = dy.reshape(n, self.cout, -1)
        wm = self.w.reshape(self.cout, -1).astype(np.float64)
        dw = np.einsum("nop,nkp->ok", dy, cols).reshape(self.w.shape)
        dcols = np.einsum("ok,nop->nkp", wm, dy)
        dx = col2im_batch(dcols, x_shape, (self.kh, self.kw), self.stride, self.pad)
        return dx, (dw, dy.sum(axis=(0, 2)))

    def describe(self):
        return f"conv({self.cout},{self.cin},{self.kh},{self.kw},{self.stride},{self.pad})"


class ReLU:
    kind = "relu"
    trainable = False

    def out_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, dy):
        return dy * mask, None

    def describe(self):
        return "relu"


class MaxPool2:
    kind = "maxpool"
    trainable = False

    def out_shape(self, shape):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ShapeError(f"maxpool expects (C, H>=2, W>=2), got {tuple(shape)}")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        win = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, ho, wo, 4)
        arg = win.argmax(axis=-1)  # first maximum wins ties
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, cache, dy):
        (n, c, h, w), arg = cache
        ho, wo = h // 2, w // 2
        win = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : 2 * ho, : 2 * wo] = (win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                                        .reshape(n, c, 2 * ho, 2 * wo))
        return dx, None

    def describe(self):
        return "maxpool"


class Flatten:
    kind = "flatten"
    trainable = False

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, shape, dy):
        return dy.reshape(shape), None

    def describe(self):
        return "flatten"


_TOKEN = re.compile(r"(\w+)(?:\(([^)]*)\))?")


def parse_arch(text: str) -> list:
    """Parse e.g. ``"conv(8,1,3,3,1,1) relu maxpool flatten fc(10,128)"``.

    conv arguments are (Cout, Cin, Kh, Kw[, stride[, pad]]); fc takes (out, in).
    """
    layers = []
    for name, args in _TOKEN.findall(text.replace(";", " ")):
        vals = [int(a) for a in args.split(",") if a.strip()] if args else []
        try:
            if name == "fc" and len(vals) == 2:
                layers.append(Dense(*vals))
            elif name == "conv" and 4 <= len(vals) <= 6:
                layers.append(Conv2d(*vals))
            elif name in ("relu", "maxpool", "flatten") and not vals:
                layers.append({"relu": ReLU, "maxpool": MaxPool2, "flatten": Flatten}[name]())
            else:
                raise ValueError
        except (TypeError, ValueError):
            raise ValueError(f"bad layer spec {name}({args})") from None
    if not layers:
        raise ValueError(f"empty architecture {text!r}")
    return layers


# --- model -----------------------------------------------------------------

@dataclass
class ForwardCache:
    version: int
    caches: list


class Model:
    """Ordered layers with static shape checking.

    Trainable layers are addressed by their position in `layers`; that index
    is the layer id used by constraint specs and the compressed format.
    """

    def __init__(self, layers, input_shape, loss: str = "softmax_cross_entropy", dtype=np.float32):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.loss = loss
        self.dtype = np.dtype(dtype)
        self.version = 0
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(layer.out_shape(self.shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.describe()}): {exc}") from None
        for layer in self.trainable_layers().values():
            layer.w = np.ascontiguousarray(layer.w, dtype=self.dtype)
            layer.b = np.ascontiguousarray(layer.b, dtype=self.dtype)

    @classmethod
    def from_arch(cls, arch: str, input_shape, loss: str = "softmax_cross_entropy",
                  seed: int | None = 0, dtype=np.float32) -> Model:
        model = cls(parse_arch(arch), input_shape, loss, dtype)
        if seed is not None:
            model.init_weights(seed)
        return model

    def init_weights(self, seed: int) -> None:
        """Uniform fan-in scaled weights, zero biases."""
        rng = np.random.default_rng(seed)
        for layer in self.trainable_layers().values():
            fan_in = int(np.prod(layer.w.shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            layer.w[...] = rng.uniform(-bound, bound, size=layer.w.shape)
            layer.b[...] = 0
        self.touch()

    def describe(self) -> str:
        return " ".join(layer.describe() for layer in self.layers)

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def trainable_layers(self) -> dict:
        return {i: layer for i, layer in enumerate(self.layers) if layer.trainable}

    def weights(self) -> dict[int, np.ndarray]:
        return {i: layer.w for i, layer in self.trainable_layers().items()}

    def layer_shapes(self) -> dict[int, tuple[int, ...]]:
        return {i: layer.w.shape for i, layer in self.trainable_layers().items()}

    def params(self) -> dict:
        out = {}
        for i, layer in self.trainable_layers().items():
            out[(i, "w")] = layer.w
            out[(i, "b")] = layer.b
        return out

    def set_weights(self, weights: dict[int, np.ndarray]) -> None:
        layers = self.trainable_layers()
        for i, w in weights.items():
            layers[i].w[...] = w
        self.touch()

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"layer 0: batch shape {tuple(x.shape[1:])} != input shape {self.input_shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            x = x.astype(self.dtype).astype(np.float64)
            caches.append(cache)
        return x.astype(self.dtype), ForwardCache(self.version, caches)

    def backward(self, cache: ForwardCache, dout) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the latest weight update")
        grads = {}
        dy = np.asarray(dout, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(cache.caches[i], dy)
            if g is not None:
                grads[i] = (g[0].astype(self.dtype), g[1].astype(self.dtype))
        return grads

    def predict(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def loss_and_grads(self, x, y) -> tuple[float, dict]:
        out, cache = self.forward(x)
        loss, dout = loss_and_grad(self.loss, out, y)
        grads = self.backward(cache, dout)
        flat = {}
        for i, (dw, db) in grads.items():
            flat[(i, "w")] = dw
            flat[(i, "b")] = db
        return loss, flat


def forward(model: Model, batch):
    return model.forward(batch)


def backward(model: Model, cache: ForwardCache, loss_grad):
    return model.backward(cache, loss_grad)


# --- losses ----------------------------------------------------------------

def loss_and_grad(kind: str, outputs, targets) -> tuple[float, np.ndarray]:
    out = np.asarray(outputs, dtype=np.float64)
    if kind == "softmax_cross_entropy":
        labels = np.asarray(targets)
        if labels.dtype.kind not in "iu":
            raise ValueError("softmax cross-entropy needs integer labels")
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = len(out)
        loss = -logp[np.arange(n), labels].mean()
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return float(loss), grad / n
    if kind == "mse":
        t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
        diff = out - t
        return float(np.mean(diff * diff)), 2 * diff / diff.size
    raise ValueError(f"unknown loss {kind!r}")


# --- optimizers ------------------------------------------------------------

def _check_finite(g):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")


def sgd_step(w, g, lr: float, weight_decay: float = 1e-4):
    """Plain SGD with coupled L2 weight decay."""
    _check_finite(g)
    w64 = np.asarray(w, dtype=np.float64)
    return (w64 - lr * (np.asarray(g, np.float64) + weight_decay * w64)).astype(np.asarray(w).dtype)


def adam_step(w, g, m, v, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One Adam update; returns (w', m', v').  `t` counts from 1."""
    _check_finite(g)
    w64 = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, np.float64) + weight_decay * w64
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    return (w64 - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.asarray(w).dtype), m, v


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 1e-4):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {}

    def step(self, params: dict, grads: dict) -> None:
        for key, g in grads.items():
            w = params[key]
            if self.momentum:
                _check_finite(g)
                g = np.asarray(g, np.float64) + self.weight_decay * w
                vel = self.momentum * self.velocity.get(key, 0.0) + g
                self.velocity[key] = vel
                w[...] = (w - self.lr * vel).astype(w.dtype)
            else:
                w[...] = sgd_step(w, g, self.lr, self.weight_decay)


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for key, g in grads.items():
            w = params[key]
            m, v = self.state.get(key, (0.0, 0.0))
            w[...], m, v = adam_step(w, g, m, v, self.t, self.lr, *self.betas, self.eps, self.weight_decay)
            self.state[key] = (m, v)


def make_optimizer(name: str, lr: float, momentum: float = 0.0, weight_decay: float = 1e-4):
    if name == "sgd":
        return SGD(lr, momentum, weight_decay)
    if name == "adam":
        return Adam(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


# --- training and evaluation -----------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int | None = 32
    seed: int = 0


def run_epoch(model, data: Dataset, opt, batch_size, rng, extra_grad=None) -> float:
    """One pass over `data`; `extra_grad(grads)` may add terms before the step.

    Returns the mean task loss over the batches.
    """
    losses = []
    for xb, yb in data.batches(batch_size, rng):
        loss, grads = model.loss_and_grads(xb, yb)
        if not math.isfinite(loss):
            raise FloatingPointError(f"task loss became {loss}")
        if extra_grad is not None:
            extra_grad(grads)
        opt.step(model.params(), grads)
        model.touch()
        losses.append(loss)
    return float(np.mean(losses))


def fit(model: Model, data: Dataset, cfg: TrainConfig) -> list[float]:
    """Plain gradient training (in place); returns per-epoch mean loss."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    return [run_epoch(model, data, opt, cfg.batch_size, rng) for _ in range(cfg.epochs)]


def psnr(outputs, targets, peak: float = 1.0) -> float:
    diff = np.asarray(outputs, np.float64) - np.asarray(targets, np.float64).reshape(np.shape(outputs))
    mse = float(np.mean(diff * diff))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def score(outputs, targets, metric: str) -> float:
    if metric == "accuracy":
        return float(np.mean(np.argmax(outputs, axis=1) == np.asarray(targets)))
    if metric == "psnr":
        return psnr(outputs, targets)
    raise ValueError(f"unknown metric {metric!r}")


def evaluate(model: Model, data: Dataset, metric: str | None = None, batch_size: int = 256) -> float:
    """Accuracy in [0, 1] or PSNR in dB (inf for a perfect reconstruction)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    metric = metric or default_metric(model)
    outs = np.concatenate([model.predict(xb) for xb, _ in data.batches(batch_size)])
    return score(outs, data.y, metric)


def default_metric(model: Model) -> str:
    return "accuracy" if model.loss == "softmax_cross_entropy" else "psnr"
