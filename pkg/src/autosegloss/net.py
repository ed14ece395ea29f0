"""Two-layer convolutional segmentation network with explicit backprop.

conv3x3(F->H) -> ReLU -> conv3x3(H->C), replicate padding, channels-last.
Weights are stored (out, in, 3, 3); the checkpoint writes them in the order
w1, b1, w2, b2.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NumericError, ParseError
from .metrics import MetricId, eval_metric_arrays
from .surrogate import surrogate_loss_and_grad

CKPT_MAGIC = b"ASLN"
CKPT_VERSION = 1
PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(eq=False)
class TinySegNet:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        H, F = self.w1.shape[:2]
        C = self.w2.shape[0]
        if self.w1.shape != (H, F, 3, 3) or self.b1.shape != (H,) \
                or self.w2.shape != (C, H, 3, 3) or self.b2.shape != (C,):
            raise DomainError("inconsistent kernel shapes")

    @property
    def dims(self):
        """(F, H, C): input features, hidden channels, classes."""
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "TinySegNet":
        return TinySegNet(*(p.copy() for p in self.params()))

    def equal(self, other: "TinySegNet") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


def model_init(seed: int, F: int, H: int, C: int) -> TinySegNet:
    if min(F, H, C) < 1:
        raise DomainError("network dimensions must be positive")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((H, F, 3, 3)) * np.sqrt(2.0 / (9 * F))
    w2 = rng.standard_normal((C, H, 3, 3)) * np.sqrt(2.0 / (9 * H))
    return TinySegNet(w1, np.zeros(H), w2, np.zeros(C))


def _im2col(x):
    # (N, H, W, F) -> (N, H, W, F, 3, 3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def _col2im(dcols):
    # adjoint of _im2col: (N, H, W, F, 3, 3) -> (N, H, W, F)
    N, H, W, F = dcols.shape[:4]
    dp = np.zeros((N, H + 2, W + 2, F))
    for i in range(3):
        for j in range(3):
            dp[:, i:i + H, j:j + W] += dcols[..., i, j]
    # replicate padding: padded border pixels are copies of the edge pixels
    dp[:, 1] += dp[:, 0]
    dp[:, H] += dp[:, H + 1]
    dp[:, :, 1] += dp[:, :, 0]
    dp[:, :, W] += dp[:, :, W + 1]
    return dp[:, 1:H + 1, 1:W + 1]


def _conv(x, w, b):
    N, H, W, _ = x.shape
    cols = _im2col(x).reshape(N * H * W, -1)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(N, H, W, -1), cols


def forward(net: TinySegNet, x: np.ndarray, return_cache: bool = False):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    F = net.dims[0]
    if x.ndim != 4 or x.shape[-1] != F:
        raise DomainError(f"expected {F} feature channels, got input of shape {x.shape}")
    pre, cols1 = _conv(x, net.w1, net.b1)
    hid = np.maximum(pre, 0.0)
    logits, cols2 = _conv(hid, net.w2, net.b2)
    if single:
        logits = logits[0]
    if return_cache:
        return logits, (x.shape, pre, cols1, cols2)
    return logits


def backward(net: TinySegNet, x: np.ndarray, dlogits: np.ndarray, cache=None) -> list:
    """Gradients [dw1, db1, dw2, db2] of a scalar whose logit gradient is ``dlogits``."""
    if cache is None:
        _, cache = forward(net, x, return_cache=True)
    shape, pre, cols1, cols2 = cache
    N, H, W, _ = shape
    Hh, C = net.dims[1], net.dims[2]
    g = np.asarray(dlogits, dtype=np.float64).reshape(N * H * W, C)
    dw2 = (g.T @ cols2).reshape(net.w2.shape)
    db2 = g.sum(axis=0)
    dcols2 = (g @ net.w2.reshape(C, -1)).reshape(N, H, W, Hh, 3, 3)
    dhid = _col2im(dcols2)
    dpre = (dhid * (pre > 0)).reshape(N * H * W, Hh)
    dw1 = (dpre.T @ cols1).reshape(net.w1.shape)
    db1 = dpre.sum(axis=0)
    return [dw1, db1, dw2, db2]


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 200
    batch_size: int = 8
    lr_initial: float = 0.1
    lr_poly_power: float = 0.9
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.lr_initial <= 0 or self.lr_min < 0:
            raise DomainError("learning rates must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise DomainError("momentum must be in [0, 1) and weight decay >= 0")

    def lr_at(self, it: int) -> float:
        frac = 1.0 - it / max(self.iterations, 1)
        return max(self.lr_initial * frac ** self.lr_poly_power, self.lr_min)


def _batches(n, schedule: TrainSchedule):
    rng = np.random.default_rng(schedule.seed)
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + schedule.batch_size > n:
            take = order[pos:]
            order = rng.permutation(n)
            pos = schedule.batch_size - take.size
            yield np.concatenate([take, order[:pos]])
        else:
            yield order[pos:pos + schedule.batch_size]
            pos += schedule.batch_size


def train(net: TinySegNet, features: np.ndarray, labels: np.ndarray, spec,
          schedule: TrainSchedule, loss_fn=None) -> TinySegNet:
    """SGD with momentum, poly LR decay and weight decay; returns a new network.

    ``features`` is (N, H, W, F), ``labels`` (N, H, W). ``loss_fn(spec, logits,
    labels) -> (loss, dlogits)`` defaults to the parameterized surrogate.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise DomainError("training set is empty")
    loss_fn = loss_fn or surrogate_loss_and_grad
    net = net.copy()
    params = net.params()
    velocity = [np.zeros_like(p) for p in params]
    batches = _batches(features.shape[0], schedule)
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below instead
        _sgd(net, params, velocity, batches, features, labels, spec, schedule, loss_fn)
    return net


def _sgd(net, params, velocity, batches, features, labels, spec, schedule, loss_fn):
    for it in range(schedule.iterations):
        idx = next(batches)
        x = features[idx]
        logits, cache = forward(net, x, return_cache=True)
        try:
            loss, dlogits = loss_fn(spec, logits, labels[idx])
        except NumericError as exc:
            raise NumericError(str(exc), step=it) from exc
        if not np.isfinite(loss):
            raise NumericError("non-finite loss", step=it)
        grads = backward(net, x, dlogits, cache)
        lr = schedule.lr_at(it)
        for p, g, v in zip(params, grads, velocity):
            g = g + schedule.weight_decay * p
            v *= schedule.momentum
            v += g
            p -= lr * v
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericError("weights diverged", step=it)


def predict(net: TinySegNet, features: np.ndarray, chunk: int = 64) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    out = [forward(net, features[i:i + chunk]).argmax(axis=-1) for i in range(0, len(features), chunk)]
    return np.concatenate(out) if out else np.zeros(features.shape[:3], dtype=np.int64)


def evaluate(net: TinySegNet, features: np.ndarray, labels: np.ndarray, metric) -> float:
    """Argmax the logits and score them with the exact metric."""
    metric = metric if isinstance(metric, MetricId) else MetricId.of(metric)
    return eval_metric_arrays(metric, predict(net, features), np.asarray(labels), net.dims[2])


# -- checkpoint ---------------------------------------------------------------------

def save_checkpoint(net: TinySegNet) -> bytes:
    F, H, C = net.dims
    head = CKPT_MAGIC + struct.pack("<4I", CKPT_VERSION, F, H, C)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params())
    return head + body


def load_checkpoint(data: bytes) -> TinySegNet:
    if len(data) < 20:
        raise ParseError("checkpoint header truncated", offset=len(data))
    if data[:4] != CKPT_MAGIC:
        raise ParseError(f"bad checkpoint magic {data[:4]!r}", offset=0)
    version, F, H, C = struct.unpack_from("<4I", data, 4)
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    shapes = [(H, F, 3, 3), (H,), (C, H, 3, 3), (C,)]
    need = 20 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != need:
        raise ParseError(f"checkpoint payload has {len(data)} bytes, expected {need}", offset=min(len(data), need))
    arrays, off = [], 20
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(s))
        off += 8 * n
    return TinySegNet(*arrays)
