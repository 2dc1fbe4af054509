"""Deterministic numpy training core for small MLPs and ConvNets.

Parameters live in one flat float64 vector. The canonical order is layer by
layer, input to output, and within a layer the weight tensor (C order) comes
before the bias:

* dense layer ``W[out, in]`` then ``b[out]``
* conv layer ``W[c_out, c_in, k, k]`` then ``b[c_out]``

A ConvNet is a stack of ``k x k`` same-padded stride-1 convolutions, each
followed by ReLU and a 2x2 average pool (skipped once the feature map is
smaller than 2x2), then one dense classifier layer over the flattened map.

All randomness goes through numpy's Philox4x64-10 counter-based generator.
Model init uses ``key=seed``; the ordering for epoch ``e`` uses the 128-bit
key ``(e << 64) | ordering_seed``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ArchSpec",
    "ModelState",
    "TrainConfig",
    "TrainedModel",
    "NonFiniteLossError",
    "param_count",
    "layer_slices",
    "prunable_bits",
    "init_model",
    "loss_and_grad",
    "evaluate",
    "input_grad",
    "sgd_step",
    "train",
    "interpolate_params",
    "mix_params",
    "epoch_order",
]


class NonFiniteLossError(FloatingPointError):
    """Raised when the forward pass produces a non-finite loss."""

    def __init__(self, layer: str, message: str = ""):
        self.layer = layer
        super().__init__(message or f"non-finite values first appear in layer {layer!r}")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor.

    For ``kind="mlp"`` ``layer_sizes`` lists units per layer, input and
    output included. For ``kind="convnet"`` it lists channel counts starting
    with the input channels, and the last entry is the class count;
    ``kernel_size`` and ``input_hw`` complete the description.
    """

    kind: str
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    kernel_size: int = 3
    input_hw: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "input_hw", tuple(int(s) for s in self.input_hw))
        if self.kind not in ("mlp", "convnet"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.layer_sizes) < 2:
            raise ValueError("an architecture needs at least 2 layers")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.kind == "convnet":
            if len(self.layer_sizes) < 3:
                raise ValueError("convnet needs input channels, >=1 conv layer and a class count")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError("convnet kernel_size must be a positive odd integer")
            if len(self.input_hw) != 2 or min(self.input_hw) < 1:
                raise ValueError(f"bad convnet input_hw {self.input_hw}")

    @property
    def input_dim(self) -> int:
        if self.kind == "mlp":
            return self.layer_sizes[0]
        return self.layer_sizes[0] * self.input_hw[0] * self.input_hw[1]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "layer_sizes": list(self.layer_sizes), "activation": self.activation}
        if self.kind == "convnet":
            d["kernel_size"] = self.kernel_size
            d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            kind=d["kind"],
            layer_sizes=tuple(d["layer_sizes"]),
            activation=d.get("activation", "relu"),
            kernel_size=d.get("kernel_size", 3),
            input_hw=tuple(d.get("input_hw", (1, 1))),
        )


class _Layer(NamedTuple):
    name: str
    kind: str  # "dense" | "conv"
    w_shape: tuple
    w_off: int
    b_off: int
    end: int
    relu: bool
    # conv-only geometry: input (h, w) and whether a 2x2 pool follows
    hw: tuple = (0, 0)
    pool: bool = False


@functools.lru_cache(maxsize=64)
def _plan(arch: ArchSpec) -> tuple[_Layer, ...]:
    layers = []
    off = 0
    sizes = arch.layer_sizes
    if arch.kind == "mlp":
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w_off, b_off = off, off + n_in * n_out
            off = b_off + n_out
            last = i == len(sizes) - 2
            layers.append(_Layer(f"dense{i}", "dense", (n_out, n_in), w_off, b_off, off, not last))
        return tuple(layers)
    k = arch.kernel_size
    h, w = arch.input_hw
    channels = sizes[:-1]
    for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
        w_off, b_off = off, off + c_out * c_in * k * k
        off = b_off + c_out
        pool = h >= 2 and w >= 2
        layers.append(_Layer(f"conv{i}", "conv", (c_out, c_in, k, k), w_off, b_off, off, True, (h, w), pool))
        if pool:
            h, w = h // 2, w // 2
    n_in = channels[-1] * h * w
    n_out = sizes[-1]
    w_off, b_off = off, off + n_in * n_out
    off = b_off + n_out
    layers.append(_Layer("fc", "dense", (n_out, n_in), w_off, b_off, off, False))
    return tuple(layers)


def param_count(arch: ArchSpec) -> int:
    return _plan(arch)[-1].end


def layer_slices(arch: ArchSpec) -> list[tuple[str, slice, slice]]:
    """(layer name, weight slice, bias slice) in canonical order."""
    return [(l.name, slice(l.w_off, l.b_off), slice(l.b_off, l.end)) for l in _plan(arch)]


def prunable_bits(arch: ArchSpec) -> np.ndarray:
    """Boolean vector, True on weight coordinates and False on biases."""
    bits = np.zeros(param_count(arch), dtype=bool)
    for _, w, _ in layer_slices(arch):
        bits[w] = True
    return bits


@dataclass(eq=False)
class ModelState:
    arch: ArchSpec
    params: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.ndim != 1 or self.params.size != param_count(self.arch):
            raise ValueError(
                f"params has {self.params.size} entries, architecture needs {param_count(self.arch)}"
            )
        if not np.isfinite(self.params).all():
            raise ValueError("model parameters must be finite")

    def with_params(self, params: np.ndarray) -> "ModelState":
        return ModelState(self.arch, params, self.seed)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    ordering_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.ordering_seed < 0:
            raise ValueError("ordering_seed must be unsigned")


@dataclass(eq=False)
class TrainedModel:
    model: ModelState
    # per-epoch (train loss, train accuracy) on the full training set
    history: list[tuple[float, float]] = field(default_factory=list)


def init_model(arch: ArchSpec, seed: int) -> ModelState:
    """Fan-in uniform weights, zero biases.

    Layers followed by ReLU use the He bound ``sqrt(6 / fan_in)``. The output
    layer has no ReLU after it and uses gain 1, ``sqrt(1 / fan_in)``, which
    keeps untrained logits small so the initial loss sits near ``ln(k)``.
    """
    if not isinstance(arch, ArchSpec):
        raise TypeError("arch must be an ArchSpec")
    if seed < 0:
        raise ValueError("seed must be unsigned")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    params = np.zeros(param_count(arch))
    for layer in _plan(arch):
        fan_in = int(np.prod(layer.w_shape[1:]))
        bound = np.sqrt((6.0 if layer.relu else 1.0) / fan_in)
        params[layer.w_off:layer.b_off] = rng.uniform(-bound, bound, layer.b_off - layer.w_off)
    return ModelState(arch, params, int(seed))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _conv_forward(x, w, b):
    k = w.shape[-1]
    p = k // 2
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape):
    n, c, h, wd = x_shape
    c_out, _, k, _ = w.shape
    p = k // 2
    d = dout.transpose(0, 2, 3, 1).reshape(n * h * wd, c_out)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(c_out, -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dw, db, dxp[:, :, p:p + h, p:p + wd]


def _pool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    x = x[:, :, : 2 * h2, : 2 * w2]
    return x.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def _pool_backward(dout, in_shape):
    n, c, h, w = in_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    dx = np.zeros(in_shape)
    up = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * 0.25
    dx[:, :, : 2 * h2, : 2 * w2] = up
    return dx


def relu_gates(arch: ArchSpec, params: np.ndarray, x: np.ndarray) -> list:
    """Which ReLUs fire (``z > 0``) per layer; ``None`` for layers without one."""
    _, caches = _forward(arch, params, x)
    return [c[3] > 0 if c[0].relu else None for c in caches]


def _forward(arch: ArchSpec, params: np.ndarray, x: np.ndarray, gates=None):
    """Return logits and the per-layer cache needed by ``_backward``.

    With ``gates`` (from :func:`relu_gates`) every ReLU keeps that on/off
    pattern instead of looking at its own input, which makes the network
    polynomial in ``params``.
    """
    plan = _plan(arch)
    caches = []
    a = x
    if arch.kind == "convnet":
        a = x.reshape(x.shape[0], arch.layer_sizes[0], *arch.input_hw)
    for i, layer in enumerate(plan):
        w = params[layer.w_off:layer.b_off].reshape(layer.w_shape)
        b = params[layer.b_off:layer.end]
        if layer.kind == "conv":
            z, cols = _conv_forward(a, w, b)
            out = np.maximum(z, 0.0) if gates is None else z * gates[i]
            pre_pool = out.shape
            if layer.pool:
                out = _pool_forward(out)
            caches.append((layer, a.shape, cols, z, pre_pool, out))
        else:
            a_in = a.reshape(a.shape[0], -1)
            z = a_in @ w.T + b
            if layer.relu:
                out = np.maximum(z, 0.0) if gates is None else z * gates[i]
            else:
                out = z
            caches.append((layer, a.shape, a_in, z, None, out))
        a = out
    return a, caches


def _backward(arch: ArchSpec, params: np.ndarray, caches, dlogits: np.ndarray, want_input: bool = False, gates=None):
    grad = np.zeros_like(params)
    d = dlogits
    for i in range(len(caches) - 1, -1, -1):
        layer, in_shape, saved, z, pre_pool, _ = caches[i]
        on = (z > 0) if gates is None else gates[i]
        w = params[layer.w_off:layer.b_off].reshape(layer.w_shape)
        if layer.kind == "conv":
            if layer.pool:
                d = _pool_backward(d.reshape(caches[i][5].shape), pre_pool)
            d = d.reshape(z.shape) * on
            if i == 0 and not want_input:
                dw, db = _conv_weight_grads(d, saved, w)
                d = None
            else:
                dw, db, d = _conv_backward(d, saved, w, in_shape)
        else:
            d = d.reshape(z.shape)
            if layer.relu:
                d = d * on
            dw = d.T @ saved
            db = d.sum(axis=0)
            d = (d @ w).reshape(in_shape) if (i > 0 or want_input) else None
        grad[layer.w_off:layer.b_off] = dw.ravel()
        grad[layer.b_off:layer.end] = db
    if want_input and d is not None:
        d = d.reshape(d.shape[0], -1)
    return grad, d


def _conv_weight_grads(d, cols, w):
    c_out = w.shape[0]
    flat = d.transpose(0, 2, 3, 1).reshape(-1, c_out)
    return (flat.T @ cols).reshape(w.shape), flat.sum(axis=0)


def _xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    log_p = shifted[np.arange(n), labels] - lse
    loss = float(-log_p.mean())
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def _check_batch(arch: ArchSpec, features: np.ndarray, labels: np.ndarray):
    if features.ndim != 2 or features.shape[1] != arch.input_dim:
        raise ValueError(
            f"batch feature dimension {features.shape[1:]} does not match architecture input {arch.input_dim}"
        )
    if features.shape[0] != labels.shape[0] or features.shape[0] == 0:
        raise ValueError("batch must be non-empty with one label per row")
    if labels.min() < 0 or labels.max() >= arch.num_classes:
        raise ValueError(f"labels must lie in [0, {arch.num_classes})")


def _batch_arrays(batch: Any):
    return np.asarray(batch.features, dtype=np.float64), np.asarray(batch.labels, dtype=np.int64)


def _raise_nonfinite(caches):
    for layer, *_, out in caches:
        if not np.isfinite(out).all():
            raise NonFiniteLossError(layer.name)
    raise NonFiniteLossError("loss", "non-finite loss from finite logits (softmax cross-entropy)")


def _loss_grad_arrays(arch, params, x, y, want_input=False, gates=None):
    logits, caches = _forward(arch, params, x, gates)
    loss, dlogits = _xent(logits, y)
    if not np.isfinite(loss):
        _raise_nonfinite(caches)
    grad, dx = _backward(arch, params, caches, dlogits, want_input, gates)
    return loss, grad, dx


def loss_and_grad(model: ModelState, batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over ``batch`` and its gradient w.r.t. params."""
    x, y = _batch_arrays(batch)
    _check_batch(model.arch, x, y)
    loss, grad, _ = _loss_grad_arrays(model.arch, model.params, x, y)
    return loss, grad


def input_grad(arch: ArchSpec, params: np.ndarray, batch) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the batch features."""
    x, y = _batch_arrays(batch)
    _check_batch(arch, x, y)
    loss, _, dx = _loss_grad_arrays(arch, params, x, y, want_input=True)
    return loss, dx


def loss_value(arch: ArchSpec, params: np.ndarray, batch, gates=None) -> float:
    x, y = _batch_arrays(batch)
    logits, caches = _forward(arch, params, x, gates)
    loss, _ = _xent(logits, y)
    if not np.isfinite(loss):
        _raise_nonfinite(caches)
    return loss


def evaluate(model: ModelState, data, chunk: int = 4096) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) over every row of ``data``."""
    x, y = _batch_arrays(data)
    _check_batch(model.arch, x, y)
    total = 0.0
    correct = 0
    for start in range(0, len(y), chunk):
        xs, ys = x[start:start + chunk], y[start:start + chunk]
        logits, caches = _forward(model.arch, model.params, xs)
        loss, _ = _xent(logits, ys)
        if not np.isfinite(loss):
            _raise_nonfinite(caches)
        total += loss * len(ys)
        correct += int((logits.argmax(axis=1) == ys).sum())
    return total / len(y), correct / len(y)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def _mask_bits(mask, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if bits.shape != (n,):
        raise ValueError(f"mask has length {bits.size}, expected {n}")
    return bits


def sgd_step(model: ModelState, grad: np.ndarray, velocity: np.ndarray, cfg: TrainConfig, mask=None):
    """One momentum-SGD update; returns ``(new_model, new_velocity)``.

    ``velocity <- momentum * velocity + grad``, ``params <- params - lr * velocity``,
    then both are zeroed wherever the mask is 0.
    """
    n = model.params.size
    grad = np.asarray(grad, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if grad.shape != (n,) or velocity.shape != (n,):
        raise ValueError(f"grad/velocity lengths {grad.size}/{velocity.size} do not match {n} params")
    p, v = _update(model.params, grad, velocity, cfg.learning_rate, cfg.momentum, _mask_bits(mask, n))
    return model.with_params(p), v


def _update(params, grad, velocity, lr, momentum, bits):
    velocity = momentum * velocity + grad
    params = params - lr * velocity
    if bits is not None:
        params = np.where(bits, params, 0.0)
        velocity = np.where(bits, velocity, 0.0)
    return params, velocity


def epoch_order(n: int, ordering_seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` used for the given epoch."""
    key = (int(epoch) << 64) | int(ordering_seed)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def train(model: ModelState, data, cfg: TrainConfig, mask=None) -> TrainedModel:
    """Minibatch momentum SGD for ``cfg.epochs`` epochs.

    The last minibatch of an epoch may be smaller than ``batch_size``.
    """
    x, y = _batch_arrays(data)
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    _check_batch(model.arch, x, y)
    bits = _mask_bits(mask, model.params.size)
    if cfg.epochs == 0:
        if bits is None or bits.all():
            return TrainedModel(model, [])
        return TrainedModel(model.with_params(np.where(bits, model.params, 0.0)), [])

    arch = model.arch
    params = model.params.copy()
    if bits is not None:
        params = np.where(bits, params, 0.0)
    velocity = np.zeros_like(params)
    lr, mom = cfg.learning_rate, cfg.momentum
    history = []
    for epoch in range(cfg.epochs):
        order = epoch_order(n, cfg.ordering_seed, epoch)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grad, _ = _loss_grad_arrays(arch, params, x[idx], y[idx])
            params, velocity = _update(params, grad, velocity, lr, mom, bits)
        if not np.isfinite(params).all():
            raise NonFiniteLossError("params", f"parameters diverged during epoch {epoch}")
        history.append(evaluate(ModelState(arch, params, model.seed), data))
    return TrainedModel(ModelState(arch, params, model.seed), history)


def mix_params(a: ModelState, b: ModelState, weight_a: float, weight_b: float) -> ModelState:
    """``weight_a * a + weight_b * b``; identical endpoints short-circuit to ``a``."""
    if a.arch != b.arch:
        raise ValueError("cannot combine models with different architectures")
    if np.array_equal(a.params, b.params):
        return a.with_params(a.params.copy())
    if weight_b == 0.0:
        return a.with_params(a.params.copy())
    if weight_a == 0.0:
        return a.with_params(b.params.copy())
    return a.with_params(weight_a * a.params + weight_b * b.params)


def interpolate_params(a: ModelState, b: ModelState, alpha: float) -> ModelState:
    """Point ``(1 - alpha) * a + alpha * b`` on the segment between two models."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return mix_params(a, b, 1.0 - alpha, alpha)

