"""Minimal deterministic neural-network engine.

Layers carry explicit forward/backward passes and are sufficient to build
the convolutional autoencoder and the triad classifier: 3x3 same-padding
convolution, 2x2 max pooling, 2x nearest-neighbor upsampling, batch
normalization, dense, embedding lookup, ReLU/sigmoid, inverted dropout,
He-uniform initialization, BCE/MSE losses and Adam.

Everything is a plain numpy array in float32; a float64 mode exists only
for finite-difference gradient checking.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

TRAINING = "training"
INFERENCE = "inference"
_MODES = (TRAINING, INFERENCE)


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

def derive_seed(seed: int, label: str) -> int:
    """Derive a sub-stream seed from a parent seed and a stream label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    """Seeded generator; with a label, a derived independent sub-stream."""
    if label is not None:
        seed = derive_seed(seed, label)
    return np.random.Generator(np.random.PCG64(seed))


def he_uniform_init(shape, fan_in: int, rng: np.random.Generator, dtype=DTYPE):
    """Uniform init on [-L, L] with L = sqrt(6 / fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class Parameter:
    """A trainable tensor with its gradient buffer and Adam state."""

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def zero_grads(params):
    for p in params:
        p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction. Gradients are left untouched."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.adam_m[...] = beta1 * p.adam_m + (1.0 - beta1) * p.grad
        p.adam_v[...] = beta2 * p.adam_v + (1.0 - beta2) * p.grad ** 2
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _check_mode(mode):
    if mode not in _MODES:
        raise ValueError(f"unknown mode {mode!r}")


class Layer:
    """Base class: forward caches what backward needs (training mode only)."""

    def params(self):
        return []

    def tensors(self):
        """Named persistent tensors: parameter values plus running state."""
        return {}

    def forward(self, x, mode=INFERENCE, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Conv3x3(Layer):
    """3x3 convolution (cross-correlation), stride 1, zero 'same' padding, no bias."""

    def __init__(self, in_channels, out_channels, rng, dtype=DTYPE):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Parameter(
            he_uniform_init((out_channels, in_channels, 3, 3), in_channels * 9, rng, dtype)
        )
        self._cache = None

    def params(self):
        return [self.weight]

    def tensors(self):
        return {"weight": self.weight.value}

    @staticmethod
    def _im2col(x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected input of shape (N,{self.in_channels},H,W), got {x.shape}"
            )
        n, _, h, w = x.shape
        cols = self._im2col(x)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        out = cols @ wmat.T
        out = out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)
        if mode == TRAINING:
            self._cache = (cols, x.shape)
        return np.ascontiguousarray(out)

    def backward(self, grad_out):
        cols, in_shape = self._cache
        n, c, h, w = in_shape
        g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        self.weight.grad += (g.T @ cols).reshape(self.weight.shape)
        gcols = (g @ self.weight.value.reshape(self.out_channels, -1))
        gcols = gcols.reshape(n, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, c, h + 2, w + 2), dtype=grad_out.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + h, dj:dj + w] += gcols[:, :, :, :, di, dj]
        return gxp[:, :, 1:h + 1, 1:w + 1]


class MaxPool2x2(Layer):
    """2x2 max pooling; backward routes to the first argmax in row-major window order."""

    def __init__(self):
        self._cache = None

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"spatial dims must be even, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = win.reshape(n, c, h // 2, w // 2, 4)
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if mode == TRAINING:
            self._cache = (idx, x.shape)
        return out

    def backward(self, grad_out):
        idx, (n, c, h, w) = self._cache
        scatter = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
        np.put_along_axis(scatter, idx[..., None], grad_out[..., None], axis=-1)
        scatter = scatter.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return scatter.reshape(n, c, h, w)


class Upsample2x(Layer):
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, grad_out):
        n, c, h, w = grad_out.shape
        return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class BatchNorm(Layer):
    """Batch normalization: per channel for NCHW inputs, per feature for NF inputs."""

    EPS = 1e-5
    MOMENTUM = 0.99

    def __init__(self, num_features, dtype=DTYPE):
        self.num_features = num_features
        self.gamma = Parameter(np.ones(num_features, dtype=dtype))
        self.beta = Parameter(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def tensors(self):
        return {
            "gamma": self.gamma.value,
            "beta": self.beta.value,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def _axes_and_shape(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, self.num_features, 1, 1)
        if x.ndim == 2:
            return (0,), (1, self.num_features)
        raise ValueError(f"expected 2D or 4D input, got shape {x.shape}")

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        axes, bshape = self._axes_and_shape(x)
        gamma = self.gamma.value.reshape(bshape)
        beta = self.beta.value.reshape(bshape)
        if mode == TRAINING:
            if x.shape[0] < 2:
                raise ValueError("training-mode batch normalization needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean[...] = (
                self.MOMENTUM * self.running_mean + (1 - self.MOMENTUM) * mean
            ).astype(self.running_mean.dtype)
            self.running_var[...] = (
                self.MOMENTUM * self.running_var + (1 - self.MOMENTUM) * var
            ).astype(self.running_var.dtype)
            std = np.sqrt(var.reshape(bshape) + self.EPS)
            xhat = (x - mean.reshape(bshape)) / std
            self._cache = (xhat, std, axes, bshape)
            return gamma * xhat + beta
        std = np.sqrt(self.running_var.reshape(bshape) + self.EPS)
        xhat = (x - self.running_mean.reshape(bshape)) / std
        return gamma * xhat + beta

    def backward(self, grad_out):
        xhat, std, axes, bshape = self._cache
        self.gamma.grad += (grad_out * xhat).sum(axis=axes)
        self.beta.grad += grad_out.sum(axis=axes)
        m = grad_out.size // self.num_features
        dxhat = grad_out * self.gamma.value.reshape(bshape)
        mean_d = dxhat.sum(axis=axes).reshape(bshape) / m
        mean_dx = (dxhat * xhat).sum(axis=axes).reshape(bshape) / m
        return (dxhat - mean_d - xhat * mean_dx) / std


class Dense(Layer):
    """Fully connected layer: out = x @ W + b, W is He-uniform initialized."""

    def __init__(self, in_features, out_features, rng, dtype=DTYPE):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_uniform_init((in_features, out_features), in_features, rng, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def tensors(self):
        return {"weight": self.weight.value, "bias": self.bias.value}

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"expected input of shape (N,{self.in_features}), got {x.shape}"
            )
        if mode == TRAINING:
            self._cache = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad_out):
        x = self._cache
        self.weight.grad += x.T @ grad_out
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value.T


class Embedding(Layer):
    """Index lookup into an N x d table; equivalent to one-hot times the table."""

    def __init__(self, num_embeddings, dim, rng, dtype=DTYPE):
        self.num_embeddings = num_embeddings
        self.dim = dim
        self.table = Parameter(he_uniform_init((num_embeddings, dim), dim, rng, dtype))
        self._cache = None

    def params(self):
        return [self.table]

    def tensors(self):
        return {"table": self.table.value}

    def forward(self, indices, mode=INFERENCE, rng=None):
        _check_mode(mode)
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.num_embeddings):
            raise ValueError(
                f"index out of range for table of size {self.num_embeddings}"
            )
        if mode == TRAINING:
            self._cache = indices
        return self.table.value[indices]

    def backward(self, grad_out):
        np.add.at(self.table.grad, self._cache, grad_out)
        return None  # indices carry no gradient


class ReLU(Layer):

    def __init__(self):
        self._cache = None

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        if mode == TRAINING:
            self._cache = x > 0  # derivative at exactly 0 is 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._cache


class Sigmoid(Layer):

    def __init__(self):
        self._cache = None

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        # exp may overflow to inf for very negative inputs; 1/(1+inf) is the
        # correct limit 0, so the overflow warning is suppressed
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-x))
        if mode == TRAINING:
            self._cache = out
        return out

    def backward(self, grad_out):
        s = self._cache
        return grad_out * s * (1.0 - s)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p), inference is identity."""

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._cache = None

    def forward(self, x, mode=INFERENCE, rng=None):
        _check_mode(mode)
        if mode == INFERENCE or self.p == 0.0:
            if mode == TRAINING:
                self._cache = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        mask = mask.astype(x.dtype)
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        if self._cache is None:
            return grad_out
        return grad_out * self._cache


class Sequential(Layer):
    """Ordered layer composition with a chained backward pass."""

    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, mode=INFERENCE, rng=None):
        for layer in self.layers:
            x = layer.forward(x, mode=mode, rng=rng)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def state_dict(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.tensors().items():
                out[f"{i}.{name}"] = arr
        return out


def load_state(state_holder, state):
    """Copy a name -> array mapping into a live state_dict's arrays."""
    live = state_holder.state_dict()
    if set(live) != set(state):
        missing = set(live) ^ set(state)
        raise ValueError(f"state mismatch, differing keys: {sorted(missing)}")
    for name, arr in state.items():
        if live[name].shape != arr.shape:
            raise ValueError(
                f"shape mismatch for {name}: {live[name].shape} vs {arr.shape}"
            )
        live[name][...] = arr


def snapshot_state(state_holder):
    return {name: arr.copy() for name, arr in state_holder.state_dict().items()}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

BCE_CLIP = 1e-7


def loss_eval(prediction, target, kind):
    """Mean BCE or MSE; returns (scalar loss, gradient wrt prediction)."""
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    n = prediction.size
    if kind == "mse":
        diff = prediction - target
        return float(np.mean(diff ** 2)), (2.0 / n) * diff
    if kind == "bce":
        p = np.clip(prediction, BCE_CLIP, 1.0 - BCE_CLIP)
        loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
        inside = (prediction > BCE_CLIP) & (prediction < 1.0 - BCE_CLIP)
        grad = np.where(inside, (p - target) / (p * (1.0 - p) * n), 0.0)
        return float(loss), grad.astype(prediction.dtype)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking (float64 only)
# ---------------------------------------------------------------------------

FD_STEP = 1e-5


def numerical_gradient(f, x, step=FD_STEP):
    """Central-difference gradient of scalar f() wrt array x, mutated in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_gradcheck(forward, backward, inputs, params=()):
    """Check analytic vs numeric gradients of sum(R * forward()).

    forward: () -> output array (re-runs the op on the current inputs/params)
    backward: (grad_out) -> tuple of input gradients (params accumulate their own)
    inputs: arrays to check by perturbation (float64, mutated in place)
    params: Parameters whose .grad to check as well
    Returns the max relative error over all checked coordinates.
    """
    out = forward()
    rng = make_rng(0, "gradcheck-probe")
    probe = rng.standard_normal(out.shape)

    def scalar():
        return float(np.sum(forward() * probe))

    for p in params:
        p.zero_grad()
    forward()
    input_grads = backward(probe)
    if input_grads is None:
        input_grads = ()
    elif isinstance(input_grads, np.ndarray):
        input_grads = (input_grads,)

    worst = 0.0
    for x, g in zip(inputs, input_grads):
        worst = max(worst, max_relative_error(g, numerical_gradient(scalar, x)))
    for p in params:
        worst = max(worst, max_relative_error(p.grad, numerical_gradient(scalar, p.value)))
    return worst
