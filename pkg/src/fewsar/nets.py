"""Minimal numpy neural-net toolkit: layers with explicit backward passes.

Everything here is deliberately small and deterministic: float arrays in,
float arrays out, no hidden global state. Networks are built from layer
objects that implement ``forward(x, train)`` / ``backward(dout)`` and expose
their parameters as :class:`Param` objects, so optimizers, EMA updates,
checkpointing, and finite-difference checks all operate on plain ndarrays.
"""

from __future__ import annotations

import copy
import hashlib
import math

import numpy as np

from .errors import ShapeError


class Param:
    """A trainable array together with its gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    """Base layer. Subclasses override forward/backward and params/buffers."""

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def params(self):
        return []

    def buffers(self):
        """Non-trainable state arrays (e.g. normalization running stats)."""
        return []


# ---------------------------------------------------------------------------
# convolution plumbing


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return windows.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(dcols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dwin = dcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dwin[
                :, :, i, j
            ]
    return dxp[:, :, pad : pad + h, pad : pad + w]


class Conv2d(Layer):
    """3x3-style convolution via im2col. Input layout NCHW."""

    def __init__(self, in_ch, out_ch, ksize=3, stride=1, pad=1, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * ksize * ksize
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(out_ch, in_ch, ksize, ksize)).astype(dtype)
        self.w = Param(w, "conv.w")
        self.b = Param(np.zeros(out_ch, dtype=dtype), "conv.b")
        self.ksize = ksize
        self.stride = stride
        self.pad = pad
        self._cache = None

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.w.value.shape[1]:
            raise ShapeError(
                f"conv expects NCHW with {self.w.value.shape[1]} channels, got {x.shape}"
            )
        cols, oh, ow = _im2col(x, self.ksize, self.stride, self.pad)
        oc = self.w.value.shape[0]
        wm = self.w.value.reshape(oc, -1)
        out = np.matmul(wm, cols) + self.b.value[None, :, None]
        self._cache = (cols, x.shape)
        return out.reshape(x.shape[0], oc, oh, ow)

    def backward(self, dout):
        cols, x_shape = self._cache
        n, oc = dout.shape[0], dout.shape[1]
        dm = dout.reshape(n, oc, -1)
        self.b.grad += dout.sum(axis=(0, 2, 3))
        self.w.grad += np.matmul(dm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.w.value.shape
        )
        wm = self.w.value.reshape(oc, -1)
        dcols = np.matmul(wm.T, dm)
        return _col2im(dcols, x_shape, self.ksize, self.stride, self.pad)

    def params(self):
        return [self.w, self.b]


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; spatial dims must be even."""

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pool needs even spatial dims, got {x.shape}")
        xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = xr.reshape(n, c, h // 2, w // 2, 4)
        self._idx = np.argmax(flat, axis=-1)
        self._xshape = x.shape
        return np.take_along_axis(flat, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c, h, w = self._xshape
        dflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dflat, self._idx[..., None], dout[..., None], axis=-1)
        return (
            dflat.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )


class GlobalAvgPool(Layer):
    """Collapse NCHW feature maps to NC vectors."""

    def forward(self, x, train=False):
        self._xshape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._xshape
        return np.broadcast_to(dout[:, :, None, None], self._xshape) / (h * w)


class Flatten(Layer):
    def forward(self, x, train=False):
        self._xshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._xshape)


class Linear(Layer):
    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        std = math.sqrt(2.0 / in_dim)
        self.w = Param(rng.normal(0.0, std, size=(in_dim, out_dim)).astype(dtype), "linear.w")
        self.b = Param(np.zeros(out_dim, dtype=dtype), "linear.b")

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.w.value.shape[0]:
            raise ShapeError(
                f"linear expects (N, {self.w.value.shape[0]}), got {x.shape}"
            )
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dout):
        self.w.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        return dout @ self.w.value.T

    def params(self):
        return [self.w, self.b]


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, num_ch, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Param(np.ones(num_ch, dtype=dtype), "bn.gamma")
        self.beta = Param(np.zeros(num_ch, dtype=dtype), "bn.beta")
        self.running_mean = np.zeros(num_ch, dtype=dtype)
        self.running_var = np.ones(num_ch, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train=False):
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = (
                (1 - self.momentum) * self.running_mean + self.momentum * mean
            ).astype(x.dtype)
            self.running_var = (
                (1 - self.momentum) * self.running_var + self.momentum * var
            ).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, x.shape)
        return self.gamma.value[None, :, None, None] * xhat + self.beta.value[
            None, :, None, None
        ]

    def backward(self, dout):
        xhat, inv_std, shape = self._cache
        n, c, h, w = shape
        m = n * h * w
        dxhat = dout * self.gamma.value[None, :, None, None]
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
        dx = (
            inv_std[None, :, None, None]
            / m
            * (m * dxhat - sum_dxhat[None, :, None, None] - xhat * sum_dxhat_xhat[None, :, None, None])
        )
        return dx

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]


class Residual(Layer):
    """Basic residual block: main branch plus identity or projection shortcut."""

    def __init__(self, main, shortcut=None):
        self.main = main
        self.shortcut = shortcut
        self.relu = ReLU()

    def forward(self, x, train=False):
        y = self.main.forward(x, train)
        s = self.shortcut.forward(x, train) if self.shortcut is not None else x
        return self.relu.forward(y + s, train)

    def backward(self, dout):
        d = self.relu.backward(dout)
        dx_main = self.main.backward(d)
        if self.shortcut is not None:
            dx_short = self.shortcut.backward(d)
        else:
            dx_short = d
        return dx_main + dx_short

    def params(self):
        ps = list(self.main.params())
        if self.shortcut is not None:
            ps += self.shortcut.params()
        return ps

    def buffers(self):
        bs = list(self.main.buffers())
        if self.shortcut is not None:
            bs += self.shortcut.buffers()
        return bs


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def clone(self):
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_soft(logits, target_probs):
    """Mean cross-entropy against per-row probability targets.

    Returns ``(loss, dloss/dlogits)``; the gradient already includes the
    1/batch factor of the mean.
    """
    if logits.shape != target_probs.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {target_probs.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -(target_probs * logp).sum() / n
    dlogits = (softmax(logits) - target_probs) / n
    return loss, dlogits


# ---------------------------------------------------------------------------
# optimization


def cosine_lr(base_lr, step, total_steps):
    """Cosine decay from base_lr toward 0 over total_steps optimizer steps."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam with optional decoupled-from-schedule L2 weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# builders and state handling


def build_small_conv(channels, rng, in_ch=1, dtype=np.float32):
    """Conv/ReLU/pool stack ending in global average pooling.

    The last entry of ``channels`` is the output feature dimension. All but
    the final block downsample 2x, so an HxH input needs H divisible by
    2**(len(channels)-1).
    """
    layers = []
    prev = in_ch
    for i, ch in enumerate(channels):
        layers.append(Conv2d(prev, ch, rng=rng, dtype=dtype))
        layers.append(ReLU())
        if i < len(channels) - 1:
            layers.append(MaxPool2d())
        prev = ch
    layers.append(GlobalAvgPool())
    return Sequential(layers)


def _basic_block(in_ch, out_ch, stride, rng, dtype):
    main = Sequential(
        [
            Conv2d(in_ch, out_ch, stride=stride, rng=rng, dtype=dtype),
            BatchNorm2d(out_ch, dtype=dtype),
            ReLU(),
            Conv2d(out_ch, out_ch, rng=rng, dtype=dtype),
            BatchNorm2d(out_ch, dtype=dtype),
        ]
    )
    shortcut = None
    if stride != 1 or in_ch != out_ch:
        shortcut = Sequential(
            [
                Conv2d(in_ch, out_ch, ksize=1, stride=stride, pad=0, rng=rng, dtype=dtype),
                BatchNorm2d(out_ch, dtype=dtype),
            ]
        )
    return Residual(main, shortcut)


def build_resnet18(base_width, rng, in_ch=1, dtype=np.float32):
    """ResNet-18 layout (4 stages x 2 basic blocks) at configurable width.

    ``base_width=64`` reproduces the standard 512-dim output; smaller widths
    keep the same shape at desk scale.
    """
    w = base_width
    layers = [Conv2d(in_ch, w, rng=rng, dtype=dtype), BatchNorm2d(w, dtype=dtype), ReLU()]
    stage_widths = [w, 2 * w, 4 * w, 8 * w]
    prev = w
    for si, sw in enumerate(stage_widths):
        stride = 1 if si == 0 else 2
        layers.append(_basic_block(prev, sw, stride, rng, dtype))
        layers.append(_basic_block(sw, sw, 1, rng, dtype))
        prev = sw
    layers.append(GlobalAvgPool())
    return Sequential(layers)


def build_mlp(dims, rng, dtype=np.float32, final_activation=False):
    """Fully connected stack with ReLU between layers."""
    layers = []
    for i in range(len(dims) - 1):
        layers.append(Linear(dims[i], dims[i + 1], rng=rng, dtype=dtype))
        if i < len(dims) - 2 or final_activation:
            layers.append(ReLU())
    return Sequential(layers)


def state_arrays(net):
    """All state of a network (trainable params then buffers), in order."""
    return [p.value for p in net.params()] + list(net.buffers())


def parameter_checksum(net):
    h = hashlib.sha256()
    for arr in state_arrays(net):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def ema_update(target, online, momentum):
    """In-place EMA: target <- momentum * target + (1 - momentum) * online."""
    for t, o in zip(state_arrays(target), state_arrays(online)):
        t *= momentum
        t += (1.0 - momentum) * o
