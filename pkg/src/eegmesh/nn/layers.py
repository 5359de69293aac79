"""Layers with explicit forward/backward passes.

Every layer caches what it needs during ``forward`` and consumes it in
``backward``, which returns the gradient with respect to the layer input and
accumulates parameter gradients into each :class:`Tensor`'s ``grad``.
Activations are channels-last: ``[batch, time, rows, cols, channels]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeMismatch, Tensor

BN_EPS = 1e-5


class BatchTooSmall(ValueError):
    pass


class InvalidRate(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


def _uniform(rng: np.random.Generator, shape, limit: float) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _colsum(x2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array via a BLAS matrix-vector product."""
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


class Layer:
    kind = "layer"

    def params(self) -> list[Tensor]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def astype(self, dtype) -> None:
        for p in self.params():
            p.astype(dtype)

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {}


class TimeDistConv3x3(Layer):
    """3x3 "same" convolution applied with shared weights at every time step."""

    kind = "TimeDistConv3x3"
    chunk_frames = 256

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.in_channels, self.out_channels = in_channels, out_channels
        limit = np.sqrt(3.0 / (9 * in_channels))
        self.weight = Tensor(_uniform(rng, (3, 3, in_channels, out_channels), limit), "weight")
        self.bias = Tensor(np.zeros(out_channels, np.float32), "bias")
        self._xp = None

    def params(self):
        return [self.weight, self.bias]

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels}

    def output_shape(self, shape):
        return shape[:-1] + (self.out_channels,)

    @staticmethod
    def _cols(xp: np.ndarray) -> np.ndarray:
        # [F, H+2, W+2, C] -> [F*H*W, 9*C] ordered (di, dj, c)
        win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [F, H, W, C, 3, 3]
        f, h, w, c = win.shape[:4]
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(f * h * w, 9 * c)

    def forward(self, x, training):
        if x.ndim != 5 or x.shape[-1] != self.in_channels:
            raise ShapeMismatch(f"conv expects [B, T, H, W, {self.in_channels}], got {x.shape}")
        b, t, h, w, c = x.shape
        frames = x.reshape(b * t, h, w, c)
        xp = np.pad(frames, ((0, 0), (1, 1), (1, 1), (0, 0)))
        kernel = self.weight.data.reshape(9 * c, self.out_channels)
        out = np.empty((b * t, h, w, self.out_channels), dtype=x.dtype)
        for s in range(0, b * t, self.chunk_frames):
            cols = self._cols(xp[s : s + self.chunk_frames])
            out[s : s + self.chunk_frames] = (cols @ kernel).reshape(-1, h, w, self.out_channels)
        out += self.bias.data
        self._xp = xp
        self._shape = x.shape
        return out.reshape(b, t, h, w, self.out_channels)

    def backward(self, grad):
        b, t, h, w, c = self._shape
        xp = self._xp
        g = grad.reshape(b * t, h, w, self.out_channels)
        kernel = self.weight.data.reshape(9 * c, self.out_channels)
        dkernel = np.zeros_like(kernel)
        dxp = np.zeros_like(xp)
        for s in range(0, b * t, self.chunk_frames):
            gs = g[s : s + self.chunk_frames].reshape(-1, self.out_channels)
            cols = self._cols(xp[s : s + self.chunk_frames])
            dkernel += cols.T @ gs
            block = dxp[s : s + self.chunk_frames]
            for di in range(3):
                for dj in range(3):
                    part = gs @ self.weight.data[di, dj].T
                    block[:, di : di + h, dj : dj + w, :] += part.reshape(-1, h, w, c)
        self.weight.grad += dkernel.reshape(self.weight.shape)
        self.bias.grad += _colsum(g.reshape(-1, self.out_channels))
        self._xp = None
        return dxp[:, 1:-1, 1:-1, :].reshape(b, t, h, w, c)


class BatchNorm(Layer):
    """Normalises the last axis using statistics over all other axes."""

    kind = "BatchNorm"

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = BN_EPS):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels, np.float32), "gamma")
        self.beta = Tensor(np.zeros(channels, np.float32), "beta")
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self, name, np.asarray(value, dtype=self.gamma.data.dtype).copy())

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def config(self):
        return {"channels": self.channels, "momentum": self.momentum}

    def forward(self, x, training):
        if x.shape[-1] != self.channels:
            raise ShapeMismatch(f"batch norm over {self.channels} channels, got {x.shape}")
        x2 = x.reshape(-1, self.channels)
        n = x2.shape[0]
        if training:
            if x.shape[0] < 2:
                raise BatchTooSmall("batch normalisation needs at least 2 examples in training mode")
            mean = _colsum(x2) / n
            centered = x2 - mean
            var = _colsum(centered * centered) / n
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype)
            unbiased = var * n / max(n - 1, 1)
            self.running_var = (m * self.running_var + (1 - m) * unbiased).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
            centered = x2 - mean
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = centered * inv_std
        self._cache = (xhat, inv_std, training)
        return (xhat * self.gamma.data + self.beta.data).reshape(x.shape)

    def backward(self, grad):
        xhat, inv_std, training = self._cache
        g2 = grad.reshape(-1, self.channels)
        self.gamma.grad += _colsum(g2 * xhat)
        self.beta.grad += _colsum(g2)
        dxhat = g2 * self.gamma.data
        self._cache = None
        if not training:
            return (dxhat * inv_std).reshape(grad.shape)
        n = g2.shape[0]
        sum_d = _colsum(dxhat)
        sum_dx = _colsum(dxhat * xhat)
        return ((inv_std / n) * (n * dxhat - sum_d - xhat * sum_dx)).reshape(grad.shape)


class ELU(Layer):
    kind = "ELU"

    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha

    def config(self):
        return {"alpha": self.alpha}

    def forward(self, x, training):
        neg = self.alpha * np.expm1(np.minimum(x, 0))
        y = np.where(x > 0, x, neg)
        self._cache = (x > 0, neg)
        return y

    def backward(self, grad):
        pos, neg = self._cache
        self._cache = None
        return grad * np.where(pos, 1.0, neg + self.alpha).astype(grad.dtype)


class TimeDistFlatten(Layer):
    kind = "TimeDistFlatten"

    def output_shape(self, shape):
        return shape[:2] + (int(np.prod(shape[2:])),)

    def forward(self, x, training):
        self._shape = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    """Affine map over the last axis, applied independently per leading index."""

    kind = "Dense"

    def __init__(self, in_features: int, units: int, rng: np.random.Generator):
        self.in_features, self.units = in_features, units
        limit = np.sqrt(3.0 / in_features)
        self.weight = Tensor(_uniform(rng, (in_features, units), limit), "weight")
        self.bias = Tensor(np.zeros(units, np.float32), "bias")

    def params(self):
        return [self.weight, self.bias]

    def config(self):
        return {"in_features": self.in_features, "units": self.units}

    def output_shape(self, shape):
        return shape[:-1] + (self.units,)

    def forward(self, x, training):
        if x.shape[-1] != self.in_features:
            raise ShapeMismatch(f"dense expects trailing dim {self.in_features}, got {x.shape}")
        self._x = x
        y = x.reshape(-1, self.in_features) @ self.weight.data + self.bias.data
        return y.reshape(x.shape[:-1] + (self.units,))

    def backward(self, grad):
        self._shape = self._x.shape
        x2 = self._x.reshape(-1, self.in_features)
        g2 = grad.reshape(-1, self.units)
        self.weight.grad += x2.T @ g2
        self.bias.grad += _colsum(g2)
        self._x = None
        return (g2 @ self.weight.data.T).reshape(self._shape)


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0 <= rate < 1:
            raise InvalidRate(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def config(self):
        return {"rate": self.rate}

    def forward(self, x, training):
        if not training or self.rate == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape, dtype=np.float64) >= self.rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class BiLSTM(Layer):
    """Bidirectional LSTM returning the concatenated final hidden states.

    Gates are ordered (input, forget, cell, output); the two directions have
    independent parameters.
    """

    kind = "BiLSTM"

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        self.in_features, self.hidden = in_features, hidden
        self.directions = []
        limit = np.sqrt(1.0 / hidden)
        for tag in ("fwd", "bwd"):
            wx = Tensor(_uniform(rng, (in_features, 4 * hidden), limit), f"{tag}_wx")
            wh = Tensor(_uniform(rng, (hidden, 4 * hidden), limit), f"{tag}_wh")
            b = np.zeros(4 * hidden, np.float32)
            b[hidden : 2 * hidden] = forget_bias
            self.directions.append((wx, wh, Tensor(b, f"{tag}_b")))

    def params(self):
        return [p for d in self.directions for p in d]

    def config(self):
        return {"in_features": self.in_features, "hidden": self.hidden}

    def output_shape(self, shape):
        return (shape[0], 2 * self.hidden)

    def _run(self, xs, wx, wh, b):
        bsz, steps, _ = xs.shape
        hd = self.hidden
        z_in = (xs.reshape(-1, self.in_features) @ wx.data + b.data).reshape(bsz, steps, 4 * hd)
        h = np.zeros((bsz, hd), xs.dtype)
        c = np.zeros((bsz, hd), xs.dtype)
        tape = []
        for t in range(steps):
            z = z_in[:, t] + h @ wh.data
            i = _sigmoid(z[:, :hd])
            f = _sigmoid(z[:, hd : 2 * hd])
            g = np.tanh(z[:, 2 * hd : 3 * hd])
            o = _sigmoid(z[:, 3 * hd :])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            tape.append((i, f, g, o, c_prev, tc, h_prev))
        return h, tape

    def forward(self, x, training):
        if x.ndim != 3 or x.shape[-1] != self.in_features or x.shape[1] < 1:
            raise ShapeMismatch(f"BiLSTM expects [B, T>=1, {self.in_features}], got {x.shape}")
        self._x = x
        outs, self._tapes = [], []
        for k, (wx, wh, b) in enumerate(self.directions):
            xs = x if k == 0 else np.ascontiguousarray(x[:, ::-1])
            h, tape = self._run(xs, wx, wh, b)
            outs.append(h)
            self._tapes.append(tape)
        return np.concatenate(outs, axis=1)

    def backward(self, grad):
        x = self._x
        hd = self.hidden
        dx = np.zeros_like(x)
        for k, (wx, wh, b) in enumerate(self.directions):
            tape = self._tapes[k]
            xs = x if k == 0 else np.ascontiguousarray(x[:, ::-1])
            dh = grad[:, k * hd : (k + 1) * hd]
            dc = np.zeros_like(dh)
            dz_all = np.empty(xs.shape[:2] + (4 * hd,), dtype=x.dtype)
            for t in range(len(tape) - 1, -1, -1):
                i, f, g, o, c_prev, tc, h_prev = tape[t]
                dc = dc + dh * o * (1 - tc * tc)
                dz = np.concatenate(
                    [
                        dc * g * i * (1 - i),
                        dc * c_prev * f * (1 - f),
                        dc * i * (1 - g * g),
                        dh * tc * o * (1 - o),
                    ],
                    axis=1,
                )
                dz_all[:, t] = dz
                wh.grad += h_prev.T @ dz
                dh = dz @ wh.data.T
                dc = dc * f
            wx.grad += xs.reshape(-1, self.in_features).T @ dz_all.reshape(-1, 4 * hd)
            b.grad += dz_all.sum(axis=(0, 1))
            dxs = (dz_all.reshape(-1, 4 * hd) @ wx.data.T).reshape(x.shape)
            dx += dxs if k == 0 else dxs[:, ::-1]
        self._x = self._tapes = None
        return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.shape != (bsz,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise LabelOutOfRange(f"labels must be {bsz} indices in 0..{k - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(bsz)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1
    return loss, grad / bsz
