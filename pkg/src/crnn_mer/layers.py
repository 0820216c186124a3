"""Layers with hand-derived backward passes.

Every layer keeps its trainable arrays in ``params`` and matching gradient
accumulators in ``grads``. ``forward`` stores what ``backward`` needs in a
cache that is consumed by the next ``backward`` call. Parameter arrays are
updated in place by the optimizer, so other objects may hold references to
them.

Shapes follow the channels-last convention used throughout the package:
feature maps are ``(batch, time, freq, channels)`` and sequences are
``(batch, time, features)``.
"""

from __future__ import annotations

import numpy as np

from .numerics import DTYPE, DimensionError, Rng, Tensor


class StateError(RuntimeError):
    """backward() called without a matching forward() in train mode."""


class ConfigError(ValueError):
    pass


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# Stateless forward maps


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with zero 'same' padding, plus bias.

    x: (B, T, F, C_in), kernel: (kh, kw, C_in, C_out), bias: (C_out,)
    """
    out, _ = _conv2d_forward(x, kernel, bias)
    return out


def _conv2d_forward(x, kernel, bias):
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[3] != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    B, T, F, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    out = np.zeros((B, T, F, c_out), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + T, j:j + F, :] @ kernel[i, j]
    out += bias
    return out, xp


def timedist_fc(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Linear map applied with the same weights at every time step."""
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(
            f"timedist_fc shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b


def maxout_head(x: Tensor, pieces: Tensor, b: Tensor) -> Tensor:
    """Max over K affine pieces. pieces: (K, D, O), b: (K, O) -> (B, L, O)."""
    out, _ = _maxout_forward(x, pieces, b)
    return out


def _maxout_forward(x, pieces, b):
    K, D, O = pieces.shape
    if K < 2:
        raise ConfigError(f"maxout needs at least 2 pieces, got {K}")
    if x.shape[-1] != D or b.shape != (K, O):
        raise DimensionError(
            f"maxout shape mismatch: x {x.shape}, pieces {pieces.shape}, b {b.shape}")
    # z: (..., K, O)
    z = np.einsum("bld,kdo->blko", x, pieces) + b
    idx = np.argmax(z, axis=2)
    out = np.take_along_axis(z, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def dropout(x: Tensor, rate: float, rng: Rng | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    _check_rate(rate)
    if not train or rate == 0.0:
        return x.copy()
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate)


def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")


# --------------------------------------------------------------------------
# Stateful layers


class Layer:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self._cache = None

    def _add_param(self, name, value):
        self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward() without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, kernel, bias):
        super().__init__()
        self._add_param("kernel", kernel)
        self._add_param("bias", bias)

    def forward(self, x, train=False):
        out, xp = _conv2d_forward(x, self.params["kernel"], self.params["bias"])
        self._cache = (xp, x.shape)
        return out

    def backward(self, grad_out):
        xp, shape = self._take_cache()
        k = self.params["kernel"]
        kh, kw = k.shape[:2]
        B, T, F, _ = shape
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + T, j:j + F, :]
                self.grads["kernel"][i, j] += np.tensordot(patch, grad_out, axes=([0, 1, 2], [0, 1, 2]))
                dxp[:, i:i + T, j:j + F, :] += grad_out @ k[i, j].T
        self.grads["bias"] += grad_out.sum(axis=(0, 1, 2))
        ph, pw = kh // 2, kw // 2
        return dxp[:, ph:ph + T, pw:pw + F, :]


class BatchNorm(Layer):
    """Normalisation over every axis except the last (channel) axis.

    Running statistics follow ``new = momentum * old + (1 - momentum) * batch``
    with the biased batch variance.
    """

    def __init__(self, channels, eps=1e-3, momentum=0.99):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self._add_param("gamma", np.ones(channels))
        self._add_param("beta", np.zeros(channels))
        self.buffers["moving_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["moving_variance"] = np.ones(channels, dtype=DTYPE)

    def forward(self, x, train=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            mean = self.buffers["moving_mean"]
            var = self.buffers["moving_variance"]
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta
        axes = tuple(range(x.ndim - 1))
        n = x.size // x.shape[-1]
        if n < 2:
            raise DimensionError(f"batchnorm in train mode needs >= 2 values per channel, got shape {x.shape}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        m = self.momentum
        self.buffers["moving_mean"][...] = m * self.buffers["moving_mean"] + (1 - m) * mean
        self.buffers["moving_variance"][...] = m * self.buffers["moving_variance"] + (1 - m) * var
        self._cache = (xhat, inv_std, n)
        return xhat * gamma + beta

    def backward(self, grad_out):
        xhat, inv_std, n = self._take_cache()
        axes = tuple(range(grad_out.ndim - 1))
        self.grads["gamma"] += (grad_out * xhat).sum(axis=axes)
        self.grads["beta"] += grad_out.sum(axis=axes)
        dxhat = grad_out * self.params["gamma"]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU(Layer):
    def forward(self, x, train=False):
        pos = x > 0
        if train:
            self._cache = pos
        return np.where(pos, x, 0.0)

    def backward(self, grad_out):
        return grad_out * self._take_cache()


class Dropout(Layer):
    """Inverted dropout. A fixed ``mask`` (of 0/1 keeps) may be injected for testing."""

    def __init__(self, rate, rng: Rng | None = None):
        super().__init__()
        _check_rate(rate)
        self.rate = rate
        self.rng = rng
        self.mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._cache = 1.0
            return x.copy()
        keep = self.mask if self.mask is not None else (self.rng.random(x.shape) >= self.rate)
        scale = keep / (1.0 - self.rate)
        self._cache = scale
        return x * scale

    def backward(self, grad_out):
        return grad_out * self._take_cache()


class TimeDistributedDense(Layer):
    def __init__(self, W, b):
        super().__init__()
        self._add_param("W", W)
        self._add_param("b", b)

    def forward(self, x, train=False):
        out = timedist_fc(x, self.params["W"], self.params["b"])
        self._cache = x
        return out

    def backward(self, grad_out):
        x = self._take_cache()
        D, U = self.params["W"].shape
        self.grads["W"] += x.reshape(-1, D).T @ grad_out.reshape(-1, U)
        self.grads["b"] += grad_out.reshape(-1, U).sum(axis=0)
        return grad_out @ self.params["W"].T


class GRU(Layer):
    """Unidirectional GRU with the reset gate applied before the recurrent product.

    Gates are packed in the order (update z, reset r, candidate) along the last
    axis of ``W`` (D, 3H), ``U`` (H, 3H) and ``b`` (3H,)::

        z  = sigmoid(x W_z + h U_z + b_z)
        r  = sigmoid(x W_r + h U_r + b_r)
        hc = tanh(x W_c + (r * h) U_c + b_c)
        h' = z * h + (1 - z) * hc

    The initial state is zero.
    """

    def __init__(self, W, U, b):
        super().__init__()
        self._add_param("W", W)
        self._add_param("U", U)
        self._add_param("b", b)
        self.units = U.shape[0]

    def forward(self, x, train=False):
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        B, L, D = x.shape
        H = self.units
        if W.shape[0] != D:
            raise DimensionError(f"GRU expects {W.shape[0]} input features, got {D}")
        xw = x @ W + b
        h = np.zeros((B, H), dtype=DTYPE)
        out = np.empty((B, L, H), dtype=DTYPE)
        steps = []
        for t in range(L):
            a = xw[:, t]
            hu = h @ U[:, :2 * H]
            z = sigmoid(a[:, :H] + hu[:, :H])
            r = sigmoid(a[:, H:2 * H] + hu[:, H:])
            rh = r * h
            hc = np.tanh(a[:, 2 * H:] + rh @ U[:, 2 * H:])
            steps.append((h, z, r, rh, hc))
            h = z * h + (1.0 - z) * hc
            out[:, t] = h
        self._cache = (x, steps)
        return out

    def backward(self, grad_out):
        x, steps = self._take_cache()
        W, U = self.params["W"], self.params["U"]
        B, L, D = x.shape
        H = self.units
        dx = np.empty_like(x)
        dW, dU, db = self.grads["W"], self.grads["U"], self.grads["b"]
        dh_next = np.zeros((B, H), dtype=DTYPE)
        for t in reversed(range(L)):
            h_prev, z, r, rh, hc = steps[t]
            dh = grad_out[:, t] + dh_next
            da_c = dh * (1.0 - z) * (1.0 - hc * hc)
            da_z = dh * (h_prev - hc) * z * (1.0 - z)
            drh = da_c @ U[:, 2 * H:].T
            da_r = drh * h_prev * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=1)
            dh_next = dh * z + drh * r + da_zr @ U[:, :2 * H].T
            dU[:, :2 * H] += h_prev.T @ da_zr
            dU[:, 2 * H:] += rh.T @ da_c
            da = np.concatenate([da_zr, da_c], axis=1)
            dW += x[:, t].T @ da
            db += da.sum(axis=0)
            dx[:, t] = da @ W.T
        return dx


class BiGRU(Layer):
    """Forward GRU and a GRU over the time-reversed input; outputs concatenated
    per step, forward half first."""

    def __init__(self, fwd: GRU, bwd: GRU):
        super().__init__()
        self.fwd, self.bwd = fwd, bwd
        for prefix, cell in (("fwd_", fwd), ("bwd_", bwd)):
            for k in cell.params:
                self.params[prefix + k] = cell.params[k]
                self.grads[prefix + k] = cell.grads[k]

    def forward(self, x, train=False):
        hf = self.fwd.forward(x, train)
        hb = self.bwd.forward(x[:, ::-1], train)[:, ::-1]
        self._cache = hf.shape[-1]
        return np.concatenate([hf, hb], axis=-1)

    def backward(self, grad_out):
        H = self._take_cache()
        dxf = self.fwd.backward(grad_out[..., :H])
        dxb = self.bwd.backward(np.ascontiguousarray(grad_out[:, ::-1, H:]))
        return dxf + dxb[:, ::-1]


def gru_bidirectional(x: Tensor, fwd_params: dict, bwd_params: dict) -> Tensor:
    """Stateless bidirectional GRU; each params dict holds W, U, b."""
    layer = BiGRU(GRU(**fwd_params), GRU(**bwd_params))
    return layer.forward(x)


class Maxout(Layer):
    def __init__(self, pieces, b):
        super().__init__()
        self._add_param("pieces", pieces)
        self._add_param("b", b)

    def forward(self, x, train=False):
        out, idx = _maxout_forward(x, self.params["pieces"], self.params["b"])
        self._cache = (x, idx)
        return out

    def backward(self, grad_out):
        x, idx = self._take_cache()
        pieces = self.params["pieces"]
        K = pieces.shape[0]
        # Route the gradient to the winning piece only.
        onehot = (idx[:, :, None, :] == np.arange(K)[None, None, :, None])
        g = onehot * grad_out[:, :, None, :]
        self.grads["pieces"] += np.einsum("bld,blko->kdo", x, g)
        self.grads["b"] += g.sum(axis=(0, 1))
        return np.einsum("blko,kdo->bld", g, pieces)
