"""Differentiable layers with hand-derived backward passes.

Everything runs in float64 on plain numpy arrays. Each layer caches what its
backward pass needs during a train-mode forward; backward accumulates into
preallocated grad buffers (so several backward calls add up until
`zero_grad`). There is no autodiff tape: the layer set is small and each
gradient is checked against finite differences in the test suite.

Shape conventions: dense layers take (N, F); convolutional layers take
(N, C, H, W).
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError
from .validation import check_finite


class Layer:
    """Base class: parameter/grad dicts plus the forward/backward protocol."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _register(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def param_items(self):
        """Yield (name, param, grad) triples; shapes always match pairwise."""
        for name, p in self.params.items():
            yield name, p, self.grads[name]

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a "
                               "prior train-mode forward")
        return self._cache


def init_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. N(0, std^2) tensor; the standard weight initializer here."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.standard_normal(shape) * std


class Dense(Layer):
    """Fully-connected layer: y = x @ w + b, x of shape (N, n_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 w_std: float | None = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        std = w_std if w_std is not None else np.sqrt(2.0 / n_in)
        self._register("w", init_normal((n_in, n_out), std, rng))
        self._register("b", np.zeros(n_out))

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"Dense expects (N,{self.n_in}), got {x.shape}")
        y = x @ self.params["w"] + self.params["b"]
        if train:
            self._cache = x
        return y

    def backward(self, grad_out):
        x = self._need_cache()
        self.grads["w"] += x.T @ grad_out
        self.grads["b"] += grad_out.sum(axis=0)
        return grad_out @ self.params["w"].T


class ReLU(Layer):
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""

    def forward(self, x, train=False):
        if train:
            self._cache = x > 0.0
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        mask = self._need_cache()
        return grad_out * mask


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N, 9*C, H*W) patch tensor for a 3x3 window, zero padded.

    Row order is offset-major, channel-minor: row (k, c) holds channel c
    shifted by the k-th kernel offset. Everything stays NCHW-contiguous.
    """
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:h + 1, 1:w + 1] = x
    cols = np.empty((n, 9, c, h, w))
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, k] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(n, 9 * c, h * w)




class Conv2d(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 w_std: float | None = None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        std = w_std if w_std is not None else np.sqrt(2.0 / (c_in * 9))
        self._register("w", init_normal((c_in * 9, c_out), std, rng))
        self._register("b", np.zeros(c_out))

    # below this many spatial positions a single flat GEMM beats the batched
    # per-sample GEMMs (which pay per-matrix dispatch overhead)
    _FLAT_HW = 256

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"Conv2d expects (N,{self.c_in},H,W), got {x.shape}")
        n, _, h, w = x.shape
        cols = _im2col3(x)
        if h * w <= self._FLAT_HW:
            flat = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(
                n * h * w, 9 * self.c_in)
            y = (flat @ self.params["w"] + self.params["b"]).reshape(
                n, h * w, self.c_out).transpose(0, 2, 1)
            y = np.ascontiguousarray(y)
            cache_cols = flat
        else:
            # batched GEMM: (c_out, 9c) @ (n, 9c, hw) -> (n, c_out, hw)
            y = np.matmul(self.params["w"].T, cols)
            y += self.params["b"][:, None]
            cache_cols = cols
        if train:
            self._cache = (cache_cols, x.shape)
        return y.reshape(n, self.c_out, h, w)

    def backward(self, grad_out):
        cols, (n, c, h, w) = self._need_cache()
        # input gradient == convolution of grad_out with flipped, transposed
        # kernels (zero padding matches the forward pass)
        w3 = self.params["w"].reshape(9, self.c_in, self.c_out)
        w_t = np.ascontiguousarray(
            w3[::-1].transpose(1, 0, 2)).reshape(self.c_in, 9 * self.c_out)
        gcols = _im2col3(grad_out)
        if h * w <= self._FLAT_HW:
            g = np.ascontiguousarray(
                grad_out.reshape(n, self.c_out, h * w).transpose(0, 2, 1)
            ).reshape(n * h * w, self.c_out)
            self.grads["w"] += cols.T @ g
            self.grads["b"] += g.sum(axis=0)
            gflat = np.ascontiguousarray(gcols.transpose(0, 2, 1)).reshape(
                n * h * w, 9 * self.c_out)
            g_in = (gflat @ w_t.T).reshape(n, h * w, self.c_in).transpose(0, 2, 1)
            return np.ascontiguousarray(g_in).reshape(n, self.c_in, h, w)
        g = grad_out.reshape(n, self.c_out, h * w)
        self.grads["w"] += np.matmul(cols, g.transpose(0, 2, 1)).sum(axis=0)
        self.grads["b"] += g.sum(axis=(0, 2))
        return np.matmul(w_t, gcols).reshape(n, self.c_in, h, w)


class BatchNorm(Layer):
    """Batch normalization over rows of an (N, F) matrix.

    Training mode normalizes with batch statistics and updates running
    stats with momentum; eval mode uses the running stats only, making it a
    pure function of (params, running stats, input).
    """

    def __init__(self, n_features: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.n_features = n_features
        self.momentum = momentum
        self.eps = eps
        self._register("gamma", np.ones(n_features))
        self._register("beta", np.zeros(n_features))
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"BatchNorm expects (N,{self.n_features}), got {x.shape}")
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        if train:
            self._cache = (x_hat, inv_std)
        return x_hat * self.params["gamma"] + self.params["beta"]

    def backward(self, grad_out):
        x_hat, inv_std = self._need_cache()
        n = x_hat.shape[0]
        self.grads["gamma"] += (grad_out * x_hat).sum(axis=0)
        self.grads["beta"] += grad_out.sum(axis=0)
        g = grad_out * self.params["gamma"]
        return (inv_std / n) * (n * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0))


class GroupNorm(Layer):
    """Group normalization over (N, C, H, W); stats per (sample, group)."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        if channels % groups != 0:
            raise ValueError(f"channels={channels} not divisible by groups={groups}")
        self.channels, self.groups, self.eps = channels, groups, eps
        self._register("gamma", np.ones(channels))
        self._register("beta", np.zeros(channels))

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"GroupNorm expects (N,{self.channels},H,W), got {x.shape}")
        n, c, h, w = x.shape
        xg = x.reshape(n, self.groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = ((xg - mean) * inv_std).reshape(n, c, h, w)
        if train:
            self._cache = (x_hat, inv_std, x.shape)
        return x_hat * self.params["gamma"][:, None, None] + self.params["beta"][:, None, None]

    def backward(self, grad_out):
        x_hat, inv_std, (n, c, h, w) = self._need_cache()
        self.grads["gamma"] += (grad_out * x_hat).sum(axis=(0, 2, 3))
        self.grads["beta"] += grad_out.sum(axis=(0, 2, 3))
        g = (grad_out * self.params["gamma"][:, None, None]).reshape(n, self.groups, -1)
        xh = x_hat.reshape(n, self.groups, -1)
        m = g.shape[2]
        gx = (inv_std / m) * (m * g - g.sum(axis=2, keepdims=True)
                              - xh * (g * xh).sum(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w)


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear resampling matrix (n_out, n_in); rows are convex weights."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        i0c = min(max(i0, 0), n_in - 1)
        i1c = min(max(i0 + 1, 0), n_in - 1)
        m[o, i0c] += 1.0 - frac
        m[o, i1c] += frac
    return m


class BilinearResize(Layer):
    """Bilinear spatial resampling of (N, C, H, W) to a fixed output size.

    A linear map with convex row weights, so constants are preserved exactly.
    """

    def __init__(self, in_hw: tuple[int, int], out_hw: tuple[int, int]):
        super().__init__()
        self.in_hw, self.out_hw = tuple(in_hw), tuple(out_hw)
        self._rh = _resize_matrix(in_hw[0], out_hw[0])
        self._rw = _resize_matrix(in_hw[1], out_hw[1])

    @staticmethod
    def _apply(x: np.ndarray, rh: np.ndarray, rw: np.ndarray) -> np.ndarray:
        """y[n,c] = rh @ x[n,c] @ rw.T via two flat GEMMs (BLAS-friendly)."""
        n, c, h, w = x.shape
        ho, wo = rh.shape[0], rw.shape[0]
        cols = x.reshape(n * c * h, w) @ rw.T                    # (n*c*h, wo)
        cols = np.ascontiguousarray(
            cols.reshape(n * c, h, wo).transpose(0, 2, 1))        # (n*c, wo, h)
        rows = cols.reshape(n * c * wo, h) @ rh.T                 # (n*c*wo, ho)
        return np.ascontiguousarray(
            rows.reshape(n, c, wo, ho).transpose(0, 1, 3, 2))     # (n, c, ho, wo)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[2:] != self.in_hw:
            raise ValueError(f"BilinearResize expects (N,C,{self.in_hw[0]},{self.in_hw[1]}), "
                             f"got {x.shape}")
        if train:
            self._cache = x.shape
        return self._apply(x, self._rh, self._rw)

    def backward(self, grad_out):
        self._need_cache()
        # adjoint of a linear map: apply the transposed matrices
        return self._apply(grad_out, self._rh.T, self._rw.T)


class Embedding(Layer):
    """Lookup table: integer ids (N,) -> rows (N, dim)."""

    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.n_rows, self.dim = n_rows, dim
        self._register("table", init_normal((n_rows, dim), std, rng))

    def forward(self, ids, train=False):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.n_rows:
            raise ValueError(f"embedding id out of range [0, {self.n_rows})")
        if train:
            self._cache = ids
        return self.params["table"][ids]

    def backward(self, grad_out):
        ids = self._need_cache()
        np.add.at(self.grads["table"], ids, grad_out)
        return None  # integer inputs carry no gradient


class SinusoidalTimeEmbed(Layer):
    """Classic sin/cos positional features of a timestep index; no parameters."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dim must be even")
        self.dim = dim
        half = dim // 2
        self._freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))

    def forward(self, t, train=False):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        ang = t[:, None] * self._freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def backward(self, grad_out):
        return None  # timestep indices are not differentiated


class Sequential(Layer):
    """Chain of layers run in order; backward runs the chain in reverse."""

    def __init__(self, named_layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = [layer for _, layer in named_layers]
        self.names = [name for name, _ in named_layers]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        check_finite(x, "sequential output")
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def param_items(self):
        for name, layer in zip(self.names, self.layers):
            for pname, p, g in layer.param_items():
                yield f"{name}.{pname}", p, g


def collect_adam_params(*models) -> list[tuple[np.ndarray, np.ndarray]]:
    """Flatten (param, grad) array pairs from layers/models for the optimizer."""
    pairs = []
    for model in models:
        for _, p, g in model.param_items():
            pairs.append((p, g))
    return pairs
