"""Small NHWC tensor engine: the layers of the Conv-StandardPost network,
focal loss and Adam, with hand-written reverse-mode gradients.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Tensor.grad`` during ``backward``.
Data layout is (batch, height=frequency, width=time, channels).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    """Array plus an optional gradient buffer of the same shape."""

    def __init__(self, data, requires_grad: bool = True):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def __init__(self):
        self._cache = None

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train=train, rng=rng)


# -- functional forward ops --------------------------------------------------

def _padded_grid(x: np.ndarray, kh: int, kw: int):
    """Zero-pad x to (B, H+kh-1, W+kw-1, C) and flatten it to rows, with enough trailing zero
    rows that every tap shift is a contiguous row window ``buf[off:off + rows]``."""
    b, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    hp, wp = h + 2 * ph, w + 2 * pw
    rows = b * hp * wp
    buf = np.zeros((rows + (kh - 1) * wp + kw - 1, c), dtype=x.dtype)
    buf[:rows].reshape(b, hp, wp, c)[:, ph:ph + h, pw:pw + w] = x
    offsets = [dh * wp + dw for dh in range(kh) for dw in range(kw)]
    return buf, rows, offsets, (b, hp, wp)


IM2COL_ROWS = 4096  # rows per im2col chunk: big enough for BLAS, small enough for cache


def _im2col_chunks(buf, rows, offsets):
    """Yield (start, stop, cols) with cols[i] = concat_t buf[start + i + off_t]."""
    c = buf.shape[1]
    cols = np.empty((min(rows, IM2COL_ROWS), len(offsets), c), dtype=buf.dtype)
    for s in range(0, rows, IM2COL_ROWS):
        e = min(rows, s + IM2COL_ROWS)
        for j, o in enumerate(offsets):
            cols[:e - s, j] = buf[s + o:e + o]
        yield s, e, cols[:e - s].reshape(e - s, -1)


def _conv_grid(buf, rows, offsets, kernel):
    kh, kw, cin, cout = kernel.shape
    taps = kernel.reshape(kh * kw * cin, cout)
    out = np.empty((rows, cout), dtype=np.result_type(buf, kernel))
    for s, e, cols in _im2col_chunks(buf, rows, offsets):
        np.matmul(cols, taps, out=out[s:e])
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None, _grid=None) -> np.ndarray:
    """Stride-1 'same' convolution. x: (B, H, W, Cin), kernel: (kh, kw, Cin, Cout).

    Output row r of the padded grid is sum_t buf[r + off_t] @ K_t; the valid outputs are the
    top-left (H, W) corner of each padded image.
    """
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("only odd kernel sizes are supported")
    kernel = kernel.astype(np.result_type(x, kernel), copy=False)
    b, h, w, _ = x.shape
    if kh == 1 and kw == 1:
        out = x @ kernel[0, 0]
    else:
        buf, rows, offsets, (_, hp, wp) = _grid or _padded_grid(x.astype(kernel.dtype, copy=False), kh, kw)
        out = np.ascontiguousarray(
            _conv_grid(buf, rows, offsets, kernel).reshape(b, hp, wp, cout)[:, :h, :w])
    if bias is not None:
        out += bias
    return out


def maxpool2d(x: np.ndarray, pool=(1, 10)) -> np.ndarray:
    return MaxPool2d(pool).forward(x)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- layers -------------------------------------------------------------------

class Conv2d(Layer):
    def __init__(self, cin, cout, k, rng, dtype=np.float32):
        super().__init__()
        self.kernel = Tensor(glorot_uniform(rng, (k, k, cin, cout), k * k * cin, k * k * cout, dtype))
        self.bias = Tensor(np.zeros(cout, dtype=dtype))

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def forward(self, x, train=False, rng=None):
        kh, kw = self.kernel.shape[:2]
        if x.shape[-1] != self.kernel.shape[2] or kh * kw == 1:
            self._cache = (x, None)
            return conv2d(x, self.kernel.data, self.bias.data)
        grid = _padded_grid(np.asarray(x, dtype=np.result_type(x, self.kernel.data)), kh, kw)
        self._cache = (x, grid)
        return conv2d(x, self.kernel.data, self.bias.data, _grid=grid)

    def backward(self, dout):
        x, grid = self._need_cache()
        k = self.kernel.data
        kh, kw, cin, cout = k.shape
        self.bias.grad += dout.sum(axis=(0, 1, 2))
        if kh == 1 and kw == 1:
            self.kernel.grad[0, 0] += x.reshape(-1, cin).T @ dout.reshape(-1, cout)
            return dout @ k[0, 0].T
        buf, rows, offsets, (b, hp, wp) = grid
        h, w = x.shape[1:3]
        dgrid = np.zeros((rows, cout), dtype=dout.dtype)
        dgrid.reshape(b, hp, wp, cout)[:, :h, :w] = dout
        dk = np.zeros((kh * kw * cin, cout), dtype=dgrid.dtype)
        for s, e, cols in _im2col_chunks(buf, rows, offsets):
            dk += cols.T @ dgrid[s:e]
        self.kernel.grad += dk.reshape(k.shape)
        # input gradient: correlation with the spatially flipped, channel-transposed kernel
        return conv2d(dout, k[::-1, ::-1].transpose(0, 1, 3, 2))


class BatchNorm(Layer):
    """Per-channel batch normalization over (batch, height, width)."""

    def __init__(self, c, dtype=np.float32, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        self.gamma = Tensor(np.ones(c, dtype=dtype))
        self.beta = Tensor(np.zeros(c, dtype=dtype))
        self.running_mean = None
        self.running_var = None
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        if self.running_mean is None:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @property
    def initialized(self):
        return self.running_mean is not None

    def set_running(self, mean, var):
        var = np.asarray(var, dtype=self.gamma.data.dtype)
        if np.any(var <= 0):
            raise StateError("running variance must be positive")
        self.running_mean = np.asarray(mean, dtype=self.gamma.data.dtype).copy()
        self.running_var = var.copy()

    def forward(self, x, train=False, rng=None):
        c = self.gamma.shape[0]
        if x.shape[-1] != c:
            raise ShapeError(f"batchnorm expects {c} channels, got {x.shape[-1]}")
        if train:
            flat = x.reshape(-1, c)
            mu = flat.mean(axis=0)
            xc = x - mu
            var = np.square(xc).reshape(-1, c).mean(axis=0)
            if self.running_mean is None:
                self.set_running(np.zeros(c), np.ones(c))
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype)
        else:
            if not self.initialized:
                raise StateError("batchnorm used in inference before running statistics exist")
            mu, var = self.running_mean, self.running_var
            xc = x - mu
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype, copy=False)
        xhat = np.multiply(xc, inv, out=xc)
        self._cache = (train, xhat, inv)
        out = xhat * self.gamma.data
        out += self.beta.data
        return out

    def backward(self, dout):
        train, xhat, inv = self._need_cache()
        c = xhat.shape[-1]
        dbeta = dout.reshape(-1, c).sum(axis=0)
        dgamma = np.einsum("ij,ij->j", dout.reshape(-1, c), xhat.reshape(-1, c))
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        scale = self.gamma.data * inv
        if not train:
            return dout * scale
        # dx = gamma * inv / n * (n * dout - sum(dout) - xhat * sum(dout * xhat))
        n = xhat.size // c
        dx = xhat * (-dgamma / n)
        dx += dout
        dx -= dbeta / n
        dx *= scale
        return dx


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * self._need_cache()


class SqueezeExcite(Layer):
    def __init__(self, c, ratio, rng, dtype=np.float32):
        super().__init__()
        if c % ratio:
            raise ShapeError(f"SE ratio {ratio} does not divide {c} channels")
        hid = c // ratio
        self.w1 = Tensor(glorot_uniform(rng, (c, hid), c, hid, dtype))
        self.b1 = Tensor(np.zeros(hid, dtype=dtype))
        self.w2 = Tensor(glorot_uniform(rng, (hid, c), hid, c, dtype))
        self.b2 = Tensor(np.zeros(c, dtype=dtype))

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x, train=False, rng=None):
        z = x.mean(axis=(1, 2))
        a = z @ self.w1.data + self.b1.data
        hmask = a > 0
        hid = np.where(hmask, a, 0)
        s = sigmoid(hid @ self.w2.data + self.b2.data).astype(x.dtype, copy=False)
        self._cache = (x, z, hid, hmask, s)
        return x * s[:, None, None, :]

    def backward(self, dout):
        x, z, hid, hmask, s = self._need_cache()
        dx = dout * s[:, None, None, :]
        ds = (dout * x).sum(axis=(1, 2))
        dpre2 = ds * s * (1 - s)
        self.w2.grad += hid.T @ dpre2
        self.b2.grad += dpre2.sum(axis=0)
        da = np.where(hmask, dpre2 @ self.w2.data.T, 0)
        self.w1.grad += z.T @ da
        self.b1.grad += da.sum(axis=0)
        dz = da @ self.w1.data.T
        hw = x.shape[1] * x.shape[2]
        return dx + (dz / hw)[:, None, None, :]


class ConvStandardPost(Layer):
    """conv-BN-ReLU-conv-BN, plus shortcut, ReLU, then squeeze-excitation."""

    def __init__(self, cin, cout, k, ratio, rng, dtype=np.float32, batchnorm=True):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, k, rng, dtype)
        self.bn1 = BatchNorm(cout, dtype) if batchnorm else None
        self.relu1 = ReLU()
        self.conv2 = Conv2d(cout, cout, k, rng, dtype)
        self.bn2 = BatchNorm(cout, dtype) if batchnorm else None
        self.shortcut = Conv2d(cin, cout, 1, rng, dtype) if cin != cout else None
        self.relu2 = ReLU()
        self.se = SqueezeExcite(cout, ratio, rng, dtype)

    def children(self) -> dict[str, Layer]:
        named = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2,
                 "bn2": self.bn2, "shortcut": self.shortcut, "se": self.se}
        return {k: v for k, v in named.items() if v is not None}

    def params(self):
        return {f"{n}.{p}": t for n, c in self.children().items() for p, t in c.params().items()}

    def buffers(self):
        return {f"{n}.{p}": a for n, c in self.children().items() for p, a in c.buffers().items()}

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.conv1.kernel.shape[2]:
            raise ShapeError(f"block expects {self.conv1.kernel.shape[2]} channels, got {x.shape[-1]}")
        h = self.conv1.forward(x)
        if self.bn1 is not None:
            h = self.bn1.forward(h, train)
        h = self.relu1.forward(h)
        h = self.conv2.forward(h)
        if self.bn2 is not None:
            h = self.bn2.forward(h, train)
        skip = self.shortcut.forward(x) if self.shortcut is not None else x
        h = self.relu2.forward(h + skip)
        self._cache = True
        return self.se.forward(h)

    def backward(self, dout):
        self._need_cache()
        d = self.relu2.backward(self.se.backward(dout))
        dx = self.shortcut.backward(d) if self.shortcut is not None else d
        if self.bn2 is not None:
            d = self.bn2.backward(d)
        d = self.relu1.backward(self.conv2.backward(d))
        if self.bn1 is not None:
            d = self.bn1.backward(d)
        return dx + self.conv1.backward(d)


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    def __init__(self, pool=(1, 10)):
        super().__init__()
        self.ph, self.pw = pool

    def forward(self, x, train=False, rng=None):
        b, h, w, c = x.shape
        ho, wo = h // self.ph, w // self.pw
        if ho == 0 or wo == 0:
            raise ShapeError(f"input {h}x{w} is smaller than pool {self.ph}x{self.pw}")
        win = x[:, :ho * self.ph, :wo * self.pw, :].reshape(b, ho, self.ph, wo, self.pw, c)
        out = win.max(axis=(2, 4))
        # first maximal position in row-major window order, so ties route to one input
        idx = np.full(out.shape, -1, dtype=np.int16)
        for j in reversed(range(self.ph * self.pw)):
            idx[win[:, :, j // self.pw, :, j % self.pw, :] == out] = j
        self._cache = (x.shape, idx)
        return out

    def backward(self, dout):
        shape, idx = self._need_cache()
        b, h, w, c = shape
        ho, wo = idx.shape[1], idx.shape[2]
        dx = np.zeros(shape, dtype=dout.dtype)
        win = dx[:, :ho * self.ph, :wo * self.pw, :].reshape(b, ho, self.ph, wo, self.pw, c)
        for j in range(self.ph * self.pw):
            win[:, :, j // self.pw, :, j % self.pw, :] = np.where(idx == j, dout, 0)
        return dx


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate=0.3):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._cache = None, 1.0
            return x
        if rng is None:
            raise StateError("training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        self._cache = keep, scale
        return np.where(keep, x * scale, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        keep, scale = self._need_cache()
        if keep is None:
            return dout
        return np.where(keep, dout * scale, 0).astype(dout.dtype, copy=False)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return global_avg_pool(x)

    def backward(self, dout):
        b, h, w, c = self._need_cache()
        return np.broadcast_to((dout / (h * w))[:, None, None, :], (b, h, w, c)).copy()


class Dense(Layer):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(glorot_uniform(rng, (cin, cout), cin, cout, dtype))
        self.bias = Tensor(np.zeros(cout, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"dense expects {self.weight.shape[0]} inputs, got {x.shape[-1]}")
        self._cache = x
        return x @ self.weight.data + self.bias.data

    def backward(self, dout):
        x = self._need_cache()
        self.weight.grad += x.T @ dout
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.data.T


class Softmax(Layer):
    def forward(self, x, train=False, rng=None):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, dout):
        p = self._need_cache()
        return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


# -- loss ---------------------------------------------------------------------

def _true_class_prob(probs, targets, n_classes):
    targets = np.asarray(targets)
    if targets.ndim != 1 or len(targets) != len(probs):
        raise ValueError("targets must be a vector with one id per row")
    if np.any((targets < 0) | (targets >= n_classes)):
        raise ValueError(f"target ids must lie in [0, {n_classes})")
    return probs[np.arange(len(targets)), targets]


def focal_loss(probs, targets, alpha=0.25, gamma=2.0) -> float:
    """Batch mean of -alpha * (1 - p_t)^gamma * ln(p_t)."""
    probs = np.asarray(probs)
    pt = np.clip(_true_class_prob(probs, targets, probs.shape[-1]), PROB_FLOOR, 1.0)
    return float(np.mean(-alpha * (1.0 - pt) ** gamma * np.log(pt)))


def focal_loss_grad(probs, targets, alpha=0.25, gamma=2.0) -> np.ndarray:
    """d focal_loss / d probs (only the true-class column is non-zero)."""
    probs = np.asarray(probs)
    raw = _true_class_prob(probs, targets, probs.shape[-1])
    pt = np.clip(raw, PROB_FLOOR, 1.0)
    q = 1.0 - pt
    with np.errstate(divide="ignore", invalid="ignore"):
        modulating = np.where(q > 0, gamma * q ** (gamma - 1.0) * np.log(pt), 0.0)
    dpt = alpha * modulating - alpha * q ** gamma / pt
    dpt = np.where(raw < PROB_FLOOR, 0.0, dpt) / len(pt)
    g = np.zeros_like(probs)
    g[np.arange(len(pt)), np.asarray(targets)] = dpt
    return g


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(theta, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """One bias-corrected Adam update; mutates ``state`` and returns the new parameters."""
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {n: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for n, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            new = adam_step(p.data, p.grad, self.state[name], self.lr,
                            self.beta1, self.beta2, self.eps)
            p.data[...] = new

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -- the network --------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Two Conv-StandardPost blocks, (1, 10) pooling, dropout, GAP and a dense classifier."""
    in_channels: int = 1
    filters: int = 40
    kernel: int = 3
    se_ratio: int = 2
    pool: tuple = (1, 10)
    dropout: float = 0.3
    n_blocks: int = 2
    n_classes: int = 10
    batchnorm: bool = True
    version: str = "conv-standardpost/1"

    def to_dict(self):
        d = asdict(self)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pool"] = tuple(d["pool"])
        return cls(**d)

    def output_shape(self, height, width):
        """(H, W, C) after every stage, for shape bookkeeping."""
        shapes = [("input", (height, width, self.in_channels))]
        for i in range(self.n_blocks):
            shapes.append((f"block{i + 1}", (height, width, self.filters)))
            height, width = height // self.pool[0], width // self.pool[1]
            shapes.append((f"pool{i + 1}", (height, width, self.filters)))
        shapes.append(("gap", (self.filters,)))
        shapes.append(("dense", (self.n_classes,)))
        return shapes


class ASCNet:
    def __init__(self, spec: ModelSpec = ModelSpec(), seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[str, Layer]] = []
        cin = spec.in_channels
        for i in range(spec.n_blocks):
            n = i + 1
            self.layers += [
                (f"block{n}", ConvStandardPost(cin, spec.filters, spec.kernel, spec.se_ratio,
                                               rng, self.dtype, spec.batchnorm)),
                (f"pool{n}", MaxPool2d(spec.pool)),
                (f"dropout{n}", Dropout(spec.dropout)),
            ]
            cin = spec.filters
        self.layers += [
            ("gap", GlobalAvgPool()),
            ("dense", Dense(spec.filters, spec.n_classes, rng, self.dtype)),
            ("softmax", Softmax()),
        ]

    def __iter__(self) -> Iterator[tuple[str, Layer]]:
        return iter(self.layers)

    def layer(self, name) -> Layer:
        return dict(self.layers)[name]

    def parameters(self) -> dict[str, Tensor]:
        return {f"{ln}.{pn}": t for ln, layer in self.layers for pn, t in layer.params().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{bn}": a for ln, layer in self.layers for bn, a in layer.buffers().items()}

    def batchnorms(self) -> Iterator[BatchNorm]:
        for _, layer in self.layers:
            if isinstance(layer, ConvStandardPost):
                yield from (bn for bn in (layer.bn1, layer.bn2) if bn is not None)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: t.data.copy() for n, t in self.parameters().items()}
        out.update({n: a.copy() for n, a in self.buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        expected, optional = set(params), set()
        for ln, layer in self.layers:
            if isinstance(layer, ConvStandardPost):
                for bname in ("bn1", "bn2"):
                    if getattr(layer, bname) is not None:
                        pair = {f"{ln}.{bname}.running_mean", f"{ln}.{bname}.running_var"}
                        # running statistics are absent before the first training step
                        (expected if pair & set(state) else optional).update(pair)
        missing, extra = expected - set(state), set(state) - expected - optional
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, t in params.items():
            v = np.asarray(state[n])
            if v.shape != t.shape:
                raise ShapeError(f"{n}: shape {v.shape} != {t.shape}")
            t.data[...] = v
        for ln, layer in self.layers:
            if isinstance(layer, ConvStandardPost):
                for bname in ("bn1", "bn2"):
                    bn = getattr(layer, bname)
                    if bn is not None and f"{ln}.{bname}.running_mean" in state:
                        bn.set_running(state[f"{ln}.{bname}.running_mean"],
                                       state[f"{ln}.{bname}.running_var"])

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    def forward(self, x, train=False, rng=None) -> np.ndarray:
        """x: (B, H, W) or (B, H, W, C). Returns class probabilities (B, n_classes)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        for _, layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    __call__ = forward

    def backward(self, dprobs):
        d = np.asarray(dprobs, dtype=self.dtype)
        for _, layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def predict(self, x, batch_size=64) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.n_classes), self.dtype)


def loss_and_grads(model: ASCNet, x, targets, train=False, rng=None, alpha=0.25, gamma=2.0):
    """Forward, focal loss, backward. Gradients land in ``model.parameters()[*].grad``."""
    model.zero_grad()
    probs = model.forward(x, train=train, rng=rng)
    loss = focal_loss(probs, targets, alpha, gamma)
    model.backward(focal_loss_grad(probs, targets, alpha, gamma))
    return loss, probs
