"""NumPy layers with hand-written backward passes.

Activations are channels-last, ``(B, X, Y, Z, C)``.  Layers own no weights:
every ``forward``/``backward`` receives the parameter dict ``P`` and
backward accumulates into the gradient dict ``G`` under the same names.
Forward caches what backward needs, so a layer instance serves one
forward/backward pair at a time.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import expit

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _param(P, name, dtype):
    return P[name].astype(dtype, copy=False)


def _acc(G, name, value):
    if name in G:
        G[name] += value
    else:
        G[name] = np.array(value, dtype=np.float64)


class Layer:
    """Base class; ``param_shapes`` lists trainable tensors, ``buffer_shapes`` running stats."""

    def param_shapes(self) -> dict:
        return {}

    def buffer_shapes(self) -> dict:
        return {}

    def init(self, rng) -> dict:
        return {}

    def forward(self, P, x, train=False, update_stats=True):
        raise NotImplementedError

    def backward(self, P, G, dy):
        raise NotImplementedError


class SiLU(Layer):
    def forward(self, P, x, train=False, update_stats=True):
        self.x = x
        self.sig = expit(x)
        return x * self.sig

    def backward(self, P, G, dy):
        s = self.sig
        return dy * (s * (1.0 + self.x * (1.0 - s)))


def _out_size(n, k, stride):
    return (n + 2 * (k // 2) - k) // stride + 1


def _spatial_slices(k, stride, out_shape):
    for a, b, c in itertools.product(range(k), repeat=3):
        yield (a, b, c), (
            slice(None),
            slice(a, a + stride * (out_shape[0] - 1) + 1, stride),
            slice(b, b + stride * (out_shape[1] - 1) + 1, stride),
            slice(c, c + stride * (out_shape[2] - 1) + 1, stride),
        )


def _pad_spatial(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))


class Conv3d(Layer):
    """Dense 3D convolution without bias, 'same' padding, weight (k, k, k, Cin, Cout)."""

    def __init__(self, name, cin, cout, k=3, stride=1, input_grad=True):
        self.name, self.cin, self.cout, self.k, self.stride = name, cin, cout, k, stride
        # the network's first layer never needs d(loss)/d(input)
        self.input_grad = input_grad

    def param_shapes(self):
        return {f"{self.name}.weight": (self.k, self.k, self.k, self.cin, self.cout)}

    def init(self, rng):
        fan_out = self.k ** 3 * self.cout
        w = rng.normal(0.0, np.sqrt(2.0 / fan_out), self.param_shapes()[f"{self.name}.weight"])
        return {f"{self.name}.weight": w}

    def forward(self, P, x, train=False, update_stats=True):
        w = _param(P, f"{self.name}.weight", x.dtype)
        B = x.shape[0]
        self.in_shape = x.shape
        if self.k == 1 and self.stride == 1:
            self.cols = x.reshape(-1, self.cin)
            return (self.cols @ w.reshape(self.cin, self.cout)).reshape(*x.shape[:4], self.cout)
        out_sp = tuple(_out_size(n, self.k, self.stride) for n in x.shape[1:4])
        xp = _pad_spatial(x, self.k // 2)
        cols = np.concatenate([xp[sl] for _, sl in _spatial_slices(self.k, self.stride, out_sp)], axis=-1)
        self.out_sp = out_sp
        self.cols = cols.reshape(-1, self.k ** 3 * self.cin)
        y = self.cols @ w.reshape(-1, self.cout)
        return y.reshape(B, *out_sp, self.cout)

    def backward(self, P, G, dy):
        name = f"{self.name}.weight"
        w = _param(P, name, dy.dtype)
        dy2 = dy.reshape(-1, self.cout)
        _acc(G, name, (self.cols.T @ dy2).reshape(w.shape))
        if not self.input_grad:
            return None
        dcols = dy2 @ w.reshape(-1, self.cout).T
        if self.k == 1 and self.stride == 1:
            return dcols.reshape(self.in_shape)
        B = self.in_shape[0]
        p = self.k // 2
        dxp = np.zeros((B, *(n + 2 * p for n in self.in_shape[1:4]), self.cin), dtype=dy.dtype)
        dcols = dcols.reshape(B, *self.out_sp, self.k ** 3, self.cin)
        for o, (_, sl) in enumerate(_spatial_slices(self.k, self.stride, self.out_sp)):
            dxp[sl] += dcols[..., o, :]
        if p:
            dxp = dxp[:, p:-p, p:-p, p:-p, :]
        return dxp


class DepthwiseConv3d(Layer):
    """Per-channel 3D convolution without bias, weight (k, k, k, C)."""

    def __init__(self, name, c, k=3, stride=1):
        self.name, self.c, self.k, self.stride = name, c, k, stride

    def param_shapes(self):
        return {f"{self.name}.weight": (self.k, self.k, self.k, self.c)}

    def init(self, rng):
        fan_out = self.k ** 3
        return {f"{self.name}.weight": rng.normal(0.0, np.sqrt(2.0 / fan_out), (self.k,) * 3 + (self.c,))}

    def forward(self, P, x, train=False, update_stats=True):
        w = _param(P, f"{self.name}.weight", x.dtype)
        self.in_shape = x.shape
        self.out_sp = tuple(_out_size(n, self.k, self.stride) for n in x.shape[1:4])
        self.xp = _pad_spatial(x, self.k // 2)
        y = np.zeros((x.shape[0], *self.out_sp, self.c), dtype=x.dtype)
        for (a, b, c), sl in _spatial_slices(self.k, self.stride, self.out_sp):
            y += self.xp[sl] * w[a, b, c]
        return y

    def backward(self, P, G, dy):
        name = f"{self.name}.weight"
        w = _param(P, name, dy.dtype)
        dw = np.zeros(w.shape, dtype=np.float64)
        dxp = np.zeros_like(self.xp)
        for (a, b, c), sl in _spatial_slices(self.k, self.stride, self.out_sp):
            dw[a, b, c] = np.sum((self.xp[sl] * dy).reshape(-1, self.c), axis=0)
            dxp[sl] += dy * w[a, b, c]
        _acc(G, name, dw)
        p = self.k // 2
        if p:
            dxp = dxp[:, p:-p, p:-p, p:-p, :]
        return dxp


class BatchNorm(Layer):
    """Batch normalisation over (B, X, Y, Z) per channel."""

    def __init__(self, name, c):
        self.name, self.c = name, c

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.c,), f"{self.name}.beta": (self.c,)}

    def buffer_shapes(self):
        return {f"{self.name}.running_mean": (self.c,), f"{self.name}.running_var": (self.c,)}

    def init(self, rng):
        return {f"{self.name}.gamma": np.ones(self.c), f"{self.name}.beta": np.zeros(self.c),
                f"{self.name}.running_mean": np.zeros(self.c), f"{self.name}.running_var": np.ones(self.c)}

    def forward(self, P, x, train=False, update_stats=True):
        gamma = _param(P, f"{self.name}.gamma", x.dtype)
        beta = _param(P, f"{self.name}.beta", x.dtype)
        self.train = train
        axes = (0, 1, 2, 3)
        if train:
            count = x.size // self.c
            mean = x.mean(axis=axes)
            centered = x - mean
            var = np.mean(centered * centered, axis=axes)
            if update_stats:
                rm, rv = f"{self.name}.running_mean", f"{self.name}.running_var"
                unbiased = var * count / max(count - 1, 1)
                P[rm] = (1 - BN_MOMENTUM) * P[rm] + BN_MOMENTUM * mean
                P[rv] = (1 - BN_MOMENTUM) * P[rv] + BN_MOMENTUM * unbiased
        else:
            mean = P[f"{self.name}.running_mean"]
            var = P[f"{self.name}.running_var"]
            centered = x - mean.astype(x.dtype)
        self.inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        self.xhat = centered * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, P, G, dy):
        gamma = _param(P, f"{self.name}.gamma", dy.dtype)
        axes = (0, 1, 2, 3)
        dbeta = np.sum(dy, axis=axes)
        dgamma = np.sum(dy * self.xhat, axis=axes)
        _acc(G, f"{self.name}.gamma", dgamma)
        _acc(G, f"{self.name}.beta", dbeta)
        if not self.train:
            return dy * (gamma * self.inv_std)
        n = dy.size // self.c
        # sums of dxhat and dxhat * xhat are gamma-scaled dbeta and dgamma
        scale = gamma * self.inv_std / n
        return scale * (n * dy - dbeta - self.xhat * dgamma)


class SqueezeExcite(Layer):
    """Channel gate: pool -> dense(C->R) -> SiLU -> dense(R->C) -> sigmoid -> scale."""

    def __init__(self, name, c, r):
        self.name, self.c, self.r = name, c, r

    def param_shapes(self):
        n = self.name
        return {f"{n}.reduce.weight": (self.c, self.r), f"{n}.reduce.bias": (self.r,),
                f"{n}.expand.weight": (self.r, self.c), f"{n}.expand.bias": (self.c,)}

    def init(self, rng):
        n = self.name
        return {f"{n}.reduce.weight": rng.normal(0.0, np.sqrt(2.0 / self.r), (self.c, self.r)),
                f"{n}.reduce.bias": np.zeros(self.r),
                f"{n}.expand.weight": rng.normal(0.0, np.sqrt(2.0 / self.c), (self.r, self.c)),
                f"{n}.expand.bias": np.zeros(self.c)}

    def forward(self, P, x, train=False, update_stats=True):
        n, dt = self.name, x.dtype
        self.x = x
        self.pooled = x.mean(axis=(1, 2, 3))
        self.z1 = self.pooled @ _param(P, f"{n}.reduce.weight", dt) + _param(P, f"{n}.reduce.bias", dt)
        self.a1 = silu(self.z1)
        z2 = self.a1 @ _param(P, f"{n}.expand.weight", dt) + _param(P, f"{n}.expand.bias", dt)
        self.gate = expit(z2)
        return x * self.gate[:, None, None, None, :]

    def backward(self, P, G, dy):
        n, dt = self.name, dy.dtype
        dgate = np.sum(dy * self.x, axis=(1, 2, 3))
        dz2 = dgate * self.gate * (1.0 - self.gate)
        _acc(G, f"{n}.expand.weight", self.a1.T @ dz2)
        _acc(G, f"{n}.expand.bias", dz2.sum(axis=0))
        da1 = dz2 @ _param(P, f"{n}.expand.weight", dt).T
        dz1 = da1 * silu_grad(self.z1)
        _acc(G, f"{n}.reduce.weight", self.pooled.T @ dz1)
        _acc(G, f"{n}.reduce.bias", dz1.sum(axis=0))
        dpooled = dz1 @ _param(P, f"{n}.reduce.weight", dt).T
        nvox = self.x.shape[1] * self.x.shape[2] * self.x.shape[3]
        return dy * self.gate[:, None, None, None, :] + (dpooled / nvox)[:, None, None, None, :]


class GlobalAvgPool(Layer):
    def forward(self, P, x, train=False, update_stats=True):
        self.in_shape = x.shape
        return x.mean(axis=(1, 2, 3))

    def backward(self, P, G, dy):
        nvox = self.in_shape[1] * self.in_shape[2] * self.in_shape[3]
        return np.broadcast_to((dy / nvox)[:, None, None, None, :], self.in_shape).copy()


class Dense(Layer):
    def __init__(self, name, cin, cout, zero_init=False):
        self.name, self.cin, self.cout, self.zero_init = name, cin, cout, zero_init

    def param_shapes(self):
        return {f"{self.name}.weight": (self.cin, self.cout), f"{self.name}.bias": (self.cout,)}

    def init(self, rng):
        if self.zero_init:
            w = np.zeros((self.cin, self.cout))
        else:
            bound = 1.0 / np.sqrt(self.cin)
            w = rng.uniform(-bound, bound, (self.cin, self.cout))
        return {f"{self.name}.weight": w, f"{self.name}.bias": np.zeros(self.cout)}

    def forward(self, P, x, train=False, update_stats=True):
        self.x = x
        return x @ _param(P, f"{self.name}.weight", x.dtype) + _param(P, f"{self.name}.bias", x.dtype)

    def backward(self, P, G, dy):
        _acc(G, f"{self.name}.weight", self.x.T.astype(np.float64) @ dy.astype(np.float64))
        _acc(G, f"{self.name}.bias", dy.sum(axis=0, dtype=np.float64))
        return dy @ _param(P, f"{self.name}.weight", dy.dtype).T


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def param_shapes(self):
        out = {}
        for layer in self.layers:
            out.update(layer.param_shapes())
        return out

    def buffer_shapes(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffer_shapes())
        return out

    def init(self, rng):
        out = {}
        for layer in self.layers:
            out.update(layer.init(rng))
        return out

    def forward(self, P, x, train=False, update_stats=True):
        for layer in self.layers:
            x = layer.forward(P, x, train, update_stats)
        return x

    def backward(self, P, G, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(P, G, dy)
        return dy


class MBConv(Sequential):
    """Inverted-bottleneck block: [expand 1x1 -> BN -> SiLU] -> depthwise -> BN -> SiLU
    -> squeeze-excite -> project 1x1 -> BN, plus identity shortcut when shapes allow.

    The expansion stage is omitted when ``expand == 1``.
    """

    def __init__(self, name, cin, cout, expand=1, stride=1, se_ratio=0.25, k=3):
        mid = cin * expand
        layers = []
        if expand != 1:
            layers += [Conv3d(f"{name}.expand", cin, mid, 1), BatchNorm(f"{name}.bn0", mid), SiLU()]
        layers += [DepthwiseConv3d(f"{name}.dw", mid, k, stride), BatchNorm(f"{name}.bn1", mid), SiLU()]
        if se_ratio:
            layers.append(SqueezeExcite(f"{name}.se", mid, max(1, int(cin * se_ratio))))
        layers += [Conv3d(f"{name}.project", mid, cout, 1), BatchNorm(f"{name}.bn2", cout)]
        super().__init__(layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, P, x, train=False, update_stats=True):
        y = super().forward(P, x, train, update_stats)
        return y + x if self.residual else y

    def backward(self, P, G, dy):
        dx = super().backward(P, G, dy)
        return dx + dy if self.residual else dx
