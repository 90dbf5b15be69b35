"""A small reverse-mode network stack and the time-conditioned U-Net.

Every layer owns views into one flat float64 parameter vector, and writes
its gradient into the matching slots of an equally shaped flat buffer, so
optimizers and checkpoints only ever see two 1-D arrays.

Activations are batched ``[B, C, H, W]``. Layers expose
``forward(x) -> (y, cache)`` and ``backward(cache, dy, grad) -> dx``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal timestep embedding ``[sin(t w_k)..., cos(t w_k)...]``.

    Frequencies are log-spaced from 1 down to 1/10000. A scalar ``t`` gives
    shape ``[dim]``; an array of ``B`` timesteps gives ``[B, dim]``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"time embedding dim must be even and positive, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    t_arr = np.asarray(t, dtype=np.float64)
    ang = t_arr[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def reflect_pad_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of 1-pixel reflect padding on the last two axes."""
    r = g[..., 1:-1, :].copy()
    r[..., 1, :] += g[..., 0, :]
    r[..., -2, :] += g[..., -1, :]
    out = r[..., 1:-1].copy()
    out[..., 1] += r[..., 0]
    out[..., -2] += r[..., -1]
    return out


class ParamAllocator:
    """Hands out contiguous slots of the flat parameter vector."""

    def __init__(self):
        self.slots: list[tuple[str, tuple[int, ...], int]] = []
        self.size = 0

    def add(self, name: str, shape) -> int:
        shape = tuple(int(s) for s in shape)
        off = self.size
        self.slots.append((name, shape, off))
        self.size += int(np.prod(shape))
        return len(self.slots) - 1


class Layer:
    """Base: parameters live at ``slot`` indices in the shared allocator."""

    slot_ids: tuple[int, ...] = ()

    def bind(self, alloc: ParamAllocator, params: np.ndarray):
        self._alloc = alloc
        self._views = [_view(alloc, params, i) for i in self.slot_ids]

    def grads(self, grad: np.ndarray):
        return [_view(self._alloc, grad, i) for i in self.slot_ids]

    def init(self, rng):
        pass


def _view(alloc, buf, idx):
    _, shape, off = alloc.slots[idx]
    return buf[off : off + int(np.prod(shape))].reshape(shape)


# ---------------------------------------------------------------- layers


class Conv2d(Layer):
    """k x k convolution, stride 1, reflect padding so H and W are kept."""

    def __init__(self, alloc: ParamAllocator, name: str, cin: int, cout: int, k: int = 3):
        if k not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        self.cin, self.cout, self.k = cin, cout, k
        self.slot_ids = (
            alloc.add(f"{name}.weight", (cout, cin, k, k)),
            alloc.add(f"{name}.bias", (cout,)),
        )

    @property
    def fan_in(self):
        return self.cin * self.k * self.k

    def init(self, rng):
        w, b = self._views
        w[...] = rng.standard_normal(w.shape) * math.sqrt(2.0 / self.fan_in)
        b[...] = 0.0

    def forward(self, x):
        w, b = self._views
        if self.k == 1:
            y = np.einsum("bchw,oc->bohw", x, w[:, :, 0, 0], optimize=True)
            return y + b[None, :, None, None], x
        if x.shape[-1] < 2 or x.shape[-2] < 2:
            raise ShapeError("3x3 reflect-padded conv needs extents >= 2")
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
        cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
        y = np.einsum("bchwij,ocij->bohw", cols, w, optimize=True)
        return y + b[None, :, None, None], xp

    def backward(self, cache, dy, grad):
        w, _ = self._views
        gw, gb = self.grads(grad)
        gb += dy.sum(axis=(0, 2, 3))
        if self.k == 1:
            x = cache
            gw[:, :, 0, 0] += np.tensordot(dy, x, axes=([0, 2, 3], [0, 2, 3]))
            return np.einsum("bohw,oc->bchw", dy, w[:, :, 0, 0], optimize=True)
        xp = cache
        H, W = dy.shape[2], dy.shape[3]
        for i in range(3):
            for j in range(3):
                gw[:, :, i, j] += np.tensordot(
                    dy, xp[:, :, i : i + H, j : j + W], axes=([0, 2, 3], [0, 2, 3])
                )
        dyp = np.pad(dy, ((0, 0), (0, 0), (2, 2), (2, 2)))
        cols = sliding_window_view(dyp, (3, 3), axis=(2, 3))
        dxp = np.einsum("bohwij,ocij->bchw", cols, w[:, :, ::-1, ::-1], optimize=True)
        return reflect_pad_adjoint(dxp)


class Dense(Layer):
    def __init__(self, alloc: ParamAllocator, name: str, din: int, dout: int):
        self.din, self.dout = din, dout
        self.slot_ids = (
            alloc.add(f"{name}.weight", (dout, din)),
            alloc.add(f"{name}.bias", (dout,)),
        )

    @property
    def fan_in(self):
        return self.din

    def init(self, rng):
        w, b = self._views
        w[...] = rng.standard_normal(w.shape) * math.sqrt(2.0 / self.din)
        b[...] = 0.0

    def forward(self, x):
        w, b = self._views
        return x @ w.T + b, x

    def backward(self, cache, dy, grad):
        w, _ = self._views
        gw, gb = self.grads(grad)
        gw += dy.T @ cache
        gb += dy.sum(axis=0)
        return dy @ w


class GroupNorm(Layer):
    """Per-sample normalization over channel groups and space, with affine."""

    def __init__(self, alloc: ParamAllocator, name: str, channels: int, groups: int, eps=1e-5):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.c, self.g, self.eps = channels, groups, eps
        self.slot_ids = (
            alloc.add(f"{name}.gamma", (channels,)),
            alloc.add(f"{name}.beta", (channels,)),
        )

    def init(self, rng):
        gamma, beta = self._views
        gamma[...] = 1.0
        beta[...] = 0.0

    def forward(self, x):
        gamma, beta = self._views
        B, C, H, W = x.shape
        xg = x.reshape(B, self.g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(B, C, H, W)
        y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
        return y, (xhat, inv)

    def backward(self, cache, dy, grad):
        gamma, _ = self._views
        ggamma, gbeta = self.grads(grad)
        xhat, inv = cache
        B, C, H, W = dy.shape
        ggamma += (dy * xhat).sum(axis=(0, 2, 3))
        gbeta += dy.sum(axis=(0, 2, 3))
        dxhat = (dy * gamma[None, :, None, None]).reshape(B, self.g, -1)
        xh = xhat.reshape(B, self.g, -1)
        n = xh.shape[2]
        dx = (inv / n) * (
            n * dxhat - dxhat.sum(axis=2, keepdims=True) - xh * (dxhat * xh).sum(axis=2, keepdims=True)
        )
        return dx.reshape(B, C, H, W)


class SiLU(Layer):
    def forward(self, x):
        s = _sigmoid(x)
        return x * s, (x, s)

    def backward(self, cache, dy, grad):
        x, s = cache
        return dy * (s * (1.0 + x * (1.0 - s)))


class AvgPool2(Layer):
    """2x downsampling by 2x2 mean."""

    def forward(self, x):
        B, C, H, W = x.shape
        y = x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
        return y, None

    def backward(self, cache, dy, grad):
        return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25


class Upsample2(Layer):
    """2x nearest-neighbour upsampling."""

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), None

    def backward(self, cache, dy, grad):
        B, C, H, W = dy.shape
        return dy.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


def concat_forward(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(split, dy):
    return dy[:, :split], dy[:, split:]


# ---------------------------------------------------------------- U-Net


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    groups: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even and positive")
        if self.base_channels % self.groups:
            raise ValueError("base_channels must be divisible by groups")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Block:
    """conv -> norm -> (+time) -> SiLU -> conv -> norm -> SiLU."""

    def __init__(self, alloc, name, cin, cout, groups, temb_dim):
        self.conv1 = Conv2d(alloc, f"{name}.conv1", cin, cout)
        self.norm1 = GroupNorm(alloc, f"{name}.norm1", cout, groups)
        self.temb = Dense(alloc, f"{name}.temb", temb_dim, cout)
        self.act1 = SiLU()
        self.conv2 = Conv2d(alloc, f"{name}.conv2", cout, cout)
        self.norm2 = GroupNorm(alloc, f"{name}.norm2", cout, groups)
        self.act2 = SiLU()
        self.layers = [self.conv1, self.norm1, self.temb, self.act1, self.conv2, self.norm2, self.act2]

    def forward(self, x, tvec):
        h, c1 = self.conv1.forward(x)
        h, n1 = self.norm1.forward(h)
        tp, te = self.temb.forward(tvec)
        h = h + tp[:, :, None, None]
        h, a1 = self.act1.forward(h)
        h, c2 = self.conv2.forward(h)
        h, n2 = self.norm2.forward(h)
        h, a2 = self.act2.forward(h)
        return h, (c1, n1, te, a1, c2, n2, a2)

    def backward(self, cache, dy, grad):
        c1, n1, te, a1, c2, n2, a2 = cache
        d = self.act2.backward(a2, dy, grad)
        d = self.norm2.backward(n2, d, grad)
        d = self.conv2.backward(c2, d, grad)
        d = self.act1.backward(a1, d, grad)
        dtvec = self.temb.backward(te, d.sum(axis=(2, 3)), grad)
        d = self.norm1.backward(n1, d, grad)
        dx = self.conv1.backward(c1, d, grad)
        return dx, dtvec


class UNet:
    """Time-conditioned U-Net ``eps(x, t)``, shape-preserving.

    Layout for depth ``D`` and base width ``c``: input conv to ``c``; encoder
    blocks at widths ``c * 2**i`` separated by 2x average pooling; a
    bottleneck block at ``c * 2**D``; decoder blocks fed by nearest
    upsampling concatenated with the matching encoder output; 3x3 output
    conv back to the input channels. The sinusoidal embedding passes
    through a shared dense+SiLU and then a per-block dense projection that
    is added after each block's first normalization.
    """

    def __init__(self, config: UNetConfig | None = None, params: np.ndarray | None = None):
        self.config = cfg = config or UNetConfig()
        alloc = ParamAllocator()
        E = cfg.time_embed_dim
        self.time_mlp = Dense(alloc, "time.dense", E, E)
        self.time_act = SiLU()
        self.in_conv = Conv2d(alloc, "in_conv", cfg.in_channels, cfg.base_channels)
        self.enc = []
        cin = cfg.base_channels
        for i in range(cfg.depth):
            self.enc.append(Block(alloc, f"enc{i}", cin, cfg.channels(i), cfg.groups, E))
            cin = cfg.channels(i)
        self.pool = AvgPool2()
        self.mid = Block(alloc, "mid", cin, cfg.channels(cfg.depth), cfg.groups, E)
        self.up = Upsample2()
        self.dec = [None] * cfg.depth
        for i in reversed(range(cfg.depth)):
            self.dec[i] = Block(
                alloc, f"dec{i}", cfg.channels(i + 1) + cfg.channels(i), cfg.channels(i), cfg.groups, E
            )
        self.out_conv = Conv2d(alloc, "out_conv", cfg.base_channels, cfg.in_channels)
        self.alloc = alloc
        self.n_params = alloc.size
        self.params = np.zeros(alloc.size) if params is None else np.asarray(params, dtype=np.float64)
        if self.params.shape != (alloc.size,):
            raise ShapeError(f"expected {alloc.size} parameters, got {self.params.shape}")
        for layer in self.layers():
            layer.bind(alloc, self.params)
        if params is None:
            self.initialize(cfg.seed)

    def layers(self):
        yield self.time_mlp
        yield self.in_conv
        for b in [*self.enc, self.mid, *self.dec]:
            yield from b.layers
        yield self.out_conv

    def initialize(self, seed: int):
        """He-normal weights (std sqrt(2/fan_in)), zero biases, unit norms."""
        rng = np.random.default_rng(seed)
        for layer in self.layers():
            layer.init(rng)

    def param_slots(self):
        return list(self.alloc.slots)

    @property
    def multiple(self) -> int:
        return 2**self.config.depth

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected [C,H,W] or [B,C,H,W] with C={self.config.in_channels}, got {x.shape}"
            )
        H, W = x.shape[2:]
        m = self.multiple
        if H % m or W % m:
            ph, pw = (-H) % m, (-W) % m
            raise ShapeError(
                f"extents {H}x{W} must be divisible by {m}; pad by ({ph}, {pw}) pixels "
                f"to {H + ph}x{W + pw}"
            )
        return x

    def _tvec(self, t, B):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        emb = time_embedding(t, self.config.time_embed_dim)
        h, c1 = self.time_mlp.forward(emb)
        h, c2 = self.time_act.forward(h)
        return h, (c1, c2)

    def forward(self, x, t, keep_cache: bool = False):
        """Predict noise for ``x`` ([C,H,W] or [B,C,H,W]) at timestep(s) ``t``."""
        single = np.ndim(x) == 3
        x = self.check_input(x)
        B = x.shape[0]
        tvec, tcache = self._tvec(t, B)
        h, c_in = self.in_conv.forward(x)
        skips, enc_c = [], []
        for i, blk in enumerate(self.enc):
            h, c = blk.forward(h, tvec)
            enc_c.append(c)
            skips.append(h)
            h, _ = self.pool.forward(h)
        h, mid_c = self.mid.forward(h, tvec)
        dec_c = [None] * len(self.dec)
        splits = [None] * len(self.dec)
        for i in reversed(range(len(self.dec))):
            h, _ = self.up.forward(h)
            h, splits[i] = concat_forward(h, skips[i])
            h, dec_c[i] = self.dec[i].forward(h, tvec)
        y, c_out = self.out_conv.forward(h)
        if single:
            y = y[0]
        if keep_cache:
            return y, (single, tcache, c_in, enc_c, mid_c, dec_c, splits, c_out)
        return y

    def backward_from_cache(self, cache, upstream) -> np.ndarray:
        single, tcache, c_in, enc_c, mid_c, dec_c, splits, c_out = cache
        dy = np.asarray(upstream, dtype=np.float64)
        if single:
            dy = dy[None]
        grad = np.zeros_like(self.params)
        dtvec = 0.0
        d = self.out_conv.backward(c_out, dy, grad)
        dskips = [None] * len(self.dec)
        for i in range(len(self.dec)):
            d, dt = self.dec[i].backward(dec_c[i], d, grad)
            dtvec = dtvec + dt
            d, dskips[i] = concat_backward(splits[i], d)
            d = self.up.backward(None, d, grad)
        d, dt = self.mid.backward(mid_c, d, grad)
        dtvec = dtvec + dt
        for i in reversed(range(len(self.enc))):
            d = self.pool.backward(None, d, grad) + dskips[i]
            d, dt = self.enc[i].backward(enc_c[i], d, grad)
            dtvec = dtvec + dt
        self.in_conv.backward(c_in, d, grad)
        c1, c2 = tcache
        dh = self.time_act.backward(c2, dtvec, grad)
        self.time_mlp.backward(c1, dh, grad)
        return grad

    def backward(self, x, t, upstream) -> np.ndarray:
        """Gradient of ``<forward(x, t), upstream>`` w.r.t. the flat params."""
        y, cache = self.forward(x, t, keep_cache=True)
        if np.shape(upstream) != y.shape:
            raise ShapeError(f"upstream shape {np.shape(upstream)} != output shape {y.shape}")
        return self.backward_from_cache(cache, upstream)

    def copy(self) -> "UNet":
        return UNet(self.config, self.params.copy())


def build_unet(
    channels: int = 16,
    depth: int = 2,
    time_embed_dim: int = 32,
    seed: int = 0,
    in_channels: int = 1,
    groups: int | None = None,
) -> UNet:
    if groups is None:
        groups = math.gcd(channels, 8)
    cfg = UNetConfig(
        in_channels=in_channels,
        base_channels=channels,
        depth=depth,
        time_embed_dim=time_embed_dim,
        groups=groups,
        seed=seed,
    )
    return UNet(cfg)


def forward(model: UNet, x, t):
    return model.forward(x, t)


def backward(model: UNet, x, t, upstream):
    return model.backward(x, t, upstream)


def count_params(cfg: UNetConfig) -> int:
    """Closed-form parameter count, enumerated independently of the layers."""
    E, c, D, cin = cfg.time_embed_dim, cfg.base_channels, cfg.depth, cfg.in_channels

    def conv(a, b, k=3):
        return a * b * k * k + b

    def block(a, b):
        return conv(a, b) + 2 * b + (E * b + b) + conv(b, b) + 2 * b

    total = E * E + E + conv(cin, c) + conv(c, cin)
    prev = c
    for i in range(D):
        total += block(prev, c * 2**i)
        prev = c * 2**i
    total += block(prev, c * 2**D)
    for i in range(D):
        total += block(c * 2 ** (i + 1) + c * 2**i, c * 2**i)
    return total


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; updates the parameter array in place."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if params.shape != grad.shape or params.shape != self.m.shape:
            raise ShapeError("params, grad and optimizer state must align")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.step_count)
        vhat = self.v / (1 - b2**self.step_count)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
        }


def adam_step(state: Adam, params: np.ndarray, grad: np.ndarray):
    state.step(params, grad)
    return params, state


class EarlyStopping:
    """Track the best validation loss; stop after ``patience`` rounds without
    improvement. Keeps a copy of the best parameters."""

    def __init__(self, patience: int = 10, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_params: np.ndarray | None = None
        self.best_round = -1
        self.rounds = 0
        self.bad_rounds = 0

    def update(self, loss: float, params: np.ndarray) -> bool:
        """Record one validation round; return True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_params = params.copy()
            self.best_round = self.rounds
            self.bad_rounds = 0
        else:
            self.bad_rounds += 1
        self.rounds += 1
        return self.bad_rounds >= self.patience

    def restore(self, params: np.ndarray) -> None:
        if self.best_params is not None:
            params[:] = self.best_params
