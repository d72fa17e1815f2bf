"""Parameterized layers: convolutions, residual units, attention, non-local.

A ``Module`` owns ``Parameter`` tensors and sub-modules, discovered from its
``__dict__`` in insertion order so that parameter naming and checkpoint
layout are stable.  Modules can be built in "meta" mode (shapes only, no
arrays) for symbolic parameter/FLOP accounting at paper scale without
allocating paper-scale weights.
"""

from __future__ import annotations

import numpy as np

from . import ops
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor with a declared shape (data may be meta/absent)."""

    __slots__ = ("declared_shape", "name")

    def __init__(self, shape, data=None):
        shape = tuple(int(s) for s in shape)
        if data is None:  # meta mode
            super().__init__(np.zeros((0,)), requires_grad=True, op="param")
        else:
            assert data.shape == shape
            super().__init__(data, requires_grad=True, op="param")
        self.declared_shape = shape
        self.name = None

    @property
    def is_meta(self):
        return self.data.size == 0 and self.declared_shape != (0,)

    @property
    def count(self):
        return int(np.prod(self.declared_shape, dtype=np.int64))


class Module:
    """Base class providing parameter discovery and naming."""

    def _members(self):
        def walk(key, value):
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from walk(f"{key}.{i}", item)

        for key, value in vars(self).items():
            yield from walk(key, value)

    def named_parameters(self, prefix=""):
        for key, value in self._members():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            else:
                yield from value.named_parameters(path)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Builder:
    """Carries the rng/dtype/meta context through model construction."""

    def __init__(self, seed=0, dtype=np.float64, meta=False):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.meta = meta

    def kaiming(self, shape, fan_in, gain=1.0):
        if self.meta:
            return Parameter(shape)
        std = gain * np.sqrt(2.0 / fan_in)
        data = (self.rng.standard_normal(shape) * std).astype(self.dtype)
        return Parameter(shape, data)

    def zeros(self, shape):
        if self.meta:
            return Parameter(shape)
        return Parameter(shape, np.zeros(shape, dtype=self.dtype))


class Conv3d(Module):
    """3-D convolution layer; default padding is floor(k/2) ("same" style)."""

    def __init__(self, in_ch, out_ch, kernel, build, stride=1, padding=None, bias=True,
                 gain=1.0):
        kd, kh, kw = ops._triple(kernel)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = (kd, kh, kw)
        self.stride = ops._triple(stride)
        self.padding = (kd // 2, kh // 2, kw // 2) if padding is None else ops._triple(padding)
        fan_in = in_ch * kd * kh * kw
        self.weight = build.kaiming((out_ch, in_ch, kd, kh, kw), fan_in, gain=gain)
        self.bias = build.zeros((out_ch,)) if bias else None

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, shape):
        c, d, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        dims = [
            ops._out_extent(n, k, s, p)
            for n, k, s, p in zip((d, h, w), self.kernel, self.stride, self.padding)
        ]
        if min(dims) < 1:
            raise ShapeError(f"conv output extent < 1 from spatial {(d, h, w)}")
        return (self.out_ch, *dims)

    def flops(self, shape):
        out = self.out_shape(shape)
        positions = out[1] * out[2] * out[3]
        kd, kh, kw = self.kernel
        return positions * self.out_ch * self.in_ch * kd * kh * kw, out


class Linear(Module):
    def __init__(self, in_features, out_features, build):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = build.kaiming((out_features, in_features), in_features)
        self.bias = build.zeros((out_features,))

    def forward(self, x):
        return ops.fully_connected(x, self.weight, self.bias)

    def flops(self):
        return self.in_features * self.out_features


class ResidualUnit(Module):
    """Bottleneck unit: 1x1x1 -> 3x3x3 (strided) -> 1x1x1 plus a skip.

    A 1x1x1 projection shortcut is present iff channels or stride change.
    ReLU follows each inner conv; the last activation fires after the skip
    addition.
    """

    def __init__(self, in_ch, mid_ch, out_ch, build, stride=1):
        self.conv1 = Conv3d(in_ch, mid_ch, 1, build, bias=False)
        self.conv2 = Conv3d(mid_ch, mid_ch, 3, build, stride=stride, bias=False)
        # damped residual-branch output keeps deep stacks stable without
        # normalization layers
        self.conv3 = Conv3d(mid_ch, out_ch, 1, build, bias=False, gain=0.1)
        self.stride = ops._triple(stride)
        if in_ch != out_ch or self.stride != (1, 1, 1):
            self.shortcut = Conv3d(in_ch, out_ch, 1, build, stride=stride, bias=False)
        else:
            self.shortcut = None

    def forward(self, x):
        y = T.relu(self.conv1.forward(x))
        y = T.relu(self.conv2.forward(y))
        y = self.conv3.forward(y)
        skip = x if self.shortcut is None else self.shortcut.forward(x)
        return T.relu(y + skip)

    def out_shape(self, shape):
        return self.conv3.out_shape(self.conv2.out_shape(self.conv1.out_shape(shape)))

    def flops(self, shape):
        total = 0
        s = shape
        for conv in (self.conv1, self.conv2, self.conv3):
            f, s = conv.flops(s)
            total += f
        if self.shortcut is not None:
            f, _ = self.shortcut.flops(shape)
            total += f
        return total, s


_ACTIVATIONS = {
    "mixed": ops.mixed_attention_activation,
    "channel": ops.channel_attention_activation,
    "spatial": ops.spatial_attention_activation,
}


class AttentionModule(Module):
    """Residual attention: trunk F, encoder-decoder mask M, H = (1 + M) * F.

    The mask branch downsamples ``down_steps`` times (2x2x2 maxpool +
    residual unit), then mirrors back up with trilinear upsampling, adding a
    one-unit skip at each intermediate scale, and ends in a pair of 1x1x1
    convolutions followed by the variant activation.  Output resolution
    equals input resolution.
    """

    def __init__(self, channels, build, down_steps=2, variant="mixed",
                 pre_units=1, trunk_units=2, post_units=1):
        if variant not in _ACTIVATIONS:
            raise ConfigError(f"unknown attention variant {variant!r}")
        self.channels = channels
        self.down_steps = down_steps
        self.variant = variant
        mid = max(1, channels // 4)

        def unit():
            return ResidualUnit(channels, mid, channels, build)

        self.pre = [unit() for _ in range(pre_units)]
        self.trunk = [unit() for _ in range(trunk_units)]
        self.down_units = [unit() for _ in range(down_steps)]
        self.skip_units = [unit() for _ in range(max(0, down_steps - 1))]
        self.up_units = [unit() for _ in range(down_steps)]
        self.head1 = Conv3d(channels, channels, 1, build)
        self.head2 = Conv3d(channels, channels, 1, build)
        # The sign of each mask channel is unidentifiable a priori (downstream
        # convolutions can absorb a flip), so a symmetric init leaves the
        # channel-mean of M carrying no coherent signal.  head2 sees
        # non-negative (post-ReLU) features; starting it non-negative biases
        # every channel toward "amplify where features are active", which keeps
        # the aggregate attention map interpretable as saliency.
        np.abs(self.head2.weight.data, out=self.head2.weight.data)
        self.post = [unit() for _ in range(post_units)]

    def _check_divisible(self, shape):
        for axis, extent in zip("DHW", shape[1:]):
            if extent % (1 << self.down_steps) != 0:
                raise ShapeError(
                    f"attention module: axis {axis} extent {extent} not divisible "
                    f"by 2^{self.down_steps}"
                )

    def forward(self, x, collect=None):
        """Returns H; the attention map M is appended to ``collect`` if given."""
        if x.shape[1] != self.channels:
            raise ShapeError(f"attention expects {self.channels} channels, got {x.shape[1]}")
        self._check_divisible(x.shape[1:])
        for unit in self.pre:
            x = unit.forward(x)

        f = x
        for unit in self.trunk:
            f = unit.forward(f)

        m = x
        skips = []
        for i, unit in enumerate(self.down_units):
            m = ops.maxpool3d(m, kernel=2, stride=2, padding=0)
            m = unit.forward(m)
            if i < len(self.down_units) - 1:
                skips.append(self.skip_units[i].forward(m))
        for i, unit in enumerate(self.up_units):
            m = unit.forward(m)
            m = ops.upsample3d(m, 2, mode="trilinear")
            if skips:
                m = m + skips.pop()
        m = self.head2.forward(T.relu(self.head1.forward(m)))
        m = _ACTIVATIONS[self.variant](m)
        if collect is not None:
            collect.append(m)

        h = (Tensor(np.asarray(1.0, dtype=f.dtype)) + m) * f
        for unit in self.post:
            h = unit.forward(h)
        return h

    def out_shape(self, shape):
        self._check_divisible(shape)
        return shape

    def flops(self, shape):
        total = 0
        for unit in self.pre:
            f, _ = unit.flops(shape)
            total += f
        for unit in self.trunk:
            f, _ = unit.flops(shape)
            total += f
        c = shape[0]
        scales = [shape]
        for i, unit in enumerate(self.down_units):
            prev = scales[-1]
            scale = (c, prev[1] // 2, prev[2] // 2, prev[3] // 2)
            scales.append(scale)
            f, _ = unit.flops(scale)
            total += f
            if i < len(self.down_units) - 1:
                f, _ = self.skip_units[i].flops(scale)
                total += f
        # up unit i runs at the scale reached after (down_steps - i) pools
        for i, unit in enumerate(self.up_units):
            f, _ = unit.flops(scales[self.down_steps - i])
            total += f
        for conv in (self.head1, self.head2):
            f, _ = conv.flops(shape)
            total += f
        for unit in self.post:
            f, _ = unit.flops(shape)
            total += f
        return total, shape


class NonLocalBlock(Module):
    """Self-attention over all spatial positions with dot-product affinity.

    theta/phi/g and the output projection are 1x1x1 convolutions with a C/2
    bottleneck.  The affinity is scaled by 1/P and the block is residual:
    out = x + Wz(y), with Wz zero-initialized so the block is the identity
    at init.  The P x P affinity buffer is materialized (documented O(P^2)).
    """

    def __init__(self, channels, build, bottleneck=None):
        if bottleneck is None:
            bottleneck = channels // 2
        if bottleneck < 1:
            raise ConfigError(f"non-local bottleneck must be >= 1, got {bottleneck}")
        self.channels = channels
        self.bottleneck = bottleneck
        self.theta = Conv3d(channels, bottleneck, 1, build)
        self.phi = Conv3d(channels, bottleneck, 1, build)
        self.g = Conv3d(channels, bottleneck, 1, build)
        self.wz = Conv3d(bottleneck, channels, 1, build)
        if not build.meta:
            self.wz.weight.data[:] = 0.0

    def forward(self, x):
        n, c, d, h, w = x.shape
        p = d * h * w
        theta = T.reshape(self.theta.forward(x), (n, self.bottleneck, p))
        phi = T.reshape(self.phi.forward(x), (n, self.bottleneck, p))
        g = T.reshape(self.g.forward(x), (n, self.bottleneck, p))
        # affinity[i, j] = <theta_i, phi_j>, scaled by 1/P
        aff = T.matmul(T.transpose(theta, (0, 2, 1)), phi)
        y = T.matmul(g, T.transpose(aff, (0, 2, 1)))
        y = y * Tensor(np.asarray(1.0 / p, dtype=x.dtype))
        y = T.reshape(y, (n, self.bottleneck, d, h, w))
        return x + self.wz.forward(y)

    def out_shape(self, shape):
        return shape

    def flops(self, shape):
        c, d, h, w = shape
        p = d * h * w
        total = 0
        for conv in (self.theta, self.phi, self.g):
            f, _ = conv.flops(shape)
            total += f
        f, _ = self.wz.flops((self.bottleneck, d, h, w))
        total += f
        # affinity (P^2 * Cb) and aggregation (P^2 * Cb) multiply-adds
        total += 2 * p * p * self.bottleneck
        return total, shape


def pairwise_affinity(theta_feats, phi_feats):
    """Plain-array P x P dot-product affinity: entry (i, j) = <theta_i, phi_j>.

    Inputs are (Cb, P) arrays (one batch element).
    """
    theta_feats = np.asarray(theta_feats)
    phi_feats = np.asarray(phi_feats)
    if theta_feats.shape[0] != phi_feats.shape[0]:
        raise ShapeError("pairwise_affinity: bottleneck channel counts differ")
    return theta_feats.T @ phi_feats
