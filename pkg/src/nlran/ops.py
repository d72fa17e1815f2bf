"""Neural building-block operations on 5-D (N, C, D, H, W) tensors.

Convolution and pooling are implemented by looping over kernel offsets with
vectorized strided slices; for a fixed offset the output windows are
disjoint, so the backward scatter is a plain slice-accumulate.  All ops are
differentiable through the tensor graph and are verified against
finite-difference and brute-force oracles in the test suite.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or 3-tuple, got {v!r}")
    return t


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding over the three spatial axes.

    ``x`` is (N, Cin, D, H, W), ``weight`` is (Cout, Cin, kd, kh, kw) and
    ``bias`` (Cout,) or None.
    """
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d input must be rank 5, got {x.shape}")
    if weight.data.ndim != 5:
        raise ShapeError(f"conv3d weight must be rank 5, got {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, cin_w, kd, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d: input has {cin} channels, weight expects {cin_w}")
    do = _out_extent(d, kd, sd, pd)
    ho = _out_extent(h, kh, sh, ph)
    wo = _out_extent(w, kw, sw, pw)
    if min(do, ho, wo) < 1:
        raise ShapeError(
            f"conv3d: output extent < 1 for input {(d, h, w)}, "
            f"kernel {(kd, kh, kw)}, stride {(sd, sh, sw)}, padding {(pd, ph, pw)}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((n, cout, do, ho, wo), dtype=x.dtype)
    for a, b, c in product(range(kd), range(kh), range(kw)):
        xs = xp[:, :, a : a + sd * do : sd, b : b + sh * ho : sh, c : c + sw * wo : sw]
        # (Cout, Cin) x (N, Cin, do, ho, wo) -> (N, Cout, do, ho, wo)
        out += np.moveaxis(np.tensordot(weight.data[:, :, a, b, c], xs, axes=([1], [1])), 0, 1)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv3d bias shape {bias.shape} != ({cout},)")
        out += bias.data.reshape(1, cout, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    node = Tensor(out, T._needs_grad(*parents), "conv3d", parents)

    def back(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for a, b, c in product(range(kd), range(kh), range(kw)):
            sl = (
                slice(None),
                slice(None),
                slice(a, a + sd * do, sd),
                slice(b, b + sh * ho, sh),
                slice(c, c + sw * wo, sw),
            )
            if gw is not None:
                gw[:, :, a, b, c] = np.tensordot(g, xp[sl], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            if x.requires_grad:
                gxp[sl] += np.moveaxis(
                    np.tensordot(weight.data[:, :, a, b, c], g, axes=([0], [1])), 0, 1
                )
        if x.requires_grad:
            gx = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    node._backward = back
    return node


def maxpool3d(x, kernel=(3, 3, 3), stride=2, padding=0):
    """Per-window maximum; gradient goes to the first row-major argmax."""
    kd, kh, kw = _triple(kernel)
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d input must be rank 5, got {x.shape}")
    n, ch, d, h, w = x.shape
    do = _out_extent(d, kd, sd, pd)
    ho = _out_extent(h, kh, sh, ph)
    wo = _out_extent(w, kw, sw, pw)
    if min(do, ho, wo) < 1:
        raise ShapeError(
            f"maxpool3d: window {(kd, kh, kw)} larger than padded input {(d, h, w)}"
        )

    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)),
        constant_values=-np.inf,
    )
    best = np.full((n, ch, do, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros(best.shape, dtype=np.int16)
    # offsets iterated in row-major order => strict '>' keeps the first
    # occurrence within a window on ties
    for k, (a, b, c) in enumerate(product(range(kd), range(kh), range(kw))):
        cand = xp[:, :, a : a + sd * do : sd, b : b + sh * ho : sh, c : c + sw * wo : sw]
        better = cand > best
        best[better] = cand[better]
        arg[better] = k

    node = Tensor(best, x.requires_grad, "maxpool3d", (x,))

    def back(g):
        gxp = np.zeros_like(xp)
        for k, (a, b, c) in enumerate(product(range(kd), range(kh), range(kw))):
            view = gxp[:, :, a : a + sd * do : sd, b : b + sh * ho : sh, c : c + sw * wo : sw]
            view += g * (arg == k)
        return (gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w],)

    node._backward = back
    return node


def _interp_matrix(n_in, factor, mode, dtype):
    """Row-stochastic (n_in*factor, n_in) interpolation weights for one axis."""
    n_out = n_in * factor
    w = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        for i in range(n_out):
            w[i, i // factor] = 1.0
    else:  # trilinear, corner alignment off
        for i in range(n_out):
            src = (i + 0.5) / factor - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, n_in - 1)
            frac = src - i0
            w[i, i0] += 1.0 - frac
            w[i, i1] += frac
    return w


def upsample3d(x, factor, mode="nearest"):
    """Integer-factor upsampling along D, H, W; nearest or trilinear."""
    fd, fh, fw = _triple(factor)
    if min(fd, fh, fw) < 1:
        raise ValueError(f"upsample factors must be positive, got {(fd, fh, fw)}")
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"unknown upsample mode {mode!r}")
    if x.data.ndim != 5:
        raise ShapeError(f"upsample3d input must be rank 5, got {x.shape}")

    mats = [
        _interp_matrix(x.shape[2 + i], f, mode, x.data.dtype)
        for i, f in enumerate((fd, fh, fw))
    ]

    def apply(data, transposed):
        for i, m in enumerate(mats):
            m = m.T if transposed else m
            data = np.moveaxis(np.tensordot(m, data, axes=([1], [2 + i])), 0, 2 + i)
        return data

    node = Tensor(apply(x.data, False), x.requires_grad, "upsample3d", (x,))
    node._backward = lambda g: (apply(g, True),)
    return node


def upsample_array(values, factor, mode="trilinear"):
    """Non-graph upsampling of a plain (D, H, W) array (heat-map resizing)."""
    t = Tensor(np.asarray(values, dtype=np.float64)[None, None])
    return upsample3d(t, factor, mode).data[0, 0]


# -- attention activations (the three variants) -------------------------


def mixed_attention_activation(x):
    """Elementwise sigmoid: joint spatial+channel gating in (0, 1)."""
    return T.sigmoid(x)


def channel_attention_activation(x):
    """L2-normalize the channel vector at every (n, d, h, w) position.

    Zero-norm vectors map to zero (and receive zero gradient).
    """
    if x.data.ndim < 2:
        raise ShapeError("channel attention needs a channel axis (rank >= 2)")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, x.data / safe, 0.0)
    node = Tensor(out, x.requires_grad, "channel_l2norm", (x,))

    def back(g):
        dot = (x.data * g).sum(axis=1, keepdims=True)
        gx = g / safe - x.data * dot / (safe**3)
        return (np.where(norm > 0, gx, 0.0),)

    node._backward = back
    return node


def spatial_attention_activation(x, eps=1e-5):
    """Standardize each channel over its spatial extent, then sigmoid.

    Population statistics; ``eps`` is added to the std so a constant channel
    maps to sigmoid(0) = 0.5.
    """
    if x.data.ndim != 5:
        raise ShapeError(f"spatial attention input must be rank 5, got {x.shape}")
    axes = (2, 3, 4)
    m = T.tmean(x, axis=axes, keepdims=True)
    centered = x - m
    var = T.tmean(centered * centered, axis=axes, keepdims=True)
    std = T.sqrt(var)
    return T.sigmoid(div_safe(centered, std, eps))


def div_safe(num, std, eps):
    return T.div(num, std + Tensor(np.asarray(eps, dtype=std.dtype)))


def global_average_pool(x):
    """Spatial mean per (n, c): (N, C, D, H, W) -> (N, C, 1, 1, 1)."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_average_pool input must be rank 5, got {x.shape}")
    return T.tmean(x, axis=(2, 3, 4), keepdims=True)


def fully_connected(x, weight, bias=None):
    """Affine map x @ W^T + b with x (N, F), W (K, F), b (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("fully_connected expects rank-2 input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"fully_connected: features {x.shape[1]} != weight features {weight.shape[1]}"
        )
    out = T.matmul(x, T.transpose(weight, (1, 0)))
    if bias is not None:
        out = out + bias
    return out


def softmax(logits):
    """Plain numpy softmax over the last axis (inference scores)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    ``labels`` is an integer array of class indices.  Stabilized by
    max-subtraction; backward is (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels out of range [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = float((logsumexp - picked).mean())
    node = Tensor(
        np.asarray(loss, dtype=logits.dtype), logits.requires_grad, "softmax_xent", (logits,)
    )

    def back(g):
        probs = np.exp(z - logsumexp[:, None])
        probs[np.arange(n), labels] -= 1.0
        return (probs.astype(logits.dtype) * (g / n),)

    node._backward = back
    return node
