"""Convolutions, ODConv3D, normalization, resampling and cross-attention fusion.

All feature maps are single patches laid out ``(channels, depth, height, width)``;
there is no batch axis, so ODConv attentions are per patch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from odseg import backend
from odseg import tensor as T
from odseg.tensor import Tensor, from_op


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _conv_out_shape(shape, k, stride, pad):
    dims = tuple(_out_extent(n, k, stride, pad) for n in shape[1:])
    if any(n < 1 for n in dims):
        raise ValueError(f"non-positive output extent {dims} for input {shape}, k={k}, "
                         f"stride={stride}, padding={pad}")
    return dims


def _pad(a, pad):
    if pad == 0:
        return np.ascontiguousarray(a)
    return np.pad(a, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))


@dataclass
class Conv3DParams:
    weight: Tensor  # (c_out, c_in, k, k, k)
    bias: Tensor  # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 5 or w[2] != w[3] or w[3] != w[4]:
            raise ValueError(f"weight must be (c_out, c_in, k, k, k), got {w}")
        if w[0] < 1 or w[1] < 1:
            raise ValueError("c_out and c_in must be >= 1")
        if self.bias.shape != (w[0],):
            raise ValueError(f"bias shape {self.bias.shape} != ({w[0]},)")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


def conv3d_naive(x: Tensor, p: Conv3DParams) -> Tensor:
    """Seven-loop reference convolution; not differentiable."""
    if x.shape[0] != p.weight.shape[1]:
        raise ValueError(f"input has {x.shape[0]} channels, weight expects {p.weight.shape[1]}")
    _conv_out_shape(x.shape, p.kernel_size, p.stride, p.padding)
    dt = x.dtype
    out = backend.conv3d_naive(np.ascontiguousarray(x.data),
                               np.ascontiguousarray(p.weight.data, dtype=dt),
                               np.ascontiguousarray(p.bias.data, dtype=dt),
                               p.stride, p.padding)
    return Tensor(out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Convolution lowered to one matrix product over gathered columns."""
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.ndim != 4 or x.shape[0] != cin:
        raise ValueError(f"input {x.shape} incompatible with weight {weight.shape}")
    od, oh, ow = _conv_out_shape(x.shape, k, stride, padding)
    xp = _pad(x.data, padding)
    cols = backend.im2col3d(xp, k, stride, od, oh, ow)
    w2 = weight.data.reshape(cout, -1)
    # single-precision sums are accumulated in double and rounded once
    out = w2.astype(np.float64) @ cols.astype(np.float64)
    if bias is not None:
        out += bias.data[:, None]
    out = out.astype(x.dtype, copy=False)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(cout, -1)
        gx = gw = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(w2.T @ g2)
            gxp = backend.col2im3d(gcols, cin, *xp.shape[1:], k, stride, od, oh, ow)
            gx = gxp[:, padding:padding + x.shape[1], padding:padding + x.shape[2],
                     padding:padding + x.shape[3]]
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)
    return from_op(out.reshape(cout, od, oh, ow), parents, bw, "conv3d")


def conv3d_direct(x: Tensor, p: Conv3DParams) -> Tensor:
    return conv3d(x, p.weight, p.bias, p.stride, p.padding)


def transposed_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                      padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of ``conv3d`` with the same ``(c_out, c_in, k, k, k)`` weight.

    Maps ``c_out`` channels back to ``c_in``; ``bias`` (optional) has ``c_in``
    entries. Output extent per axis is ``(n - 1) * stride - 2 * padding + k
    + output_padding``.
    """
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.ndim != 4 or x.shape[0] != cout:
        raise ValueError(f"input {x.shape} incompatible with weight {weight.shape}")
    if not 0 <= output_padding < stride:
        raise ValueError("output_padding must be in [0, stride)")
    od, oh, ow = x.shape[1:]
    full = tuple((n - 1) * stride - 2 * padding + k + output_padding for n in (od, oh, ow))
    if any(n < 1 for n in full):
        raise ValueError(f"non-positive output extent {full}")
    padded = tuple(n + 2 * padding for n in full)
    w2 = weight.data.reshape(cout, -1)
    xf = x.data.reshape(cout, -1)
    cols = np.ascontiguousarray(w2.T @ xf)
    outp = backend.col2im3d(cols, cin, *padded, k, stride, od, oh, ow)
    out = outp[:, padding:padding + full[0], padding:padding + full[1], padding:padding + full[2]]
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gp = np.zeros((cin,) + padded, dtype=g.dtype)
        gp[:, padding:padding + full[0], padding:padding + full[1],
           padding:padding + full[2]] = g
        gcols = backend.im2col3d(gp, k, stride, od, oh, ow)
        gx = (w2 @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = (xf @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2, 3))
    return from_op(np.ascontiguousarray(out), parents, bw, "transposed_conv3d")


# ------------------------------------------------------------------ ODConv

@dataclass
class ODConvParams:
    experts: Tensor  # (n, c_out, c_in, k, k, k)
    fc_weight: Tensor  # (c_red, c_in)
    fc_bias: Tensor  # (c_red,)
    heads: dict  # name -> (weight (len, c_red), bias (len,)) for spatial/channel/filter/kernel
    bias: Tensor  # (c_out,)
    temperature: float = 30.0
    stride: int = 1
    padding: int = 0
    slope: float = 0.01

    HEADS = ("spatial", "channel", "filter", "kernel")

    def __post_init__(self):
        n, cout, cin, k = self.experts.shape[:4]
        if n < 1:
            raise ValueError("need at least one expert kernel")
        want = {"spatial": k ** 3, "channel": cin, "filter": cout, "kernel": n}
        cred = self.fc_weight.shape[0]
        if self.fc_weight.shape != (cred, cin):
            raise ValueError(f"fc_weight shape {self.fc_weight.shape} != (c_red, {cin})")
        for name in self.HEADS:
            w, b = self.heads[name]
            if w.shape != (want[name], cred) or b.shape != (want[name],):
                raise ValueError(f"head {name!r} has shape {w.shape}/{b.shape}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def num_experts(self):
        return self.experts.shape[0]

    @property
    def kernel_size(self):
        return self.experts.shape[3]

    def parameters(self):
        params = {"experts": self.experts, "fc.weight": self.fc_weight,
                  "fc.bias": self.fc_bias, "bias": self.bias}
        for name in self.HEADS:
            w, b = self.heads[name]
            params[f"{name}.weight"] = w
            params[f"{name}.bias"] = b
        return params


def _linear(row: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(row, T.transpose(w)), T.reshape(b, (1, -1)))


def odconv_attentions(x: Tensor, p: ODConvParams):
    """Spatial, input-channel, output-filter and expert attentions from one squeeze.

    All four heads read the same pooled-and-reduced descriptor, so they are
    computed in parallel rather than one after another.
    """
    squeeze = T.reshape(T.global_average_pool(x), (1, -1))
    z = T.leaky_relu(_linear(squeeze, p.fc_weight, p.fc_bias), p.slope)
    a_s = T.reshape(T.sigmoid(_linear(z, *p.heads["spatial"])), (-1,))
    a_c = T.reshape(T.sigmoid(_linear(z, *p.heads["channel"])), (-1,))
    a_f = T.reshape(T.sigmoid(_linear(z, *p.heads["filter"])), (-1,))
    a_w = T.reshape(T.softmax(_linear(z, *p.heads["kernel"]), axis=1,
                              temperature=p.temperature), (-1,))
    return a_s, a_c, a_f, a_w


def effective_kernel(experts: Tensor, a_s: Tensor, a_c: Tensor, a_f: Tensor,
                     a_w: Tensor) -> Tensor:
    """Collapse the expert bank into one ``(c_out, c_in, k, k, k)`` kernel."""
    n, cout, cin, k = experts.shape[:4]
    w = T.mul(experts, T.reshape(a_s, (1, 1, 1, k, k, k)))
    w = T.mul(w, T.reshape(a_c, (1, 1, cin, 1, 1, 1)))
    w = T.mul(w, T.reshape(a_f, (1, cout, 1, 1, 1, 1)))
    w = T.mul(w, T.reshape(a_w, (n, 1, 1, 1, 1, 1)))
    return T.reshape(T.sum(w, axes=0), (cout, cin, k, k, k))


def odconv3d_forward(x: Tensor, p: ODConvParams, attentions=None) -> Tensor:
    """Dynamic convolution with a per-patch kernel.

    ``attentions`` overrides the computed ``(a_s, a_c, a_f, a_w)``; it exists
    so tests can pin or rescale them without the sigmoid/softmax.
    """
    if attentions is None:
        attentions = odconv_attentions(x, p)
    w_eff = effective_kernel(p.experts, *attentions)
    return conv3d(x, w_eff, p.bias, p.stride, p.padding)


# ---------------------------------------------------------- normalization

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[0]
    xf = x.data.reshape(c, -1)
    n = xf.shape[1]
    mu = xf.mean(axis=1, keepdims=True)
    xc = xf - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def bw(g):
        g = g.reshape(c, -1)
        gxhat = g * gamma.data[:, None]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
        return gx.reshape(x.shape), (g * xhat).sum(axis=1), g.sum(axis=1)
    return from_op(out.reshape(x.shape), (x, gamma, beta), bw, "instance_norm")


# -------------------------------------------------------------- resampling

def downsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Mean of each ``factor^3`` block."""
    c, d, h, w = x.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(f"extents {x.shape[1:]} not divisible by {factor}")
    f = factor
    blocks = x.data.reshape(c, d // f, f, h // f, f, w // f, f)
    out = blocks.mean(axis=(2, 4, 6))
    scale_ = x.dtype.type(1.0 / f ** 3)

    def bw(g):
        up = np.broadcast_to(g[:, :, None, :, None, :, None] * scale_, blocks.shape)
        return (up.reshape(x.shape).copy(),)
    return from_op(out, (x,), bw, "downsample")


def _interp_matrix(n_in, n_out, dtype):
    """Linear interpolation weights with half-pixel centers, edges clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1
        return m
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_trilinear(x: Tensor, size) -> Tensor:
    """Separable trilinear resize of the spatial axes to ``size``."""
    mats = [_interp_matrix(n, m, x.dtype) for n, m in zip(x.shape[1:], size)]
    out = x.data
    for axis, m in enumerate(mats, start=1):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)

    def bw(g):
        for axis, m in enumerate(mats, start=1):
            g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis)
        return (g,)
    return from_op(np.ascontiguousarray(out), (x,), bw, "upsample")


# --------------------------------------------------------- cross-attention

@dataclass
class CrossAttentionParams:
    wq: Tensor  # (d_model, d_feat)
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (d_feat, d_model)

    def __post_init__(self):
        dm, df = self.wq.shape
        if dm < 1:
            raise ValueError("d_model must be >= 1")
        if self.wk.shape != (dm, df) or self.wv.shape != (dm, df) or self.wo.shape != (df, dm):
            raise ValueError("projection shapes disagree")

    @property
    def d_model(self):
        return self.wq.shape[0]

    @property
    def scale(self):
        return 1.0 / np.sqrt(self.d_model)

    def parameters(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def cross_attention_fuse(q_feat: Tensor, kv_feat: Tensor, p: CrossAttentionParams,
                         return_weights: bool = False):
    """Single-head cross-attention over voxel tokens with a residual add.

    Queries come from ``q_feat``, keys and values from ``kv_feat``.
    """
    if q_feat.shape != kv_feat.shape:
        raise ValueError(f"feature shapes differ: {q_feat.shape} vs {kv_feat.shape}")
    c = q_feat.shape[0]
    if p.wq.shape[1] != c:
        raise ValueError(f"projection expects {p.wq.shape[1]} features, got {c}")
    xq = T.transpose(T.reshape(q_feat, (c, -1)))  # tokens x features
    xkv = T.transpose(T.reshape(kv_feat, (c, -1)))
    q = T.matmul(xq, T.transpose(p.wq))
    k = T.matmul(xkv, T.transpose(p.wk))
    v = T.matmul(xkv, T.transpose(p.wv))
    attn = T.softmax(T.scale(T.matmul(q, T.transpose(k)), p.scale), axis=1)
    upd = T.matmul(T.matmul(attn, v), T.transpose(p.wo))
    out = T.add(q_feat, T.reshape(T.transpose(upd), q_feat.shape))
    return (out, attn) if return_weights else out


# ------------------------------------------------------------ initializers

def he_normal(rng, shape, fan_in, dtype=np.float32, requires_grad=True):
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad, dtype=dtype)


def init_conv(rng, cin, cout, k, stride=1, padding=None, dtype=np.float32):
    padding = k // 2 if padding is None else padding
    return Conv3DParams(
        weight=he_normal(rng, (cout, cin, k, k, k), cin * k ** 3, dtype),
        bias=Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
        stride=stride, padding=padding)


def init_odconv(rng, cin, cout, k, stride=1, padding=None, num_experts=4, reduction=4,
                temperature=30.0, dtype=np.float32):
    padding = k // 2 if padding is None else padding
    cred = max(1, cin // reduction)
    heads = {}
    for name, length in (("spatial", k ** 3), ("channel", cin), ("filter", cout),
                         ("kernel", num_experts)):
        heads[name] = (he_normal(rng, (length, cred), cred, dtype),
                       Tensor(np.zeros(length), requires_grad=True, dtype=dtype))
    return ODConvParams(
        experts=he_normal(rng, (num_experts, cout, cin, k, k, k), cin * k ** 3, dtype),
        fc_weight=he_normal(rng, (cred, cin), cin, dtype),
        fc_bias=Tensor(np.zeros(cred), requires_grad=True, dtype=dtype),
        heads=heads,
        bias=Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
        temperature=temperature, stride=stride, padding=padding)


def init_cross_attention(rng, d_feat, d_model=None, dtype=np.float32):
    d_model = d_feat if d_model is None else d_model

    def glorot(shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=dtype)
    return CrossAttentionParams(glorot((d_model, d_feat)), glorot((d_model, d_feat)),
                                glorot((d_model, d_feat)), glorot((d_feat, d_model)))
