"""Dual-encoder multi-scale U-Net, loss, optimizer and sliding-window inference."""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from odseg import layers as L
from odseg import tensor as T
from odseg.tensor import Tensor

log = logging.getLogger(__name__)

NUM_CLASSES = 4


@dataclass
class NetworkConfig:
    in_channels: int = 4
    num_classes: int = NUM_CLASSES
    base_features: int = 8
    num_stages: int = 3
    max_features: int = 320
    use_odconv: bool = True
    use_multiscale: bool = True
    odconv_experts: int = 4
    odconv_reduction: int = 4
    odconv_temperature: float = 30.0
    bidirectional_fusion: bool = False
    patch_size: tuple = (32, 32, 32)
    slope: float = 0.01
    dtype: str = "float32"

    # documentation of the challenge-scale geometry; not used by default
    FULL_SCALE = {"base_features": 32, "num_stages": 5, "patch_size": (128, 128, 128)}

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if len(self.patch_size) != 3:
            raise ValueError("patch_size needs three extents")
        if self.num_classes != NUM_CLASSES:
            raise ValueError("num_classes must be 4 (background, NE, ED, ET)")
        if self.in_channels < 1 or self.base_features < 1 or self.num_stages < 1:
            raise ValueError("in_channels, base_features and num_stages must be >= 1")
        # the downsampled encoder needs one extra octave
        div = 2 ** (self.num_stages + (1 if self.use_multiscale else 0))
        if any(s % div for s in self.patch_size):
            raise ValueError(f"patch extents {self.patch_size} must be divisible by {div}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def features(self, level):
        return min(self.base_features * 2 ** level, self.max_features)

    def to_dict(self):
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d


@dataclass
class ConvBlock:
    conv: object  # Conv3DParams or ODConvParams
    gamma: Tensor
    beta: Tensor
    slope: float = 0.01

    def __call__(self, x):
        if isinstance(self.conv, L.ODConvParams):
            y = L.odconv3d_forward(x, self.conv)
        else:
            y = L.conv3d_direct(x, self.conv)
        y = L.instance_norm(y, self.gamma, self.beta)
        return T.leaky_relu(y, self.slope)

    def parameters(self):
        params = {f"conv.{k}": v for k, v in self.conv.parameters().items()}
        params["norm.gamma"] = self.gamma
        params["norm.beta"] = self.beta
        return params


@dataclass
class UpStage:
    weight: Tensor  # (c_low_res, c_skip, 2, 2, 2), conv layout
    bias: Tensor
    blocks: list

    def parameters(self):
        params = {"up.weight": self.weight, "up.bias": self.bias}
        for i, b in enumerate(self.blocks):
            params.update({f"block{i}.{k}": v for k, v in b.parameters().items()})
        return params


@dataclass
class Network:
    config: NetworkConfig
    encoder_full: list
    encoder_down: list | None
    fusion: list | None  # one CrossAttentionParams, two when bidirectional
    decoder: list
    head: L.Conv3DParams
    params: dict = field(default_factory=dict)

    def forward(self, patch: Tensor) -> Tensor:
        return forward(self, patch)

    __call__ = forward

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}


def _block(rng, cfg, cin, cout, stride, odconv, dtype):
    if odconv:
        conv = L.init_odconv(rng, cin, cout, 3, stride=stride, padding=1,
                             num_experts=cfg.odconv_experts, reduction=cfg.odconv_reduction,
                             temperature=cfg.odconv_temperature, dtype=dtype)
    else:
        conv = L.init_conv(rng, cin, cout, 3, stride=stride, padding=1, dtype=dtype)
    return ConvBlock(conv, Tensor(np.ones(cout), True, dtype), Tensor(np.zeros(cout), True, dtype),
                     cfg.slope)


def _encoder(rng, cfg, dtype):
    stages, cin = [], cfg.in_channels
    for level in range(cfg.num_stages + 1):
        f = cfg.features(level)
        stride = 1 if level == 0 else 2
        stages.append([_block(rng, cfg, cin, f, stride, cfg.use_odconv, dtype),
                       _block(rng, cfg, f, f, 1, cfg.use_odconv, dtype)])
        cin = f
    return stages


def build(config: NetworkConfig, seed: int = 0) -> Network:
    """Initialize every parameter deterministically from ``seed``."""
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(seed)
    enc_full = _encoder(rng, config, dtype)
    enc_down = fusion = None
    if config.use_multiscale:
        enc_down = _encoder(rng, config, dtype)
        fb = config.features(config.num_stages)
        fusion = [L.init_cross_attention(rng, fb, dtype=dtype)]
        if config.bidirectional_fusion:
            fusion.append(L.init_cross_attention(rng, fb, dtype=dtype))
    decoder = []
    for i in range(config.num_stages):
        level = config.num_stages - 1 - i
        f_low, f = config.features(level + 1), config.features(level)
        w = L.he_normal(rng, (f_low, f, 2, 2, 2), f_low * 8, dtype)
        decoder.append(UpStage(w, Tensor(np.zeros(f), True, dtype),
                               [_block(rng, config, 2 * f, f, 1, False, dtype),
                                _block(rng, config, f, f, 1, False, dtype)]))
    head = L.init_conv(rng, config.features(0), config.num_classes, 1, padding=0, dtype=dtype)

    net = Network(config, enc_full, enc_down, fusion, decoder, head)
    params = {}
    for prefix, enc in (("enc_full", enc_full), ("enc_down", enc_down)):
        if enc is None:
            continue
        for s, stage in enumerate(enc):
            for b, block in enumerate(stage):
                for k, v in block.parameters().items():
                    params[f"{prefix}.{s}.{b}.{k}"] = v
    for j, fp in enumerate(fusion or []):
        for k, v in fp.parameters().items():
            params[f"fusion.{j}.{k}"] = v
    for s, stage in enumerate(decoder):
        for k, v in stage.parameters().items():
            params[f"dec.{s}.{k}"] = v
    params["head.weight"] = head.weight
    params["head.bias"] = head.bias
    net.params = params
    return net


def _encode(stages, x):
    skips = []
    for stage in stages:
        for block in stage:
            x = block(x)
        skips.append(x)
    return skips


def forward(net: Network, patch: Tensor) -> Tensor:
    """Unnormalized class scores ``(num_classes, s, s, s)`` for one patch."""
    cfg = net.config
    if patch.ndim != 4 or patch.shape[0] != cfg.in_channels:
        raise ValueError(f"expected ({cfg.in_channels}, d, h, w) patch, got {patch.shape}")
    div = 2 ** (cfg.num_stages + (1 if cfg.use_multiscale else 0))
    if any(s % div for s in patch.shape[1:]):
        raise ValueError(f"patch extents {patch.shape[1:]} not divisible by {div}")
    if patch.dtype != np.dtype(cfg.dtype):
        patch = Tensor(patch.data.astype(cfg.dtype))
    skips = _encode(net.encoder_full, patch)
    x = skips[-1]
    if cfg.use_multiscale:
        coarse = _encode(net.encoder_down, L.downsample_trilinear(patch, 2))[-1]
        coarse = L.upsample_trilinear(coarse, x.shape[1:])
        fused = L.cross_attention_fuse(x, coarse, net.fusion[0])
        if len(net.fusion) > 1:
            back = L.cross_attention_fuse(coarse, x, net.fusion[1])
            fused = T.scale(T.add(fused, back), 0.5)
        x = fused
    for i, stage in enumerate(net.decoder):
        x = L.transposed_conv3d(x, stage.weight, stage.bias, stride=2)
        x = T.concat([x, skips[cfg.num_stages - 1 - i]], axis=0)
        for block in stage.blocks:
            x = block(x)
    return L.conv3d_direct(x, net.head)


# -------------------------------------------------------------------- loss

def one_hot(target, num_classes=NUM_CLASSES, dtype=np.float32):
    target = np.asarray(target)
    if target.min() < 0 or target.max() >= num_classes:
        raise ValueError(f"labels outside 0..{num_classes - 1}")
    out = np.zeros((num_classes,) + target.shape, dtype=dtype)
    for c in range(num_classes):
        out[c] = target == c
    return out


def loss(logits: Tensor, target, eps: float = 1e-5, return_terms: bool = False):
    """Soft Dice over foreground classes plus voxelwise cross-entropy.

    ``loss = (1 - mean_c dice_c) + CE`` with ``dice_c = (2 I + eps) / (P + G + eps)``.
    """
    target = np.asarray(target)
    if logits.shape[1:] != target.shape:
        raise ValueError(f"logits {logits.shape} and target {target.shape} disagree")
    c = logits.shape[0]
    flat = T.reshape(logits, (c, -1))
    onehot = Tensor(one_hot(target.reshape(-1), c, logits.dtype))
    probs = T.softmax(flat, axis=0)
    inter = T.sum(T.mul(probs, onehot), axes=1)
    denom = T.add(T.sum(probs, axes=1), Tensor(onehot.data.sum(axis=1) + eps))
    dice = T.div(T.add(T.scale(inter, 2.0), Tensor(np.full(c, eps, dtype=logits.dtype))), denom)
    fg = np.zeros(c, dtype=logits.dtype)
    fg[1:] = 1.0 / (c - 1)
    dice_term = T.sub(Tensor(np.ones(1, dtype=logits.dtype)),
                      T.reshape(T.sum(T.mul(dice, Tensor(fg))), (1,)))
    n_vox = flat.shape[1]
    ce = T.scale(T.reshape(T.sum(T.mul(T.log_softmax(flat, axis=0), onehot)), (1,)), -1.0 / n_vox)
    total = T.add(dice_term, ce)
    if return_terms:
        return total, dice_term, ce
    return total


# --------------------------------------------------------------- training

def poly_lr(step, total_steps, initial=1e-2, exponent=0.9):
    return initial * (1 - min(step, total_steps) / total_steps) ** exponent


@dataclass
class SGDState:
    """Nesterov SGD with polynomial decay; momentum buffers keyed by parameter name."""
    total_steps: int
    initial_lr: float = 1e-2
    momentum: float = 0.99
    clip_norm: float | None = 12.0
    step: int = 0
    buffers: dict = field(default_factory=dict)

    @property
    def lr(self):
        return poly_lr(self.step, self.total_steps, self.initial_lr)


class TrainingError(RuntimeError):
    pass


def train_step(net: Network, batch, state: SGDState):
    """One optimizer step on a list of ``(patch, mask)`` pairs.

    Returns ``(loss, dice_term, ce_term)`` averaged over the batch.
    """
    if not batch:
        raise ValueError("empty batch")
    totals = []
    dice_terms, ce_terms = [], []
    for patch, mask in batch:
        patch = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch))
        total, dt, ce = loss(forward(net, patch), mask, return_terms=True)
        totals.append(total)
        dice_terms.append(dt.item())
        ce_terms.append(ce.item())
    objective = totals[0]
    for t in totals[1:]:
        objective = T.add(objective, t)
    objective = T.scale(objective, 1.0 / len(totals))
    value = objective.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step}")
    T.backward(objective)

    grads = {name: p.grad for name, p in net.params.items() if p.grad is not None}
    if state.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if not np.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm at step {state.step}")
        if norm > state.clip_norm:
            factor = state.clip_norm / (norm + 1e-6)
            grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    lr = state.lr
    mu = state.momentum
    for name, g in grads.items():
        p = net.params[name]
        buf = state.buffers.get(name)
        buf = g.copy() if buf is None else buf * p.dtype.type(mu) + g
        state.buffers[name] = buf
        p.data -= p.dtype.type(lr) * (g + p.dtype.type(mu) * buf)
    for p in net.params.values():
        p.grad = None
    state.step += 1
    return value, float(np.mean(dice_terms)), float(np.mean(ce_terms))


# --------------------------------------------------------------- inference

def gaussian_importance(patch_size, sigma_scale=1.0 / 8, dtype=np.float32):
    """Separable Gaussian centered on the patch, peak 1, no zeros."""
    axes = []
    for s in patch_size:
        coords = np.arange(s) - (s - 1) / 2.0
        axes.append(np.exp(-0.5 * (coords / (s * sigma_scale)) ** 2))
    g = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    g = g / g.max()
    g[g == 0] = g[g > 0].min()
    return g.astype(dtype)


def tile_starts(extent, patch, step_fraction=0.5):
    if extent == patch:
        return [0]
    n = int(np.ceil((extent - patch) / (patch * step_fraction))) + 1
    return sorted({int(round(v)) for v in np.linspace(0, extent - patch, n)})


def softmax_np(logits, axis=0):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sliding_window_predict(net: Network, volume, step_fraction=0.5):
    """Class probabilities ``(num_classes, D, H, W)`` for a whole volume."""
    cfg = net.config
    values = np.asarray(getattr(volume, "values", volume))
    if values.ndim != 4 or values.shape[0] != cfg.in_channels:
        raise ValueError(f"volume has shape {values.shape}, network expects "
                         f"{cfg.in_channels} channels")
    values = values.astype(cfg.dtype, copy=False)
    shape = values.shape[1:]
    ps = cfg.patch_size
    pads = [max(0, p - s) for p, s in zip(ps, shape)]
    if any(pads):
        values = np.pad(values, [(0, 0)] + [(p // 2, p - p // 2) for p in pads])
    full = values.shape[1:]
    starts = [tile_starts(n, p, step_fraction) for n, p in zip(full, ps)]
    tiles = list(itertools.product(*starts))
    with T.no_grad():
        if len(tiles) == 1:
            logits = forward(net, Tensor(values)).data.astype(np.float64)
        else:
            weight = gaussian_importance(ps, dtype=np.float64)
            acc = np.zeros((cfg.num_classes,) + full)
            norm = np.zeros(full)
            for z, y, x in tiles:
                sl = (slice(z, z + ps[0]), slice(y, y + ps[1]), slice(x, x + ps[2]))
                out = forward(net, Tensor(np.ascontiguousarray(values[(slice(None),) + sl])))
                acc[(slice(None),) + sl] += out.data * weight
                norm[sl] += weight
            logits = acc / norm
    probs = softmax_np(logits, axis=0)
    if any(pads):
        crop = tuple(slice(p // 2, p // 2 + s) for p, s in zip(pads, shape))
        probs = probs[(slice(None),) + crop]
    return np.ascontiguousarray(probs.astype(np.float32))


def logits_to_mask(probabilities):
    """Voxelwise argmax; ``np.argmax`` returns the first maximum, so ties go low."""
    return np.argmax(np.asarray(probabilities), axis=0).astype(np.uint8)
