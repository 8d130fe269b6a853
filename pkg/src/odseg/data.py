"""Synthetic tumor phantoms, normalization, augmentation and patch sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

NE, ED, ET = 1, 2, 3
LABELS = (0, NE, ED, ET)
CHANNELS = ("t1", "t1c", "t2", "flair")


@dataclass
class Volume:
    values: np.ndarray  # (channels, D, H, W) float32
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.values.ndim != 4:
            raise ValueError(f"volume must be (channels, D, H, W), got {self.values.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("volume contains non-finite values")

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def extents(self):
        return self.values.shape[1:]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass
class LabelMask:
    labels: np.ndarray  # (D, H, W) uint8 in {0, 1, 2, 3}
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise ValueError(f"label mask must be 3-d, got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 3):
            raise ValueError("labels must lie in {0, 1, 2, 3}")
        self.labels = np.ascontiguousarray(arr, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self):
        return self.labels.shape

    def __array__(self, dtype=None, copy=None):
        return self.labels if dtype is None else self.labels.astype(dtype)


def as_labels(m) -> np.ndarray:
    return m.labels if isinstance(m, LabelMask) else np.asarray(m)


# ---------------------------------------------------------------- phantoms

# mean intensity per channel (t1, t1c, t2, flair) for brain, NE, ED, ET
DEFAULT_PROFILE = {
    "brain": (0.60, 0.60, 0.50, 0.50),
    "ne": (0.30, 0.30, 1.00, 0.60),
    "ed": (0.50, 0.55, 0.90, 1.00),
    "et": (0.55, 1.20, 0.70, 0.80),
}


@dataclass
class PhantomSpec:
    extents: tuple = (48, 48, 48)
    tumor_count: tuple = (1, 3)
    ed_radius: tuple = (7.0, 11.0)
    et_radius: tuple = (4.0, 6.5)
    ne_radius: tuple = (1.5, 2.5)
    profile: dict = field(default_factory=lambda: dict(DEFAULT_PROFILE))
    tissue_std: float = 0.05
    noise: float = 0.05
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self):
        lo, hi = self.tumor_count
        if not 1 <= lo <= hi:
            raise ValueError("tumor_count must satisfy 1 <= min <= max")
        # NE must sit inside the ET core with at least one voxel of shell,
        # and the core strictly inside the edema
        if not (self.ne_radius[1] + 1.0 <= self.et_radius[0] and self.et_radius[1] < self.ed_radius[0]):
            raise ValueError("radii must nest: ne_max + 1 <= et_min and et_max < ed_min")
        for name in ("ed_radius", "et_radius", "ne_radius"):
            r = getattr(self, name)
            if not 0 < r[0] <= r[1]:
                raise ValueError(f"{name} must be an increasing positive range")
        need = 2 * int(np.ceil(self.ed_radius[1])) + 3
        if min(self.extents) < need:
            raise ValueError(f"extents {self.extents} too small for edema radius "
                             f"{self.ed_radius[1]} (need >= {need})")


def _ellipsoid(grid, center, radii):
    z, y, x = grid
    return (((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
            + ((x - center[2]) / radii[2]) ** 2) <= 1.0


def generate_phantom(spec: PhantomSpec):
    """Brain ellipsoid with 1-3 nested tumors; returns ``(Volume, LabelMask)``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ext = tuple(int(e) for e in spec.extents)
    grid = np.indices(ext, dtype=np.float64)
    mid = [(e - 1) / 2 for e in ext]
    brain = _ellipsoid(grid, mid, [0.45 * e for e in ext])
    labels = np.zeros(ext, dtype=np.uint8)
    n_tumors = int(rng.integers(spec.tumor_count[0], spec.tumor_count[1] + 1))
    r_max = spec.ed_radius[1]
    for _ in range(n_tumors):
        ed_r = rng.uniform(*spec.ed_radius, size=3)
        et_r = rng.uniform(*spec.et_radius, size=3)
        ne_r = rng.uniform(*spec.ne_radius, size=3)
        # keep the whole edema inside the volume and near the brain center
        center = [rng.uniform(max(r_max + 1, m - 0.2 * e), min(e - r_max - 2, m + 0.2 * e))
                  for m, e in zip(mid, ext)]
        ed = _ellipsoid(grid, center, ed_r)
        core = _ellipsoid(grid, center, et_r)
        ne = _ellipsoid(grid, center, ne_r)
        labels[ed & (labels == 0)] = ED
        labels[core & (labels != NE)] = ET
        labels[ne] = NE
    brain |= labels > 0

    values = np.zeros((len(CHANNELS),) + ext, dtype=np.float64)
    tissue = {"brain": brain & (labels == 0), "ne": labels == NE, "ed": labels == ED,
              "et": labels == ET}
    for name, region in tissue.items():
        means = np.asarray(spec.profile[name])
        # one draw per case and tissue so phantoms differ in contrast
        case_means = means + rng.normal(0, spec.tissue_std, size=means.shape)
        for c in range(len(CHANNELS)):
            values[c][region] = case_means[c]
    noise = rng.normal(0, spec.noise, size=values.shape)
    values = np.where(brain[None], values + noise, 0.0)
    return Volume(values, spec.spacing), LabelMask(labels, spec.spacing)


# ----------------------------------------------------------- normalization

def foreground_mask(v: Volume) -> np.ndarray:
    return np.any(np.asarray(v) != 0, axis=0)


def zscore_normalize(v: Volume, foreground=None) -> Volume:
    """Per-channel ``(x - mean_fg) / max(std_fg, 1e-8)`` using foreground statistics."""
    vals = np.asarray(v, dtype=np.float64)
    fg = foreground_mask(v) if foreground is None else np.asarray(foreground, dtype=bool)
    if fg.shape != vals.shape[1:]:
        raise ValueError("foreground mask extents differ from the volume")
    if not fg.any():
        raise ValueError("empty foreground")
    out = np.empty_like(vals)
    for c in range(vals.shape[0]):
        sel = vals[c][fg]
        mu = sel.mean()
        sd = max(sel.std(), 1e-8)
        out[c] = (vals[c] - mu) / sd
    return Volume(out, getattr(v, "spacing", (1.0, 1.0, 1.0)))


# ------------------------------------------------------------ augmentation

@dataclass
class AugmentConfig:
    p_crop: float = 0.0
    crop_size: tuple | None = None
    p_zoom: float = 0.2
    zoom_range: tuple = (0.85, 1.15)
    p_flip: float = 0.5  # per axis
    p_noise: float = 0.15
    noise_sigma: float = 0.1
    p_blur: float = 0.2
    blur_sigma: float = 1.0
    p_brightness: float = 0.15
    brightness_range: tuple = (-0.2, 0.2)
    p_contrast: float = 0.15
    contrast_range: tuple = (0.75, 1.25)

    BOUNDS = {"zoom_range": (0.85, 1.15), "brightness_range": (-0.2, 0.2),
              "contrast_range": (0.75, 1.25)}

    def __post_init__(self):
        for name in ("p_crop", "p_zoom", "p_flip", "p_noise", "p_blur", "p_brightness",
                     "p_contrast"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        for name, (lo, hi) in self.BOUNDS.items():
            a, b = getattr(self, name)
            if not lo <= a <= b <= hi:
                raise ValueError(f"{name}={(a, b)} outside [{lo}, {hi}]")
        if not 0 <= self.noise_sigma <= 0.1:
            raise ValueError("noise_sigma must be in [0, 0.1]")
        if not 0 <= self.blur_sigma <= 1.0:
            raise ValueError("blur_sigma must be in [0, 1]")

    @classmethod
    def disabled(cls):
        return cls(p_crop=0, p_zoom=0, p_flip=0, p_noise=0, p_blur=0, p_brightness=0,
                   p_contrast=0)


def _zoom_about_center(arr, factor, order):
    shape = np.array(arr.shape[-3:], dtype=np.float64)
    center = (shape - 1) / 2
    matrix = np.eye(3) / factor
    offset = center - center / factor
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant",
                                    cval=0.0, output=arr.dtype)


def augment(v: Volume, m, cfg: AugmentConfig, rng):
    """Random spatial transforms on volume and mask, intensity transforms on the volume."""
    vals = np.array(v, dtype=np.float32, copy=True)
    labels = np.array(as_labels(m), dtype=np.uint8, copy=True)
    spacing = getattr(v, "spacing", (1.0, 1.0, 1.0))

    if cfg.crop_size is not None and rng.random() < cfg.p_crop:
        size = tuple(cfg.crop_size)
        if any(s > e for s, e in zip(size, labels.shape)):
            raise ValueError(f"crop {size} larger than volume {labels.shape}")
        o = [int(rng.integers(0, e - s + 1)) for s, e in zip(size, labels.shape)]
        sl = tuple(slice(a, a + s) for a, s in zip(o, size))
        vals = np.ascontiguousarray(vals[(slice(None),) + sl])
        labels = np.ascontiguousarray(labels[sl])

    if rng.random() < cfg.p_zoom:
        f = rng.uniform(*cfg.zoom_range)
        vals = np.stack([_zoom_about_center(ch, f, 1) for ch in vals])
        labels = _zoom_about_center(labels, f, 0)

    for axis in range(3):
        if rng.random() < cfg.p_flip:
            vals = np.flip(vals, axis=axis + 1)
            labels = np.flip(labels, axis=axis)
    vals = np.ascontiguousarray(vals)
    labels = np.ascontiguousarray(labels)

    if rng.random() < cfg.p_noise:
        sigma = rng.uniform(0, cfg.noise_sigma)
        vals = vals + rng.normal(0, sigma, size=vals.shape).astype(np.float32)
    if rng.random() < cfg.p_blur:
        sigma = rng.uniform(0, cfg.blur_sigma)
        vals = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in vals])
    if rng.random() < cfg.p_brightness:
        vals = vals + np.float32(rng.uniform(*cfg.brightness_range))
    if rng.random() < cfg.p_contrast:
        f = np.float32(rng.uniform(*cfg.contrast_range))
        mean = vals.mean(axis=(1, 2, 3), keepdims=True)
        vals = (vals - mean) * f + mean
    return Volume(vals, spacing), LabelMask(labels, spacing)


# ------------------------------------------------------------ patch sampling

def sample_patch_origin(labels, patch, rng, foreground_bias=0.5):
    """Return ``(origin, centered_on_foreground)`` for one patch draw."""
    ext = labels.shape
    patch = tuple(int(p) for p in patch)
    if any(p > e for p, e in zip(patch, ext)):
        raise ValueError(f"patch {patch} larger than volume {ext}")
    if rng.random() < foreground_bias:
        fg = np.flatnonzero(labels)
        if fg.size:
            center = np.unravel_index(fg[rng.integers(fg.size)], ext)
            origin = tuple(int(min(max(c - p // 2, 0), e - p))
                           for c, p, e in zip(center, patch, ext))
            return origin, True
    origin = tuple(int(rng.integers(0, e - p + 1)) for p, e in zip(patch, ext))
    return origin, False


def sample_patch(v: Volume, m, patch, rng, foreground_bias=0.5, return_info=False):
    labels = as_labels(m)
    origin, on_fg = sample_patch_origin(labels, patch, rng, foreground_bias)
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    vals = np.ascontiguousarray(np.asarray(v)[(slice(None),) + sl])
    lab = np.ascontiguousarray(labels[sl])
    if return_info:
        return vals, lab, {"origin": origin, "foreground": on_fg}
    return vals, lab
