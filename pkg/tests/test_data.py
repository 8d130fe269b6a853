import numpy as np
import pytest
from hypothesis import given, strategies as st

from odseg import data as D
from odseg import odsv
from odseg.data import AugmentConfig, LabelMask, PhantomSpec, Volume

from oracles import union_find_components

SPATIAL_ONLY = dict(p_noise=0, p_blur=0, p_brightness=0, p_contrast=0)


def test_phantom_deterministic():
    a = D.generate_phantom(PhantomSpec(seed=5))
    b = D.generate_phantom(PhantomSpec(seed=5))
    assert a[0].values.tobytes() == b[0].values.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    c = D.generate_phantom(PhantomSpec(seed=6))
    assert c[1].labels.tobytes() != a[1].labels.tobytes()


@pytest.mark.parametrize("seed", range(6))
def test_phantom_nesting(seed):
    v, m = D.generate_phantom(PhantomSpec(seed=seed))
    lab = m.labels
    assert set(np.unique(lab)) <= {0, 1, 2, 3} and (lab == 3).any() and (lab == 2).any()
    assert np.isfinite(v.values).all() and v.values.dtype == np.float32
    # every necrotic voxel sits in a tumor-core component that also holds enhancing tumor
    core = (lab == 1) | (lab == 3)
    _, comp = union_find_components(core)
    with_et = {comp[tuple(c)] for c in np.argwhere(lab == 3)}
    assert all(comp[tuple(c)] in with_et for c in np.argwhere(lab == 1))
    # necrosis never touches edema or background directly (6-neighbourhood)
    ne = lab == 1
    for axis in range(3):
        for shift in (1, -1):
            nb = np.roll(lab, shift, axis=axis)
            assert not np.any(ne & ((nb == 0) | (nb == 2)))


def test_enhancing_brighter_than_edema_on_t1c():
    t1c = D.CHANNELS.index("t1c")
    for seed in range(20):
        v, m = D.generate_phantom(PhantomSpec(seed=seed))
        ch = v.values[t1c]
        assert ch[m.labels == 3].mean() > ch[m.labels == 2].mean()


def test_phantom_validation():
    with pytest.raises(ValueError):
        PhantomSpec(extents=(16, 16, 16)).validate()
    with pytest.raises(ValueError):
        PhantomSpec(ne_radius=(3, 4), et_radius=(4, 5)).validate()


def test_volume_rejects_non_finite():
    with pytest.raises(ValueError):
        Volume(np.full((1, 2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        LabelMask(np.full((2, 2, 2), 4))


# ----------------------------------------------------------- normalization

def test_zscore_statistics(rng):
    v = Volume(rng.normal(3, 5, (2, 6, 7, 8)))
    out = D.zscore_normalize(v, np.ones((6, 7, 8), bool)).values.astype(np.float64)
    assert np.abs(out.mean(axis=(1, 2, 3))).max() <= 1e-5
    assert np.abs(out.std(axis=(1, 2, 3)) - 1).max() <= 1e-4


def test_zscore_idempotent_and_constant(rng):
    x = rng.standard_normal((1, 5, 5, 5))
    x = (x - x.mean()) / x.std()
    fg = np.ones((5, 5, 5), bool)
    np.testing.assert_allclose(D.zscore_normalize(Volume(x), fg).values, x, atol=1e-6)
    assert np.all(D.zscore_normalize(Volume(np.full((1, 3, 3, 3), 4.0)), np.ones((3, 3, 3), bool)).values == 0)
    with pytest.raises(ValueError):
        D.zscore_normalize(Volume(np.ones((1, 3, 3, 3))), np.zeros((3, 3, 3), bool))


# ------------------------------------------------------------ augmentation

def test_config_bounds():
    with pytest.raises(ValueError):
        AugmentConfig(zoom_range=(0.5, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(p_flip=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(noise_sigma=0.3)


def test_disabled_is_identity(rng):
    v, m = D.generate_phantom(PhantomSpec(seed=1))
    v2, m2 = D.augment(v, m, AugmentConfig.disabled(), rng)
    assert np.array_equal(v2.values, v.values) and np.array_equal(m2.labels, m.labels)


def test_double_flip_is_identity(rng):
    v = Volume(rng.standard_normal((2, 4, 5, 6)))
    m = LabelMask(rng.integers(0, 4, (4, 5, 6)))
    cfg = AugmentConfig(**{**vars(AugmentConfig.disabled()), "p_flip": 1.0})
    once = D.augment(v, m, cfg, rng)
    twice = D.augment(*once, cfg, rng)
    assert np.array_equal(twice[0].values, v.values) and np.array_equal(twice[1].labels, m.labels)


def test_zoom_one_keeps_mask_and_flips_keep_histogram(rng):
    m = LabelMask(rng.integers(0, 4, (6, 7, 8)))
    v = Volume(rng.standard_normal((1, 6, 7, 8)))
    cfg = AugmentConfig(p_zoom=1.0, zoom_range=(1.0, 1.0), p_flip=0.0, **SPATIAL_ONLY)
    assert np.array_equal(D.augment(v, m, cfg, rng)[1].labels, m.labels)
    hist = np.bincount(m.labels.ravel(), minlength=4)
    flips = AugmentConfig(p_zoom=0.0, p_flip=0.5, **SPATIAL_ONLY)
    for _ in range(100):
        out = D.augment(v, m, flips, rng)[1].labels
        assert np.array_equal(np.bincount(out.ravel(), minlength=4), hist)


def test_label_set_never_grows(rng):
    for seed in range(10):
        v, m = D.generate_phantom(PhantomSpec(seed=seed, extents=(28, 28, 28), ed_radius=(5, 6),
                                              et_radius=(3.5, 4), ne_radius=(1, 1.5)))
        _, out = D.augment(v, m, AugmentConfig(p_zoom=1.0), np.random.default_rng(seed))
        assert set(np.unique(out.labels)) <= set(np.unique(m.labels))


def test_registration_probe(rng):
    """Each voxel's tag after augmentation names the source voxel of its label."""
    shape = (6, 7, 8)
    tags = np.arange(np.prod(shape), dtype=np.float32).reshape((1,) + shape)
    labels = rng.integers(0, 4, shape)
    cfg = AugmentConfig(p_crop=0.5, crop_size=(4, 5, 6), p_zoom=1.0, zoom_range=(1.0, 1.0),
                        p_flip=0.5, **SPATIAL_ONLY)
    for _ in range(50):
        v, m = D.augment(Volume(tags), LabelMask(labels), cfg, rng)
        src = np.rint(v.values[0]).astype(int)
        assert np.array_equal(m.labels, labels.ravel()[src])


def test_crop_larger_than_volume(rng):
    cfg = AugmentConfig(p_crop=1.0, crop_size=(9, 2, 2))
    with pytest.raises(ValueError):
        D.augment(Volume(np.zeros((1, 4, 4, 4))), LabelMask(np.zeros((4, 4, 4))), cfg, rng)


# ------------------------------------------------------------ patch sampling

def test_full_size_patch_is_whole_volume(rng):
    v, m = D.generate_phantom(PhantomSpec(seed=2))
    vals, lab = D.sample_patch(v, m, (48, 48, 48), rng)
    assert np.array_equal(vals, v.values) and np.array_equal(lab, m.labels)
    with pytest.raises(ValueError):
        D.sample_patch(v, m, (49, 8, 8), rng)


@given(st.integers(0, 19), st.integers(0, 19), st.integers(0, 19), st.integers(0, 2 ** 32 - 1))
def test_single_voxel_always_inside(z, y, x, seed):
    labels = np.zeros((20, 20, 20), np.uint8)
    labels[z, y, x] = 3
    _, lab = D.sample_patch(np.zeros((1, 20, 20, 20)), labels, (8, 8, 8),
                            np.random.default_rng(seed), foreground_bias=1.0)
    assert lab.sum() == 3


@pytest.mark.parametrize("bias", [0.2, 0.5, 0.9])
def test_foreground_fraction_monte_carlo(bias):
    rng = np.random.default_rng(7)
    labels = np.zeros((30, 30, 30), np.uint8)
    labels[10:14, 10:14, 10:14] = 2
    hits = sum(D.sample_patch_origin(labels, (8, 8, 8), rng, bias)[1] for _ in range(1000))
    assert abs(hits / 1000 - bias) <= 0.05


# ------------------------------------------------------------------ files

def test_odsv_round_trip(tmp_path, rng):
    v = Volume(rng.standard_normal((4, 5, 6, 7)).astype(np.float32), (1.0, 0.5, 2.0))
    m = LabelMask(rng.integers(0, 4, (5, 6, 7)), (1.0, 0.5, 2.0))
    for obj, kind in ((v, "volume"), (m, "labels")):
        path = tmp_path / f"{kind}.odsv"
        odsv.save_volume(obj, path)
        raw = path.read_bytes()
        back = odsv.load_volume(path, expect=kind)
        assert odsv.encode(back) == raw
        assert back.spacing == obj.spacing


@pytest.mark.parametrize("mutate,reason", [
    (lambda b: b"ODSX" + b[4:], "bad_magic"),
    (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:-1], "length"),
    (lambda b: b + b"\0", "length"),
    (lambda b: b[:7], "truncated"),
    (lambda b: b[:8] + b"\x07" + b[9:], "dtype"),
])
def test_odsv_errors(mutate, reason):
    raw = odsv.encode(Volume(np.zeros((1, 2, 2, 2), np.float32)))
    with pytest.raises(odsv.VolumeFormatError) as exc:
        odsv.decode(mutate(raw))
    assert exc.value.reason == reason


def test_odsv_declared_size_larger_than_file():
    raw = bytearray(odsv.encode(LabelMask(np.zeros((2, 2, 2)))))
    raw[10:14] = (2 ** 31).to_bytes(4, "little")
    with pytest.raises(odsv.VolumeFormatError) as exc:
        odsv.decode(bytes(raw))
    assert exc.value.reason == "length"


def test_odsv_kind_mismatch():
    raw = odsv.encode(LabelMask(np.zeros((2, 2, 2))))
    with pytest.raises(odsv.VolumeFormatError):
        odsv.decode(raw, expect="volume")
