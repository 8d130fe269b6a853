import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from odseg import metrics as M

from oracles import dice_sets, hd95_all_pairs, union_find_components

masks8 = arrays(np.bool_, (8, 8, 8), elements=st.booleans())


def random_mask(rng, shape=(8, 8, 8), p=None):
    return rng.random(shape) < (rng.uniform(0.05, 0.6) if p is None else p)


def test_compose_regions_examples(rng):
    r = M.compose_regions(np.zeros((3, 3, 3), np.uint8))
    assert not (r.ET.any() or r.TC.any() or r.WT.any())
    m = np.zeros((3, 3, 3), np.uint8)
    m[1, 1, 1] = 3
    r = M.compose_regions(m)
    assert r.ET[1, 1, 1] and r.TC[1, 1, 1] and r.WT[1, 1, 1] and r.WT.sum() == 1
    lab = rng.integers(0, 4, (6, 6, 6))
    counts = [int((lab.ravel() == k).sum()) for k in (1, 2, 3)]
    assert M.compose_regions(lab).WT.sum() == sum(counts)


@given(arrays(np.uint8, (5, 5, 5), elements=st.integers(0, 3)))
def test_region_inclusion_chain(lab):
    r = M.compose_regions(lab)
    assert not np.any(r.ET & ~r.TC) and not np.any(r.TC & ~r.WT)
    assert np.array_equal(r.WT, (lab == 1) | (lab == 2) | (lab == 3))


def test_dice_examples():
    a = np.zeros((3, 3, 3), bool)
    b = np.zeros((3, 3, 3), bool)
    a.flat[[0, 1, 2, 3]] = True
    b.flat[[1, 2, 3, 10, 11, 12]] = True
    assert M.dice(a, b) == pytest.approx(0.6)
    assert M.dice(a, a) == 1.0
    assert M.dice(a, np.roll(a, 13)) == 0.0
    assert M.dice(np.zeros(3), np.zeros(3)) == 1.0
    with pytest.raises(ValueError):
        M.dice(a, np.zeros((3, 3, 2)))


def test_dice_matches_set_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a, b = random_mask(rng), random_mask(rng)
        assert M.dice(a, b) == dice_sets(a, b)
        assert M.dice(a, b) == M.dice(b, a)


def test_components_examples():
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert len(M.connected_components_26(m)[1]) == 1
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[2, 0, 0] = True
    labels, sizes = M.connected_components_26(m)
    assert list(sizes) == [1, 1] and labels[0, 0, 0] == 1 and labels[2, 0, 0] == 2


def test_components_match_union_find():
    rng = np.random.default_rng(12)
    for _ in range(100):
        m = random_mask(rng, p=rng.uniform(0.05, 0.3))
        labels, sizes = M.connected_components_26(m)
        count, roots = union_find_components(m)
        assert len(sizes) == count
        # the same partition: voxels share a label exactly when they share a root
        pairs = {}
        for c, root in roots.items():
            pairs.setdefault(root, set()).add(labels[c])
        assert all(len(s) == 1 for s in pairs.values())
        assert len({next(iter(s)) for s in pairs.values()}) == count
        assert sizes.sum() == m.sum()


def test_component_labels_in_scan_order(rng):
    m = random_mask(rng, p=0.15)
    labels, _ = M.connected_components_26(m)
    firsts = [labels.ravel()[i] for i in np.flatnonzero(labels.ravel())]
    seen = list(dict.fromkeys(firsts))
    assert seen == list(range(1, len(seen) + 1))


def test_lesion_wise_examples():
    gt = np.zeros((12, 12, 12), bool)
    gt[2:5, 2:5, 2:5] = True
    assert M.lesion_wise_dice(gt, gt) == 1.0
    pred = gt.copy()
    pred[9:11, 9:11, 9:11] = True  # far-away false positive
    assert M.lesion_wise_dice(pred, gt) == 0.5
    # two lesions: a 5-voxel line predicted one voxel shifted (voxel Dice 0.8), one missed
    gt = np.zeros((12, 12, 12), bool)
    gt[2, 2, 1:6] = True
    gt[9, 9, 9] = True
    pred = np.zeros_like(gt)
    pred[2, 2, 2:7] = True
    assert M.dice(pred[:, :, :8] & True, gt[:, :, :8]) == pytest.approx(0.8)
    assert M.lesion_wise_dice(pred, gt) == pytest.approx(0.4, abs=0)
    assert M.lesion_wise_dice(np.zeros_like(gt), np.zeros_like(gt)) == 1.0


def test_lesion_wise_equals_voxel_dice_for_single_overlapping_lesions(rng):
    for _ in range(30):
        gt = np.zeros((10, 10, 10), bool)
        pred = np.zeros_like(gt)
        a, b = rng.integers(1, 4, 3), rng.integers(5, 9, 3)
        gt[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = True
        s = rng.integers(-1, 2, 3)
        pred[a[0] + s[0]:b[0] + s[0], a[1] + s[1]:b[1] + s[1], a[2] + s[2]:b[2] + s[2]] = True
        assert M.lesion_wise_dice(pred, gt) == pytest.approx(M.dice(pred, gt), abs=1e-15)


def test_removing_false_positive_never_hurts(rng):
    for _ in range(50):
        gt = random_mask(rng, (10, 10, 10), 0.08)
        pred = random_mask(rng, (10, 10, 10), 0.08)
        labels, sizes = M.connected_components_26(pred)
        base = M.lesion_wise_dice(pred, gt)
        zone = M.ndimage.binary_dilation(gt, np.ones((3, 3, 3), bool))
        for k in range(1, len(sizes) + 1):
            comp = labels == k
            if not np.any(comp & zone):
                assert M.lesion_wise_dice(pred & ~comp, gt) >= base


def test_hd95_examples():
    a = np.zeros((8, 8, 8), bool)
    a[2:5, 2:5, 2:5] = True
    assert M.hd95(a, a) == 0.0
    p = np.zeros((8, 8, 8), bool)
    g = np.zeros((8, 8, 8), bool)
    p[1, 1, 1] = True
    g[1, 1, 6] = True
    assert M.hd95(p, g) == 5.0
    assert M.hd95(np.zeros_like(a), np.zeros_like(a)) == 0.0
    assert M.hd95(a, np.zeros_like(a), (1.0, 2.0, 0.5)) == pytest.approx(np.sqrt(64 + 256 + 16))


def test_hd95_matches_all_pairs_oracle():
    rng = np.random.default_rng(13)
    for i in range(100):
        a, b = random_mask(rng), random_mask(rng)
        spacing = (1.0, 1.0, 1.0) if i % 2 else tuple(rng.uniform(0.5, 2.0, 3))
        assert abs(M.hd95(a, b, spacing) - hd95_all_pairs(a, b, spacing)) <= 1e-9
        assert M.hd95(a, b, spacing) == M.hd95(b, a, spacing)


@given(masks8, masks8, st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2))
def test_translation_invariance(a, b, dz, dy, dx):
    pad = 3
    big_a = np.pad(a, pad)
    big_b = np.pad(b, pad)
    sh_a = np.roll(big_a, (dz, dy, dx), axis=(0, 1, 2))
    sh_b = np.roll(big_b, (dz, dy, dx), axis=(0, 1, 2))
    assert M.dice(big_a, big_b) == M.dice(sh_a, sh_b)
    assert M.lesion_wise_dice(big_a, big_b) == M.lesion_wise_dice(sh_a, sh_b)
    assert M.hd95(big_a, big_b) == pytest.approx(M.hd95(sh_a, sh_b), abs=1e-12)


def test_evaluate_set_perfect_and_complement(rng):
    gts = [rng.integers(0, 4, (8, 8, 8)).astype(np.uint8) for _ in range(2)]
    rep = M.evaluate_set([(f"c{i}", g, g) for i, g in enumerate(gts)])
    for region in M.REGIONS:
        assert rep.aggregate[region] == {"dice": 1.0, "lesion_dice": 1.0, "hd95": 0.0}
    gt = np.zeros((8, 8, 8), np.uint8)
    gt[2:6, 2:6, 2:6] = 2
    pred = np.where(gt > 0, 0, 2).astype(np.uint8)
    assert M.evaluate_case(pred, gt)["WT"]["dice"] == 0.0


def test_aggregate_is_mean_of_cases(rng):
    pairs = [(f"case{i}", rng.integers(0, 4, (8, 8, 8)), rng.integers(0, 4, (8, 8, 8)))
             for i in (2, 0, 1)]
    rep = M.evaluate_set(pairs)
    assert [c["case_id"] for c in rep.cases] == ["case0", "case1", "case2"]
    for region in M.REGIONS:
        for key in ("dice", "lesion_dice", "hd95"):
            vals = []
            for _, p, g in pairs:
                a, b = M.compose_regions(p)[region], M.compose_regions(g)[region]
                vals.append({"dice": dice_sets, "lesion_dice": M.lesion_wise_dice,
                             "hd95": hd95_all_pairs}[key](a, b))
            assert rep.aggregate[region][key] == pytest.approx(sum(vals) / 3, abs=1e-9)


def test_report_formats(rng):
    gt = np.zeros((6, 6, 6), np.uint8)
    gt[1:3, 1:3, 1:3] = 2
    rep = M.evaluate_set([("b", gt, gt), ("a", np.zeros_like(gt), gt)])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "case_id,region,dice,lesion_dice,hd95"
    assert len(lines) == 1 + 2 * 3 and lines[1].startswith("a,ET,")
    doc = json.loads(rep.to_json())
    assert doc["n_cases"] == 2 and set(doc["aggregate"]) == {"ET", "TC", "WT"}
    # ET and TC are empty in both cases; WT is empty only in the prediction of case a
    assert doc["conventions_applied"]["both_empty_dice"] == 4
    assert doc["conventions_applied"]["empty_hd95_penalty"] == 1
