"""Region composition, Dice, lesion-wise Dice, HD95 and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from odseg import backend
from odseg.data import as_labels

REGIONS = ("ET", "TC", "WT")
REPORT_COLUMNS = ("case_id", "region", "dice", "lesion_dice", "hd95")


@dataclass
class RegionMasks:
    ET: np.ndarray
    TC: np.ndarray
    WT: np.ndarray

    def __getitem__(self, name):
        return getattr(self, name)


def compose_regions(m) -> RegionMasks:
    """ET = {3}, TC = {1, 3}, WT = {1, 2, 3}."""
    lab = as_labels(m)
    et = lab == 3
    tc = et | (lab == 1)
    wt = tc | (lab == 2)
    return RegionMasks(et, tc, wt)


def _same_extents(a, b):
    if a.shape != b.shape:
        raise ValueError(f"extents differ: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _same_extents(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def connected_components_26(mask):
    """Return ``(labels, sizes)``; component ``i`` (1-based) has ``sizes[i - 1]`` voxels."""
    mask = np.ascontiguousarray(np.asarray(mask, dtype=bool), dtype=np.uint8)
    labels, count = backend.label26(mask)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return labels, sizes


_CUBE = np.ones((3, 3, 3), dtype=bool)


def lesion_wise_dice(pred, gt, dilation: int = 1) -> float:
    """Mean per-lesion Dice with missed and unmatched lesions scoring zero.

    Each ground-truth lesion, dilated ``dilation`` times by a 3x3x3 cube, claims
    every predicted component touching that zone; the lesion's score is the
    Dice between itself and the union of the claimed components. Predicted
    components claimed by no lesion count as false positives.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _same_extents(pred, gt)
    gt_lab, gt_sizes = connected_components_26(gt)
    pr_lab, pr_sizes = connected_components_26(pred)
    n_gt, n_pr = len(gt_sizes), len(pr_sizes)
    if n_gt == 0 and n_pr == 0:
        return 1.0
    claimed = np.zeros(n_pr + 1, dtype=bool)
    scores = []
    for j in range(1, n_gt + 1):
        lesion = gt_lab == j
        zone = ndimage.binary_dilation(lesion, _CUBE, iterations=dilation) if dilation else lesion
        hits = np.unique(pr_lab[zone])
        hits = hits[hits > 0]
        claimed[hits] = True
        matched = np.isin(pr_lab, hits) if hits.size else np.zeros_like(lesion)
        scores.append(dice(lesion, matched))
    n_fp = int((~claimed[1:]).sum())
    scores.extend([0.0] * n_fp)
    return float(np.mean(scores))


def boundary(mask) -> np.ndarray:
    """Voxels of ``mask`` with a background 6-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def volume_diagonal(shape, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def _directed(src_surface, dst_surface, spacing):
    # distance from every voxel to the nearest destination surface voxel
    dist = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dist[src_surface]


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile boundary distance in millimetres."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _same_extents(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return volume_diagonal(pred.shape, spacing)
    bp, bg = boundary(pred), boundary(gt)
    d_pg = _directed(bp, bg, spacing)
    d_gp = _directed(bg, bp, spacing)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


# -------------------------------------------------------------- reporting

@dataclass
class MetricsReport:
    cases: list = field(default_factory=list)  # dicts: case_id, region -> {dice, lesion_dice, hd95}
    conventions: dict = field(default_factory=lambda: {"both_empty_dice": 0, "empty_hd95_penalty": 0,
                                                        "both_empty_hd95": 0})

    @property
    def aggregate(self):
        agg = {}
        for region in REGIONS:
            agg[region] = {k: float(np.mean([c[region][k] for c in self.cases])) if self.cases
                           else float("nan") for k in ("dice", "lesion_dice", "hd95")}
        return agg

    def rows(self):
        for c in self.cases:
            for region in REGIONS:
                r = c[region]
                yield (c["case_id"], region, r["dice"], r["lesion_dice"], r["hd95"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for case_id, region, d, ld, h in self.rows():
            w.writerow([case_id, region, f"{d:.6f}", f"{ld:.6f}", f"{h:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"columns": list(REPORT_COLUMNS), "cases": self.cases,
               "aggregate": self.aggregate, "n_cases": len(self.cases),
               "conventions_applied": self.conventions}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def evaluate_case(pred, gt, case_id="case", spacing=(1.0, 1.0, 1.0), conventions=None):
    p_lab, g_lab = as_labels(pred), as_labels(gt)
    _same_extents(p_lab, g_lab)
    rp, rg = compose_regions(p_lab), compose_regions(g_lab)
    record = {"case_id": str(case_id)}
    for region in REGIONS:
        a, b = rp[region], rg[region]
        if conventions is not None:
            if not a.any() and not b.any():
                conventions["both_empty_dice"] += 1
                conventions["both_empty_hd95"] += 1
            elif a.any() != b.any():
                conventions["empty_hd95_penalty"] += 1
        record[region] = {"dice": dice(a, b), "lesion_dice": lesion_wise_dice(a, b),
                          "hd95": hd95(a, b, spacing)}
    return record


def evaluate_set(pairs, spacing=(1.0, 1.0, 1.0)) -> MetricsReport:
    """``pairs`` yields ``(case_id, pred, gt)``; cases are reported sorted by id."""
    report = MetricsReport()
    for case_id, pred, gt in sorted(pairs, key=lambda t: str(t[0])):
        sp = getattr(gt, "spacing", spacing)
        report.cases.append(evaluate_case(pred, gt, case_id, sp, report.conventions))
    return report
