"""IoU / nIoU / Pd / Fa for small-target segmentation.

Conventions the metric formulas leave open:

* a ground-truth target is detected when some predicted component's
  centroid lies within ``match_distance`` pixels (default 3) of the target
  centroid; pairs are matched one-to-one, greedily by ascending distance;
* false-alarm pixels are the pixels of predicted components left unmatched;
* a sample with empty union contributes 1 to nIoU.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class ComponentSet:
    labels: np.ndarray
    sizes: np.ndarray
    centroids: np.ndarray  # n x 2, (row, col)
    bboxes: list  # (r0, c0, r1, c1), inclusive-exclusive

    def __len__(self) -> int:
        return len(self.sizes)


def connected_components(mask: np.ndarray) -> ComponentSet:
    """8-connected labelling; labels 1..n in raster order of first pixel."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return ComponentSet(labels, np.zeros(0, int), np.zeros((0, 2)), [])
    idx = np.arange(1, n + 1)
    sizes = ndimage.sum_labels(mask, labels, idx).astype(int)
    cents = np.array(ndimage.center_of_mass(mask, labels, idx), dtype=np.float64).reshape(n, 2)
    boxes = [(s[0].start, s[1].start, s[0].stop, s[1].stop) for s in ndimage.find_objects(labels)]
    return ComponentSet(labels, sizes, cents, boxes)


def threshold(prob: np.ndarray, t: float = 0.5) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")
    return (np.asarray(prob) >= t).astype(np.uint8)


def match_targets(gt: ComponentSet, pred: ComponentSet, max_dist: float = 3.0) -> list:
    """Greedy one-to-one ``(gt_index, pred_index)`` pairs within ``max_dist``."""
    if len(gt) == 0 or len(pred) == 0:
        return []
    d = np.linalg.norm(gt.centroids[:, None, :] - pred.centroids[None, :, :], axis=2)
    cand = [(d[i, j], i, j) for i in range(len(gt)) for j in range(len(pred)) if d[i, j] <= max_dist]
    cand.sort()
    used_g, used_p, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_g and j not in used_p:
            used_g.add(i)
            used_p.add(j)
            pairs.append((i, j))
    return pairs


@dataclass
class MetricsReport:
    A_i: int = 0
    A_u: int = 0
    a_i: list = field(default_factory=list)
    a_u: list = field(default_factory=list)
    T_TP: int = 0
    T_All: int = 0
    P_FP: int = 0
    P_All: int = 0

    @property
    def iou(self) -> float:
        return self.A_i / self.A_u if self.A_u else 1.0

    @property
    def niou(self) -> float:
        if not self.a_u:
            return 1.0
        return float(np.mean([i / u if u else 1.0 for i, u in zip(self.a_i, self.a_u)]))

    @property
    def pd(self) -> float:
        return self.T_TP / self.T_All if self.T_All else 1.0

    @property
    def fa(self) -> float:
        return self.P_FP / self.P_All if self.P_All else 0.0

    def summary(self) -> dict:
        return {"iou": self.iou, "niou": self.niou, "pd": self.pd, "fa": self.fa}

    def table_units(self) -> dict:
        """IoU/nIoU/Pd in 1e-2 and Fa in 1e-5, as SIRST tables report them."""
        return {"iou": 100 * self.iou, "niou": 100 * self.niou, "pd": 100 * self.pd, "fa": 1e5 * self.fa}

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iou", "niou", "pd", "fa", "A_i", "A_u", "T_TP", "T_All", "P_FP", "P_All"])
            w.writerow([f"{self.iou:.6f}", f"{self.niou:.6f}", f"{self.pd:.6f}", f"{self.fa:.9f}",
                        self.A_i, self.A_u, self.T_TP, self.T_All, self.P_FP, self.P_All])


def evaluate(preds, gts, match_distance: float = 3.0) -> MetricsReport:
    """Aggregate metrics over paired binary masks."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    rep = MetricsReport()
    for k, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p).astype(bool)
        g = np.asarray(g).astype(bool)
        if p.shape != g.shape:
            raise ValueError(f"sample {k}: prediction {p.shape} vs ground truth {g.shape}")
        inter = int(np.count_nonzero(p & g))
        union = int(np.count_nonzero(p | g))
        rep.A_i += inter
        rep.A_u += union
        rep.a_i.append(inter)
        rep.a_u.append(union)
        gc, pc = connected_components(g), connected_components(p)
        pairs = match_targets(gc, pc, match_distance)
        matched = {j for _, j in pairs}
        rep.T_TP += len(pairs)
        rep.T_All += len(gc)
        rep.P_FP += int(sum(pc.sizes[j] for j in range(len(pc)) if j not in matched))
        rep.P_All += p.size
    return rep
