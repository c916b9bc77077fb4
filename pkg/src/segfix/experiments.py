"""Evaluation procedures: mean IOU, fixation placement, K-capture, masking."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .fixations import FixationSet, KStrategy, ShiftPolicy, backtrack_levels, contributions, k_for_fraction
from .losses import IGNORE_LABEL
from .network import ActivationRecord, Network, map_center
from .tensor import ConvParams, conv2d


@dataclass
class IouReport:
    intersection: np.ndarray  # per label, accumulated over the set
    union: np.ndarray
    iou: np.ndarray  # NaN where the union is empty
    mean: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "intersection", "union", "iou"])
        for label, (i, u, v) in enumerate(zip(self.intersection, self.union, self.iou)):
            w.writerow([label, int(i), int(u), "" if np.isnan(v) else repr(float(v))])
        w.writerow(["mean", "", "", repr(self.mean)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_label": [
                    {"label": k, "intersection": int(i), "union": int(u),
                     "iou": None if np.isnan(v) else float(v)}
                    for k, (i, u, v) in enumerate(zip(self.intersection, self.union, self.iou))
                ],
                "mean_iou": self.mean,
            },
            indent=1,
        ) + "\n"


def mean_iou(preds, gts, num_labels: int, ignore_label: int = IGNORE_LABEL) -> IouReport:
    """Intersections and unions are summed over the whole set before dividing.

    Labels whose accumulated union is zero are left out of the mean.
    """
    preds = list(preds)
    gts = list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError("mean_iou needs equally many (and at least one) predictions and ground truths")
    inter = np.zeros(num_labels, dtype=np.int64)
    union = np.zeros(num_labels, dtype=np.int64)
    for p, g in zip(preds, gts):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"prediction shape {p.shape} differs from ground truth shape {g.shape}")
        keep = g != ignore_label
        p = p[keep]
        g = g[keep]
        inter += np.bincount(g[p == g], minlength=num_labels)[:num_labels]
        # |A or B| = |A| + |B| - |A and B|
        cp = np.bincount(p[(p >= 0) & (p < num_labels)], minlength=num_labels)[:num_labels]
        cg = np.bincount(g, minlength=num_labels)[:num_labels]
        union += cp + cg - np.bincount(g[p == g], minlength=num_labels)[:num_labels]
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return IouReport(inter, union, iou, mean)


def fixation_inside_fraction(fixations: FixationSet, gt, label: int) -> float | None:
    """Percent of image fixations landing on ``label`` in ``gt``; ``None`` for an empty set."""
    gt = np.asarray(gt)
    if not fixations.points:
        return None
    inside = sum(1 for p in fixations.points if gt[p.row, p.col] == label)
    return 100.0 * inside / len(fixations.points)


def mean_inside_fraction(values) -> float | None:
    """Per-object average of inside fractions, skipping absent data."""
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def k_capture_stats(net: Network, record: ActivationRecord, seeds, fractions) -> dict[int, dict[float, float]]:
    """Mean K needed to capture each fraction, per level, over a k=1 full-shift backtrack.

    Keys are the levels of the fixation points whose contribution vectors were
    examined (ReLU outputs and the image have none).
    """
    fractions = list(fractions)
    for x in fractions:
        if not 0 < x <= 100:
            raise ValueError(f"fraction {x} outside (0, 100]")
    levels = backtrack_levels(net, record, seeds, KStrategy.fixed(1), ShiftPolicy.FULL)
    table = {}
    for level in range(len(levels) - 1, 0, -1):
        if net.layers[level - 1].kind == "relu" or not levels[level]:
            continue
        ks = defaultdict(list)
        for coord in sorted(levels[level]):
            _, values = contributions(net, record, level, coord)
            for x in fractions:
                ks[x].append(k_for_fraction(values, x))
        table[level] = {x: float(np.mean(ks[x])) for x in fractions}
    return table


def k_capture_csv(table: dict[int, dict[float, float]], net: Network) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "layer", "fraction", "mean_k"])
    for level in sorted(table, reverse=True):
        for x, k in table[level].items():
            w.writerow([level, net.layers[level - 1].name, repr(float(x)), repr(k)])
    return buf.getvalue()


# -- masking ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """Half-open rectangles ``(row0, col0, row1, col1)`` in image pixels."""

    rects: tuple[tuple[int, int, int, int], ...] = ()
    fill: float = 0.0

    def indicator(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        for r0, c0, r1, c1 in self.rects:
            if not (0 <= r0 <= r1 <= height and 0 <= c0 <= c1 <= width):
                raise ValueError(
                    f"mask rectangle {(r0, c0, r1, c1)} outside image of size {height}x{width}"
                )
            m[r0:r1, c0:c1] = True
        return m


def apply_mask(image, spec: MaskSpec) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    m = spec.indicator(*image.shape[1:])
    out = image.copy()
    out[:, m] = spec.fill
    return out


def influence_region(net: Network, image_shape, mask: np.ndarray) -> np.ndarray:
    """Score-grid units whose receptive field (through every layer) touches ``mask``."""
    c, _, _ = image_shape
    reach = np.asarray(mask, dtype=np.float64)[None]
    for layer in net.layers:
        p = layer.params
        if layer.kind == "conv":
            kh, kw = p.kernel_size
            ones = ConvParams(np.ones((1, 1, kh, kw)), [0.0], p.stride, p.pad, p.dilation)
            reach = conv2d(reach, ones)
        elif layer.kind == "pool":
            ones = ConvParams(np.ones((1, 1, p.window, p.window)), [0.0], p.stride, p.pad)
            reach = conv2d(reach, ones)
        elif layer.kind == "fc":
            reach = np.full((1, 1, 1), reach.sum())
        reach = (reach > 0).astype(np.float64)
    return reach[0] > 0


def mask_footprint(net: Network, record: ActivationRecord, mask: np.ndarray) -> np.ndarray:
    """Score-grid units whose central image position lies inside ``mask``."""
    _, h, w = record.scores.shape
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            ir, ic = map_center(net, record, record.depth, r, c)
            out[r, c] = mask[ir, ic]
    return out


def activation_delta(record_orig: ActivationRecord, record_masked: ActivationRecord, label: int) -> np.ndarray:
    """Score gained at each output unit for ``label`` thanks to the unmasked content, (1, h, w)."""
    a = record_orig.scores
    b = record_masked.scores
    if a.shape != b.shape:
        raise ShapeError(f"score shapes differ: {a.shape} vs {b.shape}")
    return (a[label] - b[label])[None]
