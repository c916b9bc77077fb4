"""Per-pixel softmax cross-entropy and template-similarity auxiliary losses.

The template loss works on a representation tensor ``repr`` of shape
(l, h, w), the input of the final 1x1 scorer. For each ground-truth label a
template vector is taken from ``repr`` at the pixel inside that label's region
where the label scores highest. Every pixel's similarity to the template then
counts as a reward (same label) or a penalty (other label). All gradients are
analytic and flow into the template's source pixel as well, unless
``stop_template_grad`` is set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)

IGNORE_LABEL = 255
EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    similarity: str = "correlation"  # or "cosine"
    selective: bool = False
    weight: float = 0.0  # lambda, the auxiliary weight
    normalize_by_pixels: bool = False
    include_background_templates: bool = True
    raw_inner_product: bool = False  # correlation numerator uses sum(x * t) rather than mean
    stop_template_grad: bool = False
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        if self.similarity not in ("correlation", "cosine"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"auxiliary weight must be finite and non-negative, got {self.weight}")


def _check_gt(gt, shape, num_classes, ignore_label):
    gt = np.asarray(gt)
    if gt.shape != tuple(shape):
        raise ShapeError(f"ground truth shape {gt.shape} does not match score grid {tuple(shape)}")
    bad = (gt != ignore_label) & ((gt < 0) | (gt >= num_classes))
    if bad.any():
        raise ValueError(f"ground truth holds labels outside [0, {num_classes}) other than {ignore_label}")
    return gt


def softmax_xent(scores, gt, ignore_label: int = IGNORE_LABEL):
    """Mean per-pixel cross-entropy over non-ignored pixels, and its gradient."""
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[0]
    gt = _check_gt(gt, scores.shape[1:], c, ignore_label)
    valid = gt != ignore_label
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every pixel carries the ignore label; cross-entropy is undefined")
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=0)
    logp = shifted - np.log(z)
    target = np.where(valid, gt, 0)
    picked = np.take_along_axis(logp, target[None], axis=0)[0]
    loss = -picked[valid].sum() / n
    grad = e / z
    np.put_along_axis(grad, target[None], np.take_along_axis(grad, target[None], axis=0) - 1.0, axis=0)
    grad = grad * valid / n
    return float(loss), grad


# -- similarity kernels, vectorised over columns ----------------------------------------------


def _dot(t, x):
    # row-by-row accumulation keeps each column's value independent of the others
    return (t[:, None] * x).sum(axis=0)


def _correlation(x, t, raw_inner):
    """Correlation of each column of ``x`` (l, P) with ``t`` (l,) plus both gradients."""
    n = x.shape[0]
    mx = x.mean(axis=0)
    mt = t.mean()
    dx = x - mx
    dt = t - mt
    sx = np.sqrt((dx * dx).mean(axis=0))
    st = np.sqrt((dt * dt).mean())
    ok = (sx > EPS) & (st > EPS)
    sx_safe = np.where(ok, sx, 1.0)
    st_safe = st if st > EPS else 1.0
    inner = _dot(t, x)
    if raw_inner:
        cov = inner - mx * mt
        dcov_dx = (t - mt / n)[:, None]
        dcov_dt = x - mx / n
    else:
        cov = inner / n - mx * mt
        dcov_dx = (dt / n)[:, None]
        dcov_dt = dx / n
    s = np.where(ok, cov / (sx_safe * st_safe), 0.0)
    denom = sx_safe * st_safe
    gx = dcov_dx / denom - s * dx / (n * sx_safe**2)
    gt = dcov_dt / denom - s * dt[:, None] / (n * st_safe**2)
    gx = np.where(ok, gx, 0.0)
    gt = np.where(ok, gt, 0.0)
    return s, gx, gt, ~ok


def _cosine(x, t):
    nx = np.sqrt((x * x).sum(axis=0))
    nt = np.sqrt(t @ t)
    ok = (nx > EPS) & (nt > EPS)
    nx_safe = np.where(ok, nx, 1.0)
    nt_safe = nt if nt > EPS else 1.0
    s = np.where(ok, _dot(t, x) / (nx_safe * nt_safe), 0.0)
    gx = t[:, None] / (nx_safe * nt_safe) - s * x / nx_safe**2
    gt = x / (nx_safe * nt_safe) - s * t[:, None] / nt_safe**2
    return s, np.where(ok, gx, 0.0), np.where(ok, gt, 0.0), ~ok


def _similarity_columns(x, t, kind, raw_inner=False):
    if kind == "correlation":
        return _correlation(x, t, raw_inner)
    if kind == "cosine":
        return _cosine(x, t)
    raise ValueError(f"unknown similarity {kind!r}")


def similarity(x, x_star, kind: str = "correlation", raw_inner_product: bool = False):
    """Similarity of two vectors. Returns ``(value, degenerate)``.

    Correlation uses population standard deviations. A constant vector (for
    correlation) or a zero vector (for cosine) gives 0 with ``degenerate`` set.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x_star = np.asarray(x_star, dtype=np.float64).reshape(-1)
    if x.shape != x_star.shape or x.size < 2:
        raise ShapeError(f"similarity needs equal lengths of at least 2, got {x.size} and {x_star.size}")
    s, _, _, degenerate = _similarity_columns(x[:, None], x_star, kind, raw_inner_product)
    return float(s[0]), bool(degenerate[0])


def similarity_grad(x, x_star, kind: str = "correlation", raw_inner_product: bool = False):
    """Gradients of :func:`similarity` with respect to ``x`` and ``x_star``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x_star = np.asarray(x_star, dtype=np.float64).reshape(-1)
    _, gx, gt, _ = _similarity_columns(x[:, None], x_star, kind, raw_inner_product)
    return gx[:, 0], gt[:, 0]


# -- template loss ----------------------------------------------------------------------------


def best_template(repr_, scores, gt, label: int):
    """Template vector and its (row, col): the in-region pixel scoring highest for ``label``."""
    repr_ = np.asarray(repr_, dtype=np.float64)
    gt = np.asarray(gt)
    mask = gt == label
    if not mask.any():
        raise ValueError(f"label {label} does not occur in the ground truth")
    masked = np.where(mask, np.asarray(scores)[label], -np.inf)
    flat = int(np.argmax(masked))  # first maximum in row-major order
    r, c = divmod(flat, gt.shape[1])
    return repr_[:, r, c].copy(), (r, c)


@dataclass
class TemplateLoss:
    loss: float
    grad: np.ndarray  # same shape as repr
    pixel_terms: np.ndarray  # (h, w) per-pixel sum of signed similarities, before normalisation
    templates: dict[int, tuple[int, int]]  # label -> template source pixel
    contributing: int  # number of pixels entering the sums


def template_loss(repr_, scores, gt, predicted, cfg: LossConfig) -> TemplateLoss:
    repr_ = np.asarray(repr_, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    l, h, w = repr_.shape
    if scores.shape[1:] != (h, w):
        raise ShapeError(f"score grid {scores.shape[1:]} does not match representation grid {(h, w)}")
    gt = _check_gt(gt, (h, w), scores.shape[0], cfg.ignore_label)
    predicted = np.asarray(predicted)
    if predicted.shape != (h, w):
        raise ShapeError(f"prediction shape {predicted.shape} does not match grid {(h, w)}")

    active = gt != cfg.ignore_label
    if cfg.selective:
        active &= predicted != gt
    labels = [int(v) for v in np.unique(gt[gt != cfg.ignore_label])]
    if not cfg.include_background_templates:
        labels = [v for v in labels if v != 0]
    grad = np.zeros_like(repr_)
    terms = np.zeros((h, w))
    templates = {}
    n_active = int(active.sum())
    if not labels:
        log.info("template loss: no labels detected, loss is 0")
        return TemplateLoss(0.0, grad, terms, templates, n_active)

    rows, cols = np.nonzero(active)
    x = repr_[:, rows, cols]
    gt_active = gt[rows, cols]
    total = 0.0
    for c in labels:
        t, (tr, tc) = best_template(repr_, scores, gt, c)
        templates[c] = (tr, tc)
        if n_active == 0:
            continue
        s, gx, gtmp, _ = _similarity_columns(x, t, cfg.similarity, cfg.raw_inner_product)
        sign = np.where(gt_active == c, -1.0, 1.0)
        total += float(np.sum(sign * s))
        terms[rows, cols] += sign * s
        grad[:, rows, cols] += sign * gx
        if not cfg.stop_template_grad:
            grad[:, tr, tc] += gtmp @ sign

    scale = 1.0 / len(labels)
    if cfg.normalize_by_pixels and n_active:
        scale /= n_active
    return TemplateLoss(total * scale, grad * scale, terms, templates, n_active)


@dataclass
class LossResult:
    total: float
    softmax: float
    template: float  # unweighted
    grad_scores: np.ndarray
    grad_repr: np.ndarray  # already multiplied by the auxiliary weight


def combined_loss(scores, repr_, gt, predicted, cfg: LossConfig) -> LossResult:
    """Softmax cross-entropy plus ``cfg.weight`` times the template loss."""
    xent, g_scores = softmax_xent(scores, gt, cfg.ignore_label)
    if cfg.weight == 0:
        aux = 0.0
        g_repr = np.zeros(np.shape(repr_))
    else:
        tl = template_loss(repr_, scores, gt, predicted, cfg)
        aux = tl.loss
        g_repr = cfg.weight * tl.grad
    return LossResult(xent + cfg.weight * aux, xent, aux, g_scores, g_repr)
