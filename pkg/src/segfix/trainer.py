"""Plain SGD fine-tuning of a network's last parameterised layers.

Training config files hold one ``key = value`` per line; ``#`` starts a
comment. Keys (defaults in brackets)::

    model          input model path (required for the CLI)
    output_model   where the trained model goes (required for the CLI)
    dataset        manifest of "image<TAB>ground truth" lines (required)
    log            CSV log path [train_log.csv]
    base_lr        [0.0001]
    max_iter       [1000]
    poly_power     [0.9]
    batch_size     [1]
    trainable_tail_layers  [3]
    rng_seed       [0]
    similarity     correlation | cosine [correlation]
    selective      true | false [false]
    lambda         auxiliary weight [0]
    normalize_by_pixels           [false]
    include_background_templates  [true]
    raw_inner_product             [false]
    stop_template_grad            [false]
    ignore_label   [255]

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import NumericalError, ValidationError
from .losses import LossConfig, combined_loss
from .network import Network, backward, downsample_nearest, forward, predict_segmentation
from .pnm import read_image, read_labels

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "lr", "softmax_loss", "template_loss", "total_loss")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    max_iter: int = 1000
    poly_power: float = 0.9
    batch_size: int = 1
    trainable_tail_layers: int = 3
    rng_seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: str | None = None
    model: str | None = None
    output_model: str | None = None
    log: str = "train_log.csv"

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValidationError(f"base_lr must be positive, got {self.base_lr}")
        if self.max_iter < 0:
            raise ValidationError(f"max_iter must be non-negative, got {self.max_iter}")
        if not self.poly_power > 0:
            raise ValidationError(f"poly_power must be positive, got {self.poly_power}")
        if self.batch_size < 1 or self.trainable_tail_layers < 1:
            raise ValidationError("batch_size and trainable_tail_layers must be at least 1")


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}
_TRAIN_KEYS = {
    "base_lr": float,
    "max_iter": int,
    "poly_power": float,
    "batch_size": int,
    "trainable_tail_layers": int,
    "rng_seed": int,
}
_PATH_KEYS = ("dataset", "model", "output_model", "log")
_LOSS_KEYS = {
    "similarity": str,
    "selective": "bool",
    "lambda": float,
    "normalize_by_pixels": "bool",
    "include_background_templates": "bool",
    "raw_inner_product": "bool",
    "stop_template_grad": "bool",
    "ignore_label": int,
}


def parse_config(text: str, base_dir: str = ".") -> TrainConfig:
    train, loss = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        try:
            if key in _TRAIN_KEYS:
                train[key] = _TRAIN_KEYS[key](value)
            elif key in _PATH_KEYS:
                train[key] = os.path.normpath(os.path.join(base_dir, value))
            elif key in _LOSS_KEYS:
                kind = _LOSS_KEYS[key]
                if kind == "bool":
                    if value.lower() not in _BOOL:
                        raise ValueError(f"not a boolean: {value!r}")
                    parsed = _BOOL[value.lower()]
                else:
                    parsed = kind(value)
                loss["weight" if key == "lambda" else key] = parsed
            else:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"config line {lineno}: bad value for {key!r}: {exc}") from None
    train.setdefault("log", os.path.normpath(os.path.join(base_dir, TrainConfig.log)))
    try:
        return TrainConfig(loss=LossConfig(**loss), **train)
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc)) from None


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "loss"}
    out["loss"] = {f.name: getattr(cfg.loss, f.name) for f in fields(cfg.loss)}
    return out


# -- dataset ----------------------------------------------------------------------------------


def read_manifest(path) -> list[tuple[str, str]]:
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 'image<TAB>ground truth'")
            pairs.append(tuple(os.path.join(base, p) for p in parts))
    return pairs


def load_dataset(path) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(read_image(img), read_labels(gt)) for img, gt in read_manifest(path)]


# -- optimisation primitives ------------------------------------------------------------------


def poly_lr(cfg: TrainConfig, it: int) -> float:
    if not 0 <= it <= cfg.max_iter:
        raise ValueError(f"iteration {it} outside [0, {cfg.max_iter}]")
    if cfg.max_iter == 0:
        return cfg.base_lr
    return cfg.base_lr * (1.0 - it / cfg.max_iter) ** cfg.poly_power


def sgd_step(net: Network, grads: dict, lr: float, trainable: set[str] | None = None) -> Network:
    """Return a copy of ``net`` with ``theta - lr * grad`` applied to trainable layers.

    ``grads`` maps layer names to ``(weight_grad, bias_grad)``. Layers outside
    ``trainable`` (when given) are left untouched even if a gradient is present.
    Raises NumericalError, without changing anything, if any gradient is not finite.
    """
    for name, (gw, gb) in grads.items():
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericalError(f"non-finite gradient for layer {name!r}")
    new = net.copy()
    for layer in new.layers:
        if layer.name not in grads or (trainable is not None and layer.name not in trainable):
            continue
        gw, gb = grads[layer.name]
        p = layer.params
        if layer.kind == "conv":
            p.kernel = p.kernel - lr * gw
        else:
            p.weight = p.weight - lr * gw
        p.bias = p.bias - lr * gb
    return new


def tail_layers(net: Network, count: int) -> list[int]:
    idx = net.trainable_indices()
    if count > len(idx):
        raise ValidationError(
            f"trainable_tail_layers={count} exceeds the {len(idx)} parameterised layers"
        )
    return idx[-count:]


@dataclass
class StepResult:
    grads: dict
    softmax: float
    template: float
    total: float


def image_gradients(net: Network, image, gt, cfg: TrainConfig, cut: int) -> StepResult:
    """Loss and parameter gradients for one image; ``gt`` may be at image resolution."""
    record = forward(net, image)
    scores = record.scores
    gt = np.asarray(gt)
    if gt.shape != scores.shape[1:]:
        gt = downsample_nearest(gt, *scores.shape[1:])
    predicted = predict_segmentation(scores)
    repr_ = record.level(record.depth - 1)
    res = combined_loss(scores, repr_, gt, predicted, cfg.loss)
    inject = {net.layers[-1].name: res.grad_scores}
    if len(net.layers) > 1 and cfg.loss.weight != 0:
        inject[net.layers[-2].name] = res.grad_repr
    g = backward(net, record, inject, cut=cut)
    return StepResult(g.params, res.softmax, res.template, res.total)


@dataclass
class TrainResult:
    net: Network
    log: list[tuple[int, float, float, float, float]]
    aborted: str | None = None


def _valid_samples(samples, net: Network):
    ok = []
    for i, (image, gt) in enumerate(samples):
        image = np.asarray(image)
        if image.ndim == 2:
            image = image[None]
        if image.shape[0] != net.in_channels or np.shape(gt) != image.shape[1:]:
            log.warning(
                "skipping sample %d: image shape %s and ground truth shape %s disagree",
                i, image.shape, np.shape(gt),
            )
            continue
        ok.append((image, np.asarray(gt)))
    return ok


def batch_order(n: int, batch_size: int, iterations: int, seed: int):
    """Index batches: a fresh seeded permutation per epoch, batches wrap across epochs."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        batch = []
        for _ in range(batch_size):
            if pos == n:
                perm = rng.permutation(n)
                pos = 0
            batch.append(int(perm[pos]))
            pos += 1
        yield batch


def fine_tune(net: Network, samples, cfg: TrainConfig, workers: int = 1) -> TrainResult:
    """SGD on the last ``cfg.trainable_tail_layers`` parameterised layers.

    ``samples`` is a list of ``(image, gt)`` pairs, ``gt`` at image resolution.
    On a non-finite gradient the run stops and the result carries the last
    finite network and an ``aborted`` message.
    """
    tail = tail_layers(net, cfg.trainable_tail_layers)
    trainable = {net.layers[i].name for i in tail}
    cut = tail[0]
    rows = []
    if cfg.max_iter == 0:
        return TrainResult(net.copy(), rows)
    data = _valid_samples(samples, net)
    if not data:
        raise ValidationError("no usable training samples: every image/ground-truth pair was skipped")

    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    current = net.copy()
    try:
        for it, batch in enumerate(batch_order(len(data), cfg.batch_size, cfg.max_iter, cfg.rng_seed)):
            lr = poly_lr(cfg, it)

            def run(i, model=current):
                return image_gradients(model, data[i][0], data[i][1], cfg, cut)

            results = list(executor.map(run, batch)) if executor else [run(i) for i in batch]
            n = len(results)
            grads = {}
            for name in trainable:
                gw = sum(r.grads[name][0] for r in results) / n
                gb = sum(r.grads[name][1] for r in results) / n
                grads[name] = (gw, gb)
            sm = sum(r.softmax for r in results) / n
            tl = sum(r.template for r in results) / n
            tot = sum(r.total for r in results) / n
            rows.append((it, lr, sm, tl, tot))
            try:
                current = sgd_step(current, grads, lr, trainable)
            except NumericalError as exc:
                log.error("iteration %d: %s; stopping with the last finite weights", it, exc)
                return TrainResult(current, rows, aborted=f"iteration {it}: {exc}")
    finally:
        if executor is not None:
            executor.shutdown()
    return TrainResult(current, rows)


def format_log(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for it, lr, sm, tl, tot in rows:
        writer.writerow([it, repr(lr), repr(sm), repr(tl), repr(tot)])
    return buf.getvalue()
