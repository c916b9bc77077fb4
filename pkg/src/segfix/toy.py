"""Deterministic toy network and synthetic rectangle dataset for desk-scale runs."""

from __future__ import annotations

import os

import numpy as np

from .modelio import write_bytes_atomic
from .network import LayerSpec, Network
from .pnm import encode_pgm, encode_ppm
from .tensor import ConvParams, PoolParams

# per-class rectangle colors; class 0 is the noisy background
CLASS_COLORS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.9, 0.15, 0.1],
        [0.1, 0.85, 0.2],
        [0.15, 0.2, 0.9],
    ]
)


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def toy_network(num_classes: int = 3, seed: int = 0, width: int = 8) -> Network:
    """conv3x3 - relu - maxpool2 - conv3x3 (dilation 2) - relu - conv1x1 scorer."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec("conv", "conv1", ConvParams(_he(rng, (width, 3, 3, 3)), np.zeros(width), pad=1)),
        LayerSpec("relu", "relu1"),
        LayerSpec("pool", "pool1", PoolParams("max", 2, 2)),
        LayerSpec(
            "conv", "conv2",
            ConvParams(_he(rng, (width, width, 3, 3)), np.zeros(width), pad=2, dilation=2),
        ),
        LayerSpec("relu", "relu2"),
        LayerSpec("conv", "score", ConvParams(_he(rng, (num_classes, width, 1, 1)), np.zeros(num_classes))),
    ]
    return Network(layers, in_channels=3)


def toy_sample(rng: np.random.Generator, num_classes: int = 3, size: int = 32, align: int = 2):
    """One image/ground-truth pair: 1-2 colored rectangles on uniform noise.

    Rectangle corners sit on multiples of ``align`` so that a network with that
    downsampling factor can represent the ground truth exactly.
    """
    if not 2 <= num_classes <= len(CLASS_COLORS):
        raise ValueError(f"toy data supports 2 to {len(CLASS_COLORS)} classes")
    image = rng.uniform(0.0, 0.5, size=(3, size, size))
    gt = np.zeros((size, size), dtype=np.int64)
    cells = size // align
    for _ in range(int(rng.integers(1, 3))):
        label = int(rng.integers(1, num_classes))
        h = int(rng.integers(cells // 4, cells // 2 + 1))
        w = int(rng.integers(cells // 4, cells // 2 + 1))
        r0 = int(rng.integers(0, cells - h + 1)) * align
        c0 = int(rng.integers(0, cells - w + 1)) * align
        r1, c1 = r0 + h * align, c0 + w * align
        color = CLASS_COLORS[label][:, None, None]
        image[:, r0:r1, c0:c1] = color + rng.uniform(-0.05, 0.05, size=(3, r1 - r0, c1 - c0))
        gt[r0:r1, c0:c1] = label
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0  # what an 8-bit PPM round trip gives
    return image, gt


def toy_dataset(count: int, num_classes: int = 3, size: int = 32, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [toy_sample(rng, num_classes, size) for _ in range(count)]


def write_toy_dataset(out_dir, train: int, test: int, num_classes: int = 3, size: int = 32, seed: int = 0):
    """Write images (PPM), labels (PGM) and ``train.tsv`` / ``test.tsv`` manifests under ``out_dir``."""
    rng = np.random.default_rng(seed)
    splits = {"train": train, "test": test}
    files = {}
    for split, n in splits.items():
        lines = []
        for i in range(n):
            image, gt = toy_sample(rng, num_classes, size)
            img_rel = f"images/{split}_{i:04d}.ppm"
            gt_rel = f"labels/{split}_{i:04d}.pgm"
            files[img_rel] = encode_ppm(image)
            files[gt_rel] = encode_pgm(gt)
            lines.append(f"{img_rel}\t{gt_rel}\n")
        files[f"{split}.tsv"] = "".join(lines).encode("utf-8")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    for rel, data in files.items():
        write_bytes_atomic(os.path.join(out_dir, rel), data)
