"""Shared test utilities: random networks and independent reference computations."""

import math

import numpy as np

from segfix.network import LayerSpec, Network, layer_output_shape
from segfix.tensor import ConvParams, PoolParams


def random_conv(rng, in_ch, out_ch, k=None, dilation=None, stride=1, pad=None, positive=False):
    k = int(rng.integers(1, 4)) if k is None else k
    dilation = int(rng.integers(1, 3)) if dilation is None else dilation
    pad = int(rng.integers(0, (k // 2) * dilation + 1)) if pad is None else pad
    kernel = rng.normal(size=(out_ch, in_ch, k, k))
    if positive:
        kernel = np.abs(kernel)
    return ConvParams(kernel, rng.normal(scale=0.1, size=out_ch), stride, pad, dilation)


def random_network(rng, max_layers=5, in_ch=None, size=None, classes=None, pools=True):
    """A random chain (conv | relu | pool)* ending in a 1x1 conv, plus a fitting image.

    Layer geometry is drawn so every intermediate map stays at least 1x1.
    """
    in_ch = int(rng.integers(1, 4)) if in_ch is None else in_ch
    size = int(rng.integers(5, 13)) if size is None else size
    classes = int(rng.integers(2, 4)) if classes is None else classes
    n_body = int(rng.integers(0, max_layers))
    layers = []
    shape = (in_ch, size, size)
    for i in range(n_body):
        kinds = ["conv", "relu"] + (["pool"] if pools else [])
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if kind == "conv":
            out = int(rng.integers(1, 4))
            params = random_conv(rng, shape[0], out, stride=int(rng.integers(1, 3)) if shape[1] > 6 else 1)
        elif kind == "pool":
            window = int(rng.integers(1, 4))
            params = PoolParams(
                "max" if rng.random() < 0.5 else "avg",
                window,
                int(rng.integers(1, window + 1)),
                int(rng.integers(0, window)) if window > 1 else 0,
            )
        else:
            params = None
        layer = LayerSpec(kind, f"l{i}", params)
        try:
            new_shape = layer_output_shape(layer, shape)
        except Exception:
            continue
        if min(new_shape[1:]) < 1:
            continue
        layers.append(layer)
        shape = new_shape
    layers.append(LayerSpec("conv", "head", random_conv(rng, shape[0], classes, k=1, dilation=1, pad=0)))
    net = Network(layers, in_ch)
    image = rng.uniform(0.0, 1.0, size=(in_ch, size, size))
    return net, image


def central_diff(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` at every entry of array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    """Largest elementwise |a - n| / max(|a|, |n|, floor); the floor only guards 0/0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    d = np.abs(a - n)
    return float((d / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max()) if d.size else 0.0


def naive_conv(x, p):
    """Six nested loops, straight from the definition."""
    c_in, h, w = x.shape
    out_c, _, kh, kw = p.kernel.shape
    oh = (h + 2 * p.pad - p.dilation * (kh - 1) - 1) // p.stride + 1
    ow = (w + 2 * p.pad - p.dilation * (kw - 1) - 1) // p.stride + 1
    out = np.zeros((out_c, oh, ow))
    for z in range(out_c):
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for c in range(c_in):
                    for m in range(kh):
                        for n in range(kw):
                            r = i * p.stride - p.pad + m * p.dilation
                            q = j * p.stride - p.pad + n * p.dilation
                            if 0 <= r < h and 0 <= q < w:
                                s += x[c, r, q] * p.kernel[z, c, m, n]
                out[z, i, j] = s + p.bias[z]
    return out


def naive_iou(preds, gts, num_labels, ignore=255):
    """Per-pixel counting, label by label."""
    inter = [0] * num_labels
    union = [0] * num_labels
    for p, g in zip(preds, gts):
        for a, b in zip(np.asarray(p).ravel().tolist(), np.asarray(g).ravel().tolist()):
            if b == ignore:
                continue
            for label in range(num_labels):
                in_p, in_g = a == label, b == label
                inter[label] += in_p and in_g
                union[label] += in_p or in_g
    ious = [i / u for i, u in zip(inter, union) if u > 0]
    return inter, union, (sum(ious) / len(ious) if ious else math.nan)


# -- brute-force backtracking -------------------------------------------------------------


def _oracle_topk(items, k):
    """``items`` are (value, coord) in enumeration order; stable descending selection."""
    ranked = sorted(range(len(items)), key=lambda i: (-items[i][0], i))
    return [items[i] for i in ranked[:k]]


def _oracle_k(strategy, values, area_below, area_above):
    if strategy.kind == "fixed":
        return int(strategy.value)
    if strategy.kind == "resolution":
        return min(int(strategy.value) * -(-area_below // area_above), strategy.cap)
    pos = sorted((v for v in values if v > 0), reverse=True)
    total = 0.0
    for v in pos:
        total += v
    if total == 0:
        return 1
    target = strategy.value / 100.0 * total - 1e-12 * total
    running = 0.0
    for k, v in enumerate(pos, 1):
        running += v
        if running >= target:
            return min(k, strategy.cap)
    return min(len(pos), strategy.cap)


def _oracle_children(layer, below, coord, strategy, policy, area_above):
    """Scalar-loop contributions of one unit, its top-k and the shift projection."""
    z, x, y = coord
    c_in, h, w = below.shape
    items = []
    if layer.kind == "conv":
        p = layer.params
        _, _, kh, kw = p.kernel.shape
        for c in range(c_in):
            for m in range(kh):
                for n in range(kw):
                    r = x * p.stride - p.pad + m * p.dilation
                    q = y * p.stride - p.pad + n * p.dilation
                    if 0 <= r < h and 0 <= q < w:
                        items.append((float(p.kernel[z, c, m, n] * below[c, r, q]), (c, r, q)))
    elif layer.kind == "pool":
        p = layer.params
        for m in range(p.window):
            for n in range(p.window):
                r = x * p.stride - p.pad + m
                q = y * p.stride - p.pad + n
                if 0 <= r < h and 0 <= q < w:
                    items.append((float(below[z, r, q]), (z, r, q)))
    else:  # fc
        flat = below.reshape(-1)
        for i in range(flat.size):
            c, rem = divmod(i, h * w)
            items.append((float(layer.params.weight[z, i] * flat[i]), (c, rem // w, rem % w)))
    k = _oracle_k(strategy, [v for v, _ in items], h * w, area_above)
    chosen = _oracle_topk(items, k)
    if layer.kind == "conv" and not policy.shifts(layer.params):
        p = layer.params
        _, _, kh, kw = p.kernel.shape
        r = min(max(x * p.stride - p.pad + (kh // 2) * p.dilation, 0), h - 1)
        q = min(max(y * p.stride - p.pad + (kw // 2) * p.dilation, 0), w - 1)
        chosen = [(v, (c, r, q)) for v, (c, _, _) in chosen]
    grouped = {}
    for v, c in chosen:
        grouped.setdefault(c, []).append(v)
    return {c: math.fsum(vs) for c, vs in grouped.items()}


def oracle_backtrack(net, record, seeds, strategy, policy):
    """Recursive expansion of every selected unit, level by level down to the image.

    Returns the image-plane map (row, col) -> contribution with channels collapsed.
    """

    def expand(level, units):
        if level == 0:
            return units
        layer = net.layers[level - 1]
        above = record.outputs[level - 1]
        if layer.kind == "relu":
            return expand(level - 1, {c: v for c, v in units.items() if above[c] > 0})
        below = record.image if level == 1 else record.outputs[level - 2]
        area_above = above.shape[1] * above.shape[2]
        grouped = {}
        for coord in units:
            for c, v in _oracle_children(layer, below, coord, strategy, policy, area_above).items():
                grouped.setdefault(c, []).append(v)
        return expand(level - 1, {c: math.fsum(vs) for c, vs in grouped.items()})

    top = {}
    for s in seeds:
        top.setdefault((s.channel, s.row, s.col), []).append(s.contribution)
    image_units = expand(len(net.layers), {c: math.fsum(vs) for c, vs in top.items()})
    plane = {}
    for (_, r, q), v in image_units.items():
        plane.setdefault((r, q), []).append(v)
    return {rq: math.fsum(vs) for rq, vs in plane.items()}
