"""Dense (channels, height, width) float64 tensors and the layer primitives.

Tensors are plain ``numpy.ndarray`` objects of shape ``(c, h, w)`` and dtype
float64. Every function here is pure; summation order is fixed (kernel taps in
row-major order) so results are reproducible bit for bit.

Convolution is cross-correlation (no kernel flip). A flipped convolution is
obtained by passing ``kernel[:, :, ::-1, ::-1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

__all__ = [
    "ConvParams",
    "PoolParams",
    "FCParams",
    "as_tensor",
    "output_size",
    "conv2d",
    "pool",
    "relu",
    "fully_connected",
    "softmax",
    "receptive_field",
    "unravel",
]


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a rank-3 float64 array, promoting 2-D input to one channel."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected a (c, h, w) tensor, got shape {arr.shape}")
    return arr


def output_size(size: int, window: int, stride: int, pad: int, dilation: int = 1) -> int:
    return (size + 2 * pad - dilation * (window - 1) - 1) // stride + 1


@dataclass(eq=False)
class ConvParams:
    kernel: np.ndarray  # (out_ch, in_ch, k_h, k_w)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match kernel shape {self.kernel.shape}"
            )
        if self.stride < 1 or self.pad < 0 or self.dilation < 1:
            raise ValueError(
                f"invalid conv geometry stride={self.stride} pad={self.pad} dilation={self.dilation}"
            )

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]

    def output_shape(self, in_shape) -> tuple[int, int, int]:
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"input shape {tuple(in_shape)} does not match kernel shape {self.kernel.shape}"
            )
        kh, kw = self.kernel_size
        oh = output_size(h, kh, self.stride, self.pad, self.dilation)
        ow = output_size(w, kw, self.stride, self.pad, self.dilation)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv on input shape {tuple(in_shape)} with kernel shape {self.kernel.shape} "
                f"gives non-positive output size {oh}x{ow}"
            )
        return self.out_channels, oh, ow


@dataclass(frozen=True)
class PoolParams:
    kind: str  # "max" or "avg"
    window: int
    stride: int
    pad: int = 0

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {self.kind!r}")
        if self.window < 1 or self.stride < 1 or self.pad < 0:
            raise ValueError(
                f"invalid pool geometry window={self.window} stride={self.stride} pad={self.pad}"
            )
        # every window must hold at least one real input value
        if self.pad >= self.window:
            raise ValueError(f"pool pad {self.pad} must be smaller than window {self.window}")

    def output_shape(self, in_shape) -> tuple[int, int, int]:
        c, h, w = in_shape
        oh = output_size(h, self.window, self.stride, self.pad)
        ow = output_size(w, self.window, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"pool window {self.window} exceeds padded input of shape {tuple(in_shape)}"
            )
        return c, oh, ow


@dataclass(eq=False)
class FCParams:
    weight: np.ndarray  # (m, n)
    bias: np.ndarray  # (m,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"fc weight shape {self.weight.shape} and bias shape {self.bias.shape} disagree"
            )

    def output_shape(self, in_shape) -> tuple[int, int, int]:
        n = int(np.prod(in_shape))
        if n != self.weight.shape[1]:
            raise ShapeError(
                f"fc input shape {tuple(in_shape)} ({n} values) does not match weight shape {self.weight.shape}"
            )
        return self.weight.shape[0], 1, 1


def _tap_slice(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    x = as_tensor(x)
    out_c, oh, ow = p.output_shape(x.shape)
    kh, kw = p.kernel_size
    xp = np.pad(x, ((0, 0), (p.pad, p.pad), (p.pad, p.pad)))
    out = np.zeros((out_c, oh, ow))
    for m in range(kh):
        rows = _tap_slice(m * p.dilation, oh, p.stride)
        for n in range(kw):
            cols = _tap_slice(n * p.dilation, ow, p.stride)
            out += np.tensordot(p.kernel[:, :, m, n], xp[:, rows, cols], axes=(1, 0))
    out += p.bias[:, None, None]
    return out


def _pool_windows(x: np.ndarray, p: PoolParams):
    """Yield ``(m, n, values)`` for each window offset; padded taps are NaN."""
    c, oh, ow = p.output_shape(x.shape)
    xp = np.pad(x, ((0, 0), (p.pad, p.pad), (p.pad, p.pad)), constant_values=np.nan)
    for m in range(p.window):
        rows = _tap_slice(m, oh, p.stride)
        for n in range(p.window):
            cols = _tap_slice(n, ow, p.stride)
            yield m, n, xp[:, rows, cols]


def pool(x: np.ndarray, p: PoolParams) -> tuple[np.ndarray, np.ndarray | None]:
    """Max or average pooling.

    Returns ``(out, argmax)``. For max pooling ``argmax`` holds, per output unit,
    the flat (channel-major) index into ``x`` of the window maximum; ties go to
    the lowest row-major coordinate. Average pooling returns ``None`` for the
    index map. Padding positions never take part: a max never selects them and
    an average divides by the number of real inputs in the window.
    """
    x = as_tensor(x)
    c, oh, ow = p.output_shape(x.shape)
    h, w = x.shape[1:]
    base_r = np.arange(oh)[:, None] * p.stride - p.pad
    base_c = np.arange(ow)[None, :] * p.stride - p.pad
    chan = np.arange(c)[:, None, None]
    if p.kind == "max":
        best = np.full((c, oh, ow), -np.inf)
        arg = np.full((c, oh, ow), -1, dtype=np.int64)
        for m, n, vals in _pool_windows(x, p):
            better = vals > best  # NaN compares False, strict > keeps the first tie
            flat = (chan * h + (base_r + m)) * w + (base_c + n)
            best = np.where(better, vals, best)
            arg = np.where(better, np.broadcast_to(flat, arg.shape), arg)
        return best, arg
    total = np.zeros((c, oh, ow))
    count = np.zeros((1, oh, ow))
    for _, _, vals in _pool_windows(x, p):
        valid = ~np.isnan(vals)
        total += np.where(valid, vals, 0.0)
        count += valid[:1]
    return total / count, None


def pool_counts(in_shape, p: PoolParams) -> np.ndarray:
    """Number of real (non-padding) inputs under each output window, shape (1, oh, ow)."""
    _, h, w = in_shape
    _, oh, ow = p.output_shape(in_shape)
    r0 = np.arange(oh) * p.stride - p.pad
    c0 = np.arange(ow) * p.stride - p.pad
    nr = np.minimum(r0 + p.window, h) - np.maximum(r0, 0)
    nc = np.minimum(c0 + p.window, w) - np.maximum(c0, 0)
    return (nr[:, None] * nc[None, :]).astype(np.float64)[None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def fully_connected(x, weight, bias) -> np.ndarray:
    """``weight @ flatten(x) + bias`` with no nonlinearity."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if weight.ndim != 2 or weight.shape[1] != v.size or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"fully connected: input of {v.size} values, weight shape {weight.shape}, "
            f"bias shape {bias.shape}"
        )
    return weight @ v + bias


def softmax(logits, axis: int = 0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def unravel(flat: int, shape) -> tuple[int, int, int]:
    c, r, col = np.unravel_index(int(flat), tuple(shape))
    return int(c), int(r), int(col)


def receptive_field(params, out_coord, in_shape) -> list[tuple[int, int, int]]:
    """Input coordinates feeding output unit ``out_coord`` of one layer.

    ``params`` is a ConvParams, PoolParams, FCParams, or ``None`` for an
    elementwise layer. Zero-padding positions are excluded. Conv coordinates
    are ordered by input channel, then kernel row, then kernel column.
    """
    z, x, y = out_coord
    in_shape = tuple(in_shape)
    c_in, h, w = in_shape
    if params is None:
        out_shape = in_shape
    else:
        out_shape = params.output_shape(in_shape)
    if not all(0 <= v < s for v, s in zip(out_coord, out_shape)):
        raise IndexError(f"coordinate {tuple(out_coord)} outside output shape {out_shape}")

    if params is None:
        return [(z, x, y)]
    if isinstance(params, FCParams):
        return [unravel(i, in_shape) for i in range(c_in * h * w)]
    if isinstance(params, ConvParams):
        kh, kw = params.kernel_size
        step, channels = params.dilation, range(c_in)
    else:
        kh = kw = params.window
        step, channels = 1, (z,)
    rows = [x * params.stride - params.pad + m * step for m in range(kh)]
    cols = [y * params.stride - params.pad + n * step for n in range(kw)]
    return [
        (c, r, q)
        for c in channels
        for r in rows
        if 0 <= r < h
        for q in cols
        if 0 <= q < w
    ]
