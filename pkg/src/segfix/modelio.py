"""Model container: a text header followed by raw little-endian float64 blobs.

Grammar (one item per line, fields separated by single spaces)::

    segfix-model 1
    input_channels <int>
    layer conv <name> out=<int> in=<int> kh=<int> kw=<int> stride=<int> pad=<int> dilation=<int>
    layer pool <name> kind=<max|avg> window=<int> stride=<int> pad=<int>
    layer relu <name>
    layer fc <name> out=<int> in=<int>
    <empty line>

After the empty line come the parameter blobs, in layer order: for a conv
layer the kernel (out*in*kh*kw values, C order) then the bias (out values);
for an fc layer the weight (out*in values, row-major) then the bias. Nothing
may follow the last blob.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import ModelFormatError
from .network import LayerSpec, Network
from .tensor import ConvParams, FCParams, PoolParams

MAGIC = "segfix-model 1"
_DTYPE = np.dtype("<f8")

_FIELDS = {
    "conv": ("out", "in", "kh", "kw", "stride", "pad", "dilation"),
    "pool": ("kind", "window", "stride", "pad"),
    "relu": (),
    "fc": ("out", "in"),
}


def _layer_line(layer: LayerSpec) -> str:
    p = layer.params
    if layer.kind == "conv":
        o, i, kh, kw = p.kernel.shape
        vals = (o, i, kh, kw, p.stride, p.pad, p.dilation)
    elif layer.kind == "pool":
        vals = (p.kind, p.window, p.stride, p.pad)
    elif layer.kind == "fc":
        vals = p.weight.shape
    else:
        vals = ()
    parts = ["layer", layer.kind, layer.name]
    parts += [f"{k}={v}" for k, v in zip(_FIELDS[layer.kind], vals)]
    return " ".join(parts)


def dumps(net: Network) -> bytes:
    lines = [MAGIC, f"input_channels {net.in_channels}"]
    lines += [_layer_line(layer) for layer in net.layers]
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    blobs = []
    for layer in net.layers:
        if layer.kind == "conv":
            arrays = (layer.params.kernel, layer.params.bias)
        elif layer.kind == "fc":
            arrays = (layer.params.weight, layer.params.bias)
        else:
            continue
        blobs += [np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for a in arrays]
    return header + b"".join(blobs)


def write_bytes_atomic(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(net: Network, path):
    write_bytes_atomic(path, dumps(net))


def _parse_int(value: str, what: str, offset: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ModelFormatError(f"expected an integer for {what}, got {value!r}", offset) from None


def _parse_layer(line: str, offset: int):
    parts = line.split(" ")
    if len(parts) < 3 or parts[0] != "layer":
        raise ModelFormatError(f"expected a layer line, got {line!r}", offset)
    kind, name = parts[1], parts[2]
    if kind not in _FIELDS:
        raise ModelFormatError(f"unknown layer kind {kind!r}", offset)
    fields = {}
    for item in parts[3:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ModelFormatError(f"malformed field {item!r} in layer {name!r}", offset)
        fields[key] = value
    if tuple(fields) != _FIELDS[kind]:
        raise ModelFormatError(
            f"layer {name!r}: expected fields {_FIELDS[kind]}, got {tuple(fields)}", offset
        )
    spec = {}
    for key, value in fields.items():
        spec[key] = value if key == "kind" else _parse_int(value, f"{name}.{key}", offset)
    return kind, name, spec


def loads(data: bytes) -> Network:
    """Parse a model container. Raises ModelFormatError or ValidationError."""
    end = data.find(b"\n\n")
    if end < 0:
        raise ModelFormatError("header is not terminated by an empty line", len(data))
    try:
        header = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("header is not ASCII", exc.start) from None
    lines = header.split("\n")
    offsets = []
    pos = 0
    for line in lines:
        offsets.append(pos)
        pos += len(line) + 1
    if lines[0] != MAGIC:
        raise ModelFormatError(f"bad magic line {lines[0]!r}", 0)
    if len(lines) < 2 or not lines[1].startswith("input_channels "):
        raise ModelFormatError("missing input_channels line", offsets[1] if len(lines) > 1 else pos)
    in_channels = _parse_int(lines[1].split(" ", 1)[1], "input_channels", offsets[1])

    pos = end + 2

    def take(count: int, what: str) -> np.ndarray:
        nonlocal pos
        nbytes = count * _DTYPE.itemsize
        if count < 0 or pos + nbytes > len(data):
            raise ModelFormatError(f"truncated data for {what}", pos)
        arr = np.frombuffer(data, dtype=_DTYPE, count=count, offset=pos).astype(np.float64)
        pos += nbytes
        return arr

    layers = []
    for line, off in zip(lines[2:], offsets[2:]):
        kind, name, s = _parse_layer(line, off)
        try:
            if kind == "conv":
                shape = (s["out"], s["in"], s["kh"], s["kw"])
                if min(shape) < 1:
                    raise ModelFormatError(f"layer {name!r}: non-positive kernel shape", off)
                kernel = take(int(np.prod(shape)), f"{name} kernel").reshape(shape)
                bias = take(s["out"], f"{name} bias")
                params = ConvParams(kernel, bias, s["stride"], s["pad"], s["dilation"])
            elif kind == "fc":
                if s["out"] < 1 or s["in"] < 1:
                    raise ModelFormatError(f"layer {name!r}: non-positive weight shape", off)
                weight = take(s["out"] * s["in"], f"{name} weight").reshape(s["out"], s["in"])
                params = FCParams(weight, take(s["out"], f"{name} bias"))
            elif kind == "pool":
                params = PoolParams(s["kind"], s["window"], s["stride"], s["pad"])
            else:
                params = None
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"layer {name!r}: {exc}", off) from None
        layers.append(LayerSpec(kind, name, params))
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} unexpected trailing bytes", pos)
    return Network(layers, in_channels)


def load_model(path) -> Network:
    with open(path, "rb") as fh:
        return loads(fh.read())
