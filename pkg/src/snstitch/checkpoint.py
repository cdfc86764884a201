"""SNV2 tensor container.

Layout (little-endian)::

    b"SNV2" | u16 version (=1) | u16 tensor count
    per tensor: u8 name length | UTF-8 name | u8 rank | rank x u32 dims | float64 payload
"""
import os
import struct

import numpy as np

from .anchors import AnchorModel
from .errors import FormatError

MAGIC = b"SNV2"
VERSION = 1


def write_tensors(path, tensors):
    """Write an ordered ``name -> ndarray`` mapping. The file is replaced atomically."""
    if len(tensors) > 0xFFFF:
        raise ValueError("too many tensors for the container")
    chunks = [MAGIC, struct.pack("<HH", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if not 0 < len(raw) <= 255:
            raise ValueError(f"tensor name length out of range: {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank too large")
        chunks.append(struct.pack("<B", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path):
    with open(path, "rb") as f:
        data = f.read()
    return parse_tensors(data)


def parse_tensors(data):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated file while reading {what}", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an SNV2 container", offset=0)
    version, count = struct.unpack("<HH", take(4, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)

    tensors = {}
    for _ in range(count):
        start = pos
        (name_len,) = take(1, "name length")
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", offset=start + 1) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", offset=start)
        (rank,) = take(1, "rank")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(8 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor", offset=pos)
    return tensors


def save_checkpoint(model, path, prefix=""):
    write_tensors(path, {prefix + k: v for k, v in model.named_parameters()})


def model_from_tensors(tensors, spec, prefix=""):
    """Build an :class:`AnchorModel` from a tensor table, checking it against ``spec``."""
    expected = spec.tensor_shapes()
    params = {}
    for name, shape in expected.items():
        key = prefix + name
        if key not in tensors:
            raise FormatError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != shape:
            raise FormatError(f"{key}: shape {tensors[key].shape} does not match spec {shape}")
        params[name] = np.array(tensors[key])
    if not prefix and len(tensors) != len(expected):
        extra = sorted(set(tensors) - set(expected))
        raise FormatError(f"checkpoint has unexpected tensors {extra[:5]}")
    return AnchorModel(spec, params)


def load_checkpoint(path, spec, prefix=""):
    """Load an anchor. The container holds tensors only, so the architecture
    (notably the head count) comes from ``spec``."""
    return model_from_tensors(read_tensors(path), spec, prefix)
