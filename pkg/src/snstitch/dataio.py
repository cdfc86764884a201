"""Datasets: seeded synthetic token clouds and IDX (MNIST-style) files."""
import gzip
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


@dataclass
class Dataset:
    x: np.ndarray  # (samples, tokens, patch_dim)
    y: np.ndarray  # (samples,)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.y)

    @property
    def seq_len(self):
        return self.x.shape[1]

    @property
    def patch_dim(self):
        return self.x.shape[2]

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.split)


@dataclass(frozen=True)
class SynthTaskSpec:
    """Each class owns a unit prototype direction; tokens are ``scale * u_c + noise``.

    ``margin`` is the distance between any two class means, so with
    ``noise_std = 1`` a margin of 3 puts class centres 3 sigma apart per token.
    """
    num_classes: int = 10
    samples_per_class: int = 120
    noise_std: float = 1.0
    margin: float = 3.0
    seq_len: int = 8
    patch_dim: int = 16
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.num_classes > self.patch_dim:
            raise ValueError("orthogonal prototypes need patch_dim >= num_classes")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


def prototypes(spec, rng):
    q, _ = np.linalg.qr(rng.normal(size=(spec.patch_dim, spec.num_classes)))
    return q.T * (spec.margin / math.sqrt(2.0))


def make_synthetic(spec, rng):
    """Returns ``(train, val)``. Classes are interleaved before the split so both
    halves are balanced."""
    protos = prototypes(spec, rng)
    n = spec.num_classes * spec.samples_per_class
    y = np.tile(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.normal(size=(n, spec.seq_len, spec.patch_dim)) * spec.noise_std
    x = protos[y][:, None, :] + noise
    order = rng.permutation(n)
    x, y = x[order], y[order]
    n_val = int(round(n * spec.val_fraction))
    train = Dataset(x[n_val:], y[n_val:], spec.num_classes, "train")
    val = Dataset(x[:n_val], y[:n_val], spec.num_classes, "val")
    return train, val


# -- IDX -----------------------------------------------------------------------

def _read_bytes(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == GZIP_MAGIC:
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return data


def parse_idx(data, expected_magic, path="<bytes>"):
    """Parse a u8 IDX payload into an ndarray of shape ``dims``."""
    if len(data) < 4:
        raise FormatError(f"{path}: too short for an IDX header", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated dimension table", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) < header + size:
        raise FormatError(f"{path}: payload truncated, need {size} bytes", offset=len(data))
    if len(data) > header + size:
        raise FormatError(f"{path}: unexpected trailing bytes", offset=header + size)
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8 payloads")
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        f.write(array.tobytes())


def patchify(images, patch):
    """``(n, H, W)`` -> ``(n, (H/p)*(W/p), p*p)`` in row-major patch order."""
    n, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image size {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    return (images.reshape(n, gh, patch, gw, patch)
            .transpose(0, 1, 3, 2, 4)
            .reshape(n, gh * gw, patch * patch))


def unpatchify(tokens, height, width, patch):
    n = tokens.shape[0]
    gh, gw = height // patch, width // patch
    return (tokens.reshape(n, gh, gw, patch, patch)
            .transpose(0, 1, 3, 2, 4)
            .reshape(n, height, width))


def load_idx(images_path, labels_path, patch=4, num_classes=None, split="train"):
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 image dimensions, got {images.ndim}")
    if labels.shape[0] != images.shape[0]:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images", offset=4)
    x = patchify(images.astype(np.float64) / 255.0, patch)
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(x, y, num_classes, split)


def save_idx(dataset, images_path, labels_path, height, width, patch=4):
    """Inverse of :func:`load_idx` for datasets whose pixels are multiples of 1/255."""
    images = unpatchify(dataset.x, height, width, patch)
    write_idx(images_path, np.rint(images * 255.0).astype(np.uint8))
    write_idx(labels_path, dataset.y.astype(np.uint8))
