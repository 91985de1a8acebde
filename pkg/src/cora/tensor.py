"""Dense float32 tensors, seeded randomness, a tiny binary tensor format and
the analytic RGB <-> latent map.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C order. The
helpers here enforce the invariants other modules rely on (positive dims,
finite values) instead of wrapping arrays in a custom class.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CORA"
VERSION = 1
MAX_NDIM = 8
_MAX_ELEMENTS = 2**32 - 1

LUMA = np.array([0.299, 0.587, 0.114])


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


class DimOverflowError(TensorFormatError):
    pass


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array and check it is finite."""
    t = np.ascontiguousarray(x, dtype=np.float32)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def tensor_bytes(t) -> bytes:
    """Serialized form of ``t``: magic, version, ndim, dims, f32 LE payload."""
    t = as_tensor(t)
    if t.ndim > MAX_NDIM:
        raise DimOverflowError(f"ndim {t.ndim} exceeds {MAX_NDIM}")
    if any(d <= 0 for d in t.shape):
        raise ValueError(f"dims must be positive, got {t.shape}")
    header = MAGIC + struct.pack("<IB", VERSION, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.astype("<f4", copy=False).tobytes(order="C")


def save_tensor(t, path) -> None:
    Path(path).write_bytes(tensor_bytes(t))


def parse_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 9:
        raise TruncatedFileError("truncated header")
    version, ndim = struct.unpack_from("<IB", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if ndim > MAX_NDIM:
        raise DimOverflowError(f"ndim {ndim} exceeds {MAX_NDIM}")
    off = 9
    if len(buf) < off + 4 * ndim:
        raise TruncatedFileError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = 1
    for d in dims:
        if d == 0:
            raise DimOverflowError("zero-sized dim")
        count *= d
        if count > _MAX_ELEMENTS:
            raise DimOverflowError(f"element count overflows for dims {dims}")
    need = off + 4 * count
    if len(buf) < need:
        raise TruncatedFileError(f"expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise TensorFormatError(f"{len(buf) - need} trailing bytes")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.astype(np.float32).reshape(dims)


def load_tensor(path) -> np.ndarray:
    return parse_tensor(Path(path).read_bytes())


class Rng:
    """Seeded generator: PCG64 bit stream, normals from numpy's ziggurat.

    The stream for a given seed is fixed by numpy's documented PCG64 and
    ``Generator.standard_normal`` implementations, which do not depend on the
    platform.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64).astype(np.float32)

    def normal64(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)


def image_to_latent(img) -> np.ndarray:
    """RGB image (H, W, 3) in [0, 1] -> latent (4, H/2, W/2) in [-1, 1].

    Channels are 2x2 mean-pooled R, G, B and luma.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dims must be even, got {h}x{w}")
    if h < 8 or w < 8:
        raise ValueError("image must be at least 8x8")
    rgb = img.transpose(2, 0, 1)
    luma = np.tensordot(LUMA, rgb, axes=1)[None]
    chans = np.concatenate([rgb, luma], axis=0)
    pooled = chans.reshape(4, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return as_tensor(2.0 * pooled - 1.0)


def latent_to_rgb(lat) -> np.ndarray:
    """Pseudo-inverse of :func:`image_to_latent`: drop luma, undo the affine
    map, nearest-upsample 2x. Returns float (H, W, 3) clipped to [0, 1]."""
    lat = np.asarray(lat, dtype=np.float64)
    if lat.ndim != 3 or lat.shape[0] != 4:
        raise ValueError(f"expected (4, h, w) latent, got {lat.shape}")
    rgb = (lat[:3] + 1.0) / 2.0
    rgb = rgb.repeat(2, axis=1).repeat(2, axis=2)
    return np.clip(rgb.transpose(1, 2, 0), 0.0, 1.0)


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(img, path) -> None:
    from PIL import Image

    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path, format="PNG")


def cosine_sim(a, b, eps: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na < eps or nb < eps:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b, eps: float = 1e-12) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` (n, d) and ``b`` (m, d).

    Rows with norm below ``eps`` get similarity 0 against everything.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    ua = np.where(na[:, None] < eps, 0.0, a / np.where(na < eps, 1.0, na)[:, None])
    ub = np.where(nb[:, None] < eps, 0.0, b / np.where(nb < eps, 1.0, nb)[:, None])
    return np.clip(ua @ ub.T, -1.0, 1.0)
