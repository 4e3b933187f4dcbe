"""Synthetic shapes dataset and the SERD container.

Each image is a single colored shape on a black background.  The shape class
is drawn from a fixed library and rendered at one of four quarter-turn
orientations using only axis-aligned rasterization (``np.rot90`` of a binary
template), so orientation labels are exact.  Bar and disc have rotational
symmetry, which caps orientation accuracy on those classes.

SERD layout (little-endian)::

    "SERD" | u16 version | u32 count | u16 H | u16 W | u8 C | u8 label arity
    count*H*W*C float32 pixels in [0, 1] | count*arity int32 labels
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SHAPES = ("bar", "L", "T", "triangle", "disc")
_MAGIC = b"SERD"
_VERSION = 1
_HEADER = struct.Struct("<4sHIHHBB")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 2000
    side: int = 32
    patch: int = 8
    n_classes: int = 5

    def validate(self) -> None:
        if self.n_images < 1:
            raise DataError("n_images must be >= 1")
        if self.side % self.patch:
            raise DataError(f"image side {self.side} is not divisible by patch {self.patch}")
        if not 1 <= self.n_classes <= len(SHAPES):
            raise DataError(f"n_classes must lie in [1, {len(SHAPES)}]")
        if template_size(self.side) < 4:
            raise DataError("image side too small for the shape templates")

    @property
    def template(self) -> int:
        return template_size(self.side)


def template_size(side: int) -> int:
    # even, about 3/8 of the side
    s = (3 * side) // 8
    return s - (s % 2)


def shape_template(name: str, s: int) -> np.ndarray:
    """Binary ``s x s`` mask of a shape in orientation 0."""
    m = np.zeros((s, s), dtype=bool)
    t = max(2, 2 * (s // 6))  # even stroke width keeps bar and T centered
    if name == "bar":
        m[(s - t) // 2:(s - t) // 2 + t, :] = True
    elif name == "L":
        m[:, :t] = True
        m[s - t:, :] = True
    elif name == "T":
        m[:t, :] = True
        m[:, (s - t) // 2:(s - t) // 2 + t] = True
    elif name == "triangle":
        rows, cols = np.indices((s, s))
        m[cols <= rows] = True
    elif name == "disc":
        c = (s - 1) / 2
        rows, cols = np.indices((s, s))
        m[(rows - c) ** 2 + (cols - c) ** 2 <= (s / 2) ** 2] = True
    else:
        raise DataError(f"unknown shape {name!r}")
    return m


def render(cls: int, orient: int, top: int, left: int, color, side: int) -> np.ndarray:
    s = template_size(side)
    mask = np.rot90(shape_template(SHAPES[cls], s), k=orient % 4)
    img = np.zeros((side, side, 3), dtype=np.float32)
    region = img[top:top + s, left:left + s]
    region[mask] = np.asarray(color, dtype=np.float32)
    return img


def sample_image(spec: SyntheticSpec, seed: int, index: int) -> tuple[np.ndarray, int, int]:
    """Image, class id and orientation id of item ``index``; a pure function of its arguments."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index), 7]))
    cls = int(rng.integers(spec.n_classes))
    orient = int(rng.integers(4))
    s = spec.template
    top = int(rng.integers(spec.side - s + 1))
    left = int(rng.integers(spec.side - s + 1))
    color = rng.uniform(0.3, 1.0, size=3)
    return render(cls, orient, top, left, color, spec.side), cls, orient


def generate(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    spec.validate()
    images = np.empty((spec.n_images, spec.side, spec.side, 3), dtype=np.float32)
    labels = np.empty((spec.n_images, 2), dtype=np.int32)
    for i in range(spec.n_images):
        images[i], labels[i, 0], labels[i, 1] = sample_image(spec, seed, i)
    return images, labels


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise DataError(f"images must be [N, H, W, C], got {images.shape}")
    n, h, w, c = images.shape
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] != n:
        raise DataError(f"{labels.shape[0]} label rows for {n} images")
    if images.size and (images.min() < 0 or images.max() > 1 or not np.isfinite(images).all()):
        raise DataError("pixel values must lie in [0, 1]")
    head = _HEADER.pack(_MAGIC, _VERSION, n, h, w, c, labels.shape[1])
    return head + images.astype("<f4").tobytes() + labels.astype("<i4").tobytes()


def decode(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) < _HEADER.size:
        raise DataError("truncated SERD header")
    magic, version, n, h, w, c, arity = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise DataError("not a SERD file")
    if version != _VERSION:
        raise DataError(f"unsupported SERD version {version}")
    npix = n * h * w * c
    off = _HEADER.size
    need = off + 4 * npix + 4 * n * arity
    if len(buf) != need:
        raise DataError(f"SERD payload is {len(buf)} bytes, expected {need}")
    images = np.frombuffer(buf, dtype="<f4", count=npix, offset=off).reshape(n, h, w, c).astype(np.float32)
    labels = np.frombuffer(buf, dtype="<i4", count=n * arity, offset=off + 4 * npix).reshape(n, arity).astype(np.int32)
    return images, labels


def write_dataset(path, images: np.ndarray, labels: np.ndarray, manifest: dict | None = None) -> Path:
    path = Path(path)
    try:
        _atomic_write(path, encode(images, labels))
        if manifest is not None:
            _atomic_write(path.with_suffix(path.suffix + ".json"),
                          (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    except OSError as exc:
        raise DataError(f"cannot write dataset {path}: {exc}") from None
    return path


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    return decode(buf)


def gen_data(spec: SyntheticSpec, seed: int, out) -> Path:
    images, labels = generate(spec, seed)
    manifest = {"spec": asdict(spec), "seed": int(seed), "shapes": list(SHAPES[:spec.n_classes]),
                "labels": ["class", "orientation"]}
    return write_dataset(out, images, labels, manifest)
