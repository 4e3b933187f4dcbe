"""View policies and mini-batch partitioning.

Two policies produce the paired views:

* ``T``: random resized crop, random horizontal flip, photometric jitter.
  Crops are not invertible, so no group element is recorded.
* ``T_eq``: no crop; a group element sampled from the geometric policy
  (quarter-turns, flips, patch-aligned anisotropic scaling) followed by the
  same photometric jitter as ``T``.

Randomness is derived from ``(seed, epoch, step, image index, view, purpose)``
through :class:`numpy.random.SeedSequence`, so every view can be regenerated
independently of sampling order and thread scheduling.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import group as G

logger = logging.getLogger(__name__)

# stream purposes
_GEO, _PHOTO, _CROP, _PART = 1, 2, 3, 4


class AugmentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AugConfig:
    crop_scale_min: float = 0.4
    crop_scale_max: float = 1.0
    aspect_min: float = 3 / 4
    aspect_max: float = 4 / 3
    hflip: bool = True
    jitter: float = 0.2
    p_gray: float = 0.2
    noise_sigma: float = 0.02
    out_size: int = 32

    def validate(self) -> None:
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            raise AugmentConfigError(
                f"crop scale range [{self.crop_scale_min}, {self.crop_scale_max}] must lie in (0, 1]")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise AugmentConfigError("aspect range must be positive and ordered")
        if not 0 <= self.jitter < 1:
            raise AugmentConfigError("jitter must lie in [0, 1)")
        if not 0 <= self.p_gray <= 1:
            raise AugmentConfigError("p_gray must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise AugmentConfigError("noise_sigma must be non-negative")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a tuple of non-negative integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(int, key)]))


# ---------------------------------------------------------------------------
# photometric component
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhotometricParams:
    gain: tuple[float, ...]
    bias: tuple[float, ...]
    grayscale_mix: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    @classmethod
    def identity(cls, channels: int = 3) -> "PhotometricParams":
        return cls((1.0,) * channels, (0.0,) * channels)


def sample_photometric(rng: np.random.Generator, cfg: AugConfig, channels: int) -> PhotometricParams:
    j = cfg.jitter
    gain = tuple(float(v) for v in rng.uniform(1 - j, 1 + j, size=channels)) if j else (1.0,) * channels
    bias = tuple(float(v) for v in rng.uniform(-j, j, size=channels)) if j else (0.0,) * channels
    mix = 1.0 if (cfg.p_gray and rng.random() < cfg.p_gray) else 0.0
    noise_seed = int(rng.integers(2**31))
    return PhotometricParams(gain, bias, mix, float(cfg.noise_sigma), noise_seed)


def photometric(p: PhotometricParams, img: np.ndarray) -> np.ndarray:
    """Per-channel affine jitter, optional grayscale blend, additive Gaussian noise; clipped to [0, 1]."""
    out = img
    if any(g != 1.0 for g in p.gain) or any(b != 0.0 for b in p.bias):
        gain = np.asarray(p.gain, dtype=img.dtype)
        bias = np.asarray(p.bias, dtype=img.dtype)
        out = np.clip(out * gain + bias, 0.0, 1.0)
    if p.grayscale_mix > 0:
        gray = out.mean(axis=-1, keepdims=True)
        out = (1 - p.grayscale_mix) * out + p.grayscale_mix * gray
    if p.noise_sigma > 0:
        noise = np.random.default_rng(p.noise_seed).normal(0.0, p.noise_sigma, size=out.shape)
        out = np.clip(out + noise.astype(img.dtype), 0.0, 1.0)
    return np.asarray(out, dtype=img.dtype)


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropRect:
    top: int
    left: int
    height: int
    width: int


@dataclass
class ViewPair:
    x1: np.ndarray
    x2: np.ndarray
    g1: G.GroupElement
    g2: G.GroupElement
    p1: PhotometricParams
    p2: PhotometricParams
    source_index: int
    policy: str
    crops: tuple[CropRect, CropRect] | None = None


def sample_crop(rng: np.random.Generator, h: int, w: int, cfg: AugConfig) -> CropRect:
    """Area fraction uniform in the configured range, log-uniform aspect ratio.

    The aspect range of each draw is clipped to the ratios at which a crop of
    the drawn area fits, so the area fraction stays uniform.  If the clipped
    range is empty, up to 10 draws are tried before falling back to a centered
    crop of the largest admissible square.
    """
    area = h * w
    for _ in range(10):
        frac = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        lo = max(cfg.aspect_min, frac * area / (h * h))
        hi = min(cfg.aspect_max, w * w / (frac * area))
        if lo > hi:
            continue
        aspect = math.exp(rng.uniform(math.log(lo), math.log(hi))) if hi > lo else lo
        cw = min(w, int(round(math.sqrt(frac * area * aspect))))
        ch = min(h, int(round(math.sqrt(frac * area / aspect))))
        if cw > 0 and ch > 0:
            top = int(rng.integers(h - ch + 1))
            left = int(rng.integers(w - cw + 1))
            return CropRect(top, left, ch, cw)
    side = min(h, w)
    return CropRect((h - side) // 2, (w - side) // 2, side, side)


def sample_view_T(img: np.ndarray, rng_crop: np.random.Generator, rng_photo: np.random.Generator,
                  cfg: AugConfig) -> tuple[np.ndarray, CropRect, PhotometricParams, bool]:
    h, w, c = img.shape
    rect = sample_crop(rng_crop, h, w, cfg)
    view = img[rect.top:rect.top + rect.height, rect.left:rect.left + rect.width]
    if view.shape[:2] != (cfg.out_size, cfg.out_size):
        view = G.resize_image(np.ascontiguousarray(view), cfg.out_size, cfg.out_size)
    flipped = bool(cfg.hflip and rng_crop.random() < 0.5)
    if flipped:
        view = view[:, ::-1]
    p = sample_photometric(rng_photo, cfg, c)
    return photometric(p, np.ascontiguousarray(view)), rect, p, flipped


def sample_view_Teq(img: np.ndarray, rng_geo: np.random.Generator, rng_photo: np.random.Generator,
                    cfg: AugConfig, policy: G.GeometricPolicy) -> tuple[np.ndarray, G.GroupElement, PhotometricParams]:
    g = G.sample(rng_geo, policy)
    p = sample_photometric(rng_photo, cfg, img.shape[2])
    return photometric(p, G.act_image(g, img)), g, p


def reconstruct_Teq(img: np.ndarray, g: G.GroupElement, p: PhotometricParams) -> np.ndarray:
    return photometric(p, G.act_image(g, img))


def make_pair(img: np.ndarray, index: int, policy: str, cfg: AugConfig, geo: G.GeometricPolicy,
              seed: int, epoch: int, step: int) -> ViewPair:
    """Two views of one image under policy ``"T"`` or ``"Teq"``."""
    key = (epoch, step, index)
    if policy == "T":
        v1, r1, p1, _ = sample_view_T(img, stream(seed, *key, 0, _CROP), stream(seed, *key, 0, _PHOTO), cfg)
        v2, r2, p2, _ = sample_view_T(img, stream(seed, *key, 1, _CROP), stream(seed, *key, 1, _PHOTO), cfg)
        return ViewPair(v1, v2, G.IDENTITY, G.IDENTITY, p1, p2, index, "T", (r1, r2))
    if policy == "Teq":
        v1, g1, p1 = sample_view_Teq(img, stream(seed, *key, 0, _GEO), stream(seed, *key, 0, _PHOTO), cfg, geo)
        v2, g2, p2 = sample_view_Teq(img, stream(seed, *key, 1, _GEO), stream(seed, *key, 1, _PHOTO), cfg, geo)
        return ViewPair(v1, v2, g1, g2, p1, p2, index, "Teq")
    raise AugmentConfigError(f"unknown policy {policy!r}")


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------


@dataclass
class BatchPartition:
    b1: list[int]
    b2: list[int]
    r: float
    views1: list[ViewPair] = field(default_factory=list)
    views2: list[ViewPair] = field(default_factory=list)


def b2_size(n: int, r: float) -> int:
    # round half up, so the value does not depend on banker's rounding
    return int(math.floor(r * n + 0.5))


def partition(indices: Sequence[int], r: float, epoch: int, seed: int, step: int = 0) -> BatchPartition:
    """Seeded shuffle of the batch; the first ``round(r |B|)`` indices form ``b2``.

    Both sub-batches keep the original batch order, so ``r = 0`` yields the
    batch itself as ``b1``.
    """
    if not 0 <= r <= 1:
        raise AugmentConfigError(f"partition ratio r={r} outside [0,1]")
    indices = list(indices)
    if not indices:
        raise AugmentConfigError("empty batch")
    order = stream(seed, epoch, step, _PART).permutation(len(indices))
    n2 = b2_size(len(indices), r)
    chosen = np.zeros(len(indices), dtype=bool)
    chosen[order[:n2]] = True
    b2 = [ix for ix, c in zip(indices, chosen) if c]
    b1 = [ix for ix, c in zip(indices, chosen) if not c]
    return BatchPartition(b1, b2, r)


def build_views(images: np.ndarray, part: BatchPartition, cfg: AugConfig, geo: G.GeometricPolicy,
                seed: int, epoch: int, step: int) -> BatchPartition:
    """Attach T views to ``b1`` and T_eq views to ``b2``; ``SER_THREADS`` caps parallelism."""
    jobs = [(i, "T") for i in part.b1] + [(i, "Teq") for i in part.b2]
    threads = max(1, int(os.environ.get("SER_THREADS", "1") or 1))

    def run(job):
        i, pol = job
        return make_pair(images[i], i, pol, cfg, geo, seed, epoch, step)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            pairs = list(ex.map(run, jobs))
    else:
        pairs = [run(j) for j in jobs]
    part.views1 = pairs[:len(part.b1)]
    part.views2 = pairs[len(part.b1):]
    return part
