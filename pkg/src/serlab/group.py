"""The geometric group: quarter-turns, horizontal flips and patch-aligned scaling.

Conventions (used identically in pixel and token space):

* Arrays are indexed ``[row, col, channel]``; the origin is the top-left
  corner and spatial grids are flattened row-major.
* ``rot90`` turns the picture counter-clockwise, i.e. ``np.rot90`` on the
  first two axes: ``[[a, b], [c, d]] -> [[b, d], [a, c]]``.
* ``hflip`` reverses columns.
* A :class:`GroupElement` with quarter-turns ``k`` and flip ``f`` applies the
  flip first and then ``k`` rotations, then rescales the result by ``(sx, sy)``
  (columns by ``sx``, rows by ``sy``).  Its matrix on centered ``(x, y)``
  coordinates (``x`` rightwards, ``y`` downwards) is ``diag(sx, sy) @ R**k @ F**f``.
* ``compose(a, b)`` means "apply ``b``, then ``a``".
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T

__all__ = [
    "AlignmentError",
    "GroupConfigError",
    "GroupElement",
    "TokenGrid",
    "GeometricPolicy",
    "IDENTITY",
    "ROT90",
    "HFLIP",
    "rotation",
    "scaling",
    "compose",
    "inverse",
    "relative",
    "dihedral_matrix",
    "matrix",
    "resize_matrix",
    "resize_image",
    "token_permutation",
    "act_image",
    "act_tokens",
    "act_grid",
    "patchify_mean",
    "sample",
    "parse_element",
    "parse_scales",
]


class AlignmentError(ValueError):
    """A transform does not map the current grid onto an integer grid."""


class GroupConfigError(ValueError):
    """Invalid geometric sampling policy."""


_R = np.array([[0, 1], [-1, 0]], dtype=np.int64)
_F = np.array([[-1, 0], [0, 1]], dtype=np.int64)


@functools.lru_cache(maxsize=None)
def _dihedral_table():
    mats = {}
    for k in range(4):
        for f in (0, 1):
            m = np.linalg.matrix_power(_R, k) @ (_F if f else np.eye(2, dtype=np.int64))
            mats[(k, f)] = m
    lookup = {tuple(m.ravel()): key for key, m in mats.items()}
    return mats, lookup


def dihedral_matrix(k: int, f: int) -> np.ndarray:
    return _dihedral_table()[0][(k % 4, int(f))].copy()


def _dihedral_from_matrix(m: np.ndarray) -> tuple[int, int]:
    return _dihedral_table()[1][tuple(int(v) for v in np.asarray(m).ravel())]


def _frac(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, float):
        return Fraction(v).limit_denominator(1000)
    return Fraction(v)


@dataclass(frozen=True)
class GroupElement:
    """``diag(sx, sy) @ rot**k @ flip**f`` with exact rational scales."""

    k: int = 0
    flip: bool = False
    sx: Fraction = Fraction(1)
    sy: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "k", int(self.k) % 4)
        object.__setattr__(self, "flip", bool(self.flip))
        sx, sy = _frac(self.sx), _frac(self.sy)
        if sx <= 0 or sy <= 0:
            raise ValueError(f"scales must be positive, got {sx}, {sy}")
        object.__setattr__(self, "sx", sx)
        object.__setattr__(self, "sy", sy)

    @property
    def swaps_axes(self) -> bool:
        return self.k % 2 == 1

    @property
    def is_dihedral(self) -> bool:
        return self.sx == 1 and self.sy == 1

    @property
    def is_identity(self) -> bool:
        return self.k == 0 and not self.flip and self.is_dihedral

    @property
    def dihedral(self) -> "GroupElement":
        return GroupElement(self.k, self.flip)

    def __str__(self) -> str:
        return f"k={self.k} f={int(self.flip)} sx={self.sx.numerator}/{self.sx.denominator} sy={self.sy.numerator}/{self.sy.denominator}"

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)


IDENTITY = GroupElement()
ROT90 = GroupElement(k=1)
HFLIP = GroupElement(flip=True)


def rotation(k: int) -> GroupElement:
    return GroupElement(k=k)


def scaling(sx, sy) -> GroupElement:
    return GroupElement(sx=_frac(sx), sy=_frac(sy))


def matrix(g: GroupElement) -> list[list[Fraction]]:
    """Exact 2x2 matrix of ``g`` on centered ``(x, y)`` coordinates."""
    p = dihedral_matrix(g.k, g.flip)
    return [[g.sx * int(p[0, 0]), g.sx * int(p[0, 1])], [g.sy * int(p[1, 0]), g.sy * int(p[1, 1])]]


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """The element that applies ``b`` first and then ``a``."""
    pa = dihedral_matrix(a.k, a.flip)
    pb = dihedral_matrix(b.k, b.flip)
    # P_a diag(s_b) P_a^-1 permutes the scale pair when P_a swaps axes
    sbx, sby = (b.sy, b.sx) if a.swaps_axes else (b.sx, b.sy)
    k, f = _dihedral_from_matrix(pa @ pb)
    return GroupElement(k, bool(f), a.sx * sbx, a.sy * sby)


def inverse(g: GroupElement) -> GroupElement:
    p = dihedral_matrix(g.k, g.flip)
    k, f = _dihedral_from_matrix(p.T)
    # (diag(s) P)^-1 = P^-1 diag(1/s) = diag(P^-1(1/s)) P^-1
    ix, iy = 1 / g.sx, 1 / g.sy
    if g.swaps_axes:
        ix, iy = iy, ix
    return GroupElement(k, bool(f), ix, iy)


def relative(g1: GroupElement, g2: GroupElement) -> GroupElement:
    """``g2 g1^-1``: maps the geometry of view 1 onto view 2."""
    return compose(g2, inverse(g1))


# ---------------------------------------------------------------------------
# shared bilinear resampler
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def _resize_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear weights with half-pixel centers (align-corners false).

    Output sample ``i`` reads the source coordinate
    ``u = (i + 0.5) * n_in / n_out - 0.5`` clamped to ``[0, n_in - 1]`` and
    blends ``floor(u)`` and ``floor(u) + 1`` with weights ``1 - frac(u)``
    and ``frac(u)``.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    ratio = n_in / n_out
    for i in range(n_out):
        u = (i + 0.5) * ratio - 0.5
        u = min(max(u, 0.0), n_in - 1.0)
        i0 = int(np.floor(u))
        i1 = min(i0 + 1, n_in - 1)
        w = u - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    m.setflags(write=False)
    return m


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_in < 1 or n_out < 1:
        raise AlignmentError(f"cannot resize between sizes {n_in} and {n_out}")
    return _resize_matrix_cached(int(n_in), int(n_out))


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``[..., H, W, C]`` arrays with the shared bilinear resampler."""
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    rh = resize_matrix(h, out_h).astype(img.dtype)
    rw = resize_matrix(w, out_w).astype(img.dtype)
    return T.resample_array(np.ascontiguousarray(img), rh, rw)


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenGrid:
    h: int
    w: int
    patch: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.patch < 1:
            raise AlignmentError(f"invalid token grid {self}")

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def image_size(self) -> tuple[int, int]:
        return self.h * self.patch, self.w * self.patch

    @classmethod
    def for_image(cls, height: int, width: int, patch: int) -> "TokenGrid":
        if height % patch or width % patch:
            raise AlignmentError(f"image size {height}x{width} is not divisible by patch {patch}")
        return cls(height // patch, width // patch, patch)


def _dihedral_array(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    # axes are the first two of x
    if flip:
        x = x[:, ::-1]
    if k:
        x = np.rot90(x, k=k, axes=(0, 1))
    return x


def _scaled_size(h: int, w: int, g: GroupElement) -> tuple[int, int]:
    if g.swaps_axes:
        h, w = w, h
    nh, nw = g.sy * h, g.sx * w
    if nh.denominator != 1 or nw.denominator != 1:
        raise AlignmentError(f"scale ({g.sx}, {g.sy}) maps {h}x{w} to non-integer size {float(nh)}x{float(nw)}")
    return int(nh), int(nw)


def act_grid(g: GroupElement, grid: TokenGrid) -> TokenGrid:
    h, w = _scaled_size(grid.h, grid.w, g)
    return TokenGrid(h, w, grid.patch)


def act_image(g: GroupElement, img: np.ndarray) -> np.ndarray:
    """Apply ``g`` to an ``[H, W, C]`` image: exact pixel permutation, then bilinear resize."""
    img = np.asarray(img)
    h, w = img.shape[0], img.shape[1]
    nh, nw = _scaled_size(h, w, g)
    out = _dihedral_array(img, g.k, g.flip)
    if (nh, nw) == out.shape[:2]:
        return np.ascontiguousarray(out)
    return resize_image(np.ascontiguousarray(out), nh, nw)


@functools.lru_cache(maxsize=1024)
def token_permutation(h: int, w: int, k: int, flip: bool) -> np.ndarray:
    """Row-major index map ``perm`` with ``out[j] = in[perm[j]]`` for the dihedral part."""
    idx = np.arange(h * w).reshape(h, w)
    out = _dihedral_array(idx, k % 4, bool(flip))
    perm = np.ascontiguousarray(out).reshape(-1)
    perm.setflags(write=False)
    return perm


def act_tokens(g: GroupElement, feat: T.Tensor, target: TokenGrid | None = None) -> T.Tensor:
    """Apply ``g`` to a token map ``[h, w, D]`` (or a batch ``[N, h, w, D]``).

    The dihedral part is an exact token permutation; scaling resamples the
    grid channel-wise with the shared bilinear resampler.
    """
    if feat.ndim not in (3, 4):
        raise T.ShapeError(f"token map must be [h, w, D] or [N, h, w, D], got {feat.shape}")
    h, w, d = feat.shape[-3:]
    nh, nw = _scaled_size(h, w, g)
    if target is not None and (target.h, target.w) != (nh, nw):
        raise AlignmentError(f"{g} maps grid {h}x{w} to {nh}x{nw}, not the requested {target.h}x{target.w}")
    out = feat
    if g.k or g.flip:
        perm = token_permutation(h, w, g.k, g.flip)
        lead = feat.shape[:-3]
        flat = T.reshape(feat, lead + (h * w, d))
        flat = T.index_permute(flat, perm, axis=-2)
        ph, pw = (w, h) if g.swaps_axes else (h, w)
        out = T.reshape(flat, lead + (ph, pw, d))
    ph, pw = out.shape[-3], out.shape[-2]
    if (ph, pw) != (nh, nw):
        out = T.resize2d(out, resize_matrix(ph, nh), resize_matrix(pw, nw))
    return out


def patchify_mean(img: np.ndarray, patch: int) -> np.ndarray:
    """Average each ``patch x patch`` cell of an ``[H, W, C]`` image into ``[H/p, W/p, C]``."""
    h, w, c = img.shape
    if h % patch or w % patch:
        raise AlignmentError(f"image {h}x{w} is not divisible by patch {patch}")
    return img.reshape(h // patch, patch, w // patch, patch, c).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# sampling and parsing
# ---------------------------------------------------------------------------


def parse_scales(text: str) -> tuple[Fraction, ...]:
    """Parse ``"3/4,1,5/4"`` into exact fractions."""
    items = [s.strip() for s in str(text).split(",") if s.strip()]
    out = []
    for s in items:
        try:
            v = Fraction(s)
        except (ValueError, ZeroDivisionError) as exc:
            raise GroupConfigError(f"bad scale factor {s!r}") from exc
        if v <= 0:
            raise GroupConfigError(f"scale factor must be positive, got {s!r}")
        out.append(v)
    return tuple(out)


@dataclass(frozen=True)
class GeometricPolicy:
    rot90: bool = True
    hflip: bool = True
    scales: tuple[Fraction, ...] = field(default=(Fraction(3, 4), Fraction(1), Fraction(5, 4)))

    def __post_init__(self):
        if isinstance(self.scales, str):
            object.__setattr__(self, "scales", parse_scales(self.scales))
        else:
            object.__setattr__(self, "scales", tuple(_frac(s) for s in self.scales))

    def restricted(self, family: str) -> "GeometricPolicy":
        """Policy containing only one transform family (``rot90``, ``hflip`` or ``scale``)."""
        if family == "rot90":
            if not self.rot90:
                raise GroupConfigError("rotation family is disabled in the geometric policy")
            return GeometricPolicy(True, False, (Fraction(1),))
        if family == "hflip":
            if not self.hflip:
                raise GroupConfigError("hflip family is disabled in the geometric policy")
            return GeometricPolicy(False, True, (Fraction(1),))
        if family == "scale":
            if not any(s != 1 for s in self.scales):
                raise GroupConfigError("scale family is empty in the geometric policy")
            return GeometricPolicy(False, False, self.scales)
        raise GroupConfigError(f"unknown transform family {family!r}")


def sample(rng: np.random.Generator, policy: GeometricPolicy) -> GroupElement:
    """Independent uniform draws of rotation, flip and per-axis scale."""
    if not policy.scales:
        raise GroupConfigError("empty scale set")
    k = int(rng.integers(4)) if policy.rot90 else 0
    f = bool(rng.random() < 0.5) if policy.hflip else False
    n = len(policy.scales)
    sx = policy.scales[int(rng.integers(n))] if n > 1 else policy.scales[0]
    sy = policy.scales[int(rng.integers(n))] if n > 1 else policy.scales[0]
    return GroupElement(k, f, sx, sy)


def parse_element(text: str) -> GroupElement:
    """Inverse of ``str(GroupElement)``: ``"k=1 f=0 sx=3/4 sy=1/1"``."""
    fields = dict(part.split("=", 1) for part in text.split())
    try:
        return GroupElement(int(fields["k"]), fields["f"] == "1", Fraction(fields["sx"]), Fraction(fields["sy"]))
    except KeyError as exc:
        raise ValueError(f"malformed group element {text!r}") from exc


def all_dihedral() -> Sequence[GroupElement]:
    return [GroupElement(k, bool(f)) for k in range(4) for f in (0, 1)]
