"""Training objectives.

* :func:`patch_nt_xent` / :func:`equiv_nt_xent`: per-location contrastive
  regularizer on aligned token maps.  The anchor ``z_a`` is a location of
  ``rho_g(f1(x1))``, its positive is the same location of ``f1(x2)``, and the
  negatives are every location of every *other* image, taken from both pools.
* :func:`inv_contrastive`: symmetric in-batch InfoNCE on final embeddings.
* :func:`inv_redundancy`: cross-correlation redundancy reduction.
* :func:`augself_aux`: relative rotation/flip prediction from a pair of
  representations.
* :func:`total_loss`: ``inv1 + inv2 + lam * equiv``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import group as G
from . import tensor as T

logger = logging.getLogger(__name__)

BN_EPS = 1e-5


class LossConfigError(ValueError):
    pass


class InsufficientNegativesError(ValueError):
    """The contrastive denominator would hold only the positive."""


@dataclass(frozen=True)
class EquivLossConfig:
    tau: float = 0.3
    lam: float = 0.5

    def validate(self) -> None:
        if not self.tau > 0:
            raise LossConfigError(f"tau_eq must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise LossConfigError(f"lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class InvLossConfig:
    kind: str = "contrastive"
    tau: float = 0.2
    off_diag_weight: float = 0.0051

    def validate(self) -> None:
        if self.kind not in ("contrastive", "redundancy"):
            raise LossConfigError(f"unknown invariance loss {self.kind!r}")
        if not self.tau > 0:
            raise LossConfigError(f"tau_inv must be positive, got {self.tau}")
        if self.off_diag_weight < 0:
            raise LossConfigError("off_diag_weight must be non-negative")


def _cosine_logits(a: T.Tensor, b: T.Tensor, tau: float) -> T.Tensor:
    return T.scale(T.matmul(a, T.transpose(b)), 1.0 / tau)


def patch_nt_xent(u: T.Tensor, v: T.Tensor, image_ids, tau: float) -> T.Tensor:
    """Mean over anchors ``a`` of ``-log(exp(s_aa') / (exp(s_aa') + sum_{b not in img(a)} exp(s_ab') + exp(s_ab)))``.

    ``u`` holds projected anchors, ``v`` their positives (row ``a`` of ``v``
    pairs with row ``a`` of ``u``), ``image_ids[a]`` names the source image.
    """
    if u.shape != v.shape or u.ndim != 2:
        raise T.ShapeError(f"anchor/positive shapes differ: {u.shape} vs {v.shape}")
    ids = np.asarray(image_ids)
    if ids.shape != (u.shape[0],):
        raise T.ShapeError(f"image ids {ids.shape} for {u.shape[0]} anchors")
    if np.unique(ids).size < 2:
        raise InsufficientNegativesError("need at least two images for negatives")
    un = T.l2_normalize(u, axis=-1)
    vn = T.l2_normalize(v, axis=-1)
    s_uv = _cosine_logits(un, vn, tau)
    s_uu = _cosine_logits(un, un, tau)
    other = ids[:, None] != ids[None, :]
    m = len(ids)
    mask = np.concatenate([other | np.eye(m, dtype=bool), other], axis=1)
    lse = T.logsumexp(T.concat([s_uv, s_uu], axis=1), axis=1, mask=mask)
    pos = T.scale(T.sum(T.mul(un, vn), axis=1), 1.0 / tau)
    return T.mean(T.sub(lse, pos))


def flatten_maps(maps: Sequence[T.Tensor]) -> tuple[T.Tensor, np.ndarray]:
    """Stack ``[h_i, w_i, D]`` maps into ``[sum h_i w_i, D]`` with per-row image ids."""
    flat = []
    ids = []
    for i, m in enumerate(maps):
        if m.ndim != 3:
            raise T.ShapeError(f"token map must be [h, w, D], got {m.shape}")
        n = m.shape[0] * m.shape[1]
        flat.append(T.reshape(m, (n, m.shape[2])))
        ids.append(np.full(n, i))
    return (flat[0] if len(flat) == 1 else T.concat(flat, axis=0)), np.concatenate(ids)


def equiv_nt_xent(z, z2, cfg: EquivLossConfig, head=None) -> T.Tensor:
    """Patch-wise contrastive regularizer between aligned maps ``z = rho_g(f1(x1))`` and ``z2 = f1(x2)``.

    ``z`` and ``z2`` are either batches ``[N, h, w, D]`` or sequences of
    per-image maps ``[h_i, w_i, D]`` (grids may differ between images but must
    agree between ``z[i]`` and ``z2[i]``).  ``head`` is the shared projection
    applied to every location; ``None`` uses the raw features.
    """
    if isinstance(z, T.Tensor):
        if z.shape != z2.shape or z.ndim != 4:
            raise T.ShapeError(f"aligned maps differ: {z.shape} vs {z2.shape}")
        n, h, w, d = z.shape
        u = T.reshape(z, (n * h * w, d))
        v = T.reshape(z2, (n * h * w, d))
        ids = np.repeat(np.arange(n), h * w)
    else:
        if len(z) != len(z2):
            raise T.ShapeError("anchor and positive batches differ in length")
        for a, b in zip(z, z2):
            if a.shape != b.shape:
                raise T.ShapeError(f"aligned maps differ: {a.shape} vs {b.shape}")
        u, ids = flatten_maps(z)
        v, _ = flatten_maps(z2)
    if head is not None:
        u, v = head(u), head(v)
    return patch_nt_xent(u, v, ids, cfg.tau)


def inv_contrastive(e1: T.Tensor, e2: T.Tensor, tau: float) -> T.Tensor:
    """Symmetric InfoNCE: each of the ``2n`` embeddings is an anchor; its partner view is the positive."""
    if e1.shape != e2.shape or e1.ndim != 2:
        raise T.ShapeError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    n = e1.shape[0]
    if n < 2:
        raise InsufficientNegativesError("inv_contrastive needs at least two images")
    e = T.l2_normalize(T.concat([e1, e2], axis=0), axis=-1)
    s = _cosine_logits(e, e, tau)
    mask = ~np.eye(2 * n, dtype=bool)
    lse = T.logsumexp(s, axis=1, mask=mask)
    partner = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    e_partner = T.take(e, partner, axis=0)
    pos = T.scale(T.sum(T.mul(e, e_partner), axis=1), 1.0 / tau)
    return T.mean(T.sub(lse, pos))


def standardize_columns(x: T.Tensor, eps: float = BN_EPS) -> T.Tensor:
    """Per-dimension zero mean, unit (biased) variance over the batch axis."""
    d, n = x.shape[1], x.shape[0]
    ones = T.Tensor(np.ones(n, dtype=x.dtype))
    zeros = T.Tensor(np.zeros(n, dtype=x.dtype))
    return T.transpose(T.layernorm(T.transpose(x), ones, zeros, eps))


def inv_redundancy(e1: T.Tensor, e2: T.Tensor, off_diag_weight: float, eps: float = BN_EPS) -> T.Tensor:
    """``sum_i (1 - C_ii)^2 + w sum_{i != j} C_ij^2`` with ``C = a^T b / n`` of standardized batches."""
    if e1.shape != e2.shape or e1.ndim != 2:
        raise T.ShapeError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    n, d = e1.shape
    if n < 2:
        raise InsufficientNegativesError("inv_redundancy needs at least two samples")
    a = standardize_columns(e1, eps)
    b = standardize_columns(e2, eps)
    c = T.scale(T.matmul(T.transpose(a), b), 1.0 / n)
    eye = T.Tensor(np.eye(d, dtype=c.dtype))
    diag = T.sum(T.mul(c, eye), axis=1)
    one_minus = T.sub(1.0, diag)
    on = T.sum(T.mul(one_minus, one_minus))
    if d == 1:
        return on
    sq = T.mul(c, c)
    off = T.sub(T.sum(sq), T.sum(T.mul(diag, diag)))
    return T.add(on, T.scale(off, off_diag_weight))


def invariance_loss(e1: T.Tensor, e2: T.Tensor, cfg: InvLossConfig) -> T.Tensor:
    if cfg.kind == "contrastive":
        return inv_contrastive(e1, e2, cfg.tau)
    if cfg.kind == "redundancy":
        return inv_redundancy(e1, e2, cfg.off_diag_weight)
    raise LossConfigError(f"unknown invariance loss {cfg.kind!r}")


def relative_labels(g1s: Sequence[G.GroupElement], g2s: Sequence[G.GroupElement]) -> tuple[np.ndarray, np.ndarray]:
    """Rotation (0..3) and flip (0/1) of ``relative(g1, g2)``; the scale part is ignored."""
    rel = [G.relative(a, b) for a, b in zip(g1s, g2s)]
    return np.array([r.k for r in rel], dtype=np.intp), np.array([int(r.flip) for r in rel], dtype=np.intp)


def augself_aux(e1: T.Tensor, e2: T.Tensor, g1s, g2s, head) -> T.Tensor:
    """Summed cross-entropy of 4-way rotation and 2-way flip prediction from ``concat(e1, e2)``."""
    if e1.shape != e2.shape or e1.ndim != 2:
        raise T.ShapeError(f"representation shapes differ: {e1.shape} vs {e2.shape}")
    rot, flip = relative_labels(g1s, g2s)
    logits = head(T.concat([e1, e2], axis=1))
    if logits.shape[1] != 6:
        raise T.ShapeError(f"augself head must output 6 logits, got {logits.shape[1]}")
    l_rot = T.cross_entropy(T.getitem(logits, (slice(None), slice(0, 4))), rot)
    l_flip = T.cross_entropy(T.getitem(logits, (slice(None), slice(4, 6))), flip)
    return T.add(l_rot, l_flip)


def total_loss(inv1, inv2, equiv, lam: float):
    """``inv1 + inv2 + lam * equiv``; scalars and tensors may be mixed."""
    if lam < 0:
        raise LossConfigError(f"lambda must be non-negative, got {lam}")
    base = inv1 + inv2
    if isinstance(equiv, T.Tensor):
        return base + T.scale(equiv, lam)
    return base + lam * equiv
