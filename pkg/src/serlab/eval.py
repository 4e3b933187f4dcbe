"""Measurements on frozen encoders: equivariance score, probes, sweeps, FLOPs.

Feature conventions:

* class probe: layer-normalized CLS states of the last ``min(4, available)``
  blocks, concatenated;
* orientation probe: the final block's spatial tokens, flattened (pooling
  would discard the token layout that carries orientation);
* transformation probes: spatial tokens of the chosen layer, mean-pooled;
* equivariance score: spatial tokens of the chosen layer (CLS excluded).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import traceback
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import augment as A
from . import config as C
from . import group as G
from . import tensor as T
from .model import SplitViT

logger = logging.getLogger(__name__)

FAMILIES = ("rot90", "hflip", "scale")
_SCORE_KEY = 0xE05C
_SPLIT_KEY = 0x5B17
_PROBE_KEY = 0x9B0E
_TPROBE_KEY = 0x7A5C


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def spatial_features(encoder: SplitViT, images: np.ndarray, layer: int, chunk: int = 256) -> np.ndarray:
    """``[N, h, w, D]`` token maps after ``layer`` blocks, gradients disabled."""
    out = []
    with T.no_grad():
        for sl in _chunks(len(images), chunk):
            out.append(encoder.forward_features_at(images[sl], layer).feat.data)
    return np.concatenate(out, axis=0)


def class_features(encoder: SplitViT, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([encoder.probe_features(images[sl]) for sl in _chunks(len(images), chunk)], axis=0)


def orientation_features(encoder: SplitViT, images: np.ndarray) -> np.ndarray:
    f = spatial_features(encoder, images, encoder.cfg.depth)
    return f.reshape(len(f), -1)


def pooled_features(encoder: SplitViT, images: np.ndarray, layer: int) -> np.ndarray:
    return spatial_features(encoder, images, layer).mean(axis=(1, 2))


# ---------------------------------------------------------------------------
# equivariance score
# ---------------------------------------------------------------------------


@dataclass
class EquivScoreReport:
    scores: dict[str, float]
    n_samples: int
    layer: int
    representation: str = "spatial tokens of the evaluated layer, CLS excluded"
    note: str = ("the CLS vector has no spatial action, so the score is computed on spatial tokens; "
                 "which tensor the reference protocol used is ambiguous")


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def equivariance_score(encoder: SplitViT, images: np.ndarray, family: str, layer: int | None = None,
                       n_samples: int = 500, seed: int = 0, policy: G.GeometricPolicy | None = None) -> float:
    """Mean ``cos(rho_g(F(x1)), F(x2))`` with ``x_i = g_i x`` and ``g = relative(g1, g2)``.

    ``g1``, ``g2`` are drawn from the chosen family only.  No photometric
    jitter is applied.
    """
    layer = encoder.cfg.depth if layer is None else layer
    fam = (policy or G.GeometricPolicy()).restricted(family)
    rng = A.stream(seed, _SCORE_KEY, FAMILIES.index(family))
    idx = rng.integers(len(images), size=n_samples)
    pairs = [(G.sample(rng, fam), G.sample(rng, fam)) for _ in range(n_samples)]
    views = [G.act_image(g1, images[i]) for i, (g1, _) in zip(idx, pairs)]
    views += [G.act_image(g2, images[i]) for i, (_, g2) in zip(idx, pairs)]
    feats = _features_by_shape(encoder, views, layer)
    total = 0.0
    for s, (g1, g2) in enumerate(pairs):
        f1 = feats[s]
        f2 = feats[n_samples + s]
        moved = G.act_tokens(G.relative(g1, g2), T.Tensor(f1), target=G.TokenGrid(f2.shape[0], f2.shape[1],
                                                                                    encoder.cfg.patch))
        total += _cos(moved.data, f2)
    return total / n_samples


def _features_by_shape(encoder: SplitViT, views: list[np.ndarray], layer: int, chunk: int = 256) -> list[np.ndarray]:
    groups: dict[tuple, list[int]] = {}
    for i, v in enumerate(views):
        groups.setdefault(v.shape, []).append(i)
    out: list[np.ndarray | None] = [None] * len(views)
    with T.no_grad():
        for idx in groups.values():
            for sl in _chunks(len(idx), chunk):
                part = idx[sl]
                f = encoder.forward_features_at(np.stack([views[i] for i in part]), layer).feat.data
                for j, i in enumerate(part):
                    out[i] = f[j]
    return out


def equivariance_report(encoder: SplitViT, images: np.ndarray, layer: int | None = None, n_samples: int = 500,
                        seed: int = 0, policy: G.GeometricPolicy | None = None,
                        families: Sequence[str] = FAMILIES) -> EquivScoreReport:
    layer = encoder.cfg.depth if layer is None else layer
    scores = {f: equivariance_score(encoder, images, f, layer, n_samples, seed, policy) for f in families}
    return EquivScoreReport(scores, n_samples, layer)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    layer: int | None = None
    kind: str = "features"

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max())) + 1


@dataclass
class ProbeResult:
    top1: float
    top5: float | None
    n_val: int
    chance: float


def split_indices(n: int, seed: int, val_fraction: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    perm = A.stream(seed, _SPLIT_KEY).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def make_probe_dataset(features: np.ndarray, labels: np.ndarray, seed: int, val_fraction: float = 0.3,
                       layer: int | None = None, kind: str = "features") -> ProbeDataset:
    tr, va = split_indices(len(features), seed, val_fraction)
    return ProbeDataset(features[tr], labels[tr], features[va], labels[va], layer, kind)


def _standardize(xtr: np.ndarray, xva: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    return (xtr - mu) / sd, (xva - mu) / sd


def _check_probe(ds: ProbeDataset) -> int:
    k = ds.n_classes
    if np.unique(ds.y_train).size < 2:
        raise EvalError("probe needs at least two classes in the training split")
    if len(ds.y_train) < k:
        raise EvalError(f"{len(ds.y_train)} training samples for {k} classes")
    return k


def _topk(logits: np.ndarray, y: np.ndarray, k: int) -> float:
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((top == y[:, None]).any(axis=1).mean())


def _chance(y: np.ndarray, k: int) -> float:
    return float(np.bincount(y, minlength=k).max() / len(y))


def linear_probe(ds: ProbeDataset, epochs: int = 50, batch_size: int = 256, lr: float = 0.01,
                 weight_decay: float = 0.0, seed: int = 0) -> ProbeResult:
    """Multinomial logistic regression on standardized frozen features.

    Mini-batch Adam with cosine-decayed learning rate and no warmup.
    """
    k = _check_probe(ds)
    xtr, xva = _standardize(ds.x_train.astype(np.float64), ds.x_val.astype(np.float64))
    n, d = xtr.shape
    w = np.zeros((d, k))
    b = np.zeros(k)
    m = [np.zeros_like(w), np.zeros_like(b)]
    v = [np.zeros_like(w), np.zeros_like(b)]
    rng = A.stream(seed, _PROBE_KEY)
    spe = max(1, math.ceil(n / batch_size))
    total = epochs * spe
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(spe):
            idx = order[s * batch_size:(s + 1) * batch_size]
            xb, yb = xtr[idx], ds.y_train[idx]
            z = xb @ w + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), yb] -= 1.0
            p /= len(idx)
            grads = [xb.T @ p + weight_decay * w, p.sum(axis=0)]
            step_lr = 0.5 * lr * (1.0 + math.cos(math.pi * t / total))
            t += 1
            for i, (param, g) in enumerate(zip((w, b), grads)):
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                param -= step_lr * (m[i] / (1 - 0.9 ** t)) / (np.sqrt(v[i] / (1 - 0.999 ** t)) + 1e-8)
    logits = xva @ w + b
    return ProbeResult(_topk(logits, ds.y_val, 1), _topk(logits, ds.y_val, 5) if k >= 5 else None,
                       len(ds.y_val), _chance(ds.y_val, k))


def mlp_probe(ds: ProbeDataset, hidden: int = 256, epochs: int = 50, batch_size: int = 256, lr: float = 1e-3,
              seed: int = 0) -> ProbeResult:
    """One hidden GELU layer trained with AdamW on standardized features."""
    from .model import ProjectionHead
    from .train import AdamW

    k = _check_probe(ds)
    xtr, xva = _standardize(ds.x_train.astype(np.float64), ds.x_val.astype(np.float64))
    rng = A.stream(seed, _PROBE_KEY, 1)
    head = ProjectionHead("mlp", xtr.shape[1], hidden, k, rng, np.float64)
    opt = AdamW(head.params, 0.0)
    n = len(xtr)
    spe = max(1, math.ceil(n / batch_size))
    total = epochs * spe
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(spe):
            idx = order[s * batch_size:(s + 1) * batch_size]
            for p in head.params.values():
                p.grad = None
            loss = T.cross_entropy(head(T.Tensor(xtr[idx])), ds.y_train[idx])
            T.backward(loss)
            opt.step(0.5 * lr * (1.0 + math.cos(math.pi * t / total)))
            t += 1
    with T.no_grad():
        logits = head(T.Tensor(xva)).data
    return ProbeResult(_topk(logits, ds.y_val, 1), _topk(logits, ds.y_val, 5) if k >= 5 else None,
                       len(ds.y_val), _chance(ds.y_val, k))


def default_k(n_train: int) -> int:
    return 20 if n_train >= 400 else 5


def knn_probe(ds: ProbeDataset, k: int | None = None) -> ProbeResult:
    """Cosine k-NN majority vote.

    Ties go to the class with the smaller mean distance among its voters,
    then to the smaller class index.
    """
    k = default_k(len(ds.x_train)) if k is None else k
    if k < 1:
        raise EvalError("k must be >= 1")
    if k > len(ds.x_train):
        raise EvalError(f"k={k} exceeds the {len(ds.x_train)} training samples")
    n_cls = ds.n_classes

    def unit(x):
        x = x.astype(np.float64)
        nrm = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(nrm > 0, nrm, 1.0)

    dist = 1.0 - unit(ds.x_val) @ unit(ds.x_train).T
    nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
    pred = np.empty(len(ds.x_val), dtype=np.intp)
    for i in range(len(ds.x_val)):
        lab = ds.y_train[nn[i]]
        dd = dist[i, nn[i]]
        votes = np.bincount(lab, minlength=n_cls)
        best = np.flatnonzero(votes == votes.max())
        if len(best) > 1:
            means = np.array([dd[lab == c].mean() for c in best])
            best = best[means == means.min()]
        pred[i] = best.min()
    return ProbeResult(float((pred == ds.y_val).mean()), None, len(ds.y_val), _chance(ds.y_val, n_cls))


# ---------------------------------------------------------------------------
# transformation probes
# ---------------------------------------------------------------------------

TASKS = {"rotation4": 4, "hflip2": 2}


def transform_element(task: str, label: int) -> G.GroupElement:
    if task == "rotation4":
        return G.rotation(label)
    if task == "hflip2":
        return G.HFLIP if label else G.IDENTITY
    raise EvalError(f"unknown transformation task {task!r}")


def balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


@dataclass
class TransformProbeResult:
    task: str
    layer: int | None
    accuracy: float
    chance_floor: float
    n_val: int


def transform_probe(images: np.ndarray, task: str, featurizer: Callable[[np.ndarray], np.ndarray], seed: int = 0,
                    shuffle_labels: bool = False, layer: int | None = None, epochs: int = 50) -> TransformProbeResult:
    """Predict the transform applied to each image from frozen features of the transformed view.

    Labels are balanced by construction, so the majority-class floor over the
    full set is exactly ``1 / classes``.
    """
    if task not in TASKS:
        raise EvalError(f"unknown transformation task {task!r}")
    k = TASKS[task]
    rng = A.stream(seed, _TPROBE_KEY, k)
    labels = balanced_labels(len(images), k, rng)
    views = np.stack([G.act_image(transform_element(task, int(y)), img) for y, img in zip(labels, images)])
    feats = featurizer(views)
    if shuffle_labels:
        labels = rng.permutation(labels)
    ds = make_probe_dataset(feats, labels, seed, layer=layer, kind="transformed view")
    res = linear_probe(ds, epochs=epochs, seed=seed)
    floor = float(np.bincount(labels, minlength=k).max() / len(labels))
    return TransformProbeResult(task, layer, res.top1, floor, res.n_val)


def pixel_featurizer(views: np.ndarray) -> np.ndarray:
    return views.reshape(len(views), -1)


def encoder_featurizer(encoder: SplitViT, layer: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda views: pooled_features(encoder, views, layer)


# ---------------------------------------------------------------------------
# evaluation of a trained encoder and ablation sweeps
# ---------------------------------------------------------------------------


@dataclass
class EvalSummary:
    class_top1: float
    orient_top1: float
    class_knn: float
    equiv: dict[str, float]


def evaluate_encoder(encoder: SplitViT, images: np.ndarray, labels: np.ndarray, seed: int = 0,
                     equiv_samples: int = 500, probe_epochs: int = 50,
                     policy: G.GeometricPolicy | None = None, families: Sequence[str] = FAMILIES) -> EvalSummary:
    """Class probe, orientation probe, class kNN and final-layer equivariance scores."""
    cf = class_features(encoder, images)
    of = orientation_features(encoder, images)
    cls_ds = make_probe_dataset(cf, labels[:, 0], seed)
    ori_ds = make_probe_dataset(of, labels[:, 1], seed)
    class_top1 = linear_probe(cls_ds, epochs=probe_epochs, seed=seed).top1
    orient_top1 = linear_probe(ori_ds, epochs=probe_epochs, seed=seed).top1
    knn = knn_probe(cls_ds).top1
    rep = equivariance_report(encoder, images, None, equiv_samples, seed, policy, families)
    return EvalSummary(class_top1, orient_top1, knn, rep.scores)


AXES = {
    "layer": "model.l_eq",
    "cls": "model.l_cls",
    "lambda": "loss.lambda",
    "ratio": "part.r",
    "group": None,  # value is a '+'-joined subset of rot90, hflip, scale
    "all-layers": "loss.all_layers",
    "method": "train.method",
}

SWEEP_COLUMNS = ("axis", "value", "seed", "class_top1", "orient_top1", "class_knn",
                 "equiv_rot90", "equiv_hflip", "equiv_scale", "final_loss", "seconds", "error")


def group_overrides(value: str, base: C.TrainConfig) -> dict:
    parts = {p.strip() for p in str(value).split("+") if p.strip()}
    unknown = parts - {"rot90", "hflip", "scale", "none"}
    if unknown:
        raise C.ConfigError(f"unknown group element family {sorted(unknown)}")
    return {"geo.rot90": "rot90" in parts, "geo.hflip": "hflip" in parts,
            "geo.scales": base.geo_scales if "scale" in parts else "1"}


def sweep_config(base: C.TrainConfig, axis: str, value, seed: int) -> C.TrainConfig:
    if axis not in AXES:
        raise C.ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    over: dict = {"train.seed": seed}
    if axis == "group":
        over.update(group_overrides(value, base))
    else:
        over[AXES[axis]] = value if not isinstance(value, str) else value
    return base.with_keys({k: (str(v) if not isinstance(v, (bool, int, float)) else v) for k, v in over.items()})


def ablation_sweep(base: C.TrainConfig, axis: str, values: Sequence, seeds: Sequence[int], images: np.ndarray,
                   probe_images: np.ndarray, probe_labels: np.ndarray, out_csv=None, out_dir=None,
                   families: Sequence[str] = FAMILIES, on_row: Callable[[dict], None] | None = None) -> list[dict]:
    """One training run per (value, seed) with everything else fixed; failures become rows with an error."""
    import time

    from .train import run_pretrain

    rows = []
    for value in values:
        for seed in seeds:
            row = dict.fromkeys(SWEEP_COLUMNS, "")
            row.update(axis=axis, value=value, seed=seed)
            t0 = time.perf_counter()
            try:
                cfg = sweep_config(base, axis, value, seed)
                run_dir = None if out_dir is None else Path(out_dir) / f"{axis}={value}" / f"seed{seed}"
                res = run_pretrain(cfg, run_dir, images=images)
                summ = evaluate_encoder(res.learner.encoder, probe_images, probe_labels, seed=seed,
                                        equiv_samples=cfg.equiv_samples, probe_epochs=cfg.probe_epochs,
                                        policy=cfg.geo if axis != "group" else base.geo, families=families)
                row.update(class_top1=summ.class_top1, orient_top1=summ.orient_top1, class_knn=summ.class_knn,
                           final_loss=res.rows[-1]["l_total"])
                for f, s in summ.equiv.items():
                    row[f"equiv_{f}"] = s
            except Exception as exc:  # recorded, sweep continues
                logger.error("run %s=%s seed %s failed: %s", axis, value, seed, exc)
                row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
                logger.debug("%s", traceback.format_exc())
            row["seconds"] = time.perf_counter() - t0
            rows.append(row)
            if on_row is not None:
                on_row(row)
            if out_csv is not None:
                write_csv(out_csv, rows, SWEEP_COLUMNS)
    return rows


def write_csv(path, rows: list[dict], columns: Sequence[str]) -> None:
    from .train import _atomic_bytes

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    _atomic_bytes(Path(path), buf.getvalue().encode())


def scatter_2d(features: np.ndarray, labels: np.ndarray) -> list[dict]:
    """Top-2 principal components of centered features, for external plotting."""
    x = features.astype(np.float64) - features.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    pc = x @ vt[:2].T if vt.shape[0] >= 2 else np.pad(x @ vt.T, ((0, 0), (0, 2 - vt.shape[0])))
    lab = labels if labels.ndim == 2 else labels[:, None]
    return [{"pc1": float(a), "pc2": float(b), **{f"label{j}": int(l) for j, l in enumerate(row)}}
            for (a, b), row in zip(pc, lab)]


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

# elementwise cost conventions (FLOPs per element)
LN_FLOPS = 8        # mean, centered square, mean, rsqrt-scale, gain, bias
GELU_FLOPS = 10     # tanh form: cube, two fmas, tanh, scale
SOFTMAX_FLOPS = 5   # max, subtract, exp, sum, divide
NORM_FLOPS = 4      # square, sum, rsqrt, scale (l2 normalization)
BACKWARD_FACTOR = 2  # backward costs twice the forward


@dataclass(frozen=True)
class FlopsModel:
    image: int = 32
    patch: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    l_eq: int = 1
    l_cls: int = 1
    proj_dim: int = 32
    proj_hidden: int = 128
    inv_dim: int = 32
    inv_hidden: int = 128
    batch_size: int = 64
    r: float = 0.25
    scales: tuple = (Fraction(3, 4), Fraction(1), Fraction(5, 4))
    all_layers: bool = False

    @classmethod
    def from_config(cls, cfg: C.TrainConfig, **over) -> "FlopsModel":
        base = dict(image=cfg.image, patch=cfg.patch, channels=cfg.channels, dim=cfg.dim, depth=cfg.depth,
                    heads=cfg.heads, mlp_ratio=cfg.mlp_ratio, l_eq=cfg.l_eq, l_cls=cfg.l_cls,
                    proj_dim=cfg.proj_dim, proj_hidden=cfg.proj_hidden, inv_dim=cfg.inv_dim,
                    inv_hidden=cfg.inv_hidden, batch_size=cfg.batch_size, r=cfg.r,
                    scales=G.parse_scales(cfg.geo_scales), all_layers=cfg.all_layers)
        base.update(over)
        return cls(**base)


def paper_flops_model(r: float = 0.01) -> FlopsModel:
    """ViT-S/16 at 224 px, batch 2048, regularizer at block 3, 512-d projection (2048 hidden).

    The invariance head mirrors a 4096-hidden, 256-d projector; scales are the
    patch-aligned factors ``k/14`` covering ``[0.7, 1.3]``.
    """
    return FlopsModel(image=224, patch=16, channels=3, dim=384, depth=12, heads=6, mlp_ratio=4, l_eq=3, l_cls=3,
                      proj_dim=512, proj_hidden=2048, inv_dim=256, inv_hidden=4096, batch_size=2048, r=r,
                      scales=tuple(Fraction(k, 14) for k in range(10, 19)))


def head_flops(d_in: int, hidden: int, d_out: int) -> int:
    return 2 * d_in * hidden + hidden + GELU_FLOPS * hidden + 2 * hidden * d_out + d_out


def block_flops(t: int, d: int, heads: int, mlp_ratio: int) -> int:
    hid = mlp_ratio * d
    f = 2 * LN_FLOPS * t * d                      # two layer norms
    f += 4 * (2 * t * d * d + t * d)              # q, k, v, output projections
    f += 2 * (2 * t * t * d)                      # scores and weighted values
    f += (SOFTMAX_FLOPS + 1) * heads * t * t      # scaling and softmax
    f += 2 * t * d * hid + t * hid + GELU_FLOPS * t * hid + 2 * t * hid * d + t * d
    f += 2 * t * d                                # residual adds
    return f


def encoder_flops(m: FlopsModel, h: int, w: int) -> int:
    """Forward FLOPs of one view on an ``h x w`` token grid."""
    n = h * w
    d = m.dim
    f = 2 * n * m.patch * m.patch * m.channels * d + 2 * n * d   # patch embedding, bias, positions
    for b in range(m.depth):
        t = n + (1 if b >= m.l_cls else 0)
        f += block_flops(t, d, m.heads, m.mlp_ratio)
    return f + LN_FLOPS * d


def _grid_distribution(m: FlopsModel) -> list[tuple[int, int]]:
    g = m.image // m.patch
    out = []
    for sy in m.scales:
        for sx in m.scales:
            out.append((int(sy * g), int(sx * g)))
    return out


def contrastive_flops(n: int, d_out: int) -> int:
    """Symmetric in-batch InfoNCE over ``2n`` embeddings."""
    a = 2 * n
    return NORM_FLOPS * a * d_out + 2 * a * a * d_out + SOFTMAX_FLOPS * a * a + 2 * a * d_out


def patch_contrastive_flops(n_img: int, tokens: float, d_out: int) -> float:
    """Anchors ``M = n_img * tokens`` scored against ``2M`` candidates."""
    mm = n_img * tokens
    return 2 * NORM_FLOPS * mm * d_out + 2 * mm * (2 * mm) * d_out + SOFTMAX_FLOPS * mm * 2 * mm + 2 * mm * d_out


@dataclass
class FlopsReport:
    baseline: float
    ser: float
    ratio: float
    breakdown: dict = field(default_factory=dict)


def flops_estimate(m: FlopsModel, with_ser: bool = True) -> FlopsReport:
    """Per-image forward plus backward FLOPs, averaged over the whole mini-batch.

    Baseline: two policy-T views per image through the encoder and the
    invariance head, plus the invariance loss.  SER: ``b1`` as the baseline;
    ``b2`` images use uncropped scaled views (grid sizes averaged over the
    scale set), add the per-location projection head on both views, the
    token resampling for the alignment and the patch contrastive loss.
    """
    B = m.batch_size
    g = m.image // m.patch
    view_base = encoder_flops(m, g, g)
    inv_head = head_flops(m.dim, m.inv_hidden, m.inv_dim)
    fwd_base = B * 2 * (view_base + inv_head) + contrastive_flops(B, m.inv_dim)
    baseline = (1 + BACKWARD_FACTOR) * fwd_base / B
    if not with_ser:
        return FlopsReport(baseline, baseline, 1.0, {"baseline_forward_per_image": fwd_base / B})
    n2 = A.b2_size(B, m.r)
    n1 = B - n2
    grids = _grid_distribution(m)
    view_eq = sum(encoder_flops(m, h, w) for h, w in grids) / len(grids)
    tokens = sum(h * w for h, w in grids) / len(grids)
    layers = m.depth if m.all_layers else 1
    eq_head = head_flops(m.dim, m.proj_hidden, m.proj_dim)
    fwd = n1 * 2 * (view_base + inv_head) + (contrastive_flops(n1, m.inv_dim) if n1 >= 2 else 0)
    fwd += n2 * 2 * (view_eq + inv_head) + (contrastive_flops(n2, m.inv_dim) if n2 >= 2 else 0)
    extra = 0.0
    if n2 >= 2:
        # per layer: projection of both views, bilinear alignment of view 1, patch loss
        per_layer = n2 * 2 * tokens * eq_head + n2 * 4 * tokens * m.dim
        per_layer += patch_contrastive_flops(n2, tokens, m.proj_dim)
        extra = layers * per_layer
    ser = (1 + BACKWARD_FACTOR) * (fwd + extra) / B
    return FlopsReport(baseline, ser, ser / baseline,
                       {"b2": n2, "regularizer_forward_per_batch": extra, "mean_tokens_eq_view": tokens})
