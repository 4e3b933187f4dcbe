"""Pretraining loop: partition, views, prefix features, alignment, losses, update.

One step (method ``ser``):

1. split the batch into ``b1`` (policy T) and ``b2`` (policy T_eq, group
   elements recorded);
2. run the encoder on every view; views of equal size share one forward;
3. ``L_inv1`` / ``L_inv2``: invariance loss on the projected final embeddings
   of each sub-batch (each a mean over its own sub-batch);
4. for ``b2``: ``h1 = f1(x1)``, ``h2 = f1(x2)``, ``h1_hat = rho_g(h1)`` with
   ``g = relative(g1, g2)``, ``L_equiv = patch_nt_xent(h1_hat, h2)``;
5. ``L = L_inv1 + L_inv2 + lambda * L_equiv``, one backward, one AdamW update.

Method ``baseline`` skips the partition and trains every image with policy T
on the invariance loss alone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import tempfile
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import augment as A
from . import config as C
from . import data as D
from . import group as G
from . import losses as L
from . import tensor as T
from .model import ProjectionHead, SplitViT

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "l_inv1", "l_inv2", "l_equiv", "l_total", "lr", "seconds")
_INIT_KEY = 0x5E12
_ORDER_KEY = 0xDA7A


class TrainError(RuntimeError):
    pass


class NonFiniteLossError(TrainError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


class ResumeError(TrainError):
    pass


# ---------------------------------------------------------------------------
# learner: encoder plus heads under one parameter dictionary
# ---------------------------------------------------------------------------


class Learner:
    def __init__(self, cfg: C.TrainConfig):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = A.stream(cfg.seed, _INIT_KEY)
        d = cfg.dim
        self.encoder = SplitViT(cfg.model, rng, dtype)
        self.inv_head = ProjectionHead("inv", d, cfg.inv_hidden, cfg.inv_dim, rng, dtype)
        self.eq_layers = tuple(range(1, cfg.depth + 1)) if cfg.all_layers else (cfg.l_eq,)
        self.eq_heads = {l: ProjectionHead(f"eq{l}", d, cfg.proj_hidden, cfg.proj_dim, rng, dtype)
                         for l in self.eq_layers}
        self.aug_head = (ProjectionHead("augself", 2 * d, cfg.augself_hidden, 6, rng, dtype)
                         if cfg.augself > 0 else None)
        self.params = OrderedDict()
        self.params.update(self.encoder.params)
        self.params.update(self.inv_head.params)
        for h in self.eq_heads.values():
            self.params.update(h.params)
        if self.aug_head is not None:
            self.params.update(self.aug_head.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.encoder.params.items()}


def decay_names(params: "OrderedDict[str, T.Tensor]") -> set[str]:
    """Weight decay applies to matrices only (no biases, norms, positions or CLS)."""
    return {k for k, p in params.items() if p.ndim >= 2 and k != "pos"}


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    ``p <- p (1 - lr wd)`` then ``p <- p - lr m_hat / (sqrt(v_hat) + eps)``.
    Parameters are visited in dictionary order; parameters without a gradient
    are left untouched.
    """

    def __init__(self, params: "OrderedDict[str, T.Tensor]", weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, decay: set[str] | None = None):
        self.params = params
        self.weight_decay = float(weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay = set(params) if decay is None else set(decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and k in self.decay:
                p.data *= 1.0 - lr * self.weight_decay
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr if step < total_steps else 0.0
    t = min(step - warmup_steps, span) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------


@dataclass
class StepMetrics:
    l_inv1: float
    l_inv2: float
    l_equiv: float
    l_aux: float
    l_total: float
    grad_norm: float
    lr: float


@dataclass
class ViewFeatures:
    embedding: T.Tensor  # [n, D], aligned with the input view order
    spatial: dict[int, list[T.Tensor]] = field(default_factory=dict)  # layer -> per-view [h, w, D]


def forward_views(encoder: SplitViT, views: list[np.ndarray], spatial_layers=()) -> ViewFeatures:
    """Encode views of possibly different sizes; equal sizes share one batched forward."""
    groups: "OrderedDict[tuple, list[int]]" = OrderedDict()
    for i, v in enumerate(views):
        groups.setdefault(v.shape, []).append(i)
    embs = []
    order = []
    spatial = {l: [None] * len(views) for l in spatial_layers}
    for shape, idx in groups.items():
        batch = np.stack([views[i] for i in idx])
        tr = encoder.run(batch, spatial_layers=spatial_layers)
        embs.append(tr.embedding)
        order.extend(idx)
        for l in spatial_layers:
            sp = tr.spatial[l]
            for j, i in enumerate(idx):
                spatial[l][i] = T.getitem(sp, j)
    emb = embs[0] if len(embs) == 1 else T.concat(embs, axis=0)
    if order != list(range(len(views))):
        inv = np.empty(len(order), dtype=np.intp)
        inv[np.asarray(order)] = np.arange(len(order))
        emb = T.take(emb, inv, axis=0)
    return ViewFeatures(emb, spatial)


def _split_pair(x: T.Tensor, n: int) -> tuple[T.Tensor, T.Tensor]:
    return T.getitem(x, slice(0, n)), T.getitem(x, slice(n, 2 * n))


def _pooled(maps: list[T.Tensor]) -> T.Tensor:
    rows = [T.reshape(T.mean(m, axis=(0, 1)), (1, m.shape[-1])) for m in maps]
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)


Hook = Callable[..., None]


def _emit(hook: Hook | None, stage: str, **payload) -> None:
    if hook is not None:
        hook(stage, **payload)


def _finite_or_raise(total: T.Tensor, indices, cfg: C.TrainConfig, epoch: int, step: int, parts: dict) -> None:
    if np.isfinite(total.data).all():
        return
    diag = {"batch_indices": [int(i) for i in indices], "seed": cfg.seed, "epoch": epoch, "step": step,
            "rng": f"keyed(seed={cfg.seed}, epoch={epoch}, step={step})",
            "losses": {k: float(v) for k, v in parts.items()}}
    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {diag['losses']}", diag)


def _value(x) -> float:
    return float(x.data) if isinstance(x, T.Tensor) else float(x)


def ser_losses(learner: Learner, images: np.ndarray, indices, epoch: int, step: int,
               hook: Hook | None = None) -> dict:
    """Forward pass of one SER step; returns the loss terms (tensors or floats)."""
    cfg = learner.cfg
    enc = learner.encoder
    part = A.partition(indices, cfg.r, epoch, cfg.seed, step)
    _emit(hook, "partition", partition=part)
    A.build_views(images, part, cfg.aug, cfg.geo, cfg.seed, epoch, step)
    _emit(hook, "views", partition=part)
    n1, n2 = len(part.b1), len(part.b2)
    views = ([p.x1 for p in part.views1] + [p.x2 for p in part.views1]
             + [p.x1 for p in part.views2] + [p.x2 for p in part.views2])
    layers = learner.eq_layers if n2 else ()
    aux_layer = cfg.augself_layer if (learner.aug_head is not None and cfg.augself_layer >= 0) else None
    want = tuple(sorted(set(layers) | ({aux_layer} if (aux_layer is not None and n2) else set())))
    feats = forward_views(enc, views, want)
    z = learner.inv_head(feats.embedding)
    out = {"l_inv1": 0.0, "l_inv2": 0.0, "l_equiv": 0.0, "l_aux": 0.0}
    if n1 == 0 and n2 == 0:
        raise TrainError("empty batch")
    if n1:
        z1, z2 = _split_pair(T.getitem(z, slice(0, 2 * n1)), n1)
        if n1 >= 2:
            out["l_inv1"] = L.invariance_loss(z1, z2, cfg.inv)
        else:
            logger.warning("b1 holds a single image; L_inv1 skipped at epoch %d step %d", epoch, step)
    if n2:
        z1, z2 = _split_pair(T.getitem(z, slice(2 * n1, 2 * n1 + 2 * n2)), n2)
        if n2 >= 2:
            out["l_inv2"] = L.invariance_loss(z1, z2, cfg.inv)
        rel = [G.relative(p.g1, p.g2) for p in part.views2]
        terms = []
        for l in layers:
            maps = feats.spatial[l]
            h1 = maps[2 * n1:2 * n1 + n2]
            h2 = maps[2 * n1 + n2:]
            h1_hat = [G.act_tokens(g, a, target=G.TokenGrid(b.shape[0], b.shape[1], cfg.patch))
                      for g, a, b in zip(rel, h1, h2)]
            _emit(hook, "features", layer=l, h1=h1, h2=h2)
            _emit(hook, "aligned", layer=l, h1_hat=h1_hat, g=rel)
            if n2 >= 2:
                terms.append(L.equiv_nt_xent(h1_hat, h2, cfg.equiv, learner.eq_heads[l]))
        if n2 < 2:
            logger.warning("b2 holds a single image; L_equiv skipped at epoch %d step %d", epoch, step)
        elif terms:
            eq = terms[0]
            for t in terms[1:]:
                eq = eq + t
            out["l_equiv"] = T.scale(eq, 1.0 / len(terms)) if len(terms) > 1 else eq
        if learner.aug_head is not None:
            if aux_layer is None:
                e1, e2 = _split_pair(T.getitem(feats.embedding, slice(2 * n1, 2 * n1 + 2 * n2)), n2)
            else:
                maps = feats.spatial[aux_layer]
                e1, e2 = _pooled(maps[2 * n1:2 * n1 + n2]), _pooled(maps[2 * n1 + n2:])
            out["l_aux"] = L.augself_aux(e1, e2, [p.g1 for p in part.views2], [p.g2 for p in part.views2],
                                         learner.aug_head)
    out["partition"] = part
    return out


def baseline_losses(learner: Learner, images: np.ndarray, indices, epoch: int, step: int,
                    hook: Hook | None = None) -> dict:
    cfg = learner.cfg
    part = A.BatchPartition(list(indices), [], 0.0)
    _emit(hook, "partition", partition=part)
    A.build_views(images, part, cfg.aug, cfg.geo, cfg.seed, epoch, step)
    _emit(hook, "views", partition=part)
    n = len(part.b1)
    views = [p.x1 for p in part.views1] + [p.x2 for p in part.views1]
    feats = forward_views(learner.encoder, views)
    z1, z2 = _split_pair(learner.inv_head(feats.embedding), n)
    return {"l_inv1": L.invariance_loss(z1, z2, cfg.inv), "l_inv2": 0.0, "l_equiv": 0.0, "l_aux": 0.0,
            "partition": part}


def train_step(learner: Learner, opt: AdamW, images: np.ndarray, indices, epoch: int, step: int, lr: float,
               hook: Hook | None = None, detach_equiv: bool = False) -> StepMetrics:
    """One optimizer update.  ``detach_equiv`` keeps the regularizer's value but drops its gradient."""
    cfg = learner.cfg
    learner.zero_grad()
    fn = baseline_losses if cfg.method == "baseline" else ser_losses
    parts = fn(learner, images, indices, epoch, step, hook)
    equiv = parts["l_equiv"]
    if detach_equiv and isinstance(equiv, T.Tensor):
        equiv = T.Tensor(equiv.data)
    total = L.total_loss(parts["l_inv1"], parts["l_inv2"], equiv, cfg.lam)
    if cfg.augself > 0 and isinstance(parts["l_aux"], T.Tensor):
        total = total + T.scale(parts["l_aux"], cfg.augself)
    values = {k: _value(parts[k]) for k in ("l_inv1", "l_inv2", "l_equiv", "l_aux")}
    if not isinstance(total, T.Tensor):
        raise TrainError("loss does not depend on the parameters (empty sub-batches)")
    values["l_total"] = float(total.data)
    _emit(hook, "losses", losses=dict(values), total=total)
    _finite_or_raise(total, indices, cfg, epoch, step, values)
    T.backward(total)
    gn = T.parameters_grad_norm(learner.params.values())
    opt.step(lr)
    return StepMetrics(values["l_inv1"], values["l_inv2"], values["l_equiv"], values["l_aux"],
                       values["l_total"], gn, lr)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SERC"
_CKPT_VERSION = 1


def _atomic_bytes(path: Path, payload: bytes) -> None:
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


def encode_container(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    """``SERC | u16 version | u32 count`` then ``u32 name length | name | SERT record`` per array."""
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<HI", _CKPT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        T.write_tensor(buf, arr)
    return buf.getvalue()


def decode_container(payload: bytes) -> "OrderedDict[str, np.ndarray]":
    buf = io.BytesIO(payload)
    if buf.read(4) != _CKPT_MAGIC:
        raise ValueError("not a checkpoint container")
    version, count = struct.unpack("<HI", buf.read(6))
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", buf.read(4))
        name = buf.read(n).decode("utf-8")
        out[name] = T.read_tensor(buf)
    return out


@dataclass
class Checkpoint:
    path: Path
    epoch: int
    step: int


def manifest_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".manifest")


def save_checkpoint(path, learner: Learner, opt: AdamW, epoch: int, step: int) -> Checkpoint:
    path = Path(path)
    arrays = OrderedDict()
    for k, p in learner.params.items():
        arrays[f"param/{k}"] = p.data
    for k in learner.params:
        arrays[f"adam.m/{k}"] = opt.m[k]
        arrays[f"adam.v/{k}"] = opt.v[k]
    manifest = C.dump(learner.cfg)
    manifest += (f"# state\nstate.epoch = {epoch}\nstate.step = {step}\nstate.adam_t = {opt.t}\n"
                 f"state.rng = keyed(seed={learner.cfg.seed}, epoch, step, index, view, purpose)\n")
    try:
        _atomic_bytes(path, encode_container(arrays))
        _atomic_bytes(manifest_path(path), manifest.encode("utf-8"))
    except OSError as exc:
        raise TrainError(f"cannot write checkpoint {path}: {exc}") from None
    return Checkpoint(path, epoch, step)


def read_manifest(path) -> tuple[C.TrainConfig, dict]:
    mpath = manifest_path(Path(path))
    try:
        text = mpath.read_text(encoding="utf-8")
    except OSError as exc:
        raise TrainError(f"cannot read checkpoint manifest {mpath}: {exc}") from None
    cfg_lines, state = [], {}
    for line in text.splitlines():
        if line.startswith("state."):
            k, v = (s.strip() for s in line.split("=", 1))
            state[k[len("state."):]] = v
        else:
            cfg_lines.append(line)
    return C.parse_text("\n".join(cfg_lines), str(mpath)), state


def load_checkpoint(path, learner: Learner, opt: AdamW | None = None) -> dict:
    path = Path(path)
    try:
        arrays = decode_container(path.read_bytes())
    except OSError as exc:
        raise TrainError(f"cannot read checkpoint {path}: {exc}") from None
    for k, p in learner.params.items():
        key = f"param/{k}"
        if key not in arrays:
            raise TrainError(f"checkpoint {path} lacks parameter {k}")
        if arrays[key].shape != p.shape:
            raise TrainError(f"checkpoint {path}: parameter {k} has shape {arrays[key].shape}, expected {p.shape}")
        p.data = arrays[key].astype(p.dtype, copy=True)
    _, state = read_manifest(path)
    if opt is not None:
        for k in learner.params:
            opt.m[k] = arrays[f"adam.m/{k}"].astype(opt.m[k].dtype, copy=True)
            opt.v[k] = arrays[f"adam.v/{k}"].astype(opt.v[k].dtype, copy=True)
        opt.t = int(state["adam_t"])
    return state


def load_learner(path) -> Learner:
    cfg, _ = read_manifest(path)
    learner = Learner(cfg)
    load_checkpoint(path, learner)
    return learner


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    learner: Learner
    rows: list[dict]
    final: Checkpoint | None
    checkpoints: list[Checkpoint]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return A.stream(seed, epoch, _ORDER_KEY).permutation(n)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return n_images // batch_size


def _write_metrics(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in METRIC_COLUMNS})
    _atomic_bytes(path, buf.getvalue().encode())


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def run_pretrain(cfg: C.TrainConfig, out_dir=None, images: np.ndarray | None = None, resume=None,
                 hook: Hook | None = None, stop_after: int | None = None, log_every: int = 0) -> RunResult:
    """Full training loop.  Checkpoints land in ``out_dir`` every ``train.ckpt_every`` epochs and at the end."""
    cfg.validate()
    if images is None:
        if not cfg.data:
            raise C.ConfigError("train.data: a dataset path is required")
        images, _ = D.read_dataset(cfg.data)
    images = np.asarray(images, dtype=np.dtype(cfg.dtype))
    if images.shape[1:3] != (cfg.image, cfg.image):
        raise TrainError(f"dataset images are {images.shape[1]}x{images.shape[2]}, config expects {cfg.image}")
    n = images.shape[0]
    spe = steps_per_epoch(n, cfg.batch_size)
    if spe < 1:
        raise TrainError(f"dataset of {n} images is smaller than one batch of {cfg.batch_size}")
    total_steps = spe * cfg.epochs
    warm = spe * cfg.warmup_epochs

    learner = Learner(cfg)
    opt = AdamW(learner.params, cfg.weight_decay, decay=decay_names(learner.params))
    start_epoch, gstep = 0, 0
    out = Path(out_dir) if out_dir is not None else None
    rows: list[dict] = []
    if resume is not None:
        rcfg, _ = read_manifest(resume)
        bad = C.diff_keys(rcfg, cfg)
        if bad:
            raise ResumeError(f"checkpoint {resume} was written with a different config: {', '.join(bad)}")
        state = load_checkpoint(resume, learner, opt)
        start_epoch, gstep = int(state["epoch"]), int(state["step"])
        if out is not None:
            rows = [r for r in _read_metrics(out / "metrics.csv") if int(r["epoch"]) <= start_epoch]
    ckpts: list[Checkpoint] = []
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, last_epoch):
        t0 = time.perf_counter()
        order = epoch_order(cfg.seed, epoch, n)
        sums = dict.fromkeys(("l_inv1", "l_inv2", "l_equiv", "l_total"), 0.0)
        lr = 0.0
        for s in range(spe):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            lr = lr_schedule(gstep, total_steps, warm, cfg.base_lr)
            m = train_step(learner, opt, images, idx, epoch, s, lr, hook)
            gstep += 1
            for k in sums:
                sums[k] += getattr(m, k)
            if log_every and gstep % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch + 1, gstep, m.l_total)
        row = {"epoch": epoch + 1, "step": gstep, **{k: v / spe for k, v in sums.items()}, "lr": lr,
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        if out is not None:
            _write_metrics(out / "metrics.csv", rows)
            done = epoch + 1
            if cfg.ckpt_every and done % cfg.ckpt_every == 0 and done < cfg.epochs:
                ckpts.append(save_checkpoint(out / f"ckpt_epoch{done:03d}.sert", learner, opt, done, gstep))
    final = None
    if out is not None:
        done = last_epoch
        name = "final.sert" if done == cfg.epochs else f"ckpt_epoch{done:03d}.sert"
        if done == cfg.epochs or not any(c.epoch == done for c in ckpts):
            final = save_checkpoint(out / name, learner, opt, done, gstep)
    return RunResult(learner, rows, final, ckpts)


def write_json(path, obj) -> None:
    _atomic_bytes(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())
