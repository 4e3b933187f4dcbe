"""A small Vision Transformer split into a spatial prefix and an invariance head.

``f = f2 o f1``: ``f1`` is patch embedding, positional embedding and blocks
``[0, l_eq)``; it contains no CLS token when ``l_cls >= l_eq``.  The learned
CLS token is prepended right before block ``l_cls``; the final embedding is
the layer-normalized CLS state after the last block.

Blocks are pre-norm: ``x + attn(ln1(x))`` then ``x + mlp(ln2(x))`` with a
GELU MLP.  Positional embeddings are learned on the base grid and resampled
bilinearly (shared resampler) for other grid sizes.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import group as G
from . import tensor as T

logger = logging.getLogger(__name__)


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image: int = 32
    patch: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    l_eq: int = 1
    l_cls: int = 1

    def validate(self) -> None:
        if self.image % self.patch:
            raise ModelConfigError(f"image side {self.image} is not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ModelConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ModelConfigError("depth must be >= 1")
        if not 0 <= self.l_eq <= self.depth:
            raise ModelConfigError(f"l_eq={self.l_eq} outside [0, {self.depth}]")
        if not 0 <= self.l_cls < self.depth:
            raise ModelConfigError(f"l_cls={self.l_cls} outside [0, {self.depth - 1}]; the CLS token must pass at least one block")

    @property
    def base_grid(self) -> int:
        return self.image // self.patch

    @property
    def cls_inside_prefix(self) -> bool:
        return self.l_cls < self.l_eq


def encoder_param_count(cfg: ModelConfig) -> int:
    """Closed form for the encoder parameter count.

    ``P^2 C D + D`` (patch embedding) ``+ g^2 D + 2D`` (positional table,
    CLS position, CLS token) ``+ depth (4 D^2 + 2 r D^2 + 9 D + r D)``
    ``+ 2D`` (final norm), with ``g`` the base grid side and ``r`` the MLP ratio.
    """
    d, r, p, c, g = cfg.dim, cfg.mlp_ratio, cfg.patch, cfg.channels, cfg.base_grid
    return p * p * c * d + d + g * g * d + 2 * d + cfg.depth * (4 * d * d + 2 * r * d * d + 9 * d + r * d) + 2 * d


def head_param_count(d_in: int, hidden: int, d_out: int) -> int:
    return d_in * hidden + hidden + hidden * d_out + d_out


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[N, H, W, C] -> [N, (H/p)(W/p), p*p*C]`` in row-major patch order."""
    n, h, w, c = images.shape
    if h % patch or w % patch:
        raise G.AlignmentError(f"image size {h}x{w} is not divisible by patch {patch}")
    x = images.reshape(n, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(n, (h // patch) * (w // patch), patch * patch * c)


@dataclass
class TokenMap:
    """Spatial features ``[h, w, D]`` or a batch ``[N, h, w, D]`` on ``grid``."""

    grid: G.TokenGrid
    feat: T.Tensor

    def __post_init__(self):
        if tuple(self.feat.shape[-3:-1]) != (self.grid.h, self.grid.w):
            raise T.ShapeError(f"token map {self.feat.shape} does not match grid {self.grid.h}x{self.grid.w}")


@dataclass
class Trace:
    grid: G.TokenGrid
    spatial: dict[int, T.Tensor] = field(default_factory=dict)
    cls: dict[int, T.Tensor] = field(default_factory=dict)
    embedding: T.Tensor | None = None


class ProjectionHead:
    """``linear -> GELU -> linear``, shared over all leading axes."""

    def __init__(self, name: str, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.params = OrderedDict()
        self.params[f"{name}.w1"] = T.Tensor(_xavier(rng, d_in, hidden, dtype), requires_grad=True)
        self.params[f"{name}.b1"] = T.Tensor(np.zeros(hidden, dtype), requires_grad=True)
        self.params[f"{name}.w2"] = T.Tensor(_xavier(rng, hidden, d_out, dtype), requires_grad=True)
        self.params[f"{name}.b2"] = T.Tensor(np.zeros(d_out, dtype), requires_grad=True)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        p = self.params
        n = self.name
        h = T.gelu(T.linear(x, p[f"{n}.w1"], p[f"{n}.b1"]))
        return T.linear(h, p[f"{n}.w2"], p[f"{n}.b2"])


class SplitViT:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        if cfg.cls_inside_prefix:
            logger.info("l_cls=%d < l_eq=%d: CLS participates in blocks before the regularized layer; "
                        "the regularizer sees spatial tokens only", cfg.l_cls, cfg.l_eq)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        d, p, c, g = cfg.dim, cfg.patch, cfg.channels, cfg.base_grid
        hid = cfg.mlp_ratio * d
        P = OrderedDict()

        def param(name, arr):
            P[name] = T.Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

        param("patch.w", _xavier(rng, p * p * c, d, self.dtype))
        param("patch.b", np.zeros(d))
        param("pos", rng.normal(0.0, 0.02, size=(g * g, d)))
        param("cls_pos", rng.normal(0.0, 0.02, size=d))
        param("cls", rng.normal(0.0, 0.02, size=d))
        for i in range(cfg.depth):
            b = f"block{i}"
            param(f"{b}.ln1.g", np.ones(d))
            param(f"{b}.ln1.b", np.zeros(d))
            for nm in ("q", "k", "v", "proj"):
                param(f"{b}.{nm}.w", _xavier(rng, d, d, self.dtype))
                param(f"{b}.{nm}.b", np.zeros(d))
            param(f"{b}.ln2.g", np.ones(d))
            param(f"{b}.ln2.b", np.zeros(d))
            param(f"{b}.fc1.w", _xavier(rng, d, hid, self.dtype))
            param(f"{b}.fc1.b", np.zeros(hid))
            param(f"{b}.fc2.w", _xavier(rng, hid, d, self.dtype))
            param(f"{b}.fc2.b", np.zeros(d))
        param("norm.g", np.ones(d))
        param("norm.b", np.zeros(d))
        self.params = P

    # -- pieces -----------------------------------------------------------

    def pos_for_grid(self, h: int, w: int) -> T.Tensor:
        g = self.cfg.base_grid
        pos = self.params["pos"]
        if (h, w) == (g, g):
            return pos
        grid = T.reshape(pos, (g, g, self.cfg.dim))
        grid = T.resize2d(grid, G.resize_matrix(g, h), G.resize_matrix(g, w))
        return T.reshape(grid, (h * w, self.cfg.dim))

    def embed(self, images: np.ndarray) -> tuple[T.Tensor, G.TokenGrid]:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        n, h, w, _ = images.shape
        grid = G.TokenGrid.for_image(h, w, self.cfg.patch)
        patches = T.Tensor(patchify(images.astype(self.dtype, copy=False), self.cfg.patch))
        x = T.linear(patches, self.params["patch.w"], self.params["patch.b"])
        x = T.add_bias(x, self.pos_for_grid(grid.h, grid.w))
        return x, grid

    def block(self, i: int, x: T.Tensor) -> T.Tensor:
        P = self.params
        b = f"block{i}"
        n, t, d = x.shape
        nh = self.cfg.heads
        dh = d // nh
        h = T.layernorm(x, P[f"{b}.ln1.g"], P[f"{b}.ln1.b"])

        def heads(name):
            y = T.linear(h, P[f"{b}.{name}.w"], P[f"{b}.{name}.b"])
            return T.transpose(T.reshape(y, (n, t, nh, dh)), (0, 2, 1, 3))

        a = T.attention(heads("q"), heads("k"), heads("v"), float(dh) ** -0.5)
        a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (n, t, d))
        x = x + T.linear(a, P[f"{b}.proj.w"], P[f"{b}.proj.b"])
        h = T.layernorm(x, P[f"{b}.ln2.g"], P[f"{b}.ln2.b"])
        h = T.gelu(T.linear(h, P[f"{b}.fc1.w"], P[f"{b}.fc1.b"]))
        return x + T.linear(h, P[f"{b}.fc2.w"], P[f"{b}.fc2.b"])

    def _cls_tokens(self, n: int) -> T.Tensor:
        c = T.reshape(self.params["cls"] + self.params["cls_pos"], (1, self.cfg.dim))
        c = T.take(c, np.zeros(n, dtype=np.intp), axis=0)
        return T.reshape(c, (n, 1, self.cfg.dim))

    def final_norm(self, x: T.Tensor) -> T.Tensor:
        return T.layernorm(x, self.params["norm.g"], self.params["norm.b"])

    # -- forward ----------------------------------------------------------

    def run(self, images=None, *, tokens: TokenMap | None = None, start: int = 0,
            spatial_layers=(), stop: int | None = None, need_embedding: bool = True,
            cls_layers=()) -> Trace:
        """Forward pass recording spatial token maps after the requested numbers of blocks.

        ``spatial[l]`` is ``[N, h, w, D]`` after ``l`` blocks, CLS excluded.
        ``cls[b]`` is the raw CLS state after block ``b`` (for ``b >= l_cls``).
        """
        cfg = self.cfg
        stop = cfg.depth if stop is None else stop
        if tokens is None:
            x, grid = self.embed(images)
        else:
            grid = tokens.grid
            feat = tokens.feat
            if feat.ndim == 3:
                feat = T.reshape(feat, (1,) + feat.shape)
            x = T.reshape(feat, (feat.shape[0], grid.n, cfg.dim))
            if start > cfg.l_cls:
                raise ModelConfigError("cannot resume from spatial tokens past the CLS insertion layer")
        n = x.shape[0]
        trace = Trace(grid)
        want = set(spatial_layers)
        has_cls = False

        def record(layer):
            if layer in want:
                sp = T.getitem(x, (slice(None), slice(1, None))) if has_cls else x
                trace.spatial[layer] = T.reshape(sp, (n, grid.h, grid.w, cfg.dim))

        record(start)
        for b in range(start, stop):
            if b == cfg.l_cls:
                x = T.concat([self._cls_tokens(n), x], axis=1)
                has_cls = True
            x = self.block(b, x)
            if has_cls and (b in cls_layers):
                trace.cls[b] = T.getitem(x, (slice(None), 0))
            record(b + 1)
        if need_embedding and stop == cfg.depth:
            trace.embedding = self.final_norm(T.getitem(x, (slice(None), 0)))
        return trace

    def forward_prefix(self, images) -> TokenMap:
        """Spatial token map after ``l_eq`` blocks (the regularized representation)."""
        l = self.cfg.l_eq
        tr = self.run(images, spatial_layers=(l,), stop=l, need_embedding=False)
        feat = tr.spatial[l]
        if np.asarray(images).ndim == 3:
            feat = T.reshape(feat, feat.shape[1:])
        return TokenMap(tr.grid, feat)

    def forward_head(self, tokens: TokenMap) -> tuple[T.Tensor, list[T.Tensor]]:
        """Final embedding and the CLS state after each block ``>= l_cls``."""
        cfg = self.cfg
        if cfg.cls_inside_prefix:
            raise ModelConfigError("forward_head needs l_cls >= l_eq; use run() for the coupled layout")
        layers = tuple(range(cfg.l_cls, cfg.depth))
        tr = self.run(tokens=tokens, start=cfg.l_eq, cls_layers=layers)
        emb = tr.embedding
        cache = [tr.cls[b] for b in layers]
        if tokens.feat.ndim == 3:
            emb = T.reshape(emb, (cfg.dim,))
            cache = [T.reshape(c, (cfg.dim,)) for c in cache]
        return emb, cache

    def forward_features_at(self, images, layer: int) -> TokenMap:
        """Spatial token map after ``layer`` blocks."""
        if not 0 <= layer <= self.cfg.depth:
            raise ModelConfigError(f"layer {layer} outside [0, {self.cfg.depth}]")
        tr = self.run(images, spatial_layers=(layer,), stop=layer, need_embedding=False)
        feat = tr.spatial[layer]
        if np.asarray(images).ndim == 3:
            feat = T.reshape(feat, feat.shape[1:])
        return TokenMap(tr.grid, feat)

    def probe_features(self, images, n_last: int = 4) -> np.ndarray:
        """Concatenated normalized CLS states of the last ``min(n_last, available)`` blocks."""
        cfg = self.cfg
        layers = tuple(range(max(cfg.l_cls, cfg.depth - n_last), cfg.depth))
        with T.no_grad():
            tr = self.run(images, cls_layers=layers, need_embedding=False)
            parts = [self.final_norm(tr.cls[b]).data for b in layers]
        return np.concatenate(parts, axis=-1)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))
