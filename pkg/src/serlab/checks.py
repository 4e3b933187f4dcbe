"""Self-verification suites run by ``serlab check``.

Each suite compares an implementation against an independent oracle and
raises :class:`CheckFailure` carrying the first counterexample.
"""

from __future__ import annotations

import contextlib
import math
import time
from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import config as C
from . import group as G
from . import losses as L
from . import tensor as T


class CheckFailure(AssertionError):
    def __init__(self, message: str, counterexample: dict):
        super().__init__(message)
        self.counterexample = counterexample


@dataclass
class SuiteResult:
    name: str
    passed: bool
    seconds: float
    detail: str
    counterexample: dict | None = None


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

_SCALES = (Fraction(1, 2), Fraction(3, 4), Fraction(1), Fraction(5, 4), Fraction(3, 2), Fraction(2))


def random_element(rng: np.random.Generator) -> G.GroupElement:
    return G.GroupElement(int(rng.integers(4)), bool(rng.integers(2)),
                          _SCALES[rng.integers(len(_SCALES))], _SCALES[rng.integers(len(_SCALES))])


def matmul2(a, b):
    return [[a[i][0] * b[0][j] + a[i][1] * b[1][j] for j in range(2)] for i in range(2)]


def patch_values(img: np.ndarray, p: int) -> np.ndarray:
    """Token grid of a per-patch-constant image (one sample per patch, exact)."""
    return np.ascontiguousarray(img[::p, ::p])


def naive_patch_nt_xent(u: np.ndarray, v: np.ndarray, ids: np.ndarray, tau: float) -> float:
    m = len(u)
    un = [x / math.sqrt(float(x @ x)) for x in u]
    vn = [x / math.sqrt(float(x @ x)) for x in v]
    total = 0.0
    for a in range(m):
        pos = math.exp(float(un[a] @ vn[a]) / tau)
        den = pos
        for b in range(m):
            if ids[b] != ids[a]:
                den += math.exp(float(un[a] @ vn[b]) / tau) + math.exp(float(un[a] @ un[b]) / tau)
        total += -math.log(pos / den)
    return total / m


def naive_inv_contrastive(e1: np.ndarray, e2: np.ndarray, tau: float) -> float:
    n = len(e1)
    allv = [x / math.sqrt(float(x @ x)) for x in list(e1) + list(e2)]
    total = 0.0
    for a in range(2 * n):
        p = a + n if a < n else a - n
        den = sum(math.exp(float(allv[a] @ allv[b]) / tau) for b in range(2 * n) if b != a)
        total += -math.log(math.exp(float(allv[a] @ allv[p]) / tau) / den)
    return total / (2 * n)


def naive_inv_redundancy(e1: np.ndarray, e2: np.ndarray, w: float, eps: float = L.BN_EPS) -> float:
    n, d = e1.shape

    def std(e):
        out = np.empty_like(e, dtype=np.float64)
        for j in range(d):
            col = [float(e[i, j]) for i in range(n)]
            mu = sum(col) / n
            var = sum((c - mu) ** 2 for c in col) / n
            for i in range(n):
                out[i, j] = (col[i] - mu) / math.sqrt(var + eps)
        return out

    a, b = std(e1), std(e2)
    loss = 0.0
    for i in range(d):
        for j in range(d):
            c = sum(a[k, i] * b[k, j] for k in range(n)) / n
            loss += (1 - c) ** 2 if i == j else w * c * c
    return loss


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def suite_group_axioms(n: int = 10000, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    e = G.IDENTITY
    for _ in range(n):
        a, b, c = random_element(rng), random_element(rng), random_element(rng)
        if G.compose(G.compose(a, b), c) != G.compose(a, G.compose(b, c)):
            raise CheckFailure("associativity", {"a": str(a), "b": str(b), "c": str(c)})
        if G.compose(a, e) != a or G.compose(e, a) != a:
            raise CheckFailure("identity law", {"a": str(a)})
        if G.compose(G.inverse(a), a) != e or G.compose(a, G.inverse(a)) != e:
            raise CheckFailure("inverse law", {"a": str(a)})
        if G.matrix(G.compose(a, b)) != matmul2(G.matrix(a), G.matrix(b)):
            raise CheckFailure("compose disagrees with the matrix product", {"a": str(a), "b": str(b)})
    return f"{n} random triples"


def suite_permutation_oracle(patch: int = 2, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    count = 0
    for h in range(2, 7):
        for w in range(2, 7):
            grid = rng.normal(size=(h, w, 3))
            img = np.repeat(np.repeat(grid, patch, axis=0), patch, axis=1)
            for g in G.all_dihedral():
                want = patch_values(G.act_image(g, img), patch)
                got = G.act_tokens(g, T.Tensor(grid)).data
                if got.shape != want.shape or not np.array_equal(got, want):
                    raise CheckFailure("act_tokens differs from the pixel-space action",
                                       {"g": str(g), "grid": [h, w], "got": got[..., 0].tolist(),
                                        "want": want[..., 0].tolist()})
                count += 1
    return f"{count} (element, grid) cases"


def suite_loss_oracles(n: int = 50, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for trial in range(n):
        nb = int(rng.integers(2, 5))
        h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d = int(rng.integers(2, 6))
        z = rng.normal(size=(nb, h, w, d))
        z2 = rng.normal(size=(nb, h, w, d))
        tau = float(rng.uniform(0.1, 1.0))
        got = float(L.equiv_nt_xent(T.Tensor(z), T.Tensor(z2), L.EquivLossConfig(tau)).data)
        want = naive_patch_nt_xent(z.reshape(-1, d), z2.reshape(-1, d), np.repeat(np.arange(nb), h * w), tau)
        if abs(got - want) > 1e-10:
            raise CheckFailure("equiv_nt_xent vs naive loop", {"trial": trial, "got": got, "want": want})
        e1, e2 = rng.normal(size=(nb + 1, d)), rng.normal(size=(nb + 1, d))
        got = float(L.inv_contrastive(T.Tensor(e1), T.Tensor(e2), tau).data)
        want = naive_inv_contrastive(e1, e2, tau)
        if abs(got - want) > 1e-10:
            raise CheckFailure("inv_contrastive vs naive loop", {"trial": trial, "got": got, "want": want})
        wgt = float(rng.uniform(0, 1))
        got = float(L.inv_redundancy(T.Tensor(e1), T.Tensor(e2), wgt).data)
        want = naive_inv_redundancy(e1, e2, wgt)
        if abs(got - want) > 1e-10 * max(1.0, abs(want)):
            raise CheckFailure("inv_redundancy vs naive loop", {"trial": trial, "got": got, "want": want})
    return f"{n} instances per loss"


def micro_config(**over) -> C.TrainConfig:
    base = dict(image=8, patch=4, dim=8, depth=2, heads=2, mlp_ratio=2, l_eq=1, l_cls=1, proj_dim=4, proj_hidden=8,
                inv_dim=4, inv_hidden=8, geo_scales="1/2,1,3/2", r=0.5, batch_size=4, precision="f64",
                epochs=1, warmup_epochs=0, seed=3)
    base.update(over)
    return C.TrainConfig(**base)


def micro_images(n: int = 4, side: int = 8, seed: int = 0, dtype=np.float64) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0, 1, size=(n, side, side, 3)).astype(dtype)


def objective(learner, images, indices, epoch=0, step=0) -> T.Tensor:
    from . import train as TR
    parts = TR.ser_losses(learner, images, indices, epoch, step)
    return L.total_loss(parts["l_inv1"], parts["l_inv2"], parts["l_equiv"], learner.cfg.lam)


def fd_gradient_errors(learner, images, indices, h: float = 1e-5, names=None, max_per_param=None,
                       rng: np.random.Generator | None = None):
    """Yield ``(name, flat index, analytic, numeric)`` for the selected scalar parameters."""
    learner.zero_grad()
    loss = objective(learner, images, indices)
    T.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in learner.params.items()}
    with T.no_grad():
        for k, p in learner.params.items():
            if names is not None and k not in names:
                continue
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                up = float(objective(learner, images, indices).data)
                flat[i] = old - h
                dn = float(objective(learner, images, indices).data)
                flat[i] = old
                yield k, int(i), float(analytic[k].reshape(-1)[i]), (up - dn) / (2 * h)


def suite_fd_gradients(max_per_param: int | None = 3, tol: float = 1e-4) -> str:
    from .train import Learner
    cfg = micro_config()
    learner = Learner(cfg)
    images = micro_images()
    n = 0
    for name, i, a, num in fd_gradient_errors(learner, images, np.arange(4), max_per_param=max_per_param):
        n += 1
        if abs(a - num) / max(1.0, abs(a)) > tol:
            raise CheckFailure("analytic gradient disagrees with central differences",
                               {"param": name, "index": i, "analytic": a, "numeric": num})
    return f"{n} scalar parameters"


def suite_determinism() -> str:
    from .train import run_pretrain
    cfg = micro_config(epochs=2, batch_size=4)
    images = micro_images(8)
    a = run_pretrain(cfg, images=images).learner
    b = run_pretrain(cfg, images=images).learner
    for k in a.params:
        if not np.array_equal(a.params[k].data, b.params[k].data):
            raise CheckFailure("two identical runs diverged", {"param": k})
    return "2-epoch micro run repeated"


SUITES: "OrderedDict[str, Callable[[], str]]" = OrderedDict([
    ("group_axioms", suite_group_axioms),
    ("permutation_oracle", suite_permutation_oracle),
    ("loss_oracles", suite_loss_oracles),
    ("fd_gradients", suite_fd_gradients),
    ("determinism", suite_determinism),
])


@contextlib.contextmanager
def mutation(name: str):
    """Temporarily inject a known bug, to confirm the suites catch it."""
    if name != "rot90":
        raise ValueError(f"unknown mutation {name!r}")
    original = G.token_permutation

    def wrong(h, w, k, flip):
        # turns the wrong way: sign of the quarter-turn flipped
        return original(h, w, (-k) % 4, flip)

    G.token_permutation = wrong
    try:
        yield
    finally:
        G.token_permutation = original


def run_suites(names=None, mutate: str | None = None) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown suite {n!r}; choose from {', '.join(SUITES)}")
    results = []
    ctx = mutation(mutate) if mutate else contextlib.nullcontext()
    with ctx:
        for n in names:
            t0 = time.perf_counter()
            try:
                detail = SUITES[n]()
                results.append(SuiteResult(n, True, time.perf_counter() - t0, detail))
            except CheckFailure as exc:
                results.append(SuiteResult(n, False, time.perf_counter() - t0, str(exc), exc.counterexample))
    return results


__all__ = ["CheckFailure", "SuiteResult", "SUITES", "run_suites", "mutation", "micro_config", "micro_images",
           "objective", "fd_gradient_errors", "naive_patch_nt_xent", "naive_inv_contrastive",
           "naive_inv_redundancy", "patch_values", "random_element", "matmul2"]
