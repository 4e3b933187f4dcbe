import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from serlab import checks
from serlab import group as G
from serlab import losses as L
from serlab import model as M
from serlab import tensor as T

CFG = L.EquivLossConfig()


def naive_terms(u, v, ids, tau):
    """Per-anchor terms of the patch contrastive loss, written out directly."""
    out = []
    for a in range(len(u)):
        cos = lambda x, y: float(x @ y) / math.sqrt(float(x @ x) * float(y @ y))
        pos = math.exp(cos(u[a], v[a]) / tau)
        neg = sum(math.exp(cos(u[a], v[b]) / tau) + math.exp(cos(u[a], u[b]) / tau)
                  for b in range(len(u)) if ids[b] != ids[a])
        out.append(-math.log(pos / (pos + neg)))
    return out


def eq(z, z2, tau=0.3):
    return float(L.equiv_nt_xent(T.Tensor(z), T.Tensor(z2), L.EquivLossConfig(tau)).data)


class TestEquivNTXent:
    def test_default_tau(self):
        assert CFG.tau == 0.3 and CFG.lam == 0.5

    def test_closed_form_two_images(self):
        z = np.eye(3)[:2].reshape(2, 1, 1, 3)
        t = 0.3
        want = -math.log(math.exp(1 / t) / (math.exp(1 / t) + 2))
        assert abs(eq(z, z, t) - want) <= 1e-12

    def test_bruteforce_2x2(self):
        rng = np.random.default_rng(0)
        z, z2 = rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 2, 2, 3))
        want = checks.naive_patch_nt_xent(z.reshape(-1, 3), z2.reshape(-1, 3), np.repeat([0, 1], 4), 0.3)
        assert abs(eq(z, z2) - want) <= 1e-10

    @given(st.integers(2, 4), st.integers(1, 4), st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**30))
    def test_bruteforce_property(self, n, h, w, d, seed):
        if n * h * w > 64:
            return
        rng = np.random.default_rng(seed)
        z, z2 = rng.normal(size=(n, h, w, d)), rng.normal(size=(n, h, w, d))
        want = np.mean(naive_terms(z.reshape(-1, d), z2.reshape(-1, d), np.repeat(np.arange(n), h * w), 0.3))
        assert abs(eq(z, z2) - want) <= 1e-10

    def test_variable_grids(self):
        rng = np.random.default_rng(1)
        maps = [rng.normal(size=(3, 4, 5)), rng.normal(size=(4, 4, 5)), rng.normal(size=(5, 3, 5))]
        maps2 = [rng.normal(size=m.shape) for m in maps]
        got = float(L.equiv_nt_xent([T.Tensor(m) for m in maps], [T.Tensor(m) for m in maps2], CFG).data)
        ids = np.concatenate([np.full(m.shape[0] * m.shape[1], i) for i, m in enumerate(maps)])
        u = np.concatenate([m.reshape(-1, 5) for m in maps])
        v = np.concatenate([m.reshape(-1, 5) for m in maps2])
        assert abs(got - np.mean(naive_terms(u, v, ids, 0.3))) <= 1e-10

    def test_insufficient_negatives(self):
        z = np.ones((1, 2, 2, 3))
        with pytest.raises(L.InsufficientNegativesError):
            eq(z, z)

    def test_own_image_excluded(self):
        # duplicating a location inside image 0 leaves every image-0 anchor term unchanged
        rng = np.random.default_rng(2)
        u, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        ids = np.array([0, 0, 0, 1, 1, 1])
        base = naive_terms(u, v, ids, 0.3)
        u2, v2 = np.vstack([u, u[1:2]]), np.vstack([v, v[1:2]])
        ids2 = np.append(ids, 0)
        dup = naive_terms(u2, v2, ids2, 0.3)
        assert dup[:3] == base[:3] and dup[6] == base[1]
        got = float(L.patch_nt_xent(T.Tensor(u2), T.Tensor(v2), ids2, 0.3).data)
        assert abs(got - np.mean(dup)) <= 1e-12

    def test_terms_positive(self):
        rng = np.random.default_rng(3)
        u, v = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        assert all(t > 0 for t in naive_terms(u, v, np.repeat([0, 1], 4), 0.3))
        assert eq(u.reshape(2, 2, 2, 3), v.reshape(2, 2, 2, 3)) > 0

    def test_cosine_scale_invariance(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 2, 2, 8)).astype(np.float32)
        z2 = rng.normal(size=(3, 2, 2, 8)).astype(np.float32)
        c = rng.uniform(0.1, 10, size=(3, 2, 2, 1)).astype(np.float32)
        assert abs(eq(z, z2) - eq(z * c, z2)) <= 1e-6

    def test_collapse_costs_more_than_separation(self):
        n, h, w, d = 3, 2, 2, 12
        sep = np.eye(d).reshape(n, h, w, d)
        col = np.ones((n, h, w, d))
        negatives = 2 * (n - 1) * h * w
        assert abs(eq(col, col) - math.log(1 + negatives)) <= 1e-12
        assert eq(col, col) > eq(sep, sep)

    def test_head_is_applied(self):
        rng = np.random.default_rng(5)
        head = M.ProjectionHead("p", 6, 8, 4, rng, np.float64)
        z, z2 = rng.normal(size=(2, 2, 2, 6)), rng.normal(size=(2, 2, 2, 6))
        got = float(L.equiv_nt_xent(T.Tensor(z), T.Tensor(z2), CFG, head).data)
        u = head(T.Tensor(z.reshape(-1, 6))).data
        v = head(T.Tensor(z2.reshape(-1, 6))).data
        assert abs(got - np.mean(naive_terms(u, v, np.repeat([0, 1], 4), 0.3))) <= 1e-10

    def test_config_validation(self):
        with pytest.raises(L.LossConfigError):
            L.EquivLossConfig(tau=0.0).validate()
        with pytest.raises(L.LossConfigError):
            L.EquivLossConfig(lam=-1.0).validate()


class TestInvContrastive:
    def test_all_orthogonal(self):
        e = np.eye(4)
        assert abs(float(L.inv_contrastive(T.Tensor(e[:2]), T.Tensor(e[2:]), 1.0).data) - math.log(3)) <= 1e-12

    def test_identical_views(self):
        e = np.eye(2)
        want = -math.log(math.e / (math.e + 2))
        assert abs(float(L.inv_contrastive(T.Tensor(e), T.Tensor(e), 1.0).data) - want) <= 1e-12

    @given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**30))
    def test_permutation_invariant(self, n, d, seed):
        rng = np.random.default_rng(seed)
        e1, e2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        p = rng.permutation(n)
        a = float(L.inv_contrastive(T.Tensor(e1), T.Tensor(e2), 0.2).data)
        b = float(L.inv_contrastive(T.Tensor(e1[p]), T.Tensor(e2[p]), 0.2).data)
        assert abs(a - b) <= 1e-12

    def test_oracle(self):
        rng = np.random.default_rng(6)
        e1, e2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        got = float(L.inv_contrastive(T.Tensor(e1), T.Tensor(e2), 0.2).data)
        assert abs(got - checks.naive_inv_contrastive(e1, e2, 0.2)) <= 1e-10

    def test_needs_two(self):
        with pytest.raises(L.InsufficientNegativesError):
            L.inv_contrastive(T.Tensor(np.ones((1, 3))), T.Tensor(np.ones((1, 3))), 0.2)


class TestInvRedundancy:
    def test_fixed_point(self):
        # rows of a scaled Hadamard matrix: zero-mean, unit-variance, decorrelated columns
        h = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)
        e = h[:, 1:]
        got = float(L.inv_redundancy(T.Tensor(e), T.Tensor(e), 0.0051, eps=1e-30).data)
        assert abs(got) <= 1e-24

    def test_single_dim(self):
        rng = np.random.default_rng(7)
        e1, e2 = rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
        a = float(L.inv_redundancy(T.Tensor(e1), T.Tensor(e2), 0.0).data)
        b = float(L.inv_redundancy(T.Tensor(e1), T.Tensor(e2), 100.0).data)
        assert a == b

    def test_oracle(self):
        rng = np.random.default_rng(8)
        e1, e2 = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        got = float(L.inv_redundancy(T.Tensor(e1), T.Tensor(e2), 0.0051).data)
        assert abs(got - checks.naive_inv_redundancy(e1, e2, 0.0051)) <= 1e-10

    def test_zero_variance_is_finite(self):
        e = np.ones((4, 3))
        assert np.isfinite(float(L.inv_redundancy(T.Tensor(e), T.Tensor(e), 0.0051).data))


class TestAugSelf:
    def test_same_elements_label(self):
        g = G.GroupElement(3, True)
        rot, flip = L.relative_labels([g], [g])
        assert rot.tolist() == [0] and flip.tolist() == [0]

    def test_uniform_logits(self):
        class Zero:
            def __call__(self, x):
                return T.mul(T.linear(x, T.Tensor(np.zeros((x.shape[1], 6)))), 1.0)

        e = T.Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        g1 = [G.IDENTITY] * 4
        g2 = [G.rotation(k) for k in range(4)]
        got = float(L.augself_aux(e, e, g1, g2, Zero()).data)
        assert abs(got - (math.log(4) + math.log(2))) <= 1e-12

    def test_head_gradient(self):
        rng = np.random.default_rng(1)
        head = M.ProjectionHead("a", 6, 5, 6, rng, np.float64)
        e1, e2 = T.Tensor(rng.normal(size=(4, 3))), T.Tensor(rng.normal(size=(4, 3)))
        g1 = [G.GroupElement(int(k), bool(f)) for k, f in zip(rng.integers(4, size=4), rng.integers(2, size=4))]
        g2 = [G.GroupElement(int(k), bool(f)) for k, f in zip(rng.integers(4, size=4), rng.integers(2, size=4))]
        T.backward(L.augself_aux(e1, e2, g1, g2, head))
        h = 1e-5
        for name, p in head.params.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                with T.no_grad():
                    up = float(L.augself_aux(e1, e2, g1, g2, head).data)
                flat[i] = old - h
                with T.no_grad():
                    dn = float(L.augself_aux(e1, e2, g1, g2, head).data)
                flat[i] = old
                a = p.grad.reshape(-1)[i]
                assert abs(a - (up - dn) / (2 * h)) / max(1.0, abs(a)) <= 1e-4, name


class TestTotal:
    def test_lambda_zero(self):
        assert L.total_loss(1.25, 2.5, 7.0, 0.0) == 3.75

    def test_equiv_zero(self):
        assert L.total_loss(1.25, 2.5, 0.0, 0.5) == 3.75

    def test_arithmetic(self):
        assert L.total_loss(1.0, 2.0, 4.0, 0.5) == 5.0

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
    def test_affine_in_lambda(self, a, b, e, lam):
        t = lambda x: T.Tensor(np.array(x))
        got = float(L.total_loss(t(a), t(b), t(e), lam).data)
        assert got == (a + b) + lam * e

    def test_negative_lambda(self):
        with pytest.raises(L.LossConfigError):
            L.total_loss(1.0, 1.0, 1.0, -0.1)


def test_loss_oracle_suite():
    assert "50" in checks.suite_loss_oracles()
