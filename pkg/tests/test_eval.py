import csv
import math
from fractions import Fraction

import numpy as np
import pytest

from serlab import checks
from serlab import config as C
from serlab import eval as E
from serlab import group as G
from serlab import model as M
from serlab import tensor as T


def patch_constant_images(n=6, side=32, patch=8, seed=0):
    g = side // patch
    cells = np.random.default_rng(seed).uniform(size=(n, g, g, 3))
    return np.repeat(np.repeat(cells, patch, axis=1), patch, axis=2)


def blobs(n=600, k=3, d=8, spread=0.1, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, d)) * 5
    y = np.arange(n) % k
    return centers[y] + spread * rng.normal(size=(n, d)), y


def three_sigma(p, n):
    return 3 * math.sqrt(p * (1 - p) / n)


class NoiseEncoder:
    """Stand-in encoder whose token maps are fresh Gaussian noise on every call."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.rng = np.random.default_rng(0)

    def forward_features_at(self, images, layer):
        n, h, w, _ = images.shape
        p = self.cfg.patch
        grid = G.TokenGrid(h // p, w // p, p)
        return M.TokenMap(grid, T.Tensor(self.rng.normal(size=(n, grid.h, grid.w, self.cfg.dim))))


class TestEquivarianceScore:
    @pytest.mark.parametrize("family", ["rot90", "hflip"])
    def test_unit_score_for_equivariant_embedding(self, family):
        # with positions zeroed the patch embedding commutes with dihedral moves of per-patch-constant images
        m = M.SplitViT(M.ModelConfig(), np.random.default_rng(0), np.float64)
        m.params["pos"].data[:] = 0.0
        s = E.equivariance_score(m, patch_constant_images(), family, layer=0, n_samples=20)
        assert abs(s - 1.0) <= 1e-12

    def test_positions_break_equivariance(self):
        m = M.SplitViT(M.ModelConfig(), np.random.default_rng(0), np.float64)
        m.params["pos"].data[:] = np.random.default_rng(1).normal(size=m.params["pos"].shape)
        assert E.equivariance_score(m, patch_constant_images(), "rot90", layer=0, n_samples=20) < 0.99

    def test_random_features_near_zero(self):
        enc = NoiseEncoder(M.ModelConfig())
        for fam in E.FAMILIES:
            assert abs(E.equivariance_score(enc, patch_constant_images(), fam, n_samples=200)) < 0.1

    def test_report_fields(self):
        m = M.SplitViT(M.ModelConfig(), np.random.default_rng(0), np.float64)
        rep = E.equivariance_report(m, patch_constant_images(4), n_samples=3)
        assert set(rep.scores) == set(E.FAMILIES) and rep.layer == 4
        assert all(-1.0 <= v <= 1.0 for v in rep.scores.values())

    def test_deterministic(self):
        m = M.SplitViT(M.ModelConfig(), np.random.default_rng(0), np.float64)
        x = patch_constant_images(4)
        assert E.equivariance_score(m, x, "scale", n_samples=5) == E.equivariance_score(m, x, "scale", n_samples=5)


class TestLinearProbe:
    def test_separable(self):
        x, y = blobs()
        res = E.linear_probe(E.make_probe_dataset(x, y, 0), epochs=20)
        assert res.top1 == 1.0 and res.top5 is None

    def test_shuffled_labels_at_chance(self):
        x, _ = blobs(n=1000, k=4)
        y = np.random.default_rng(5).permutation(np.arange(1000) % 4)
        res = E.linear_probe(E.make_probe_dataset(x, y, 0), epochs=20)
        assert abs(res.top1 - 0.25) <= three_sigma(0.25, res.n_val)

    def test_top5_reported_for_five_classes(self):
        x, y = blobs(k=5)
        res = E.linear_probe(E.make_probe_dataset(x, y, 0), epochs=5)
        assert res.top5 == 1.0

    def test_mlp_separable(self):
        x, y = blobs()
        assert E.mlp_probe(E.make_probe_dataset(x, y, 0), hidden=16, epochs=20).top1 == 1.0

    def test_single_class_rejected(self):
        x, _ = blobs(n=20)
        with pytest.raises(E.EvalError):
            E.linear_probe(E.make_probe_dataset(x, np.zeros(20, dtype=int), 0))

    def test_split_disjoint(self):
        tr, va = E.split_indices(100, 3)
        assert len(va) == 30 and sorted(np.concatenate([tr, va]).tolist()) == list(range(100))


class TestKnn:
    def test_k1_duplicates(self):
        x, y = blobs(n=50, spread=3.0)
        ds = E.ProbeDataset(x, y, x.copy(), y.copy())
        assert E.knn_probe(ds, k=1).top1 == 1.0

    def test_k_all_is_majority(self):
        x, _ = blobs(n=40)
        y = np.array([0] * 25 + [1] * 10 + [2] * 5)
        vx, _ = blobs(n=9, seed=1)
        ds = E.ProbeDataset(x, y, vx, np.zeros(9, dtype=int))
        assert E.knn_probe(ds, k=40).top1 == 1.0

    def test_blobs(self):
        x, y = blobs(n=900, spread=1.0)
        assert E.knn_probe(E.make_probe_dataset(x, y, 0), k=5).top1 >= 0.99

    def test_tie_break_by_distance(self):
        xtr = np.array([[1.0, 0.0], [0.0, 1.0]])
        ds = E.ProbeDataset(xtr, np.array([1, 0]), np.array([[1.0, 0.1]]), np.array([1]))
        assert E.knn_probe(ds, k=2).top1 == 1.0

    def test_default_k(self):
        assert E.default_k(500) == 20 and E.default_k(100) == 5

    def test_k_too_large(self):
        x, y = blobs(n=10)
        with pytest.raises(E.EvalError):
            E.knn_probe(E.ProbeDataset(x, y, x, y), k=11)


def oriented_images(n=400, side=16, seed=0):
    # a vertical ramp gives every image a canonical "up"
    rng = np.random.default_rng(seed)
    ramp = np.linspace(0, 1, side)[:, None, None] * np.ones((side, side, 3))
    return ramp[None] + 0.1 * rng.normal(size=(n, side, side, 3))


class TestTransformProbe:
    @pytest.mark.parametrize("task,floor", [("rotation4", 0.25), ("hflip2", 0.5)])
    def test_shuffled_labels_hit_chance_floor(self, task, floor):
        x = oriented_images(800)
        res = E.transform_probe(x, task, E.pixel_featurizer, shuffle_labels=True, epochs=10)
        assert res.chance_floor == floor
        assert abs(res.accuracy - floor) <= three_sigma(floor, res.n_val)

    def test_pixels_detect_rotation(self):
        res = E.transform_probe(oriented_images(), "rotation4", E.pixel_featurizer, epochs=20)
        assert res.accuracy > 0.9

    def test_encoder_featurizer_shape(self):
        m = M.SplitViT(M.ModelConfig(image=16, patch=8), np.random.default_rng(0), np.float64)
        assert E.encoder_featurizer(m, 2)(oriented_images(5)).shape == (5, 64)

    def test_unknown_task(self):
        with pytest.raises(E.EvalError):
            E.transform_probe(oriented_images(8), "rotation8", E.pixel_featurizer)


class TestSweep:
    def sweep(self, tmp_path, values):
        base = checks.micro_config(n_images=8, equiv_samples=4, probe_epochs=2)
        x = checks.micro_images(8)
        px = checks.micro_images(16, seed=1)
        labels = np.stack([np.arange(16) % 2, np.arange(16) % 4], axis=1)
        out = tmp_path / "sweep.csv"
        rows = E.ablation_sweep(base, "ratio", values, [0, 1], x, px, labels, out_csv=out)
        with out.open() as fh:
            return rows, list(csv.DictReader(fh))

    def test_complete_grid(self, tmp_path):
        rows, on_disk = self.sweep(tmp_path, [0.25, 0.5])
        assert len(rows) == len(on_disk) == 4
        assert tuple(on_disk[0]) == E.SWEEP_COLUMNS
        assert {(r["value"], r["seed"]) for r in on_disk} == {("0.25", "0"), ("0.25", "1"), ("0.5", "0"), ("0.5", "1")}
        assert all(r["error"] == "" and r["class_top1"] != "" and r["equiv_rot90"] != "" for r in on_disk)

    def test_failures_become_rows(self, tmp_path):
        rows, _ = self.sweep(tmp_path, [1.5, 0.5])
        assert "[0,1]" in rows[0]["error"] and rows[2]["error"] == ""

    def test_group_axis(self):
        base = checks.micro_config()
        cfg = E.sweep_config(base, "group", "rot90+scale", 4)
        assert cfg.geo_rot90 and not cfg.geo_hflip and cfg.seed == 4 and cfg.geo_scales == base.geo_scales
        assert E.sweep_config(base, "group", "hflip", 0).geo_scales == "1"

    def test_unknown_axis(self):
        with pytest.raises(C.ConfigError):
            E.sweep_config(checks.micro_config(), "depth", 3, 0)


# --- FLOPs oracle: explicit operation tally of the desk configuration ----------------------------


def mm(m, k, n):
    return 2 * m * k * n


def oracle_encoder(tokens):
    d, hid = 64, 128
    total = mm(tokens, 8 * 8 * 3, d) + tokens * d + tokens * d
    for block in range(4):
        t = tokens + (block >= 1)
        ops = [
            2 * 8 * t * d,                              # layer norms
            4 * mm(t, d, d), 4 * t * d,                 # q k v o and biases
            4 * mm(t, 16, t),                           # scores, 4 heads of width 16
            4 * mm(t, t, 16),                           # weighted values
            4 * 6 * t * t,                              # scale and softmax
            mm(t, d, hid), t * hid, 10 * t * hid,       # fc1, bias, gelu
            mm(t, hid, d), t * d,                       # fc2, bias
            2 * t * d,                                  # residuals
        ]
        total += sum(ops)
    return total + 8 * d


def oracle_head(rows):
    return rows * (mm(1, 64, 128) + 128 + 10 * 128 + mm(1, 128, 32) + 32)


def oracle_nce(anchors, candidates, width):
    return 4 * anchors * width + mm(anchors, width, candidates) + 5 * anchors * candidates + 2 * anchors * width


def test_flops_desk_value_hand_tally():
    B, n2 = 64, 16
    n1 = B - n2
    grids = [(a, b) for a in (3, 4, 5) for b in (3, 4, 5)]
    base_fwd = 2 * B * oracle_encoder(16) + oracle_head(2 * B) + oracle_nce(2 * B, 2 * B, 32)
    enc_eq = sum(oracle_encoder(a * b) for a, b in grids) / 9
    tok = sum(a * b for a, b in grids) / 9
    assert tok == 16
    ser_fwd = 2 * n1 * oracle_encoder(16) + oracle_head(2 * n1) + oracle_nce(2 * n1, 2 * n1, 32)
    ser_fwd += 2 * n2 * enc_eq + oracle_head(2 * n2) + oracle_nce(2 * n2, 2 * n2, 32)
    M_ = n2 * tok
    ser_fwd += 2 * M_ * (mm(1, 64, 128) + 128 + 10 * 128 + mm(1, 128, 32) + 32)   # per-location projections
    ser_fwd += 4 * M_ * 64                                                       # bilinear alignment
    ser_fwd += 2 * 4 * M_ * 32 + mm(M_, 32, 2 * M_) + 5 * M_ * 2 * M_ + 2 * M_ * 32   # patch loss, both views normalized
    rep = E.flops_estimate(E.FlopsModel())
    assert rep.baseline == pytest.approx(3 * base_fwd / B, rel=1e-12)
    assert rep.ser == pytest.approx(3 * ser_fwd / B, rel=1e-12)
    assert rep.ratio == pytest.approx(1.0335247676125958, rel=1e-12)


class TestFlops:
    def test_r0_exactly_one(self):
        assert E.flops_estimate(E.FlopsModel(r=0.0)).ratio == 1.0
        assert E.flops_estimate(E.paper_flops_model(0.0)).ratio == 1.0

    def test_monotone_in_r(self):
        ratios = [E.flops_estimate(E.FlopsModel(r=r)).ratio for r in np.linspace(0, 1, 11)]
        assert all(a <= b for a, b in zip(ratios, ratios[1:]))

    def test_desk_bound(self):
        assert E.flops_estimate(E.FlopsModel()).ratio <= 1.10

    def test_all_layers_costs_more(self):
        assert (E.flops_estimate(E.FlopsModel(all_layers=True)).ratio
                > E.flops_estimate(E.FlopsModel()).ratio)

    def test_from_config(self):
        cfg = C.TrainConfig()
        m = E.FlopsModel.from_config(cfg)
        assert m.scales == (Fraction(3, 4), Fraction(1), Fraction(5, 4)) and m.r == cfg.r
