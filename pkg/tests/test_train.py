import csv
import math
from collections import OrderedDict

import numpy as np
import pytest

from serlab import checks
from serlab import tensor as T
from serlab import train as TR


def scalar_params(value=1.0):
    return OrderedDict(w=T.Tensor(np.array([value]), requires_grad=True))


def same_params(a, b, names=None):
    names = a.params if names is None else names
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in names)


class TestAdamW:
    def test_two_steps_by_hand(self):
        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        params = scalar_params(1.0)
        opt = TR.AdamW(params, wd)
        p, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate((0.5, -0.25), start=1):
            params["w"].grad = np.array([g])
            opt.step(lr)
            p *= 1 - lr * wd
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert abs(params["w"].data[0] - p) <= 1e-12

    def test_zero_gradient_no_decay_is_fixed_point(self):
        params = scalar_params(2.0)
        opt = TR.AdamW(params, 0.0)
        for _ in range(3):
            params["w"].grad = np.zeros(1)
            opt.step(0.5)
        assert params["w"].data[0] == 2.0

    def test_pure_decay(self):
        params = scalar_params(2.0)
        opt = TR.AdamW(params, 0.1)
        params["w"].grad = np.zeros(1)
        opt.step(0.5)
        assert abs(params["w"].data[0] - 2.0 * (1 - 0.05)) <= 1e-15

    def test_missing_gradient_untouched(self):
        params = scalar_params(3.0)
        TR.AdamW(params, 0.1).step(0.5)
        assert params["w"].data[0] == 3.0

    def test_decay_excludes_norms_and_biases(self):
        params = TR.Learner(checks.micro_config()).params
        names = TR.decay_names(params)
        assert names and all(params[k].ndim >= 2 for k in names) and "pos" not in names
        assert all(params[k].ndim == 1 for k in set(params) - names - {"pos", "cls", "cls_pos"})


class TestSchedule:
    def test_endpoints(self):
        assert TR.lr_schedule(0, 100, 10, 1.0) == 0.0
        assert TR.lr_schedule(5, 100, 10, 1.0) == 0.5
        assert TR.lr_schedule(10, 100, 10, 1.0) == 1.0
        assert TR.lr_schedule(55, 100, 10, 1.0) == pytest.approx(0.5, abs=1e-15)
        assert TR.lr_schedule(100, 100, 10, 1.0) == 0.0

    def test_monotone_after_warmup(self):
        lrs = [TR.lr_schedule(s, 50, 5, 0.3) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_negative_step(self):
        with pytest.raises(ValueError):
            TR.lr_schedule(-1, 10, 0, 1.0)


def one_step(cfg, images, detach=False, hook=None):
    learner = TR.Learner(cfg)
    opt = TR.AdamW(learner.params, cfg.weight_decay, decay=TR.decay_names(learner.params))
    m = TR.train_step(learner, opt, images, np.arange(len(images)), 0, 0, 1e-3, hook, detach)
    return learner, m


class TestStep:
    def test_r0_matches_baseline_bitwise(self):
        x = checks.micro_images()
        ser, ms = one_step(checks.micro_config(r=0.0), x)
        base, mb = one_step(checks.micro_config(r=0.0, method="baseline"), x)
        assert ms.l_total == mb.l_total and ms.l_equiv == 0.0
        assert same_params(ser, base)

    def test_lambda_zero_equals_detached(self):
        x = checks.micro_images()
        a, _ = one_step(checks.micro_config(lam=0.0), x)
        b, mb = one_step(checks.micro_config(lam=0.5), x, detach=True)
        assert mb.l_equiv > 0
        keep = list(a.encoder.params) + list(a.inv_head.params)
        assert same_params(a, b, keep)

    def test_regulariser_moves_encoder(self):
        x = checks.micro_images()
        a, _ = one_step(checks.micro_config(lam=0.0), x)
        b, _ = one_step(checks.micro_config(lam=0.5), x)
        assert not same_params(a, b, list(a.encoder.params))

    def test_hook_stages(self):
        seen = []
        one_step(checks.micro_config(), checks.micro_images(), hook=lambda stage, **kw: seen.append(stage))
        assert seen == ["partition", "views", "features", "aligned", "losses"]

    def test_hook_sees_aligned_shapes(self):
        got = {}

        def hook(stage, **kw):
            if stage == "aligned":
                got["h1_hat"] = kw["h1_hat"]
            if stage == "features":
                got["h2"] = kw["h2"]

        one_step(checks.micro_config(), checks.micro_images(), hook=hook)
        assert [a.shape for a in got["h1_hat"]] == [b.shape for b in got["h2"]]

    def test_non_finite_loss_aborts(self):
        x = checks.micro_images()
        x[1, 2, 3, 0] = np.nan
        with pytest.raises(TR.NonFiniteLossError) as info:
            one_step(checks.micro_config(), x)
        diag = info.value.diagnostic
        assert diag["batch_indices"] == [0, 1, 2, 3] and diag["seed"] == 3
        assert {"epoch", "step", "rng", "losses"} <= set(diag)


class TestRun:
    def test_determinism(self):
        cfg = checks.micro_config(seed=7, n_images=8)
        x = checks.micro_images(8)
        a = TR.run_pretrain(cfg, images=x)
        b = TR.run_pretrain(cfg, images=x.copy())
        assert same_params(a.learner, b.learner)
        assert a.rows[0]["l_total"] == b.rows[0]["l_total"]

    def test_seed_changes_result(self):
        x = checks.micro_images(8)
        a = TR.run_pretrain(checks.micro_config(seed=7), images=x)
        b = TR.run_pretrain(checks.micro_config(seed=8), images=x)
        assert not same_params(a.learner, b.learner)

    def test_resume_bitwise(self, tmp_path):
        cfg = checks.micro_config(epochs=4, ckpt_every=0)
        x = checks.micro_images(8)
        full = TR.run_pretrain(cfg, tmp_path / "full", images=x)
        half = TR.run_pretrain(cfg, tmp_path / "half", images=x, stop_after=2)
        assert half.final is not None and half.final.epoch == 2
        rest = TR.run_pretrain(cfg, tmp_path / "half", images=x, resume=half.final.path)
        assert same_params(full.learner, rest.learner)
        with (tmp_path / "half" / "metrics.csv").open() as fh:
            assert [int(r["epoch"]) for r in csv.DictReader(fh)] == [1, 2, 3, 4]

    def test_resume_refuses_other_config(self, tmp_path):
        cfg = checks.micro_config(epochs=2)
        x = checks.micro_images(8)
        res = TR.run_pretrain(cfg, tmp_path, images=x, stop_after=1)
        with pytest.raises(TR.ResumeError, match="loss.lambda"):
            TR.run_pretrain(cfg.replace(lam=0.3), tmp_path, images=x, resume=res.final.path)
        # checkpoint cadence is not part of the identity
        TR.run_pretrain(cfg.replace(ckpt_every=5), tmp_path, images=x, resume=res.final.path)

    def test_metrics_csv(self, tmp_path):
        TR.run_pretrain(checks.micro_config(epochs=2), tmp_path, images=checks.micro_images(8))
        with (tmp_path / "metrics.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == TR.METRIC_COLUMNS and len(rows) == 3
        assert (tmp_path / "final.sert").exists() and (tmp_path / "final.manifest").exists()

    def test_checkpoint_roundtrip(self, tmp_path):
        res = TR.run_pretrain(checks.micro_config(), tmp_path, images=checks.micro_images(8))
        loaded = TR.load_learner(res.final.path)
        assert same_params(res.learner, loaded)

    def test_small_dataset_rejected(self):
        with pytest.raises(TR.TrainError):
            TR.run_pretrain(checks.micro_config(batch_size=16), images=checks.micro_images(8))
