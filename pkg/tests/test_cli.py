import csv
import io

import pytest

from serlab import cli

TINY = """\
model.image = 16
model.patch = 8
model.dim = 8
model.depth = 2
model.heads = 2
model.l_eq = 1
model.l_cls = 1
loss.proj_dim = 4
loss.proj_hidden = 8
loss.inv_dim = 4
loss.inv_hidden = 8
geo.scales = 1/2,1,3/2
train.batch_size = 8
train.epochs = 2
train.warmup_epochs = 0
train.precision = f64
data.n_images = 24
eval.probe_epochs = 2
eval.equiv_samples = 4
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    return cfg


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def csv_tail(text):
    body = [line for line in text.splitlines() if line and not line.startswith("#") and "=" not in line
            and not line.startswith("checkpoint:")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


class TestExitCodes:
    def test_help(self, capsys):
        assert run(capsys, "--help")[0] == 0

    def test_usage(self, capsys):
        assert run(capsys, "bogus")[0] == 1
        assert run(capsys, "probe", "--kind", "linear")[0] == 1  # --ckpt missing
        assert run(capsys)[0] == 1

    def test_config_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("part.r = 1.5\n")
        code, _, err = run(capsys, "flops", "--config", str(bad))
        assert code == 2 and "[0,1]" in err and "bad.cfg:1" in err

    def test_runtime_error(self, capsys, tmp_path, tiny):
        code, _, err = run(capsys, "pretrain", "--config", str(tiny), "--data", str(tmp_path / "absent.serd"),
                           "--out-dir", str(tmp_path / "o"))
        assert code == 3 and "absent.serd" in err


class TestCommands:
    def test_flops_prints_effective_config(self, capsys):
        code, out, _ = run(capsys, "flops", "--r", "0")
        assert code == 0 and out.startswith("# effective config\n") and "part.r = 0.0" in out
        assert float(csv_tail(out)[0]["ratio"]) == 1.0

    def test_flops_paper(self, capsys):
        code, out, _ = run(capsys, "flops", "--paper")
        assert code == 0 and csv_tail(out)[0]["config"] == "paper"

    def test_seed_flag_overrides(self, capsys):
        assert "train.seed = 11" in run(capsys, "flops", "--seed", "11")[1]

    def test_pipeline(self, capsys, tmp_path, tiny):
        data = tmp_path / "d.serd"
        out = tmp_path / "run"
        common = ("--config", str(tiny), "--out-dir", str(out))
        assert run(capsys, "gen-data", "--out", str(data), *common)[0] == 0
        code, text, _ = run(capsys, "pretrain", "--data", str(data), *common)
        assert code == 0 and (out / "final.sert").exists() and (out / "defaults.cfg").exists()
        assert len(csv_tail(text)) == 2
        ckpt = str(out / "final.sert")
        for kind in ("linear", "knn", "transform"):
            code, text, _ = run(capsys, "probe", "--ckpt", ckpt, "--kind", kind, "--data", str(data), *common)
            assert code == 0 and 0.0 <= float(csv_tail(text)[0]["top1"]) <= 1.0
            assert (out / f"probe_{kind}.csv").exists()
        code, text, _ = run(capsys, "equiscore", "--ckpt", ckpt, "--data", str(data), *common)
        assert code == 0 and [r["family"] for r in csv_tail(text)] == ["rot90", "hflip", "scale"]

    def test_resume_with_other_config_fails(self, capsys, tmp_path, tiny):
        data = tmp_path / "d.serd"
        out = tmp_path / "run"
        common = ("--config", str(tiny), "--out-dir", str(out))
        run(capsys, "gen-data", "--out", str(data), *common)
        run(capsys, "pretrain", "--data", str(data), *common)
        code, _, err = run(capsys, "pretrain", "--data", str(data), "--seed", "5",
                           "--resume", str(out / "final.sert"), *common)
        assert code == 3 and "train.seed" in err

    def test_ablate(self, capsys, tmp_path, tiny):
        data = tmp_path / "d.serd"
        out = tmp_path / "ab"
        common = ("--config", str(tiny), "--out-dir", str(out))
        run(capsys, "gen-data", "--out", str(data), *common)
        code, text, _ = run(capsys, "ablate", "--axis", "lambda", "--values", "0,0.5", "--seeds", "0",
                            "--data", str(data), *common)
        rows = csv_tail(text)
        assert code == 0 and len(rows) == 2 and all(r["error"] == "" for r in rows)
        assert (out / "ablate_lambda.csv").exists() and (out / "defaults.cfg").exists()

    def test_ablate_bad_value(self, capsys, tmp_path, tiny):
        data = tmp_path / "d.serd"
        run(capsys, "gen-data", "--out", str(data), "--config", str(tiny))
        code, _, _ = run(capsys, "ablate", "--axis", "ratio", "--values", "2", "--data", str(data),
                         "--config", str(tiny), "--out-dir", str(tmp_path))
        assert code == 2

    def test_check_pass_and_mutation(self, capsys):
        code, out, _ = run(capsys, "check", "--suite", "permutation_oracle")
        assert code == 0 and "PASS permutation_oracle" in out
        code, out, _ = run(capsys, "check", "--suite", "permutation_oracle", "--mutate", "rot90")
        assert code == 3 and "FAIL permutation_oracle" in out and "counterexample:" in out
