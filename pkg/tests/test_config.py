import pytest

from serlab import config as C


def parse(text):
    return C.parse_text(text, "run.cfg")


class TestParse:
    def test_empty_gives_defaults(self):
        assert parse("") == C.TrainConfig()
        assert parse("# only a comment\n\n") == C.TrainConfig()

    def test_default_lambda(self):
        assert C.TrainConfig().lam == 0.5

    def test_values_and_comments(self):
        cfg = parse("part.r = 0.5  # half\nmodel.l_eq = 2\ngeo.hflip = false\n")
        assert cfg.r == 0.5 and cfg.l_eq == 2 and cfg.geo_hflip is False

    def test_ratio_out_of_range_cites_interval(self):
        with pytest.raises(C.ConfigError, match=r"\[0,1\]") as info:
            parse("model.dim = 64\npart.r = 1.5\n")
        assert info.value.line == 2 and "run.cfg:2:" in str(info.value)

    def test_unknown_key_line(self):
        with pytest.raises(C.ConfigError, match="unknown key") as info:
            parse("\n\nloss.lamda = 0.3\n")
        assert info.value.line == 3

    def test_duplicate_key(self):
        with pytest.raises(C.ConfigError, match="duplicate") as info:
            parse("part.r = 0.1\npart.r = 0.2\n")
        assert info.value.line == 2

    def test_malformed_value(self):
        with pytest.raises(C.ConfigError, match="malformed") as info:
            parse("train.epochs = many\n")
        assert info.value.line == 1

    def test_missing_equals(self):
        with pytest.raises(C.ConfigError) as info:
            parse("part.r 0.3\n")
        assert info.value.line == 1

    def test_misaligned_scale_rejected(self):
        with pytest.raises(C.ConfigError, match="geo.scales"):
            parse("geo.scales = 1/3,1\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(C.ConfigError, match="cannot read"):
            C.parse_config(tmp_path / "absent.cfg")


class TestDump:
    def test_roundtrip(self):
        cfg = C.TrainConfig().replace(r=0.125, lam=2.0, geo_scales="1/2,1", method="baseline")
        assert parse(C.dump(cfg)) == cfg

    def test_defaults_text_lists_every_key(self):
        text = C.defaults_text()
        assert parse(text) == C.TrainConfig()
        keys = [line.split("=")[0].strip() for line in text.splitlines() if "=" in line]
        assert len(keys) == len(C.TrainConfig().items())

    def test_with_keys(self):
        cfg = C.TrainConfig().with_keys({"loss.lambda": "0.25", "train.seed": 9})
        assert cfg.lam == 0.25 and cfg.seed == 9
        with pytest.raises(C.ConfigError):
            C.TrainConfig().with_keys({"nope": 1})

    def test_diff_keys_exempts_cadence(self):
        a = C.TrainConfig()
        assert C.diff_keys(a, a.replace(ckpt_every=3)) == []
        assert C.diff_keys(a, a.replace(lam=0.1)) == ["loss.lambda"]


def test_cls_layer_precedes_depth():
    with pytest.raises(C.ConfigError, match="model.l_cls"):
        C.TrainConfig().replace(l_cls=4)
