import numpy as np
import pytest

from serlab import data as D


class TestGenerate:
    def test_byte_identical(self, tmp_path):
        spec = D.SyntheticSpec(n_images=20)
        a = D.gen_data(spec, 4, tmp_path / "a.serd")
        b = D.gen_data(spec, 4, tmp_path / "b.serd")
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.serd.json").exists()

    def test_seed_matters(self):
        spec = D.SyntheticSpec(n_images=10)
        assert not np.array_equal(D.generate(spec, 0)[0], D.generate(spec, 1)[0])

    def test_items_independent_of_count(self):
        x5, y5 = D.generate(D.SyntheticSpec(n_images=5), 2)
        x9, y9 = D.generate(D.SyntheticSpec(n_images=9), 2)
        assert np.array_equal(x5, x9[:5]) and np.array_equal(y5, y9[:5])

    @pytest.mark.parametrize("cls", range(5))
    def test_render_matches_rotation_when_centered(self, cls):
        side = 32
        c = (side - D.template_size(side)) // 2
        color = (0.5, 0.7, 0.9)
        base = D.render(cls, 0, c, c, color, side)
        for o in range(4):
            assert np.array_equal(D.render(cls, o, c, c, color, side), np.rot90(base, o))

    def test_class_histogram_uniform(self):
        _, y = D.generate(D.SyntheticSpec(n_images=10000), 0)
        for col, k in ((0, 5), (1, 4)):
            freq = np.bincount(y[:, col], minlength=k) / len(y)
            assert np.all(np.abs(freq - 1 / k) <= 0.02)

    def test_pixels_in_range(self):
        x, _ = D.generate(D.SyntheticSpec(n_images=30), 3)
        assert x.dtype == np.float32 and x.min() >= 0 and x.max() <= 1
        assert np.all(x.reshape(30, -1).max(axis=1) >= 0.3)  # every image shows its shape

    def test_templates_distinct(self):
        masks = [D.shape_template(s, 12) for s in D.SHAPES]
        assert len({m.tobytes() for m in masks}) == len(masks)

    def test_spec_validation(self):
        with pytest.raises(D.DataError):
            D.SyntheticSpec(side=30).validate()
        with pytest.raises(D.DataError):
            D.SyntheticSpec(n_classes=6).validate()


class TestContainer:
    def test_roundtrip(self, tmp_path):
        x, y = D.generate(D.SyntheticSpec(n_images=7), 1)
        p = D.write_dataset(tmp_path / "d.serd", x, y)
        x2, y2 = D.read_dataset(p)
        assert np.array_equal(x, x2) and np.array_equal(y, y2)

    def test_header_size(self):
        buf = D.encode(np.zeros((2, 4, 4, 3)), np.zeros(2, dtype=int))
        assert len(buf) == 16 + 4 * 2 * 4 * 4 * 3 + 4 * 2

    def test_truncated(self):
        buf = D.encode(np.zeros((2, 4, 4, 3)), np.zeros((2, 2), dtype=int))
        with pytest.raises(D.DataError, match="expected"):
            D.decode(buf[:-1])

    def test_bad_magic(self):
        buf = D.encode(np.zeros((1, 4, 4, 3)), np.zeros(1, dtype=int))
        with pytest.raises(D.DataError, match="not a SERD"):
            D.decode(b"XXXX" + buf[4:])

    def test_out_of_range_pixels(self):
        with pytest.raises(D.DataError):
            D.encode(np.full((1, 4, 4, 3), 1.5), np.zeros(1, dtype=int))

    def test_missing_file(self, tmp_path):
        with pytest.raises(D.DataError):
            D.read_dataset(tmp_path / "none.serd")
