import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featfnn.features import (
    CATALOG,
    DimensionError,
    FeatureSpec,
    RangeError,
    apply_feature,
    downsample_mean,
    export_catalog,
    feature_by_name,
    feature_dim,
    import_catalog,
    scale_to_unit,
    transform_image,
    trim_border,
)

# Rows of the RGB feature table, transcribed independently of the module.
TABLE = [
    ("R", "1", "0", "0"),
    ("G", "0", "1", "0"),
    ("B", "0", "0", "1"),
    ("RGg1", "0.618", "0.382", "0"),
    ("RBg1", "0.618", "0", "0.382"),
    ("GBg1", "0", "0.618", "0.382"),
    ("RGg2", "0.382", "0.618", "0"),
    ("RBg2", "0.382", "0", "0.618"),
    ("GBg2", "0", "0.382", "0.618"),
    ("RG", "0.5", "0.5", "0"),
    ("RB", "0.5", "0", "0.5"),
    ("GB", "0", "0.5", "0.5"),
    ("eRGB", "1/3", "1/3", "1/3"),
    ("BW", "0.299", "0.587", "0.114"),
    ("X", "0.4125", "0.3576", "0.1804"),
    ("Y", "0.2126", "0.7152", "0.0722"),
    ("Z", "0.0193", "0.1192", "0.9502"),
]


def image(h, w, rgb):
    return np.broadcast_to(np.array(rgb, dtype=np.uint8), (h, w, 3)).copy()


class TestCatalog:
    def test_rows_match_table(self):
        assert [(f.name, f.wr_text, f.wg_text, f.wb_text) for f in CATALOG] == TABLE

    def test_export_round_trip(self):
        text = export_catalog()
        assert text == "".join(" ".join(row) + "\n" for row in TABLE)
        assert import_catalog(text) == list(CATALOG)

    def test_weight_sums(self):
        sums = [f.weight_sum for f in CATALOG]
        assert max(sums) == pytest.approx(1.0887, abs=1e-12)
        assert max(CATALOG, key=lambda f: f.weight_sum).name == "Z"
        assert all(s > 0 for s in sums)

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            FeatureSpec("bad", "-0.1", "0.5", "0.5")

    def test_lookup(self):
        assert feature_by_name("BW").wg == 0.587
        with pytest.raises(KeyError):
            feature_by_name("nope")


class TestDownsample:
    def test_block_mean(self):
        assert downsample_mean(np.array([[0, 2], [4, 6]])).tolist() == [[3.0]]

    @pytest.mark.parametrize("size", [2, 4, 8, 64])
    def test_constant(self, size):
        out = downsample_mean(np.full((size, size), 7.25))
        assert out.shape == (size // 2, size // 2)
        assert np.all(out == 7.25)

    def test_64_to_32(self):
        assert downsample_mean(np.zeros((64, 64))).shape == (32, 32)

    def test_odd_rejected(self):
        with pytest.raises(DimensionError):
            downsample_mean(np.zeros((5, 4)))


class TestTrim:
    def test_shapes(self):
        assert trim_border(np.zeros((32, 32))).shape == (30, 30)

    def test_center(self):
        m = np.arange(9).reshape(3, 3)
        assert trim_border(m).tolist() == [[4]]

    def test_zero(self):
        assert np.array_equal(trim_border(np.zeros((4, 4))), np.zeros((2, 2)))

    def test_too_small(self):
        with pytest.raises(DimensionError):
            trim_border(np.zeros((2, 5)))


class TestApplyFeature:
    def test_red_identity(self):
        assert apply_feature(feature_by_name("R"), image(2, 2, (13, 200, 90)))[0, 0] == 13

    def test_equal_weights_gray(self):
        out = apply_feature(feature_by_name("eRGB"), image(2, 2, (77, 77, 77)))
        assert out[0, 0] == pytest.approx(77, abs=1e-12)

    def test_y_pixel(self):
        # 0.2126*100 + 0.7152*200 + 0.0722*50 = 21.26 + 143.04 + 3.61
        out = apply_feature(feature_by_name("Y"), image(1, 1, (100, 200, 50)))
        assert abs(out[0, 0] - 167.91) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(
        a=arrays(np.uint8, (4, 4, 3)),
        b=arrays(np.uint8, (4, 4, 3)),
        idx=st.integers(0, len(CATALOG) - 1),
    )
    def test_linear(self, a, b, idx):
        spec = CATALOG[idx]
        total = a.astype(np.float64) + b.astype(np.float64)
        np.testing.assert_allclose(
            apply_feature(spec, total), apply_feature(spec, a) + apply_feature(spec, b), atol=1e-10
        )


class TestScale:
    spec = feature_by_name("X")

    def test_endpoints(self):
        top = 255 * self.spec.weight_sum
        out = scale_to_unit(np.array([0.0, top, top / 2]), self.spec)
        assert out.tolist() == pytest.approx([-1.0, 1.0, 0.0], abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            scale_to_unit(np.array([300.0]), self.spec)
        with pytest.raises(RangeError):
            scale_to_unit(np.array([-1.0]), self.spec)


class TestTransform:
    def test_length_900(self, rng):
        img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        assert transform_image(CATALOG[0], img).shape == (900,)

    def test_black(self):
        out = transform_image(feature_by_name("BW"), image(64, 64, (0, 0, 0)))
        assert np.all(out == -1.0)

    def test_white_unit_sum(self):
        out = transform_image(feature_by_name("RGg1"), image(64, 64, (255, 255, 255)))
        np.testing.assert_allclose(out, 1.0, atol=1e-12)

    def test_composition(self, rng):
        spec = feature_by_name("Z")
        img = rng.integers(0, 256, size=(8, 12, 3), dtype=np.uint8)
        manual = scale_to_unit(trim_border(downsample_mean(apply_feature(spec, img))), spec).ravel()
        np.testing.assert_array_equal(transform_image(spec, img), manual)

    def test_stack_matches_single(self, rng):
        imgs = rng.integers(0, 256, size=(3, 64, 64, 3), dtype=np.uint8)
        spec = feature_by_name("GBg2")
        stacked = transform_image(spec, imgs)
        for t in range(3):
            np.testing.assert_array_equal(stacked[t], transform_image(spec, imgs[t]))

    def test_invalid_image(self):
        with pytest.raises(DimensionError):
            transform_image(CATALOG[0], np.zeros((5, 6, 3), dtype=np.uint8))
        with pytest.raises(DimensionError):
            transform_image(CATALOG[0], np.zeros((2, 2, 3), dtype=np.uint8))

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(2, 10).map(lambda v: 2 * v),
        w=st.integers(2, 10).map(lambda v: 2 * v),
        idx=st.integers(0, len(CATALOG) - 1),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_shape_and_range_laws(self, h, w, idx, seed):
        img = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        out = transform_image(CATALOG[idx], img)
        assert out.shape == (feature_dim(h, w),) == ((h // 2 - 2) * (w // 2 - 2),)
        assert np.all((out >= -1.0) & (out <= 1.0))
