import math

import numpy as np
import pytest

from icnd.data import (
    CorpusConfig,
    DefectClass,
    Manifest,
    Record,
    build_synthetic_corpus,
    feature_mask_pseudo_defect,
    gen_structured_background,
    inject_defect,
    sample_defect,
)
from icnd.errors import (
    DimensionError,
    InvalidInputError,
    PGMParseError,
    UnsupportedFormatError,
)
from icnd.pgm import read_pgm, read_pgm16, write_pgm, write_pgm16
from icnd.vit import FeatureStack


class TestPGM:
    def test_tiny_round_trip(self, tmp_path):
        img = np.array([[0.0, 1.0], [1.0, 0.0]])
        write_pgm(img, tmp_path / "a.pgm")
        assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)

    def test_constant_round_trip(self, tmp_path):
        img = np.full((5, 7), 128 / 255)
        write_pgm(img, tmp_path / "c.pgm")
        assert np.array_equal(read_pgm(tmp_path / "c.pgm"), img)

    def test_quantization_bound_and_bit_exact_second_pass(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(64, 64))
        write_pgm(img, tmp_path / "r.pgm")
        once = read_pgm(tmp_path / "r.pgm")
        assert np.max(np.abs(once - img)) <= 1 / 255
        write_pgm(once, tmp_path / "r2.pgm")
        assert np.array_equal(read_pgm(tmp_path / "r2.pgm"), once)
        assert (tmp_path / "r.pgm").read_bytes() == (tmp_path / "r2.pgm").read_bytes()

    def test_header_comments(self, tmp_path):
        (tmp_path / "h.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        assert np.array_equal(read_pgm(tmp_path / "h.pgm"), [[0.0, 1.0]])

    @pytest.mark.parametrize("payload", [b"P2\n2 1\n255\n\x00\xff", b"P5\n2 x\n255\n\x00\xff",
                                         b"P5\n2 1\n", b"P5\n2 2\n255\n\x00\xff"])
    def test_malformed(self, tmp_path, payload):
        (tmp_path / "m.pgm").write_bytes(payload)
        with pytest.raises(PGMParseError):
            read_pgm(tmp_path / "m.pgm")

    def test_depth_not_255(self, tmp_path):
        (tmp_path / "d.pgm").write_bytes(b"P5\n1 1\n15\n\x03")
        with pytest.raises(UnsupportedFormatError):
            read_pgm(tmp_path / "d.pgm")

    def test_sixteen_bit(self, tmp_path):
        img = np.random.default_rng(1).uniform(size=(9, 4))
        write_pgm16(img, tmp_path / "s.pgm")
        assert np.max(np.abs(read_pgm16(tmp_path / "s.pgm") - img)) <= 0.5 / 65535
        with pytest.raises(UnsupportedFormatError):
            read_pgm(tmp_path / "s.pgm")


class TestBackground:
    def test_lines_periodic(self):
        img = gen_structured_background(32, 40, "lines", period=8, contrast=0.5)
        assert np.array_equal(img[:, 8:], img[:, :-8])
        assert np.array_equal(img[1:], img[:-1])
        assert not np.array_equal(img[:, 4:], img[:, :-4])

    def test_deterministic(self):
        a = gen_structured_background(20, 20, "vias", 6, 2, 0.4, 0.05, seed=3)
        b = gen_structured_background(20, 20, "vias", 6, 2, 0.4, 0.05, seed=3)
        assert np.array_equal(a, b)

    def test_grid_two_levels(self):
        img = gen_structured_background(30, 30, "grid", period=10, contrast=0.4)
        assert len(np.unique(img)) == 2

    def test_errors(self):
        with pytest.raises(DimensionError):
            gen_structured_background(0, 10)
        with pytest.raises(InvalidInputError):
            gen_structured_background(10, 10, period=3)


class TestInjectDefect:
    def setup_method(self):
        self.bg = gen_structured_background(64, 64, "lines", 8, 0, 0.4, 0.03, seed=1)

    def test_zero_delta_rejected(self):
        with pytest.raises(InvalidInputError):
            inject_defect(self.bg, "blob", 5, 0.0)

    def test_blob_area_bounds(self):
        # lattice points of a radius-2.5 disc: 13 ≤ count ≤ 25
        ref = sum(1 for y in range(-3, 4) for x in range(-3, 4) if x * x + y * y <= 2.5 ** 2)
        _, mask = inject_defect(self.bg, "blob", 5, 0.3, seed=2)
        assert 13 <= mask.sum() <= 25
        assert mask.sum() == ref

    def test_deterministic(self):
        a = inject_defect(self.bg, "scratch", 12, -0.3, seed=9)
        b = inject_defect(self.bg, "scratch", 12, -0.3, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @pytest.mark.parametrize("kind", ["blob", "scratch", "missing_structure", "bridge"])
    @pytest.mark.parametrize("delta", [0.3, -0.3, 0.9])
    def test_mask_is_exactly_the_change(self, kind, delta):
        for seed in range(5):
            out, mask = inject_defect(self.bg, kind, 11, delta, seed=seed)
            assert mask.sum() > 0
            assert np.array_equal(mask > 0, np.abs(out - self.bg) > 0)
            moved = np.abs(out - self.bg)[mask > 0]
            assert np.mean(moved >= min(abs(delta), 0.4) / 2) >= 0.8
            assert out.min() >= 0 and out.max() <= 1

    def test_too_large(self):
        with pytest.raises(InvalidInputError):
            inject_defect(self.bg, "blob", 64, 0.3)


class TestFeatureMasking:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.stack = FeatureStack(rng.normal(size=(3, 16, 8)), (4, 4))

    def test_count(self):
        for ratio in (0.05, 0.1, 0.33, 0.5):
            _, m = feature_mask_pseudo_defect(self.stack, ratio, seed=1)
            assert m.sum() == math.ceil(ratio * 16)

    def test_unmasked_rows_untouched(self):
        out, m = feature_mask_pseudo_defect(self.stack, 0.25, seed=1)
        assert np.array_equal(out.layers[:, ~m], self.stack.layers[:, ~m])
        assert not np.array_equal(out.layers[:, m], self.stack.layers[:, m])

    def test_deterministic(self):
        _, a = feature_mask_pseudo_defect(self.stack, 0.25, seed=4)
        _, b = feature_mask_pseudo_defect(self.stack, 0.25, seed=4)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("ratio", [0.0, 0.6])
    def test_ratio_range(self, ratio):
        with pytest.raises(InvalidInputError):
            feature_mask_pseudo_defect(self.stack, ratio)


def small_config(**kw):
    base = dict(size=56, n_train_normal=2, n_test_normal=1, n_labeled=2, n_unlabeled=2,
                n_test_per_class=1)
    base.update(kw)
    return CorpusConfig(**base)


class TestCorpus:
    def test_no_defect_classes(self, tmp_path):
        m = build_synthetic_corpus(small_config(classes=[], n_base=0), 0, tmp_path)
        assert all(r.label is None and r.mask is None for r in m.records)
        assert len(m.records) == 3

    def test_labeled_count(self, tmp_path):
        cfg = small_config(n_labeled=20, n_base=3, n_unlabeled=0, n_test_per_class=0,
                           n_train_normal=0, n_test_normal=0, classes=CorpusConfig().classes[:3])
        m = build_synthetic_corpus(cfg, 0, tmp_path)
        assert len(m.select("labeled_defect")) == 60

    def test_pure_function_of_config_and_seed(self, tmp_path):
        a = build_synthetic_corpus(small_config(), 5, tmp_path / "a")
        b = build_synthetic_corpus(small_config(), 5, tmp_path / "b")
        assert a.to_json() == b.to_json()
        for r in a.records:
            assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
        c = build_synthetic_corpus(small_config(), 6, tmp_path / "c")
        assert any((tmp_path / "a" / r.path).read_bytes() != (tmp_path / "c" / r.path).read_bytes()
                   for r in c.records)

    def test_manifest_round_trip(self, tmp_path):
        m = build_synthetic_corpus(small_config(), 1, tmp_path)
        again = Manifest.load(tmp_path / "manifest.json")
        assert again.to_json() == m.to_json()
        assert Manifest.from_json(again.to_json()).to_dict() == m.to_dict()
        rec = m.select("labeled_defect")[0]
        assert again.image(rec).shape == (56, 56)
        assert set(np.unique(again.mask(rec))) <= {0.0, 1.0}

    def test_manifest_validation(self):
        with pytest.raises(InvalidInputError):
            Manifest([Record("a", "train_normal"), Record("a", "test")], 0)
        with pytest.raises(InvalidInputError):
            Manifest([Record("a", "labeled_defect", label=1)], 0)
        with pytest.raises(InvalidInputError):
            Manifest([Record("a", "test", label=9)], 0, {"classes": [{"id": 1}]})

    def test_classes_separable_by_area_and_delta(self):
        # oracle: standardised (area, mean signed change) + nearest class centroid
        cfg = CorpusConfig()
        rng = np.random.default_rng(0)
        feats, labels = [], []
        for ci, cls in enumerate(cfg.classes):
            for _ in range(40):
                bg, img, mask = sample_defect(cfg, cls, rng)
                m = mask > 0
                feats.append((m.sum(), (img - bg)[m].mean()))
                labels.append(ci)
        x = np.array(feats)
        y = np.array(labels)
        x = (x - x.mean(0)) / x.std(0)
        cents = np.stack([x[y == c].mean(0) for c in range(len(cfg.classes))])
        pred = np.argmin(((x[:, None] - cents[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == y) >= 0.95
