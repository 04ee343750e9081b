import itertools

import numpy as np
import pytest

from crica.errors import CanvasTooSmall, ConfigError
from crica.retrieval import parse_manifest
from crica.synthdata import (
    ConditionTransform,
    SyntheticPlaceSpec,
    apply_condition_transform,
    gen_dataset,
    gen_place,
    read_image,
    read_split,
    render_canvas,
    write_image,
)


def spec(pid=0, seed=7, canvas=128):
    return SyntheticPlaceSpec(place_id=pid, seed=seed, geotag=(0.0, 0.0), canvas=canvas)


class TestConditionTransforms:
    def test_brightness_zero_is_identity(self):
        img = np.random.default_rng(0).random((3, 8, 8), dtype=np.float32)
        out = apply_condition_transform(img, ConditionTransform("brightness", 0.0),
                                        np.random.default_rng(1))
        np.testing.assert_array_equal(out, img)

    def test_contrast_on_constant_image(self):
        img = np.full((3, 8, 8), 0.4, dtype=np.float32)
        out = apply_condition_transform(img, ConditionTransform("contrast", 1.0),
                                        np.random.default_rng(2))
        np.testing.assert_allclose(out, img, atol=1e-7)

    def test_noise_bounded_deviation(self):
        img = np.full((3, 16, 16), 0.5, dtype=np.float32)
        m = 0.1
        out = apply_condition_transform(img, ConditionTransform("noise", m),
                                        np.random.default_rng(3))
        assert np.max(np.abs(out - img)) <= 3 * m + 1e-6

    def test_outputs_clamped(self):
        img = np.random.default_rng(4).random((3, 8, 8), dtype=np.float32)
        for kind in ("brightness", "contrast", "channel-tint", "noise"):
            out = apply_condition_transform(img, ConditionTransform(kind, 1.0),
                                            np.random.default_rng(5))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            ConditionTransform("hue", 0.5)

    def test_magnitude_range_checked(self):
        with pytest.raises(ConfigError):
            ConditionTransform("noise", 1.5)


class TestGenPlace:
    def test_deterministic_under_seed(self):
        a, ga = gen_place(spec(), 3, 64, np.random.default_rng([7, 0, 1]))
        b, gb = gen_place(spec(), 3, 64, np.random.default_rng([7, 0, 1]))
        assert np.array_equal(a, b)
        assert np.array_equal(ga, gb)

    def test_shapes_and_range(self):
        imgs, geo = gen_place(spec(), 4, 64, np.random.default_rng(0))
        assert imgs.shape == (4, 3, 64, 64)
        assert geo.shape == (4, 2)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_canvas_too_small(self):
        with pytest.raises(CanvasTooSmall):
            gen_place(spec(canvas=64), 2, 64, np.random.default_rng(0))

    def test_distinct_place_seeds_differ(self):
        # floor measured over 1000 random pairs before freezing the generator
        # (min 0.149); assert a safe margin above the spec floor of 0.05
        rng = np.random.default_rng(9)
        canvases = [render_canvas(spec(pid=p, canvas=64)) for p in range(40)]
        pairs = list(itertools.combinations(range(40), 2))
        for a, b in [pairs[i] for i in rng.choice(len(pairs), 50, replace=False)]:
            assert np.abs(canvases[a] - canvases[b]).mean() > 0.05

    def test_intra_place_correlation_exceeds_inter(self):
        sets = []
        for pid in range(12):
            imgs, _ = gen_place(spec(pid=pid), 4, 64, np.random.default_rng([7, pid]))
            sets.append(imgs.reshape(4, -1).astype(np.float64))

        def corr(a, b):
            a = a - a.mean()
            b = b - b.mean()
            return float((a * b).sum() / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))

        intra = [corr(s[i], s[j]) for s in sets for i in range(4) for j in range(i + 1, 4)]
        inter = [corr(sets[p][0], sets[q][0])
                 for p, q in itertools.combinations(range(12), 2)]
        assert np.mean(intra) > np.mean(inter) + 0.05


class TestImageFile:
    def test_round_trip_bit_exact(self, tmp_path):
        img = np.random.default_rng(5).random((3, 17, 9), dtype=np.float32)
        path = tmp_path / "x.img"
        write_image(path, img)
        back = read_image(path)
        assert np.array_equal(back, img)

    def test_header_is_height_width(self, tmp_path):
        img = np.zeros((3, 5, 7), dtype=np.float32)
        path = tmp_path / "x.img"
        write_image(path, img)
        raw = path.read_bytes()
        assert len(raw) == 8 + 3 * 5 * 7 * 4
        assert int.from_bytes(raw[0:4], "little") == 5
        assert int.from_bytes(raw[4:8], "little") == 7


class TestGenDataset:
    def test_counts_and_splits(self, tmp_path):
        info = gen_dataset(tmp_path, num_places=6, k=4, seed=5)
        assert info == {"places": 6, "images": 24, "queries": 6, "database": 18}
        split = read_split(tmp_path / "split.txt")
        assert sum(1 for role in split.values() if role == "query") == 6
        assert len(parse_manifest(tmp_path / "manifest_db.txt")) == 18
        assert len(parse_manifest(tmp_path / "manifest_query.txt")) == 6

    def test_every_query_has_positive_under_25m(self, tmp_path):
        gen_dataset(tmp_path, num_places=5, k=3, seed=6)
        from crica.retrieval import ground_truth
        db = parse_manifest(tmp_path / "manifest_db.txt")
        queries = parse_manifest(tmp_path / "manifest_query.txt")
        gt = ground_truth(np.array([r.geotag for r in db]),
                          np.array([r.geotag for r in queries]), "euclidean:25")
        assert all(len(s) >= 1 for s in gt)
        # and no cross-place contamination
        for qi, positives in enumerate(gt):
            for dbi in positives:
                assert db[dbi].place_id == queries[qi].place_id

    def test_deterministic_bytes(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        gen_dataset(a, num_places=4, k=3, seed=12)
        gen_dataset(b, num_places=4, k=3, seed=12)
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_distinct_seeds_distinct_trees(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        gen_dataset(a, num_places=4, k=3, seed=1)
        gen_dataset(b, num_places=4, k=3, seed=2)
        assert (a / "manifest.txt").read_text() != (b / "manifest.txt").read_text()

    def test_too_few_places(self, tmp_path):
        with pytest.raises(ConfigError):
            gen_dataset(tmp_path, num_places=2, k=4, seed=0)
