import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crica.encoder import save_descriptors
from crica.errors import (
    DuplicateId,
    DimMismatch,
    EmptyIndex,
    MissingMetadata,
    MissingQuery,
    UnknownRule,
)
from crica.retrieval import (
    PlaceRecord,
    build_index,
    ground_truth,
    knn,
    parse_manifest,
    rank_all,
    recall_at_n,
    write_manifest,
)

RNG = np.random.default_rng(61)


def unit_rows(n, dim, rng=RNG):
    x = rng.standard_normal((n, dim))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def make_index(tmp_path, n=5, dim=8, ids=None, vectors=None, geotag_fn=None):
    ids = ids if ids is not None else [f"im{i}.img" for i in range(n)]
    vectors = vectors if vectors is not None else unit_rows(len(ids), dim)
    records = [
        PlaceRecord(path=i, place_id=k,
                    geotag=geotag_fn(k) if geotag_fn else (float(k), 0.0))
        for k, i in enumerate(ids)
    ]
    desc = tmp_path / "db.desc"
    manifest = tmp_path / "manifest.txt"
    save_descriptors(desc, ids, vectors)
    write_manifest(manifest, records)
    return desc, manifest


class TestManifest:
    def test_round_trip(self, tmp_path):
        records = [
            PlaceRecord("a.img", 0, (1.5, -2.25)),
            PlaceRecord("b.img", 1, (100.0, 50.0)),
        ]
        path = tmp_path / "m.txt"
        write_manifest(path, records)
        back = parse_manifest(path)
        assert [r.path for r in back] == ["a.img", "b.img"]
        assert back[0].geotag == pytest.approx((1.5, -2.25))

    def test_comments_ignored(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("# header\nx.img 3 1.0 2.0\n\n# trailing\n", encoding="utf-8")
        records = parse_manifest(path)
        assert len(records) == 1 and records[0].place_id == 3

    def test_frame_geotag(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("x.img 0 42\n", encoding="utf-8")
        assert parse_manifest(path)[0].geotag == (42.0,)

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("x.img 0\n", encoding="utf-8")
        with pytest.raises(MissingMetadata):
            parse_manifest(path)


class TestBuildIndex:
    def test_order_preserved(self, tmp_path):
        desc, manifest = make_index(tmp_path, n=3)
        index = build_index(desc, manifest)
        assert len(index) == 3
        assert index.ids == ["im0.img", "im1.img", "im2.img"]

    def test_duplicate_id(self, tmp_path):
        desc, manifest = make_index(tmp_path, ids=["a.img", "a.img"],
                                    vectors=unit_rows(2, 8))
        with pytest.raises(DuplicateId):
            build_index(desc, manifest)

    def test_empty_file(self, tmp_path):
        desc = tmp_path / "empty.desc"
        save_descriptors(desc, [], np.zeros((0, 8), np.float32))
        _, manifest = make_index(tmp_path, n=1)
        with pytest.raises(EmptyIndex):
            build_index(desc, manifest)

    def test_missing_metadata(self, tmp_path):
        desc, _ = make_index(tmp_path, n=2)
        lone = tmp_path / "other.txt"
        write_manifest(lone, [PlaceRecord("im0.img", 0, (0.0, 0.0))])
        with pytest.raises(MissingMetadata):
            build_index(desc, lone)

    def test_rows_renormalized(self, tmp_path):
        vectors = unit_rows(3, 8) * 2.5
        desc, manifest = make_index(tmp_path, ids=[f"i{k}.img" for k in range(3)], vectors=vectors)
        index = build_index(desc, manifest)
        np.testing.assert_allclose(np.linalg.norm(index.matrix, axis=1), 1.0, atol=1e-5)


class TestKnn:
    def test_exact_match_first(self, tmp_path):
        vectors = unit_rows(5, 8)
        desc, manifest = make_index(tmp_path, ids=[f"i{k}.img" for k in range(5)], vectors=vectors)
        index = build_index(desc, manifest)
        top = knn(index, vectors[3], 2)
        assert top[0][0] == "i3.img"
        assert top[0][1] == pytest.approx(1.0, abs=1e-5)

    def test_orthogonal_query_tie_order(self, tmp_path):
        vectors = np.eye(4, 8, dtype=np.float32)
        desc, manifest = make_index(tmp_path, ids=[f"i{k}.img" for k in range(4)], vectors=vectors)
        index = build_index(desc, manifest)
        query = np.zeros(8, np.float32)
        query[7] = 1.0
        top = knn(index, query, 4)
        assert [t[0] for t in top] == ["i0.img", "i1.img", "i2.img", "i3.img"]
        assert all(t[1] == pytest.approx(0.0) for t in top)

    def test_dim_mismatch(self, tmp_path):
        desc, manifest = make_index(tmp_path)
        index = build_index(desc, manifest)
        with pytest.raises(DimMismatch):
            knn(index, np.ones(9, np.float32), 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_matches_brute_force_sort(self, seed):
        rng = np.random.default_rng(seed)
        mat = unit_rows(30, 16, rng)
        q = unit_rows(1, 16, rng)[0]
        sims = mat @ q
        brute = sorted(range(30), key=lambda i: (-sims[i], i))
        from crica.retrieval import DescriptorIndex
        index = DescriptorIndex(ids=[str(i) for i in range(30)], matrix=mat,
                                geotags=np.zeros((30, 2)), place_ids=np.zeros(30, np.int64))
        top = knn(index, q, 30)
        assert [int(t[0]) for t in top] == brute


class TestGroundTruth:
    def test_euclidean_threshold(self):
        db = np.array([[0.0, 0.0], [100.0, 0.0]])
        gt = ground_truth(db, np.array([[5.0, 0.0]]), "euclidean:25")
        assert gt == [{0}]

    def test_frame_offset(self):
        db = np.array([[f] for f in range(100)])
        gt = ground_truth(db, np.array([[50.0]]), "frame:10")
        assert gt == [set(range(40, 61))]

    def test_unique_pair(self):
        db = np.array([[1.0], [2.0], [3.0]])
        gt = ground_truth(db, np.array([[2.0]]), "unique")
        assert gt == [{1}]

    def test_unknown_rule(self):
        with pytest.raises(UnknownRule):
            ground_truth(np.zeros((1, 2)), np.zeros((1, 2)), "cosine:5")


class TestRecall:
    def test_all_rank_one(self):
        gt = [{0}, {1}, {2}]
        rankings = [[0, 5], [1, 5], [2, 5]]
        rec = recall_at_n(rankings, gt, [1, 5])
        assert rec[1] == 100.0 and rec[5] == 100.0

    def test_hand_enumeration(self):
        # positives first found at ranks 1, 2, 3, 7, 11
        gt = [{9}] * 5
        rankings = []
        for rank in (1, 2, 3, 7, 11):
            r = [100 + i for i in range(12)]
            r[rank - 1] = 9
            rankings.append(r)
        rec = recall_at_n(rankings, gt, [1, 5, 10])
        assert (rec[1], rec[5], rec[10]) == (20.0, 60.0, 80.0)

    def test_empty_positive_excluded_from_denominator(self):
        gt = [{0}, set()]
        rec = recall_at_n([[0], None], gt, [1])
        assert rec[1] == 100.0

    def test_missing_ranking_for_evaluable_query(self):
        with pytest.raises(MissingQuery):
            recall_at_n([None], [{0}], [1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_nondecreasing_in_n(self, seed):
        rng = np.random.default_rng(seed)
        n_db, n_q = 40, 12
        gt = [set(rng.choice(n_db, size=rng.integers(0, 4), replace=False).tolist())
              for _ in range(n_q)]
        rankings = [rng.permutation(n_db).tolist() for _ in range(n_q)]
        rec = recall_at_n(rankings, gt, [1, 5, 10, 20])
        vals = [rec[n] for n in (1, 5, 10, 20)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        mat = unit_rows(20, 8, rng)
        queries = unit_rows(6, 8, rng)
        gt = [set(rng.choice(20, size=2, replace=False).tolist()) for _ in range(6)]
        from crica.retrieval import DescriptorIndex
        index = DescriptorIndex(ids=[str(i) for i in range(20)], matrix=mat,
                                geotags=np.zeros((20, 2)), place_ids=np.zeros(20, np.int64))
        rec1 = recall_at_n([r.tolist() for r in rank_all(index, queries, 10)], gt, [1, 5])
        perm = rng.permutation(20)
        inv = np.argsort(perm)
        index_p = DescriptorIndex(ids=[str(i) for i in perm], matrix=mat[perm],
                                  geotags=np.zeros((20, 2)), place_ids=np.zeros(20, np.int64))
        gt_p = [{int(inv[i]) for i in s} for s in gt]
        rec2 = recall_at_n([r.tolist() for r in rank_all(index_p, queries, 10)], gt_p, [1, 5])
        assert rec1 == rec2
