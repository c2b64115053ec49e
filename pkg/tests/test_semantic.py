import numpy as np
import pytest

from modules.errors import DimensionError, FeatureFormatError, IdRangeError, PQTrainingError
from modules.semantic import (HEADER, MAGIC, FeatureMatrix, PQIndex, load_features, pq_knn, quantization_error,
                              save_features, semantic_retrieve, train_pq)


def _raw_file(tmp_path, rows, dim, values, magic=MAGIC):
    path = tmp_path / "features.bin"
    path.write_bytes(HEADER.pack(magic, rows, dim) + np.asarray(values, dtype="<f4").tobytes())
    return str(path)


def _clusterable(num_rows, dim, num_subspaces, centroids, seed=0):
    """每个子空间恰好 centroids 个不同取值"""
    rng = np.random.default_rng(seed)
    dsub = dim // num_subspaces
    blocks = []
    for _ in range(num_subspaces):
        values = rng.integers(-20, 20, size=(centroids, dsub)).astype(np.float32)
        while len(np.unique(values, axis=0)) < centroids:
            values = rng.integers(-20, 20, size=(centroids, dsub)).astype(np.float32)
        pick = np.concatenate([np.arange(centroids), rng.integers(0, centroids, num_rows - centroids)])
        blocks.append(values[pick])
    return FeatureMatrix(np.concatenate(blocks, axis=1), "entity")


class TestFeatureFile:
    def test_header_and_payload(self, tmp_path):
        features = load_features(_raw_file(tmp_path, 2, 4, np.arange(8)))
        assert (features.rows, features.dim) == (2, 4)
        assert features.data[1].tolist() == [4.0, 5.0, 6.0, 7.0]

    def test_nan_names_row(self, tmp_path):
        values = np.zeros(8)
        values[5] = np.nan
        with pytest.raises(FeatureFormatError) as info:
            load_features(_raw_file(tmp_path, 2, 4, values))
        assert info.value.row == 1

    def test_payload_mismatch(self, tmp_path):
        with pytest.raises(FeatureFormatError, match="dimension mismatch"):
            load_features(_raw_file(tmp_path, 2, 4, np.zeros(7)))

    def test_bad_magic(self, tmp_path):
        with pytest.raises(FeatureFormatError):
            load_features(_raw_file(tmp_path, 1, 1, [0.0], magic=b"XXXX"))

    def test_row_count_checked(self, tmp_path):
        with pytest.raises(FeatureFormatError):
            load_features(_raw_file(tmp_path, 2, 2, np.zeros(4)), expected_rows=3)

    def test_save_load_bitwise(self, tmp_path):
        data = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
        path = str(tmp_path / "saved.bin")
        save_features(path, FeatureMatrix(data, "relation"))
        loaded = load_features(path, kind="relation")
        assert loaded.data.tobytes() == data.tobytes()
        assert loaded.kind == "relation"


class TestTrainPQ:
    def test_exact_clustering_has_zero_error(self):
        features = _clusterable(40, 8, 2, 6)
        index = train_pq(features, num_subspaces=2, centroids=6, seed=1)
        assert quantization_error(index, features) == pytest.approx(0.0, abs=1e-10)
        assert (index.codes < 6).all()

    def test_deterministic(self):
        features = FeatureMatrix(np.random.default_rng(3).normal(size=(100, 8)).astype(np.float32))
        a = train_pq(features, num_subspaces=4, centroids=8, seed=5)
        b = train_pq(features, num_subspaces=4, centroids=8, seed=5)
        np.testing.assert_array_equal(a.codebooks, b.codebooks)
        np.testing.assert_array_equal(a.codes, b.codes)

    def test_error_below_variance(self):
        data = np.random.default_rng(0).normal(size=(512, 64)).astype(np.float32)
        features = FeatureMatrix(data)
        index = train_pq(features, num_subspaces=8, centroids=16, seed=0)
        variance = float(np.mean(np.sum((data - data.mean(axis=0)) ** 2, axis=1)))
        assert quantization_error(index, features) < variance
        assert np.isfinite(index.codebooks).all()

    def test_centroids_are_cluster_means(self):
        data = np.random.default_rng(4).normal(size=(60, 2)).astype(np.float32)
        index = train_pq(FeatureMatrix(data), num_subspaces=1, centroids=4, iters=200, seed=2)
        codes = index.codes[:, 0]
        for c in np.unique(codes):
            np.testing.assert_allclose(index.codebooks[0, c], data[codes == c].astype(np.float64).mean(axis=0),
                                       rtol=1e-5, atol=1e-6)

    def test_fewer_distinct_values_than_centroids(self):
        data = np.zeros((10, 4), dtype=np.float32)
        data[5:, :2] = 3.0
        features = FeatureMatrix(data)
        index = train_pq(features, num_subspaces=2, centroids=4, seed=0)
        assert quantization_error(index, features) == pytest.approx(0.0, abs=1e-12)
        assert len(np.unique(index.codes[:, 1])) == 1

    def test_indivisible_dim(self):
        with pytest.raises(PQTrainingError):
            train_pq(FeatureMatrix(np.zeros((10, 6), dtype=np.float32)), num_subspaces=4, centroids=2)

    def test_too_few_rows(self):
        with pytest.raises(PQTrainingError):
            train_pq(FeatureMatrix(np.zeros((3, 4), dtype=np.float32)), num_subspaces=2, centroids=4)

    def test_save_load(self, tmp_path):
        features = _clusterable(20, 4, 2, 4)
        index = train_pq(features, num_subspaces=2, centroids=4)
        path = str(tmp_path / "pq.npz")
        index.save(path)
        loaded = PQIndex.load(path)
        np.testing.assert_array_equal(loaded.codes, index.codes)
        assert loaded.trained_on_dim == 4


class TestKnn:
    def test_self_query(self):
        features = _clusterable(30, 8, 2, 5)
        index = train_pq(features, num_subspaces=2, centroids=5)
        row, dist = pq_knn(index, features.data[0], k=1)[0]
        assert dist == 0.0
        assert np.array_equal(features.data[row], features.data[0])

    def test_k_larger_than_rows(self):
        features = _clusterable(12, 4, 2, 3)
        index = train_pq(features, num_subspaces=2, centroids=3)
        assert len(pq_knn(index, features.data[0], k=100)) == 12

    def test_ties_by_row(self):
        features = _clusterable(12, 4, 2, 3)
        index = train_pq(features, num_subspaces=2, centroids=3)
        hits = pq_knn(index, features.data[0], k=12)
        for (r1, d1), (r2, d2) in zip(hits, hits[1:]):
            assert d1 < d2 or (d1 == d2 and r1 < r2)

    def test_zero_error_row_distance_is_exact(self):
        features = _clusterable(30, 8, 2, 5)
        index = train_pq(features, num_subspaces=2, centroids=5)
        query = np.random.default_rng(9).normal(size=8)
        for row, dist in pq_knn(index, query, k=30):
            exact = float(np.linalg.norm(query - features.data[row]))
            assert dist == pytest.approx(exact, rel=1e-5)

    def test_single_subspace_is_exact_knn(self):
        data = np.random.default_rng(2).normal(size=(20, 8)).astype(np.float32)
        index = train_pq(FeatureMatrix(data), num_subspaces=1, centroids=20)
        query = np.random.default_rng(3).normal(size=8)
        exact = np.argsort(np.linalg.norm(data.astype(np.float64) - query, axis=1))[:5]
        assert [row for row, _ in pq_knn(index, query, k=5)] == exact.tolist()

    def test_recall_against_exact(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(512, 64)).astype(np.float32)
        index = train_pq(FeatureMatrix(data), num_subspaces=64, centroids=64, seed=0)
        recalls = []
        for q in rng.normal(size=(10, 64)):
            exact = set(np.argsort(np.linalg.norm(data - q, axis=1))[:10].tolist())
            approx = {row for row, _ in pq_knn(index, q, k=10)}
            recalls.append(len(exact & approx) / 10)
        assert np.mean(recalls) >= 0.5

    def test_dim_mismatch(self):
        index = train_pq(_clusterable(12, 4, 2, 3), num_subspaces=2, centroids=3)
        with pytest.raises(DimensionError):
            pq_knn(index, np.zeros(5), k=1)

    def test_k_must_be_positive(self):
        index = train_pq(_clusterable(12, 4, 2, 3), num_subspaces=2, centroids=3)
        with pytest.raises(ValueError):
            pq_knn(index, np.zeros(4), k=0)


class TestSemanticRetrieve:
    @pytest.fixture
    def setup(self):
        entities = _clusterable(20, 8, 2, 4, seed=4)
        index = train_pq(entities, num_subspaces=2, centroids=4)
        relations = FeatureMatrix(entities.data[[3, 7]].copy(), "relation")
        return entities, index, relations

    def test_matching_entity_ranked_first(self, setup):
        entities, index, relations = setup
        top = semantic_retrieve(index, relations, 0, k=5).entries[0]
        assert np.array_equal(entities.data[top.entity], relations.data[0])
        assert top.score == 0.0
        assert top.source == "semantic"

    def test_independent_of_head(self, setup):
        _, index, relations = setup
        a = semantic_retrieve(index, relations, 1, k=10, h=0)
        b = semantic_retrieve(index, relations, 1, k=10, h=9)
        assert a.entities == b.entities
        assert a.scores == b.scores
        assert b.query == (9, 1)

    def test_equals_exact_ranking(self, setup):
        entities, index, relations = setup
        got = semantic_retrieve(index, relations, 1, k=20)
        dist = np.linalg.norm(entities.data.astype(np.float64) - relations.data[1].astype(np.float64), axis=1)
        expected = np.lexsort((np.arange(20), dist)).tolist()
        assert got.entities == expected
        assert got.scores == pytest.approx((-dist[expected]).tolist(), rel=1e-5, abs=1e-6)

    def test_relation_out_of_range(self, setup):
        _, index, relations = setup
        with pytest.raises(IdRangeError):
            semantic_retrieve(index, relations, 2)

    def test_relation_dim_mismatch(self, setup):
        _, index, _ = setup
        with pytest.raises(DimensionError):
            semantic_retrieve(index, FeatureMatrix(np.zeros((1, 4), dtype=np.float32), "relation"), 0)
