import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from modules.candidates import CandidateList
from modules.errors import (ConfigError, DimensionError, KindMismatchError, RankDeficientError,
                            TrainingDivergedError)
from modules.graph_store import KnowledgeGraph
from modules.kge import (EmbeddingInit, TrainConfig, build_model, default_dim, default_train_config, gram_schmidt,
                         load_checkpoint, neighbor_enhanced_init, predict, save_checkpoint, score_candidates,
                         score_complex, score_note, score_transe, train)
from modules.semantic import FeatureMatrix


def _set_entities(model, rows):
    with torch.no_grad():
        model.encoder.free.weight.copy_(torch.tensor(rows, dtype=model.encoder.free.weight.dtype))


def _set_relations(model, rows):
    with torch.no_grad():
        model.relation_emb.weight.copy_(torch.tensor(rows, dtype=model.relation_emb.weight.dtype))


def _features(rows, dim, seed=0):
    return FeatureMatrix(np.random.default_rng(seed).normal(size=(rows, dim)).astype(np.float32), "entity")


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.negative_sample_size, cfg.learning_rate) == (1000, 1000, 0.1)
        assert (cfg.regularization, cfg.encoder_learning_rate, cfg.lr_decay_step) == (1e-9, 4e-5, 2000)
        assert default_train_config("TransE").batch_size == 16384
        assert default_train_config("NOTE", max_steps=5).max_steps == 5
        assert default_dim("NOTE") == 200 and default_dim("ComplEx") == 600

    @pytest.mark.parametrize("key, value", [("batch_size", 0), ("negative_sample_size", -1), ("max_steps", 0),
                                            ("learning_rate", -0.1), ("loss", "hinge")])
    def test_invalid(self, key, value):
        with pytest.raises(ConfigError) as info:
            TrainConfig(**{key: value})
        assert info.value.key == key

    def test_init_requires_feature_source(self):
        with pytest.raises(ConfigError):
            EmbeddingInit(mode="feature")
        with pytest.raises(ConfigError):
            EmbeddingInit(mode="spectral")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            build_model("RotatE", 3, 1, 4)


class TestNeighborEnhancedInit:
    def test_single_neighbor(self):
        kg = KnowledgeGraph.from_triples([(0, 0, 1)], 3, 1)
        features = _features(3, 4)
        out = neighbor_enhanced_init(kg, features)
        np.testing.assert_array_equal(out.data[0], features.data[1])
        np.testing.assert_array_equal(out.data[2], np.zeros(4, dtype=np.float32))

    def test_sum_of_neighbors(self, chain_graph):
        features = _features(5, 3)
        out = neighbor_enhanced_init(chain_graph, features)
        expected = features.data[1].astype(np.float64) + features.data[2].astype(np.float64)
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-6)

    def test_duplicate_edges_counted_once(self):
        features = _features(2, 3)
        once = neighbor_enhanced_init(KnowledgeGraph.from_triples([(0, 0, 1)], 2, 2), features)
        twice = neighbor_enhanced_init(KnowledgeGraph.from_triples([(0, 0, 1), (0, 1, 1), (1, 0, 0)], 2, 2), features)
        np.testing.assert_array_equal(once.data, twice.data)

    def test_neighbor_order_irrelevant(self, graph_factory):
        kg = graph_factory(7)
        features = _features(kg.num_entities, 5)
        shuffled = KnowledgeGraph.from_triples(kg.triples[::-1].copy(), kg.num_entities, kg.num_relations)
        np.testing.assert_allclose(neighbor_enhanced_init(kg, features).data,
                                   neighbor_enhanced_init(shuffled, features).data, rtol=1e-6)

    def test_row_mismatch(self, chain_graph):
        with pytest.raises(DimensionError):
            neighbor_enhanced_init(chain_graph, _features(4, 3))


class TestTransE:
    def test_exact_translation(self):
        model = build_model("TransE", 2, 1, 2, gamma=3.0)
        _set_entities(model, [[1, 0], [1, 1]])
        _set_relations(model, [[0, 1]])
        assert score_transe(model, 0, 0, 1) == pytest.approx(3.0)

    def test_identity(self):
        model = build_model("TransE", 1, 1, 3, gamma=3.0)
        _set_relations(model, [[0, 0, 0]])
        assert score_transe(model, 0, 0, 0) == pytest.approx(3.0)

    def test_arithmetic(self):
        model = build_model("TransE", 4, 2, 6, seed=3)
        e = model.encoder.free.weight.detach().numpy().astype(np.float64)
        w = model.relation_emb.weight.detach().numpy().astype(np.float64)
        expected = 3.0 - np.linalg.norm(e[1] + w[1] - e[3])
        assert score_transe(model, 1, 1, 3) == pytest.approx(expected, abs=1e-6)

    def test_kind_mismatch(self):
        model = build_model("TransE", 2, 1, 2)
        with pytest.raises(KindMismatchError):
            score_complex(model, 0, 0, 1)
        with pytest.raises(KindMismatchError):
            score_note(model, 0, 0, 1)


class TestComplEx:
    def test_real_one_dim(self):
        model = build_model("ComplEx", 2, 1, 2)
        _set_entities(model, [[2, 0], [3, 0]])
        _set_relations(model, [[1, 0]])
        assert score_complex(model, 0, 0, 1) == pytest.approx(6.0)

    def test_imaginary_relation_on_real_entities(self):
        model = build_model("ComplEx", 1, 1, 2)
        _set_entities(model, [[2, 0]])
        _set_relations(model, [[0, 1]])
        assert score_complex(model, 0, 0, 0) == 0.0

    def test_complex_oracle(self):
        model = build_model("ComplEx", 5, 2, 8, seed=1)
        e = model.encoder.free.weight.detach().numpy().astype(np.float64)
        w = model.relation_emb.weight.detach().numpy().astype(np.float64)
        to_complex = lambda v: v[:4] + 1j * v[4:]  # noqa: E731
        expected = np.real(np.sum(to_complex(w[1]) * to_complex(e[2]) * np.conj(to_complex(e[4]))))
        assert score_complex(model, 2, 1, 4) == pytest.approx(expected, abs=1e-6)

    def test_symmetric_when_relation_is_real(self):
        model = build_model("ComplEx", 6, 1, 8, seed=2)
        with torch.no_grad():
            model.relation_emb.weight[:, 4:] = 0.0
        for h in range(6):
            for t in range(6):
                assert score_complex(model, h, 0, t) == score_complex(model, t, 0, h)

    def test_antisymmetric_case(self):
        model = build_model("ComplEx", 2, 1, 2)
        _set_entities(model, [[1, 0], [0, 1]])
        _set_relations(model, [[0, 1]])
        assert score_complex(model, 0, 0, 1) != score_complex(model, 1, 0, 0)

    def test_odd_dim(self):
        with pytest.raises(DimensionError):
            build_model("ComplEx", 2, 1, 3)


class TestGramSchmidt:
    def test_identity(self):
        np.testing.assert_allclose(gram_schmidt(np.eye(3)), np.eye(3))

    def test_scaling_removed(self):
        np.testing.assert_allclose(gram_schmidt(np.array([[2.0, 0.0], [0.0, 3.0]])), np.eye(2))

    def test_random_orthonormal(self):
        M = np.random.default_rng(0).normal(size=(20, 20))
        Q = gram_schmidt(M)
        np.testing.assert_allclose(Q.T @ Q, np.eye(20), atol=1e-5)
        # 第一列只做归一化
        np.testing.assert_allclose(Q[:, 0], M[:, 0] / np.linalg.norm(M[:, 0]), atol=1e-10)

    def test_batched_tensor(self):
        M = torch.randn(3, 2, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        Q = gram_schmidt(M)
        eye = torch.eye(4, dtype=torch.float64).expand(3, 2, 4, 4)
        assert torch.allclose(Q.transpose(-1, -2) @ Q, eye, atol=1e-8)

    def test_rank_deficient(self):
        with pytest.raises(RankDeficientError) as info:
            gram_schmidt(np.array([[1, 2], [2, 4]]))
        assert info.value.column == 1


class TestNote:
    @staticmethod
    def _model(M, s, entities, gamma=3.0):
        dim = len(entities[0])
        model = build_model("NOTE", len(entities), 1, dim, gamma=gamma, group_size=len(M))
        _set_entities(model, entities)
        with torch.no_grad():
            model.rel_matrix.copy_(torch.tensor(M, dtype=torch.float32).reshape(model.rel_matrix.shape))
            model.rel_scale.copy_(torch.tensor(s, dtype=torch.float32).reshape(model.rel_scale.shape))
        return model

    def test_identity_transform(self):
        model = self._model(np.eye(2), [0, 0], [[0.3, -0.4], [1.0, 1.0]])
        assert score_note(model, 0, 0, 0) == pytest.approx(3.0)

    def test_hand_computed_group(self):
        model = self._model([[3, 1], [4, 2]], [0, math.log(2)], [[1, 0], [0, 1]])
        # Q = [[0.6,-0.8],[0.8,0.6]]，缩放 (0.5, 1)
        assert score_note(model, 0, 0, 1) == pytest.approx(3.0 - math.sqrt(0.13), abs=1e-6)

    def test_both_directions_zero_distance(self):
        M = np.array([[3.0, 1.0], [4.0, 2.0]])
        e_h = np.array([0.5, -1.0])
        e_t = gram_schmidt(M) @ e_h
        model = self._model(M, [0, 0], [e_h.tolist(), e_t.tolist()])
        assert score_note(model, 0, 0, 1, "head_to_tail") == pytest.approx(3.0, abs=1e-6)
        assert score_note(model, 0, 0, 1, "tail_to_head") == pytest.approx(3.0, abs=1e-6)

    def test_normalized_scale_peak_is_one(self):
        s = torch.randn(3, 5, 4, generator=torch.Generator().manual_seed(1)) * 30
        w = build_model("NOTE", 2, 1, 4, group_size=4).normalized_scale(s)
        assert torch.allclose(w.amax(dim=-1), torch.ones(3, 5))
        assert torch.isfinite(w).all()

    def test_dim_not_divisible(self):
        with pytest.raises(DimensionError):
            build_model("NOTE", 2, 1, 10, group_size=4)

    def test_unknown_direction(self):
        model = build_model("NOTE", 2, 1, 4, group_size=2)
        with pytest.raises(ValueError):
            score_note(model, 0, 0, 1, direction="sideways")

    def test_rank_deficiency_propagates(self):
        model = self._model([[1, 1], [0, 0]], [0, 0], [[1, 0], [0, 1]])
        with pytest.raises(RankDeficientError):
            score_note(model, 0, 0, 1)


def _gradcheck_model(kind, seed, projection=False):
    kg = KnowledgeGraph.from_triples([(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 0)], 4, 2)
    dim = 4
    model = build_model(kind, 4, 2, dim, group_size=2, seed=seed)
    if projection:
        model.apply_init(EmbeddingInit("feature", _features(4, 3, seed), projection=True, activation="none"), kg)
    if kind == "NOTE":
        with torch.no_grad():
            model.rel_scale.copy_(torch.randn(model.rel_scale.shape, generator=torch.Generator().manual_seed(seed)))
    return model.double()


@pytest.mark.parametrize("kind", ["TransE", "ComplEx", "NOTE"])
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("projection", [False, True])
def test_loss_gradients_match_finite_differences(kind, seed, projection):
    model = _gradcheck_model(kind, seed, projection)
    names = [name for name, _ in model.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in model.named_parameters())
    batch = torch.tensor([[0, 0, 1], [2, 1, 3]])
    negatives = torch.tensor([[2, 3], [0, 1]])
    # 温度为 0 时自对抗权重是常数，损失处处可导
    cfg = TrainConfig(adversarial_temperature=0.0, regularization=1e-2)

    def loss(*tensors):
        return functional_call(model, dict(zip(names, tensors)), (batch, negatives, cfg))

    assert torch.autograd.gradcheck(loss, params, eps=1e-6, atol=1e-7, rtol=1e-4)


class TestTrain:
    @staticmethod
    def _cfg(**overrides):
        base = dict(batch_size=8, negative_sample_size=4, learning_rate=0.5, lr_decay_step=1000, max_steps=200,
                    log_every=50)
        base.update(overrides)
        return TrainConfig(**base)

    @pytest.fixture
    def small_graph(self):
        rng = np.random.default_rng(0)
        triples = {(int(rng.integers(10)), int(rng.integers(2)), int(rng.integers(10))) for _ in range(40)}
        return KnowledgeGraph.from_triples(sorted(triples)[:20], 10, 2)

    def test_loss_decreases(self, small_graph):
        _, trace = train(build_model("TransE", 10, 2, 8), small_graph, None, self._cfg())
        assert len(trace) == 200
        assert np.mean(trace[-20:]) < np.mean(trace[:20])

    def test_zero_learning_rate_keeps_parameters(self, small_graph):
        model = build_model("NOTE", 10, 2, 8, group_size=4)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(model, small_graph, None, self._cfg(learning_rate=0.0, encoder_learning_rate=0.0, max_steps=5))
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v), k

    def test_deterministic(self, small_graph):
        _, a = train(build_model("ComplEx", 10, 2, 8, seed=1), small_graph, None, self._cfg(max_steps=30))
        _, b = train(build_model("ComplEx", 10, 2, 8, seed=1), small_graph, None, self._cfg(max_steps=30))
        assert a == b

    def test_sharding_matches_single_pass(self, small_graph):
        _, whole = train(build_model("TransE", 10, 2, 8), small_graph, None, self._cfg(max_steps=5))
        _, sharded = train(build_model("TransE", 10, 2, 8), small_graph, None, self._cfg(max_steps=5, num_shards=2))
        assert sharded == pytest.approx(whole, rel=1e-4)

    def test_gradient_accumulation_gives_same_parameters(self, small_graph):
        whole, _ = train(build_model("ComplEx", 10, 2, 8, seed=2), small_graph, None, self._cfg(max_steps=5))
        accumulated, _ = train(build_model("ComplEx", 10, 2, 8, seed=2), small_graph, None,
                               self._cfg(max_steps=5, num_shards=3))
        for (name, a), (_, b) in zip(whole.state_dict().items(), accumulated.state_dict().items()):
            np.testing.assert_allclose(a.numpy(), b.numpy(), rtol=1e-4, atol=1e-6, err_msg=name)

    def test_divergence_reports_step(self, small_graph):
        model = build_model("TransE", 10, 2, 8)
        with torch.no_grad():
            model.encoder.free.weight.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError) as info:
            train(model, small_graph, None, self._cfg(max_steps=3))
        assert info.value.step == 1

    def test_note_stays_orthonormal_and_finite(self, small_graph):
        model, _ = train(build_model("NOTE", 10, 2, 8, group_size=4), small_graph, None, self._cfg(max_steps=50))
        with torch.no_grad():
            Q = model.orthogonal(torch.arange(2)).double()
            eye = torch.eye(4, dtype=torch.float64).expand_as(Q)
            assert torch.allclose(Q.transpose(-1, -2) @ Q, eye, atol=1e-5)
        assert all(torch.isfinite(p).all() for p in model.parameters())

    def test_projection_uses_encoder_rate(self, small_graph):
        model = build_model("TransE", 10, 2, 8)
        init = EmbeddingInit("neighbor_enhanced", _features(10, 6), projection=True)
        model.apply_init(init, small_graph)
        before = model.encoder.projection.linear.weight.detach().clone()
        free_before = model.encoder.free.weight.detach().clone()
        train(model, small_graph, None, self._cfg(encoder_learning_rate=0.0, max_steps=5))
        assert torch.equal(model.encoder.projection.linear.weight, before)
        assert not torch.equal(model.encoder.free.weight, free_before)

    def test_feature_init_without_projection_needs_matching_dim(self, small_graph):
        model = build_model("TransE", 10, 2, 8)
        with pytest.raises(DimensionError):
            model.apply_init(EmbeddingInit("feature", _features(10, 6)), small_graph)
        model.apply_init(EmbeddingInit("feature", _features(10, 8)), small_graph)
        np.testing.assert_array_equal(model.encoder.free.weight.detach().numpy(), _features(10, 8).data)

    @pytest.mark.slow
    def test_translation_composes_on_chain(self):
        triples = []
        for i in range(10):
            a, b, c = i, 10 + i, 20 + i
            triples += [(a, 0, b), (b, 1, c), (a, 2, c)]
        kg = KnowledgeGraph.from_triples(triples, 30, 3)
        # margin 远大于实体间距，正样本项始终有梯度，正三元组距离被压到 0 附近
        cfg = TrainConfig(batch_size=30, negative_sample_size=8, learning_rate=0.5, lr_decay_step=1500,
                          max_steps=4000, regularization=0.0, loss="margin", log_every=1000)
        model, _ = train(build_model("TransE", 30, 3, 16, gamma=30.0, seed=0), kg, None, cfg)
        w = model.relation_emb.weight.detach().double()
        residual = float((w[0] + w[1] - w[2]).norm())
        scale = float(model.encoder.free.weight.detach().double().norm(dim=-1).mean())
        assert residual / scale < 0.1


class TestPredict:
    def test_single_candidate(self):
        model = build_model("TransE", 3, 1, 4)
        cands = CandidateList.from_scores((0, 0), [2], [0.7], "rule_HT")
        out = predict(model, (0, 0), cands)
        assert out.entities == [2]
        assert out.entries[0].retrieval_score == 0.7
        assert out.entries[0].source == "rule_HT"

    def test_exact_translation_ranked_first(self):
        model = build_model("TransE", 4, 1, 2)
        _set_entities(model, [[0, 0], [5, 5], [1, 1], [-3, 2]])
        _set_relations(model, [[1, 1]])
        cands = CandidateList.from_scores((0, 0), [1, 2, 3], [3.0, 2.0, 1.0], "fused")
        assert predict(model, (0, 0), cands).entities[0] == 2

    def test_scores_match_single_calls(self):
        model = build_model("NOTE", 6, 2, 4, group_size=2, seed=5)
        cands = CandidateList.from_scores((1, 1), [0, 2, 3, 5], [4.0, 3.0, 2.0, 1.0], "fused")
        out = predict(model, (1, 1), cands)
        for c in out:
            assert c.score == pytest.approx(score_note(model, 1, 1, c.entity), abs=1e-6)
        assert out.scores == sorted(out.scores, reverse=True)
        assert len(score_candidates(model, (1, 1), [])) == 0


def test_checkpoint_round_trip(tmp_path, chain_graph):
    model = build_model("NOTE", 5, 2, 4, group_size=2, seed=4)
    model.apply_init(EmbeddingInit("neighbor_enhanced", _features(5, 3), projection=True), chain_graph)
    path = str(tmp_path / "note.kgem")
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.kind == "NOTE" and loaded.init_mode == "neighbor_enhanced"
    for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), name
    np.testing.assert_array_equal(score_candidates(model, (0, 1), [1, 2, 3]),
                                  score_candidates(loaded, (0, 1), [1, 2, 3]))


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bogus.kgem"
    path.write_bytes(b"NOPE")
    with pytest.raises(ConfigError):
        load_checkpoint(str(path))
