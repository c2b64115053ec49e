import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.graph_store import KnowledgeGraph  # noqa: E402
from modules.toy_data import write_toy_dataset  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs on the bundled toy dataset")


# -------------------------------------------------------------------------------------------------
# 手写小图
# -------------------------------------------------------------------------------------------------

@pytest.fixture
def three_triple_graph():
    '''{(0,0,1), (0,1,1), (0,0,2)}'''
    return KnowledgeGraph.from_triples([(0, 0, 1), (0, 1, 1), (0, 0, 2)], num_entities=3, num_relations=2)


@pytest.fixture
def chain_graph():
    '''0 -r0-> 1 -r1-> 2 -r0-> 3, 另有 2 -r1-> 0'''
    return KnowledgeGraph.from_triples(
        [(0, 0, 1), (1, 1, 2), (2, 0, 3), (2, 1, 0)], num_entities=5, num_relations=2)


def random_graph(seed, max_triples=1000, max_entities=30, max_relations=5):
    rng = np.random.default_rng(seed)
    num_entities = int(rng.integers(5, max_entities + 1))
    num_relations = int(rng.integers(1, max_relations + 1))
    n = int(rng.integers(1, max_triples + 1))
    triples = np.stack([
        rng.integers(0, num_entities, n),
        rng.integers(0, num_relations, n),
        rng.integers(0, num_entities, n),
    ], axis=1)
    return KnowledgeGraph.from_triples(triples, num_entities, num_relations)


@pytest.fixture
def graph_factory():
    '''按种子生成随机图（不超过 1000 条三元组）'''
    return random_graph


# -------------------------------------------------------------------------------------------------
# 玩具数据集
# -------------------------------------------------------------------------------------------------

@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    write_toy_dataset(str(out), seed=0)
    return str(out)


def fast_variant(tag, kind, dim, steps=150, **extra):
    variant = {
        "tag": tag,
        "kind": kind,
        "dim": dim,
        "train": {"batch_size": 64, "negative_sample_size": 16, "learning_rate": 0.5,
                  "lr_decay_step": 1000, "max_steps": steps, "log_every": 50},
    }
    if kind == "NOTE":
        variant["group_size"] = 4
    variant.update(extra)
    return variant


@pytest.fixture
def toy_config(tmp_path, toy_dir):
    '''写出一个训练步数很少的玩具配置，返回路径'''

    def make(semantic=True, variants=None, stage_dir="stages", **sections):
        data = {
            "dataset": {
                "train": os.path.join(toy_dir, "train.txt"),
                "valid": os.path.join(toy_dir, "valid.txt"),
                "num_entities": 50,
                "num_relations": 8,
                "entity_features": os.path.join(toy_dir, "entity_features.bin"),
                "relation_features": os.path.join(toy_dir, "relation_features.bin"),
            },
            "retrieval": {
                "semantic": {"enabled": semantic, "num_subspaces": 4, "centroids": 16, "k": 20},
            },
            "kge": variants or [
                fast_variant("TransE-0", "TransE", 16),
                fast_variant("NOTE-0", "NOTE", 16),
            ],
            "seed": 0,
            "stage_dir": str(tmp_path / stage_dir),
            "deterministic": True,
        }
        data.update(sections)
        path = tmp_path / f"config_{stage_dir}.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    return make
