"""内置玩具数据集：4x10 网格 + 10 个列实体，8 种关系

每种路径规则在这里都有对应的模式：right2 = right∘right，diag = right∘down，
left 是 right 的反向，in_column/col_next 给关系到实体的规则提供共现。
"""
import logging
import os
from dataclasses import dataclass

import numpy as np

from modules.graph_store import write_triples
from modules.semantic import FeatureMatrix, save_features

logger = logging.getLogger(__name__)

ROWS = 4
COLS = 10
FEATURE_DIM = 16
RELATIONS = ("right", "down", "right2", "diag", "left", "in_column", "col_next", "up2")
HELD_OUT_PER_RELATION = 4


@dataclass(frozen=True)
class ToyDataset:
    train: np.ndarray
    valid: np.ndarray
    entity_features: FeatureMatrix
    relation_features: FeatureMatrix
    entity_labels: tuple
    relation_labels: tuple = RELATIONS

    @property
    def num_entities(self):
        return len(self.entity_labels)

    @property
    def num_relations(self):
        return len(self.relation_labels)


def _cell(i, c):
    return i * COLS + c


def _column(c):
    return ROWS * COLS + c


def grid_triples():
    """全部三元组（未切分）"""
    out = []
    for i in range(ROWS):
        for c in range(COLS):
            e = _cell(i, c)
            if c + 1 < COLS:
                out.append((e, 0, _cell(i, c + 1)))
                out.append((_cell(i, c + 1), 4, e))
            if i + 1 < ROWS:
                out.append((e, 1, _cell(i + 1, c)))
            if c + 2 < COLS:
                out.append((e, 2, _cell(i, c + 2)))
            if i + 1 < ROWS and c + 1 < COLS:
                out.append((e, 3, _cell(i + 1, c + 1)))
            out.append((e, 5, _column(c)))
            if i >= 2:
                out.append((e, 7, _cell(i - 2, c)))
    for c in range(COLS - 1):
        out.append((_column(c), 6, _column(c + 1)))
    return np.array(sorted(out), dtype=np.int64)


def build_toy_dataset(seed=0):
    """确定性地生成玩具数据集；每种网格关系留出几条作为验证集"""
    rng = np.random.default_rng(seed)
    triples = grid_triples()
    held = np.zeros(len(triples), dtype=bool)
    for rel in (0, 1, 2, 3, 4, 7):
        idx = np.flatnonzero(triples[:, 1] == rel)
        held[rng.choice(idx, size=HELD_OUT_PER_RELATION, replace=False)] = True

    num_entities = ROWS * COLS + COLS
    # 实体特征：(行, 列, 是否列实体) 的随机投影加少量噪声
    coords = np.zeros((num_entities, 3))
    for i in range(ROWS):
        for c in range(COLS):
            coords[_cell(i, c)] = (i / (ROWS - 1), c / (COLS - 1), 0.0)
    for c in range(COLS):
        coords[_column(c)] = (0.5, c / (COLS - 1), 1.0)
    basis = rng.normal(size=(3, FEATURE_DIM))
    entity = coords @ basis + 0.05 * rng.normal(size=(num_entities, FEATURE_DIM))
    relation = rng.normal(size=(len(RELATIONS), FEATURE_DIM))

    labels = tuple(f"cell_{i}_{c}" for i in range(ROWS) for c in range(COLS)) + tuple(
        f"column_{c}" for c in range(COLS))
    return ToyDataset(
        train=triples[~held],
        valid=triples[held],
        entity_features=FeatureMatrix(entity.astype(np.float32), "entity"),
        relation_features=FeatureMatrix(relation.astype(np.float32), "relation"),
        entity_labels=labels,
    )


def write_toy_dataset(out_dir, seed=0):
    """写出 train.txt / valid.txt / 特征文件 / 词表"""
    data = build_toy_dataset(seed)
    os.makedirs(out_dir, exist_ok=True)
    write_triples(os.path.join(out_dir, "train.txt"), data.train)
    write_triples(os.path.join(out_dir, "valid.txt"), data.valid)
    save_features(os.path.join(out_dir, "entity_features.bin"), data.entity_features)
    save_features(os.path.join(out_dir, "relation_features.bin"), data.relation_features)
    for name, labels in (("entities.txt", data.entity_labels), ("relations.txt", data.relation_labels)):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as f:
            f.write("\n".join(labels) + "\n")
    logger.info("玩具数据集写入 %s: 训练 %d 条, 验证 %d 条", out_dir, len(data.train), len(data.valid))
    return data
