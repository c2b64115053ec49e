import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from tqdm import tqdm

from modules.candidates import DEFAULT_CAP, CandidateList
from modules.errors import EmptyInputError, IdRangeError
from modules.graph_store import KnowledgeGraph, expand_neighborhood, sample_neighbors

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 1e-6
DEFAULT_CONTEXT_HOPS = 3


@dataclass(frozen=True)
class PriorTables:
    p_e: np.ndarray  # 实体先验：度 / 总度数
    p_r: np.ndarray  # 关系先验：频次 / 三元组数


@dataclass(frozen=True)
class TypingModel:
    """基于计数的实体类型模型 p(r|e)

    weighted_counts[e, r] 是采样邻域中关系 r 的加权次数，
    p(r|e) = (weighted_counts[e, r] + smoothing) / (totals[e] + smoothing * R)。
    """
    weighted_counts: sparse.csr_matrix
    totals: np.ndarray
    smoothing: float
    neighbor_sample_size: int
    upsample_weights: np.ndarray  # 已按均值归一化

    @property
    def num_relations(self):
        return self.weighted_counts.shape[1]

    def distribution(self, e):
        """实体 e 在全部关系上的分布"""
        row = self.weighted_counts[e].toarray().ravel()
        denom = self.totals[e] + self.smoothing * self.num_relations
        if denom <= 0:
            return np.zeros(self.num_relations)
        return (row + self.smoothing) / denom

    def column(self, entities, r):
        """一批实体的 p(r|e)"""
        entities = np.asarray(entities, dtype=np.int64)
        counts = self.weighted_counts[entities][:, [r]].toarray().ravel()
        denom = self.totals[entities] + self.smoothing * self.num_relations
        out = np.zeros(len(entities))
        ok = denom > 0
        out[ok] = (counts[ok] + self.smoothing) / denom[ok]
        return out


@dataclass(frozen=True)
class MaskingResult:
    mrr: float
    num_scored: int
    num_skipped: int  # 屏蔽后没有剩余边的实体


def estimate_priors(kg):
    """度先验"""
    if kg.num_triples == 0:
        raise EmptyInputError("empty graph")
    total_degree = kg.entity_degree.sum()
    return PriorTables(
        p_e=kg.entity_degree / total_degree,
        p_r=kg.relation_freq / kg.num_triples,
    )


def load_upsample_weights(path, num_relations):
    """上采样权重文件，每行 "relation_id weight"，未列出的关系权重为 1"""
    weights = np.ones(num_relations)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rel, w = line.split()
            rel, w = int(rel), float(w)
            if not 0 <= rel < num_relations:
                raise IdRangeError(f"relation id out of range at line {line_no}")
            weights[rel] = w
    return weights


def _normalized_weights(upsample_weights, num_relations):
    if upsample_weights is None:
        return np.ones(num_relations)
    if isinstance(upsample_weights, dict):
        weights = np.ones(num_relations)
        for rel, w in upsample_weights.items():
            weights[int(rel)] = float(w)
    else:
        weights = np.asarray(upsample_weights, dtype=np.float64).copy()
    if weights.shape != (num_relations,) or np.any(weights <= 0):
        raise ValueError("upsample weights must be positive, one per relation")
    # 只有相对大小有意义
    return weights / weights.mean()


def fit_typing_model(kg, sample_size=10, upsample_weights=None, smoothing=DEFAULT_SMOOTHING,
                     seed=0, progress=False):
    """由每个实体的采样邻域估计 p(r|e)"""
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    weights = _normalized_weights(upsample_weights, kg.num_relations)

    rows, cols, vals = [], [], []
    for e in tqdm(range(kg.num_entities), desc=f"typing N={sample_size}", disable=not progress):
        for rel, _ in sample_neighbors(kg, e, sample_size, seed):
            rows.append(e)
            cols.append(rel)
            vals.append(weights[rel])

    counts = sparse.coo_matrix(
        (np.asarray(vals, dtype=np.float64), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
        shape=(kg.num_entities, kg.num_relations),
    ).tocsr()
    counts.sum_duplicates()
    totals = np.asarray(counts.sum(axis=1)).ravel()
    return TypingModel(
        weighted_counts=counts,
        totals=totals,
        smoothing=float(smoothing),
        neighbor_sample_size=int(sample_size),
        upsample_weights=weights,
    )


def mask_and_score(model, kg, mask_fraction, seed=0):
    """自监督评估：随机屏蔽部分三元组，用剩余的边重新估计 p(r|e)，统计被屏蔽关系的平均倒数排名"""
    if not 0.0 < mask_fraction < 1.0:
        raise ValueError("mask_fraction must be in (0, 1)")
    if kg.num_triples == 0:
        raise EmptyInputError("empty graph")

    rng = np.random.default_rng(seed)
    num_masked = max(1, int(round(mask_fraction * kg.num_triples)))
    masked = np.zeros(kg.num_triples, dtype=bool)
    masked[rng.choice(kg.num_triples, size=num_masked, replace=False)] = True

    remaining = KnowledgeGraph.from_triples(kg.triples[~masked], kg.num_entities, kg.num_relations)
    refit = fit_typing_model(
        remaining,
        sample_size=model.neighbor_sample_size,
        upsample_weights=model.upsample_weights,
        smoothing=model.smoothing,
        seed=seed,
    )

    rel_ids = np.arange(kg.num_relations)
    reciprocal, skipped = [], 0
    for h, r, t in kg.triples[masked]:
        for e in {int(h), int(t)}:
            if remaining.entity_degree[e] == 0:
                skipped += 1
                continue
            dist = refit.distribution(e)
            # 同分时关系 id 小的排前
            rank = 1 + np.sum(dist > dist[r]) + np.sum((dist == dist[r]) & (rel_ids < r))
            reciprocal.append(1.0 / rank)

    mrr = float(np.mean(reciprocal)) if reciprocal else 0.0
    if skipped:
        logger.info("屏蔽评估跳过 %d 个孤立实体", skipped)
    return MaskingResult(mrr=mrr, num_scored=len(reciprocal), num_skipped=skipped)


def pie_retrieve(model, priors, kg, h, r, cap=DEFAULT_CAP, seed=0, context_hops=DEFAULT_CONTEXT_HOPS,
                 max_frontier=None, source="pie"):
    """在 h 的多跳邻域内按 p(e)·p(r|e) 排序召回"""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if not 0 <= r < kg.num_relations:
        raise IdRangeError(f"relation id {r} out of range")
    pool = expand_neighborhood(kg, h, context_hops, max_frontier=max_frontier, seed=seed)
    if len(pool) == 0:
        return CandidateList(query=(int(h), int(r)), cap=cap)
    scores = priors.p_e[pool] * model.column(pool, r)
    return CandidateList.from_scores((h, r), pool, scores, source, cap=cap, drop_zero=True)
