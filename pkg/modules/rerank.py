"""重排模型集成：贪心选模型 + 网格搜索权重"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from modules.candidates import CandidateList
from modules.errors import ConfigError, DimensionError, GridTooLargeError

logger = logging.getLogger(__name__)

NORMALIZATIONS = ("rank", "minmax")
MAX_ENSEMBLE_MODELS = 6
DEFAULT_GRID_STEP = 0.1
DEFAULT_GRID_BUDGET = 200000
MRR_CUTOFF = 10


@dataclass(frozen=True)
class ModelScoreSet:
    """一个模型在共享候选列表上的逐查询得分"""
    model_tag: str
    candidates: dict  # {(h, r): 实体数组}
    scores: dict      # {(h, r): 与候选对齐的得分数组}

    def __post_init__(self):
        for q, ents in self.candidates.items():
            vals = self.scores.get(q)
            if vals is None or len(vals) != len(ents):
                raise DimensionError(f"{self.model_tag}: score vector misaligned for query {q}")
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{self.model_tag}: non-finite score for query {q}")

    @property
    def queries(self):
        return list(self.candidates)

    def ranking(self, q):
        return _rank_entities(self.candidates.get(q, ()), self.scores.get(q, ()))


@dataclass(frozen=True)
class EnsembleSpec:
    selected_models: tuple
    weights: tuple
    normalization: str = "rank"
    dev_mrr: float | None = None

    def __post_init__(self):
        if len(self.selected_models) != len(self.weights) or not self.selected_models:
            raise ConfigError("ensemble needs one weight per selected model", key="weights")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError("ensemble weights must be non-negative and sum to 1", key="weights")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}", key="normalization")


@dataclass(frozen=True)
class SelectionResult:
    tags: tuple
    trace: tuple = field(default_factory=tuple)  # 每次接受后的 dev MRR@10


def _rank_entities(entities, scores):
    entities = np.asarray(entities, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    return entities[np.lexsort((entities, -scores))]


def _as_entities(ranked):
    if isinstance(ranked, CandidateList):
        return ranked.entities
    return list(ranked)


def reciprocal_rank(ranked, answer, filtered=(), cutoff=MRR_CUTOFF):
    """答案的倒数排名；过滤掉其他已知正确尾实体后计名次，超出 cutoff 记 0"""
    rank = 0
    for e in _as_entities(ranked):
        e = int(e)
        if e == answer:
            rank += 1
            return 1.0 / rank if rank <= cutoff else 0.0
        if e not in filtered:
            rank += 1
            if rank >= cutoff:
                return 0.0
    return 0.0


def mrr_at_10(ranked, answers, filters=None):
    """MRR@10：ranked 为 {(h, r): 排好序的实体}，answers 为 EvalSplit"""
    if len(answers) == 0:
        return 0.0
    filters = filters or {}
    total = 0.0
    for q in answers.queries:
        if q in ranked:
            total += reciprocal_rank(ranked[q], answers.answers[q], filters.get(q, ()))
    return total / len(answers)


def hits_at_k(ranked, answers, k, filters=None):
    if len(answers) == 0:
        return 0.0
    filters = filters or {}
    hits = 0
    for q in answers.queries:
        if q in ranked and reciprocal_rank(ranked[q], answers.answers[q], filters.get(q, ()), cutoff=k) > 0:
            hits += 1
    return hits / len(answers)


def _normalize_vector(scores, entities, mode):
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return scores
    if mode == "rank":
        order = np.lexsort((np.asarray(entities, dtype=np.int64), -scores))
        out = np.empty(len(scores))
        out[order] = 1.0 / np.arange(1, len(scores) + 1)
        return out
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full(len(scores), 0.5)
    return (scores - lo) / (hi - lo)


def normalize_scores(score_set, mode="rank"):
    """rank：1/名次（同分按实体 id）；minmax：逐查询线性映射到 [0, 1]，常数向量映射为 0.5"""
    if mode not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {mode!r}", key="normalization")
    scores = {
        q: _normalize_vector(score_set.scores[q], ents, mode)
        for q, ents in score_set.candidates.items()
    }
    return ModelScoreSet(score_set.model_tag, score_set.candidates, scores)


def _combine(normalized, weights, q):
    ents = normalized[0].candidates.get(q)
    if ents is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    total = np.zeros(len(ents))
    for s, w in zip(normalized, weights):
        if w:
            total += w * s.scores[q]
    return np.asarray(ents, dtype=np.int64), total


def _ensemble_rankings(normalized, weights, queries):
    ranked = {}
    for q in queries:
        ents, total = _combine(normalized, weights, q)
        ranked[q] = _rank_entities(ents, total)
    return ranked


def _check_aligned(models):
    ref = models[0]
    for m in models[1:]:
        for q, ents in ref.candidates.items():
            other = m.candidates.get(q)
            if other is None or not np.array_equal(np.asarray(other), np.asarray(ents)):
                raise DimensionError(f"{m.model_tag} is not aligned with {ref.model_tag} on query {q}")


def _mrr_of(normalized, weights, dev, filters):
    queries = [q for q in dev.queries if q in normalized[0].candidates]
    return mrr_at_10(_ensemble_rankings(normalized, weights, queries), dev, filters)


def greedy_select(models, dev, normalization="rank", filters=None):
    """从 dev MRR@10 最好的单模型出发，每次加入使等权集成提升最多的模型，直到不再提升"""
    if not models:
        raise ValueError("greedy_select needs at least one model")
    _check_aligned(models)
    normalized = {m.model_tag: normalize_scores(m, normalization) for m in models}
    tags = sorted(normalized)

    def mrr(selected):
        return _mrr_of([normalized[t] for t in selected], [1.0 / len(selected)] * len(selected), dev, filters)

    best = max(tags, key=lambda t: (mrr([t]), -tags.index(t)))
    selected, current = [best], mrr([best])
    trace = [current]
    logger.info("贪心选择起点 %s, MRR@10 %.4f", best, current)
    while len(selected) < len(tags):
        best_tag, best_mrr = None, current
        for t in tags:
            if t in selected:
                continue
            value = mrr(selected + [t])
            if value > best_mrr:
                best_tag, best_mrr = t, value
        if best_tag is None:
            break
        selected.append(best_tag)
        current = best_mrr
        trace.append(current)
        logger.info("加入 %s, MRR@10 %.4f", best_tag, current)
    return SelectionResult(tags=tuple(selected), trace=tuple(trace))


def _compositions(total, parts, minimum=0):
    """total 拆成 parts 个非负整数（每个不小于 minimum），字典序升序"""
    if parts == 1:
        if total >= minimum:
            yield (total,)
        return
    for first in range(minimum, total - minimum * (parts - 1) + 1):
        for rest in _compositions(total - first, parts - 1, minimum):
            yield (first,) + rest


def grid_size(num_models, step, strictly_positive=False):
    n = _grid_units(step)
    if strictly_positive:
        return math.comb(n - 1, num_models - 1) if n >= num_models else 0
    return math.comb(n + num_models - 1, num_models - 1)


def _grid_units(step):
    if not 0 < step <= 1:
        raise ConfigError("grid step must be in (0, 1]", key="grid_step")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step {step} does not divide 1", key="grid_step")
    return n


def grid_search_weights(selected, dev, step=DEFAULT_GRID_STEP, normalization="rank", filters=None,
                        budget=DEFAULT_GRID_BUDGET, strictly_positive=False, workers=None, progress=False):
    """在步长为 step 的权重单纯形上穷举，返回 dev MRR@10 最大的权重；同分取字典序最小的权重向量"""
    if not selected:
        raise ValueError("grid search needs at least one model")
    if len(selected) > MAX_ENSEMBLE_MODELS:
        raise GridTooLargeError(f"at most {MAX_ENSEMBLE_MODELS} models can be weighted, got {len(selected)}")
    _check_aligned(selected)
    n = _grid_units(step)
    size = grid_size(len(selected), step, strictly_positive)
    if size > budget:
        raise GridTooLargeError(
            f"{size} weight vectors for {len(selected)} models at step {step} exceeds budget {budget}; "
            f"use a coarser step")
    if size == 0:
        raise GridTooLargeError(f"no strictly positive weight vector for {len(selected)} models at step {step}")

    normalized = [normalize_scores(m, normalization) for m in selected]
    grid = [tuple(c / n for c in comp) for comp in _compositions(n, len(selected), 1 if strictly_positive else 0)]

    def evaluate(weights):
        return _mrr_of(normalized, weights, dev, filters)

    bar = dict(total=len(grid), desc=f"grid {len(selected)} models", disable=not progress)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(tqdm(pool.map(evaluate, grid), **bar))
    else:
        values = [evaluate(w) for w in tqdm(grid, **bar)]

    # 网格按字典序升序，只在严格更大时替换
    best_i = 0
    for i, v in enumerate(values):
        if v > values[best_i]:
            best_i = i
    weights = grid[best_i]
    logger.info("网格搜索 %d 组权重, 最佳 %s, MRR@10 %.4f", len(grid), weights, values[best_i])
    return EnsembleSpec(
        selected_models=tuple(m.model_tag for m in selected),
        weights=weights,
        normalization=normalization,
        dev_mrr=values[best_i],
    )


def ensemble_predict(spec, models, query, cap=None):
    """按 Σ 权重·归一化得分 排序，同分按实体 id 升序"""
    by_tag = {m.model_tag: m for m in models}
    missing = [t for t in spec.selected_models if t not in by_tag]
    if missing:
        raise ConfigError(f"ensemble model(s) not available: {', '.join(missing)}", key="selected_models")
    chosen = [normalize_scores(by_tag[t], spec.normalization) for t in spec.selected_models]
    _check_aligned(chosen)
    ents, total = _combine(chosen, spec.weights, query)
    return CandidateList.from_scores(query, ents, total, "ensemble", cap=cap or max(len(ents), 1))


def ensemble_rankings(spec, models, queries):
    return {q: ensemble_predict(spec, models, q) for q in queries}


def write_ensemble_spec(path, spec):
    """每行 "model_tag weight"，另有一行 "normalization <mode>" """
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        if spec.dev_mrr is not None:
            f.write(f"# dev_mrr@10 {spec.dev_mrr!r}\n")
        f.write(f"normalization {spec.normalization}\n")
        for tag, w in zip(spec.selected_models, spec.weights):
            f.write(f"{tag} {w!r}\n")
    os.replace(tmp, path)


def read_ensemble_spec(path):
    tags, weights, normalization, dev_mrr = [], [], "rank", None
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                if len(parts) == 3 and parts[1] == "dev_mrr@10":
                    dev_mrr = float(parts[2])
                continue
            if parts[0] == "normalization":
                normalization = parts[1]
            else:
                tags.append(parts[0])
                weights.append(float(parts[1]))
    return EnsembleSpec(tuple(tags), tuple(weights), normalization, dev_mrr)


def write_predictions(path, ranked, k=MRR_CUTOFF, entity_labels=None):
    """每个查询一行："h r e1 … e10"；给了词表时头尾实体写成标签"""
    name = _entity_namer(entity_labels)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for (h, r) in sorted(ranked):
            top = [name(e) for e in _as_entities(ranked[(h, r)])[:k]]
            f.write(" ".join([name(h), str(r)] + top) + "\n")
    os.replace(tmp, path)


def labeled_examples(ranked, entity_labels=None, limit=5, k=3):
    """前 limit 个查询的前 k 名预测，用于报告"""
    name = _entity_namer(entity_labels)
    return [
        {"head": name(h), "relation": int(r), "top": [name(e) for e in _as_entities(ranked[(h, r)])[:k]]}
        for (h, r) in sorted(ranked)[:limit]
    ]


def _entity_namer(entity_labels):
    if entity_labels is None:
        return lambda e: str(int(e))
    return lambda e: entity_labels[int(e)]
