import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from modules.candidates import DEFAULT_CAP, Candidate, CandidateList

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSplit:
    """验证集：每个查询 (h, r) 一个答案；同一查询的其余尾实体记入 alternates 用于过滤"""
    queries: tuple
    answers: dict
    alternates: dict = field(default_factory=dict)

    @classmethod
    def from_triples(cls, triples):
        answers, alternates, queries = {}, defaultdict(set), []
        for h, r, t in sorted((int(h), int(r), int(t)) for h, r, t in np.asarray(triples).reshape(-1, 3)):
            q = (h, r)
            if q not in answers:
                answers[q] = t
                queries.append(q)
            elif t != answers[q]:
                alternates[q].add(t)
        return cls(queries=tuple(queries), answers=answers, alternates=dict(alternates))

    def __len__(self):
        return len(self.queries)


@dataclass(frozen=True)
class RetrievalModelReport:
    model_tag: str
    recall_at_cap: float
    accuracy: float
    priority_rank: int = 0
    fused: bool = True                  # 是否参与优先级填充
    self_eval_mrr: float | None = None  # 类型模型的屏蔽自评估


def model_accuracy(candidates, dev):
    """accuracy(m) = |S_dev ∩ S_m| / |S_m|，按全部验证查询合并计算"""
    hits, emitted = 0, 0
    for q in dev.queries:
        cands = candidates.get(q)
        if cands is None:
            continue
        emitted += len(cands)
        if dev.answers[q] in cands:
            hits += 1
    return hits / emitted if emitted else 0.0


def per_query_accuracy(candidates, dev):
    """诊断用：逐查询的命中率均值"""
    values = []
    for q in dev.queries:
        cands = candidates.get(q)
        if cands is None or len(cands) == 0:
            values.append(0.0)
        else:
            values.append((1.0 if dev.answers[q] in cands else 0.0) / len(cands))
    return float(np.mean(values)) if values else 0.0


def recall_at_cap(candidates, dev):
    """答案出现在候选列表中的查询比例"""
    if len(dev) == 0:
        return 0.0
    found = sum(1 for q in dev.queries if q in candidates and dev.answers[q] in candidates[q])
    return found / len(dev)


def priority_order(reports):
    """按 accuracy 降序，同分按标签字典序"""
    return [rep.model_tag for rep in sorted(reports, key=lambda rep: (-rep.accuracy, rep.model_tag))]


def build_reports(candidate_sets, dev, self_eval=None):
    """为每个召回模型计算召回率、准确率和优先级"""
    self_eval = self_eval or {}
    raw = [
        RetrievalModelReport(
            model_tag=tag,
            recall_at_cap=recall_at_cap(cands, dev),
            accuracy=model_accuracy(cands, dev),
            self_eval_mrr=self_eval.get(tag),
        )
        for tag, cands in candidate_sets.items()
    ]
    rank = {tag: i + 1 for i, tag in enumerate(priority_order(raw))}
    reports = [
        RetrievalModelReport(rep.model_tag, rep.recall_at_cap, rep.accuracy, rank[rep.model_tag],
                             rep.fused, rep.self_eval_mrr)
        for rep in raw
    ]
    return sorted(reports, key=lambda rep: rep.priority_rank)


def prune_below_baseline(reports, baseline_prefix="pie", rule_prefix="rule_"):
    """只保留准确率高于最佳基线（PIE）模型的规则召回，其余模型不受影响"""
    baseline = [rep.accuracy for rep in reports if rep.model_tag.startswith(baseline_prefix)]
    if not baseline:
        return list(reports)
    threshold = max(baseline)
    pruned = []
    for rep in reports:
        keep = not rep.model_tag.startswith(rule_prefix) or rep.accuracy > threshold
        if not keep:
            logger.info("规则 %s 准确率 %.3g 不高于基线 %.3g，不参与融合", rep.model_tag, rep.accuracy, threshold)
        pruned.append(RetrievalModelReport(rep.model_tag, rep.recall_at_cap, rep.accuracy, rep.priority_rank,
                                           keep, rep.self_eval_mrr))
    return pruned


def priority_infill(ordered_lists, n=DEFAULT_CAP):
    """按优先级依次填充：先取模型1的全部候选，再取模型2中未出现的，直到 n 个"""
    if n < 1:
        raise ValueError("n must be >= 1")
    query = ordered_lists[0].query if ordered_lists else (-1, -1)
    seen, picked = set(), []
    for cands in ordered_lists:
        for c in cands.entries:
            if len(picked) >= n:
                break
            if c.entity in seen:
                continue
            seen.add(c.entity)
            picked.append(c)
        if len(picked) >= n:
            break
    entries = tuple(
        Candidate(c.entity, float(n - i), c.source, c.score)
        for i, c in enumerate(picked)
    )
    return CandidateList(query=query, entries=entries, cap=n)


def majority_vote(lists, n=DEFAULT_CAP):
    """对照方式：按投票数排序，同票按各模型中的最好名次，再按实体 id"""
    if n < 1:
        raise ValueError("n must be >= 1")
    query = lists[0].query if lists else (-1, -1)
    votes, best_rank = defaultdict(int), {}
    for cands in lists:
        for rank, c in enumerate(cands.entries):
            votes[c.entity] += 1
            best_rank[c.entity] = min(best_rank.get(c.entity, rank), rank)
    order = sorted(votes, key=lambda e: (-votes[e], best_rank[e], e))[:n]
    entries = tuple(Candidate(e, float(votes[e]), "vote") for e in order)
    return CandidateList(query=query, entries=entries, cap=n)


def fuse(candidate_sets, order, queries, n=DEFAULT_CAP, mode="priority"):
    """对每个查询融合多个召回模型的候选列表"""
    fused = {}
    for q in queries:
        lists = [candidate_sets[tag][q] for tag in order if q in candidate_sets[tag]]
        if not lists:
            fused[q] = CandidateList(query=q, cap=n)
            continue
        fused[q] = priority_infill(lists, n) if mode == "priority" else majority_vote(lists, n)
    return fused


def format_report_table(reports):
    """文本表格：model_tag recall accuracy priority"""
    lines = [f"{'model_tag':<24}{'recall':>10}{'accuracy':>14}{'priority':>10}"]
    for rep in sorted(reports, key=lambda rep: (rep.priority_rank, rep.model_tag)):
        priority = str(rep.priority_rank) if rep.priority_rank else "-"
        accuracy = f"{rep.accuracy:.4e}" if rep.accuracy == rep.accuracy else "-"
        lines.append(f"{rep.model_tag:<24}{rep.recall_at_cap:>10.4f}{accuracy:>14}{priority:>10}")
    return "\n".join(lines) + "\n"
