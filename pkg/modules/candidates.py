import logging
from dataclasses import dataclass

import numpy as np

from modules.errors import TripleFormatError

logger = logging.getLogger(__name__)

DEFAULT_CAP = 20000  # 每个候选列表的长度上限


@dataclass(frozen=True)
class Candidate:
    entity: int
    score: float
    source: str                           # 产生该候选的模型标签
    retrieval_score: float | None = None  # 重排后保留的召回分数


@dataclass(frozen=True)
class CandidateList:
    """单个查询 (h, r) 的候选尾实体列表，按分数降序、实体 id 升序排列"""
    query: tuple
    entries: tuple = ()
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("cap must be >= 1")
        if len(self.entries) > self.cap:
            object.__setattr__(self, "entries", tuple(self.entries[: self.cap]))

    @classmethod
    def from_scores(cls, query, entities, scores, source, cap=DEFAULT_CAP, drop_zero=False):
        """由实体数组和分数数组构造，负责排序与截断"""
        entities = np.asarray(entities, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        if drop_zero:
            keep = scores != 0.0
            entities, scores = entities[keep], scores[keep]
        order = np.lexsort((entities, -scores))[:cap]
        entries = tuple(Candidate(int(entities[i]), float(scores[i]), source) for i in order)
        return cls(query=tuple(int(x) for x in query), entries=entries, cap=cap)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def entities(self):
        return [c.entity for c in self.entries]

    @property
    def scores(self):
        return [c.score for c in self.entries]

    def rank_of(self, entity):
        """实体在列表中的名次（从1开始），不存在返回 None"""
        for i, c in enumerate(self.entries):
            if c.entity == entity:
                return i + 1
        return None

    def __contains__(self, entity):
        return any(c.entity == entity for c in self.entries)


def format_candidate_line(cands, with_source=False):
    h, r = cands.query
    if with_source:
        tokens = [f"{c.entity}:{c.score!r}:{c.source}" for c in cands.entries]
    else:
        tokens = [f"{c.entity}:{c.score!r}" for c in cands.entries]
    return " ".join([str(h), str(r)] + tokens)


def write_candidates(path, candidate_lists, source_tag=None, header=None):
    """写出候选文件："h r t1:s1 t2:s2 …"，融合结果附带来源 "t:s:tag" """
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"# {header}\n")
        for cands in candidate_lists:
            f.write(format_candidate_line(cands, with_source=source_tag is None) + "\n")


def read_candidates(path, source_tag=None, cap=DEFAULT_CAP):
    """读取候选文件，返回 {(h, r): CandidateList}"""
    result = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                query = (int(parts[0]), int(parts[1]))
                entries = []
                for token in parts[2:]:
                    fields = token.split(":", 2)
                    source = fields[2] if len(fields) == 3 else source_tag
                    entries.append(Candidate(int(fields[0]), float(fields[1]), source))
            except (ValueError, IndexError):
                raise TripleFormatError(f"malformed candidate line at line {line_no}", line=line_no) from None
            result[query] = CandidateList(query=query, entries=tuple(entries), cap=max(cap, len(entries), 1))
    return result
