import logging
from enum import Enum

import numpy as np
from scipy import sparse

from modules.candidates import DEFAULT_CAP, CandidateList
from modules.errors import IdRangeError

logger = logging.getLogger(__name__)


class RuleId(str, Enum):
    """11 条路径规则：5 条实体到实体，6 条关系到实体"""
    HT = "HT"
    TH = "TH"
    RT = "RT"
    RH = "RH"
    TH_TH = "TH-TH"
    HT_HT = "HT-HT"
    TH_HT = "TH-HT"
    RT_TR_RT = "RT-TR-RT"
    RT_HR_RT = "RT-HR-RT"
    RH_HR_RT = "RH-HR-RT"
    RH_TR_RT = "RH-TR-RT"

    @property
    def tag(self):
        return f"rule_{self.value}"

    @property
    def starts_from_relation(self):
        return self.value[0] == "R"

    @property
    def legs(self):
        return self.value.split("-")


def _row_normalize(matrix, totals):
    """按行除以 totals，分母为 0 的行保持为空"""
    inv = np.zeros(len(totals), dtype=np.float64)
    nonzero = totals > 0
    inv[nonzero] = 1.0 / totals[nonzero]
    out = sparse.diags(inv) @ matrix
    out = sparse.csr_matrix(out)
    out.eliminate_zeros()
    out.sort_indices()
    return out


class CountTables:
    """稀疏共现计数表

    cnt_h_t[h, t] = count(h,*,t)；cnt_r_t[r, t] = count(*,r,t)；
    cnt_r_h[r, h] = count(h,r,*)；cnt_e_r[e, r] = count(e,r,*)。
    各条规则的单步转移矩阵在首次使用时计算。
    """

    def __init__(self, num_entities, num_relations, cnt_h_t, cnt_r_t, cnt_r_h):
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.cnt_h_t = cnt_h_t
        self.cnt_r_t = cnt_r_t
        self.cnt_r_h = cnt_r_h
        self.cnt_e_r = sparse.csr_matrix(cnt_r_h.T)
        self.cnt_h = np.asarray(cnt_h_t.sum(axis=1)).ravel()
        self.cnt_t = np.asarray(cnt_h_t.sum(axis=0)).ravel()
        self.cnt_r = np.asarray(cnt_r_t.sum(axis=1)).ravel()
        self._legs = {}
        self._rows = {}  # 查询结果缓存 {(rule, 起点): (实体, 分数)}

    def leg(self, name):
        """单步转移矩阵：行是已知元素，列是下一步元素

        HT: h -> t，count(h,*,t)/count(h,*,*)
        TH: t -> h，count(h,*,t)/count(*,*,t)
        RT: r -> t，count(*,r,t)/count(*,r,*)
        RH: r -> h，count(h,r,*)/count(*,r,*)
        HR: e -> r，count(e,r,*)/count(e,*,*)
        TR: e -> r，count(*,r,e)/count(*,*,e)
        """
        if name not in self._legs:
            if name == "HT":
                m = _row_normalize(self.cnt_h_t, self.cnt_h)
            elif name == "TH":
                m = _row_normalize(sparse.csr_matrix(self.cnt_h_t.T), self.cnt_t)
            elif name == "RT":
                m = _row_normalize(self.cnt_r_t, self.cnt_r)
            elif name == "RH":
                m = _row_normalize(self.cnt_r_h, self.cnt_r)
            elif name == "HR":
                m = _row_normalize(self.cnt_e_r, self.cnt_h)
            elif name == "TR":
                m = _row_normalize(sparse.csr_matrix(self.cnt_r_t.T), self.cnt_t)
            else:
                raise KeyError(name)
            self._legs[name] = m
        return self._legs[name]

    def rule_row(self, rule, h, r):
        """规则在起点上的整行得分，返回 (实体数组, 分数数组)，实体升序"""
        rule = RuleId(rule)
        if rule.starts_from_relation:
            if not 0 <= r < self.num_relations:
                raise IdRangeError(f"relation id {r} out of range")
            start = int(r)
        else:
            if not 0 <= h < self.num_entities:
                raise IdRangeError(f"entity id {h} out of range")
            start = int(h)

        key = (rule, start)
        if key not in self._rows:
            legs = rule.legs
            row = self.leg(legs[0])[start]
            for name in legs[1:]:
                # 只沿已观测到的边累加，不遍历全部实体
                row = row @ self.leg(name)
            row = sparse.csr_matrix(row)
            row.eliminate_zeros()
            row.sort_indices()
            self._rows[key] = (row.indices.astype(np.int64), row.data.astype(np.float64))
        return self._rows[key]


def _count_matrix(rows, cols, shape):
    data = np.ones(len(rows), dtype=np.float64)
    m = sparse.coo_matrix((data, (rows, cols)), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def build_count_tables(kg, num_partitions=1):
    """由训练图构建计数表；可分块统计后合并"""
    E, R = kg.num_entities, kg.num_relations
    parts = np.array_split(kg.triples, max(1, num_partitions))
    cnt_h_t = sparse.csr_matrix((E, E), dtype=np.float64)
    cnt_r_t = sparse.csr_matrix((R, E), dtype=np.float64)
    cnt_r_h = sparse.csr_matrix((R, E), dtype=np.float64)
    for part in parts:
        h, r, t = part[:, 0], part[:, 1], part[:, 2]
        cnt_h_t = cnt_h_t + _count_matrix(h, t, (E, E))
        cnt_r_t = cnt_r_t + _count_matrix(r, t, (R, E))
        cnt_r_h = cnt_r_h + _count_matrix(r, h, (R, E))

    for m in (cnt_h_t, cnt_r_t, cnt_r_h):
        m.eliminate_zeros()
        m.sort_indices()

    tables = CountTables(E, R, sparse.csr_matrix(cnt_h_t), sparse.csr_matrix(cnt_r_t), sparse.csr_matrix(cnt_r_h))
    logger.info("计数表: (h,t) %d 项, (r,t) %d 项, (r,h) %d 项",
                tables.cnt_h_t.nnz, tables.cnt_r_t.nnz, tables.cnt_r_h.nnz)
    return tables


def rule_score(tables, rule, h, r, t):
    """F_rule(h, r, t)；任一步缺失时为 0"""
    entities, scores = tables.rule_row(rule, h, r)
    pos = np.searchsorted(entities, t)
    if pos < len(entities) and entities[pos] == t:
        return float(scores[pos])
    return 0.0


def retrieve_by_rule(tables, rule, h, r, cap=DEFAULT_CAP):
    """按规则得分排序返回候选尾实体，长度不超过 cap"""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    rule = RuleId(rule)
    entities, scores = tables.rule_row(rule, h, r)
    return CandidateList.from_scores((h, r), entities, scores, rule.tag, cap=cap, drop_zero=True)
