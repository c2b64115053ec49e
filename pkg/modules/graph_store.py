import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from modules.errors import EmptyInputError, IdRangeError, TripleFormatError

logger = logging.getLogger(__name__)

DIRECTIONS = ("out", "in", "both")


def _frozen(array):
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class KnowledgeGraph:
    """只读三元组存储

    邻接表用 CSR 形式保存：out_ptr[e]:out_ptr[e+1] 是实体 e 的出边区间，
    区间内按 (关系, 邻居) 排序。重复三元组保留（计数需要）。
    """
    num_entities: int
    num_relations: int
    triples: np.ndarray        # (N, 3) int64，按 (h, r, t) 排序
    out_ptr: np.ndarray        # (E+1,)
    out_rel: np.ndarray
    out_nbr: np.ndarray
    in_ptr: np.ndarray
    in_rel: np.ndarray
    in_nbr: np.ndarray
    entity_degree: np.ndarray  # 出度 + 入度
    relation_freq: np.ndarray

    @classmethod
    def from_triples(cls, triples, num_entities, num_relations):
        """由 (N, 3) 数组构建图"""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(triples):
            if triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= num_entities:
                raise IdRangeError("entity id out of range")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= num_relations:
                raise IdRangeError("relation id out of range")

        h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
        order = np.lexsort((t, r, h))
        triples = triples[order]
        h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]

        out_count = np.bincount(h, minlength=num_entities)
        out_ptr = np.concatenate([[0], np.cumsum(out_count)]).astype(np.int64)

        in_order = np.lexsort((h, r, t))
        in_count = np.bincount(t, minlength=num_entities)
        in_ptr = np.concatenate([[0], np.cumsum(in_count)]).astype(np.int64)

        return cls(
            num_entities=int(num_entities),
            num_relations=int(num_relations),
            triples=_frozen(triples),
            out_ptr=_frozen(out_ptr),
            out_rel=_frozen(r.copy()),
            out_nbr=_frozen(t.copy()),
            in_ptr=_frozen(in_ptr),
            in_rel=_frozen(r[in_order].copy()),
            in_nbr=_frozen(h[in_order].copy()),
            entity_degree=_frozen((out_count + in_count).astype(np.int64)),
            relation_freq=_frozen(np.bincount(r, minlength=num_relations).astype(np.int64)),
        )

    @property
    def num_triples(self):
        return len(self.triples)

    def out_edges(self, e):
        """实体 e 的出边 (关系数组, 尾实体数组)，含重复"""
        lo, hi = self.out_ptr[e], self.out_ptr[e + 1]
        return self.out_rel[lo:hi], self.out_nbr[lo:hi]

    def in_edges(self, e):
        lo, hi = self.in_ptr[e], self.in_ptr[e + 1]
        return self.in_rel[lo:hi], self.in_nbr[lo:hi]

    def check_entity(self, e):
        if not 0 <= e < self.num_entities:
            raise IdRangeError(f"entity id {e} out of range [0, {self.num_entities})")


def ingest_triples(triple_file, num_entities, num_relations):
    """读取三元组文件，每行 "h r t"，# 开头为注释"""
    rows = []
    with open(triple_file, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise TripleFormatError(f"malformed line at line {line_no}", line=line_no)
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError:
                raise TripleFormatError(f"malformed line at line {line_no}", line=line_no) from None
            if not (0 <= h < num_entities and 0 <= t < num_entities and 0 <= r < num_relations):
                raise IdRangeError(f"id out of range at line {line_no}", line=line_no)
            rows.append((h, r, t))

    if not rows:
        raise EmptyInputError("empty file")

    kg = KnowledgeGraph.from_triples(np.array(rows, dtype=np.int64), num_entities, num_relations)
    logger.info("载入 %s: %d 条三元组, %d 个实体, %d 种关系",
                triple_file, kg.num_triples, num_entities, num_relations)
    return kg


def write_triples(path, triples):
    """写出三元组文本文件（与 ingest_triples 对应）"""
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in np.asarray(triples).reshape(-1, 3):
            f.write(f"{h} {r} {t}\n")


def load_vocab(path):
    """词表文件：每行一个标签，行号即 id"""
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def neighbors(kg, e, direction="both"):
    """按 (关系, 邻居) 排序去重后的邻居列表"""
    kg.check_entity(e)
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")

    pairs = []
    if direction in ("out", "both"):
        pairs.append(np.stack(kg.out_edges(e), axis=1))
    if direction in ("in", "both"):
        pairs.append(np.stack(kg.in_edges(e), axis=1))
    merged = np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=np.int64)
    if len(merged) == 0:
        return []
    merged = np.unique(merged, axis=0)  # np.unique 按行字典序排序
    return [(int(r), int(n)) for r, n in merged]


def sample_neighbors(kg, e, n, seed):
    """无放回均匀采样至多 n 个邻居；同一 seed 结果固定"""
    if n < 1:
        raise ValueError("n must be >= 1")
    full = neighbors(kg, e, "both")
    if len(full) <= n:
        return full
    rng = np.random.default_rng([seed, e])
    picked = np.sort(rng.choice(len(full), size=n, replace=False))
    return [full[i] for i in picked]


def expand_neighborhood(kg, e, hops, max_frontier=None, seed=0):
    """从 e 出发按两个方向扩展 hops 跳，返回不含 e 本身的实体集合

    max_frontier 不为空时，每一跳新发现的实体最多保留 max_frontier 个（按 seed 采样）。
    """
    kg.check_entity(e)
    seen = {e}
    frontier = np.array([e], dtype=np.int64)
    rng = np.random.default_rng([seed, e, hops])
    for _ in range(hops):
        found = []
        for x in frontier:
            found.append(kg.out_edges(x)[1])
            found.append(kg.in_edges(x)[1])
        if not found:
            break
        nxt = np.unique(np.concatenate(found))
        nxt = nxt[~np.isin(nxt, np.fromiter(seen, dtype=np.int64))]
        if max_frontier is not None and len(nxt) > max_frontier:
            nxt = np.sort(rng.choice(nxt, size=max_frontier, replace=False))
        if len(nxt) == 0:
            break
        seen.update(int(x) for x in nxt)
        frontier = nxt
    seen.discard(e)
    return np.array(sorted(seen), dtype=np.int64)


def _pair_bucket(h, r, seed):
    digest = hashlib.blake2b(f"{seed}:{h}:{r}".encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def split_dev(triples, ratio, seed=0):
    """按 (h, r) 哈希切分出验证集；同一 (h, r) 的三元组落在同一侧"""
    if not 0.0 < ratio < 1.0:
        raise ValueError("dev ratio must be in (0, 1)")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    buckets = {}
    mask = np.zeros(len(triples), dtype=bool)
    for i, (h, r, _) in enumerate(triples):
        key = (int(h), int(r))
        if key not in buckets:
            buckets[key] = _pair_bucket(key[0], key[1], seed) < ratio
        mask[i] = buckets[key]
    return triples[~mask], triples[mask]
