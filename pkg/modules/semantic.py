"""文本特征的乘积量化近邻检索

特征文件格式（小端）：魔数 "FMAT"，u64 行数，u64 维度，随后 行数×维度 个 float32（行优先）。
"""
import logging
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2, vq
from scipy.spatial.distance import cdist

from modules.candidates import CandidateList
from modules.errors import DimensionError, FeatureFormatError, IdRangeError, PQTrainingError

logger = logging.getLogger(__name__)

MAGIC = b"FMAT"
HEADER = struct.Struct("<4sQQ")
DEFAULT_SUBSPACES = 64
DEFAULT_CENTROIDS = 64
DEFAULT_KMEANS_ITERS = 25
DEFAULT_K = 1000


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray     # (rows, dim) float32
    kind: str = "entity"  # entity | relation

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


def _check_finite(data):
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise FeatureFormatError(f"non-finite value at row {row}", row=row)


def load_features(path, kind="entity", expected_rows=None):
    """读取特征文件并校验"""
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
        if len(head) != HEADER.size:
            raise FeatureFormatError("truncated header")
        magic, rows, dim = HEADER.unpack(head)
        if magic != MAGIC:
            raise FeatureFormatError(f"bad magic {magic!r}")
        payload = f.read()
    if len(payload) != rows * dim * 4:
        raise FeatureFormatError(
            f"dimension mismatch: header declares {rows}x{dim}, payload holds {len(payload) // 4} floats")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float32)
    _check_finite(data)
    if expected_rows is not None and rows != expected_rows:
        raise FeatureFormatError(f"{kind} feature file has {rows} rows, expected {expected_rows}")
    return FeatureMatrix(data=data, kind=kind)


def save_features(path, features):
    """写出特征文件（临时文件 + 改名）"""
    data = np.ascontiguousarray(features.data, dtype="<f4")
    _check_finite(data)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(HEADER.pack(MAGIC, data.shape[0], data.shape[1]))
        f.write(data.tobytes())
    os.replace(tmp, path)


def _initial_centroids(x, k, rng):
    """以互不相同的样本作初始质心；不同取值不足 k 个时用重复样本补齐"""
    uniq = np.unique(x, axis=0)
    if len(uniq) >= k:
        return uniq[np.sort(rng.choice(len(uniq), size=k, replace=False))].astype(np.float64)
    extra = x[rng.choice(len(x), size=k - len(uniq), replace=False)]
    return np.concatenate([uniq, extra]).astype(np.float64)


def _kmeans(x, k, iters, rng):
    # 空簇保留原质心（missing="warn"），警告在这里吞掉
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        centroids, _ = kmeans2(x, _initial_centroids(x, k, rng), iter=iters, minit="matrix", missing="warn")
    return centroids


class PQIndex:
    """乘积量化索引：每个子空间一本码本，库向量存为码字"""

    def __init__(self, codebooks, codes):
        self.codebooks = codebooks  # (M, K, dsub) float32
        self.codes = codes          # (rows, M) uint8/uint16

    @property
    def num_subspaces(self):
        return self.codebooks.shape[0]

    @property
    def centroids_per_subspace(self):
        return self.codebooks.shape[1]

    @property
    def trained_on_dim(self):
        return self.codebooks.shape[0] * self.codebooks.shape[2]

    @property
    def rows(self):
        return self.codes.shape[0]

    def encode(self, data):
        M, _, dsub = self.codebooks.shape
        dtype = np.uint8 if self.centroids_per_subspace <= 256 else np.uint16
        codes = np.empty((len(data), M), dtype=dtype)
        for m in range(M):
            sub = np.asarray(data[:, m * dsub:(m + 1) * dsub], dtype=np.float64)
            codes[:, m], _ = vq(sub, self.codebooks[m].astype(np.float64))
        return codes

    def reconstruct(self, rows=None):
        codes = self.codes if rows is None else self.codes[rows]
        M = self.num_subspaces
        parts = [self.codebooks[m][codes[:, m]] for m in range(M)]
        return np.concatenate(parts, axis=1)

    def distance_table(self, query):
        """查询向量到每个子空间各质心的平方距离 (M, K)"""
        query = np.asarray(query, dtype=np.float64).ravel()
        if query.shape[0] != self.trained_on_dim:
            raise DimensionError(f"query dim {query.shape[0]} != index dim {self.trained_on_dim}")
        M, _, dsub = self.codebooks.shape
        return np.stack([
            cdist(query[None, m * dsub:(m + 1) * dsub], self.codebooks[m].astype(np.float64), "sqeuclidean")[0]
            for m in range(M)
        ])

    def save(self, path):
        tmp = f"{path}.tmp.npz"
        np.savez(tmp, codebooks=self.codebooks, codes=self.codes)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(codebooks=z["codebooks"], codes=z["codes"])


def train_pq(features, num_subspaces=DEFAULT_SUBSPACES, centroids=DEFAULT_CENTROIDS,
             iters=DEFAULT_KMEANS_ITERS, seed=0):
    """每个子空间独立做 k-means 并编码全部行"""
    data = np.asarray(features.data, dtype=np.float64)
    rows, dim = data.shape
    if dim % num_subspaces != 0:
        raise PQTrainingError(f"dim {dim} not divisible by num_subspaces {num_subspaces}")
    if rows < centroids:
        raise PQTrainingError(f"need at least {centroids} rows, got {rows}")

    dsub = dim // num_subspaces
    codebooks = np.empty((num_subspaces, centroids, dsub), dtype=np.float32)
    for m in range(num_subspaces):
        rng = np.random.default_rng([seed, m])
        codebooks[m] = _kmeans(data[:, m * dsub:(m + 1) * dsub], centroids, iters, rng)

    index = PQIndex(codebooks=codebooks, codes=np.empty((0, num_subspaces), dtype=np.uint8))
    index.codes = index.encode(data)
    logger.info("PQ 索引: %d 行, %d 子空间 x %d 质心, 量化误差 %.6f",
                rows, num_subspaces, centroids, quantization_error(index, features))
    return index


def quantization_error(index, features):
    """平均每行重构平方误差"""
    diff = np.asarray(features.data, dtype=np.float64) - index.reconstruct().astype(np.float64)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def pq_knn(index, query, k=DEFAULT_K):
    """非对称距离 k 近邻，返回 [(行号, 近似距离)]，距离升序、行号升序"""
    if k < 1:
        raise ValueError("k must be >= 1")
    table = index.distance_table(query)
    M = index.num_subspaces
    dist2 = table[np.arange(M)[None, :], index.codes.astype(np.int64)].sum(axis=1)
    dist = np.sqrt(np.maximum(dist2, 0.0))
    order = np.lexsort((np.arange(len(dist)), dist))[:k]
    return [(int(i), float(dist[i])) for i in order]


def semantic_retrieve(index, relation_features, r, k=DEFAULT_K, h=-1, source="semantic"):
    """F(h,r,t) = dist(e_r, e_t)；结果与 h 无关（h 只写入查询键），分数取负距离"""
    if not 0 <= r < relation_features.rows:
        raise IdRangeError(f"relation id {r} out of range")
    if relation_features.dim != index.trained_on_dim:
        raise DimensionError(f"relation feature dim {relation_features.dim} != index dim {index.trained_on_dim}")
    hits = pq_knn(index, relation_features.data[r], k)
    entities = [row for row, _ in hits]
    scores = [-dist for _, dist in hits]
    return CandidateList.from_scores((h, r), entities, scores, source, cap=max(k, 1))
