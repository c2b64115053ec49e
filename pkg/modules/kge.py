"""知识图谱嵌入重排模型：TransE / ComplEx / NOTE"""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy import sparse
from torch import nn
from torch.nn.functional import logsigmoid
from tqdm import tqdm

from modules.candidates import Candidate, CandidateList
from modules.errors import (ConfigError, DimensionError, KindMismatchError, RankDeficientError,
                            TrainingDivergedError)
from modules.semantic import FeatureMatrix

logger = logging.getLogger(__name__)

KINDS = ("TransE", "ComplEx", "NOTE")
INIT_MODES = ("random", "feature", "neighbor_enhanced")
DEFAULT_GAMMA = 3.0
DEFAULT_GROUP_SIZE = 20
SCALE_CLAMP = 10.0  # exp(s_r) 限制在 [e^-10, e^10]
CHECKPOINT_MAGIC = b"KGEM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    negative_sample_size: int = 1000
    learning_rate: float = 0.1
    lr_decay_step: int = 2000
    lr_decay_rate: float = 0.1
    regularization: float = 1e-9
    encoder_learning_rate: float = 4e-5  # 投影层学习率
    max_steps: int = 2000
    seed: int = 0
    loss: str = "self_adversarial"       # self_adversarial | margin
    adversarial_temperature: float = 1.0
    num_shards: int = 1                  # 梯度累积：每步把批次切成几份依次前向、反向
    log_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "negative_sample_size", "lr_decay_step", "max_steps", "num_shards", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive", key=name)
        for name in ("learning_rate", "encoder_learning_rate", "regularization", "adversarial_temperature"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", key=name)
        if not 0 < self.lr_decay_rate <= 1:
            raise ConfigError("lr_decay_rate must be in (0, 1]", key="lr_decay_rate")
        if self.loss not in ("self_adversarial", "margin"):
            raise ConfigError(f"unknown loss {self.loss!r}", key="loss")


def default_train_config(kind, **overrides):
    """NOTE 用较小的批次；TransE/ComplEx 用更大的批次和负样本数"""
    if kind == "NOTE":
        base = dict(batch_size=1000, negative_sample_size=1000)
    else:
        base = dict(batch_size=16384, negative_sample_size=16384)
    base.update(overrides)
    return TrainConfig(**base)


def default_dim(kind):
    return 200 if kind == "NOTE" else 600


@dataclass(frozen=True)
class EmbeddingInit:
    mode: str = "random"
    feature_source: FeatureMatrix | None = None
    projection: bool = False      # 特征与随机向量拼接后过一层线性+激活
    activation: str = "relu"      # none | relu

    def __post_init__(self):
        if self.mode not in INIT_MODES:
            raise ConfigError(f"unknown init mode {self.mode!r}", key="mode")
        if self.mode != "random" and self.feature_source is None:
            raise ConfigError(f"init mode {self.mode!r} requires a feature source", key="feature_source")
        if self.activation not in ("none", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}", key="activation")


def neighbor_enhanced_init(kg, features):
    """e_x = Σ_{e_t ∈ N(e_x)} e_t：一阶邻居（两个方向，按实体去重）特征之和"""
    if features.rows != kg.num_entities:
        raise DimensionError(f"feature rows {features.rows} != num_entities {kg.num_entities}")
    h, t = kg.triples[:, 0], kg.triples[:, 2]
    rows = np.concatenate([h, t])
    cols = np.concatenate([t, h])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(kg.num_entities, kg.num_entities)).tocsr()
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    summed = adj @ np.asarray(features.data, dtype=np.float64)
    return FeatureMatrix(data=summed.astype(np.float32), kind="entity")


def gram_schmidt(M, eps=1e-8):
    """对最后两维的方阵按列做 Gram-Schmidt 正交化，梯度可以穿过"""
    as_numpy = isinstance(M, np.ndarray)
    mat = torch.as_tensor(M, dtype=torch.float64) if as_numpy else M
    if mat.shape[-1] != mat.shape[-2]:
        raise DimensionError("gram_schmidt expects square blocks")
    cols = []
    for j in range(mat.shape[-1]):
        v = mat[..., :, j]
        for q in cols:
            v = v - (q * v).sum(dim=-1, keepdim=True) * q
        norm = v.norm(dim=-1, keepdim=True)
        if bool((norm < eps).any()):
            raise RankDeficientError(f"rank-deficient block at column {j}", column=j)
        cols.append(v / norm)
    out = torch.stack(cols, dim=-1)
    return out.numpy() if as_numpy else out


def _uniform(shape, bound, generator):
    return torch.rand(shape, generator=generator, dtype=torch.float32) * (2 * bound) - bound


class ProjectionLayer(nn.Module):
    def __init__(self, in_dim, out_dim, activation="relu"):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.activation = activation

    def forward(self, x):
        y = self.linear(x)
        return torch.relu(y) if self.activation == "relu" else y


class EntityEncoder(nn.Module):
    """实体表示：自由向量，或 [特征, 自由向量] 经投影层"""

    def __init__(self, num_entities, width, feature_dim=0, activation="relu"):
        super().__init__()
        self.free = nn.Embedding(num_entities, width)
        self.feature_dim = feature_dim
        self.activation = activation
        if feature_dim:
            self.register_buffer("features", torch.zeros(num_entities, feature_dim))
            self.projection = ProjectionLayer(feature_dim + width, width, activation)
        else:
            self.projection = None

    def forward(self, idx):
        free = self.free(idx)
        if self.projection is None:
            return free
        return self.projection(torch.cat([self.features[idx].to(free.dtype), free], dim=-1))


class KgeModel(nn.Module):
    kind = None

    def __init__(self, num_entities, num_relations, dim, gamma=DEFAULT_GAMMA, group_size=DEFAULT_GROUP_SIZE, seed=0):
        super().__init__()
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.dim = dim
        self.gamma = float(gamma)
        self.group_size = group_size
        self.init_mode = "random"
        self.embedding_range = (self.gamma + 2.0) / dim
        self.generator = torch.Generator().manual_seed(seed)
        self.encoder = EntityEncoder(num_entities, dim)
        with torch.no_grad():
            self.encoder.free.weight.copy_(_uniform((num_entities, dim), self.embedding_range, self.generator))
        self._init_relations()

    def _init_relations(self):
        raise NotImplementedError

    def entity(self, idx):
        return self.encoder(idx)

    def apply_init(self, init, kg=None):
        """按初始化方式重建实体表示"""
        self.init_mode = init.mode
        if init.mode == "random":
            source = None
        elif init.mode == "feature":
            source = init.feature_source
        else:
            if kg is None:
                raise ConfigError("neighbor_enhanced init needs the training graph", key="mode")
            source = neighbor_enhanced_init(kg, init.feature_source)

        if source is not None and source.rows != self.num_entities:
            raise DimensionError(f"feature rows {source.rows} != num_entities {self.num_entities}")

        feature_dim = source.dim if (source is not None and init.projection) else 0
        dtype = self.encoder.free.weight.dtype
        self.encoder = EntityEncoder(self.num_entities, self.dim, feature_dim, init.activation).to(dtype)
        with torch.no_grad():
            self.encoder.free.weight.copy_(_uniform((self.num_entities, self.dim), self.embedding_range, self.generator))
            if feature_dim:
                self.encoder.features.copy_(torch.from_numpy(np.asarray(source.data, dtype=np.float32)))
                in_dim = feature_dim + self.dim
                bound = 1.0 / math.sqrt(in_dim)
                self.encoder.projection.linear.weight.copy_(_uniform((self.dim, in_dim), bound, self.generator))
                self.encoder.projection.linear.bias.copy_(_uniform((self.dim,), bound, self.generator))
            elif source is not None:
                if source.dim != self.dim:
                    raise DimensionError(
                        f"feature dim {source.dim} != model dim {self.dim}; enable the projection layer")
                self.encoder.free.weight.copy_(torch.from_numpy(np.asarray(source.data, dtype=np.float32)))
        return self

    def encoder_parameters(self):
        return list(self.encoder.projection.parameters()) if self.encoder.projection is not None else []

    def score(self, h, r, t):
        """三元组得分，越大越好；h/r/t 为可广播的下标张量"""
        raise NotImplementedError

    def forward(self, batch, negatives, cfg):
        """一个批次的训练损失"""
        return kge_loss(self, batch, negatives, cfg)

    def reverse_score(self, h, r, t):
        return None

    def regularizer(self, h, r, t):
        e_h, e_t = self.entity(h), self.entity(t)
        return (e_h.pow(2).mean() + e_t.pow(2).mean() + self.relation_weight(r).pow(2).mean()) / 3.0

    def relation_weight(self, r):
        raise NotImplementedError


class TransEModel(KgeModel):
    """h + r ≈ t"""
    kind = "TransE"

    def _init_relations(self):
        self.relation_emb = nn.Embedding(self.num_relations, self.dim)
        with torch.no_grad():
            self.relation_emb.weight.copy_(
                _uniform((self.num_relations, self.dim), self.embedding_range, self.generator))

    def relation_weight(self, r):
        return self.relation_emb(r)

    def score(self, h, r, t):
        return self.gamma - (self.entity(h) + self.relation_emb(r) - self.entity(t)).norm(p=2, dim=-1)


class ComplExModel(KgeModel):
    """Re(<w_r, e_h, conj(e_t)>)，前一半为实部，后一半为虚部"""
    kind = "ComplEx"

    def _init_relations(self):
        if self.dim % 2:
            raise DimensionError("ComplEx dim must be even")
        self.relation_emb = nn.Embedding(self.num_relations, self.dim)
        with torch.no_grad():
            self.relation_emb.weight.copy_(
                _uniform((self.num_relations, self.dim), self.embedding_range, self.generator))

    def relation_weight(self, r):
        return self.relation_emb(r)

    def score(self, h, r, t):
        h_re, h_im = self.entity(h).chunk(2, dim=-1)
        t_re, t_im = self.entity(t).chunk(2, dim=-1)
        r_re, r_im = self.relation_emb(r).chunk(2, dim=-1)
        # r_re·Re(h·conj(t)) - r_im·Im(h·conj(t))；r_im 为 0 时对 h、t 严格对称
        symmetric = h_re * t_re + h_im * t_im
        antisymmetric = h_re * t_im - h_im * t_re
        return (r_re * symmetric + r_im * antisymmetric).sum(dim=-1)


class NoteModel(KgeModel):
    """分组正交变换 + 归一化指数缩放

    f((h,r),t) = Σ_i ||s_r^h(i) φ(M_r(i)) e_h(i) - e_t(i)||
    f(h,(r,t)) = Σ_i ||s_r^t(i) φ(M_r(i))^T e_t(i) - e_h(i)||
    缩放向量除以对角矩阵的谱范数（即最大元素）。
    """
    kind = "NOTE"

    def _init_relations(self):
        g = self.group_size
        if self.dim % g:
            raise DimensionError(f"NOTE dim {self.dim} not divisible by group size {g}")
        groups = self.dim // g
        eye = torch.eye(g).expand(self.num_relations, groups, g, g)
        noise = _uniform((self.num_relations, groups, g, g), 0.5, self.generator)
        self.rel_matrix = nn.Parameter(eye + noise)
        self.rel_scale = nn.Parameter(torch.zeros(self.num_relations, groups, g))

    @property
    def num_groups(self):
        return self.dim // self.group_size

    def relation_weight(self, r):
        return self.rel_scale[r]

    def orthogonal(self, r):
        return gram_schmidt(self.rel_matrix[r])

    @staticmethod
    def normalized_scale(s):
        w = torch.exp(s.clamp(-SCALE_CLAMP, SCALE_CLAMP))
        return w / w.amax(dim=-1, keepdim=True)

    def _grouped(self, x):
        return x.reshape(*x.shape[:-1], self.num_groups, self.group_size)

    def _transform(self, r, source, target, transpose):
        Q = self.orthogonal(r)
        if transpose:
            Q = Q.transpose(-1, -2)
            w = self.normalized_scale(-self.rel_scale[r])
        else:
            w = self.normalized_scale(self.rel_scale[r])
        moved = w * (Q @ source.unsqueeze(-1)).squeeze(-1)
        return (moved - target).norm(p=2, dim=-1).sum(dim=-1)

    def score(self, h, r, t):
        e_h = self._grouped(self.entity(h))
        e_t = self._grouped(self.entity(t))
        return self.gamma - self._transform(r, e_h, e_t, transpose=False)

    def reverse_score(self, h, r, t):
        e_h = self._grouped(self.entity(h))
        e_t = self._grouped(self.entity(t))
        return self.gamma - self._transform(r, e_t, e_h, transpose=True)


MODEL_CLASSES = {cls.kind: cls for cls in (TransEModel, ComplExModel, NoteModel)}


def build_model(kind, num_entities, num_relations, dim, gamma=DEFAULT_GAMMA, group_size=DEFAULT_GROUP_SIZE, seed=0):
    if kind not in MODEL_CLASSES:
        raise ConfigError(f"unknown model kind {kind!r}", key="kind")
    return MODEL_CLASSES[kind](num_entities, num_relations, dim, gamma=gamma, group_size=group_size, seed=seed)


def _single(model, kind, fn, *idx):
    if model.kind != kind:
        raise KindMismatchError(f"expected a {kind} model, got {model.kind}")
    with torch.no_grad():
        tensors = [torch.tensor([int(i)]) for i in idx]
        return float(fn(*tensors)[0])


def score_transe(model, h, r, t):
    return _single(model, "TransE", model.score, h, r, t)


def score_complex(model, h, r, t):
    return _single(model, "ComplEx", model.score, h, r, t)


def score_note(model, h, r, t, direction="head_to_tail"):
    if direction == "head_to_tail":
        return _single(model, "NOTE", model.score, h, r, t)
    if direction == "tail_to_head":
        return _single(model, "NOTE", model.reverse_score, h, r, t)
    raise ValueError(f"unknown direction {direction!r}")


def _direction_loss(pos, neg, cfg, margin):
    if cfg.loss == "margin":
        return torch.relu(margin - pos.unsqueeze(-1) + neg).mean()
    weights = torch.softmax(neg * cfg.adversarial_temperature, dim=-1).detach()
    pos_loss = -logsigmoid(pos).mean()
    neg_loss = -(weights * logsigmoid(-neg)).sum(dim=-1).mean()
    return (pos_loss + neg_loss) / 2


def kge_loss(model, batch, negatives, cfg):
    """自对抗负采样 logistic 损失（或 margin 排序损失）+ L2 正则；NOTE 额外加入反方向项"""
    h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
    pos = model.score(h, r, t)
    neg = model.score(h.unsqueeze(-1), r.unsqueeze(-1), negatives)
    loss = _direction_loss(pos, neg, cfg, model.gamma)

    rev_pos = model.reverse_score(h, r, t)
    if rev_pos is not None:
        rev_neg = model.reverse_score(h.unsqueeze(-1), r.unsqueeze(-1), negatives)
        loss = (loss + _direction_loss(rev_pos, rev_neg, cfg, model.gamma)) / 2

    if cfg.regularization:
        loss = loss + cfg.regularization * model.regularizer(h, r, t)
    return loss


def configure_determinism(deterministic):
    """单线程确定性模式"""
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def train(model, kg, init, cfg, progress=False):
    """小批量 SGD，均匀负采样替换尾实体，按步衰减学习率；返回 (模型, 每步损失)

    num_shards > 1 时是梯度累积：分片在本进程内依次算损失并反向，按分片大小加权，
    全部分片结束后才 optimizer.step()。累积结果与整批一次计算相同（浮点误差内）。
    """
    if init is not None:
        model.apply_init(init, kg)
    triples = torch.from_numpy(np.asarray(kg.triples, dtype=np.int64))
    if len(triples) == 0:
        raise ConfigError("cannot train on an empty graph", key="train")

    encoder_params = model.encoder_parameters()
    encoder_ids = {id(p) for p in encoder_params}
    other_params = [p for p in model.parameters() if id(p) not in encoder_ids]
    groups = [{"params": other_params, "lr": cfg.learning_rate}]
    if encoder_params:
        groups.append({"params": encoder_params, "lr": cfg.encoder_learning_rate})
    optimizer = torch.optim.SGD(groups, lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.lr_decay_step, gamma=cfg.lr_decay_rate)

    gen = torch.Generator().manual_seed(cfg.seed)
    batch_size = min(cfg.batch_size, len(triples))
    perm, cursor = torch.randperm(len(triples), generator=gen), 0
    trace = []
    model.train()
    for step in tqdm(range(1, cfg.max_steps + 1), desc=f"train {model.kind}", disable=not progress):
        if cursor + batch_size > len(perm):
            perm, cursor = torch.randperm(len(triples), generator=gen), 0
        batch = triples[perm[cursor:cursor + batch_size]]
        cursor += batch_size
        negatives = torch.randint(model.num_entities, (len(batch), cfg.negative_sample_size), generator=gen)

        optimizer.zero_grad()
        step_loss = 0.0
        # 各分片梯度累加到 .grad，循环结束后统一 step
        for shard, shard_neg in zip(batch.chunk(cfg.num_shards), negatives.chunk(cfg.num_shards)):
            loss = model(shard, shard_neg, cfg) * (len(shard) / len(batch))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at step {step}", step=step)
            loss.backward()
            step_loss += float(loss.detach())
        optimizer.step()
        scheduler.step()
        trace.append(step_loss)
        if step % cfg.log_every == 0:
            logger.info("%s step %d loss %.6f", model.kind, step, step_loss)
    model.eval()
    return model, trace


def score_candidates(model, query, entities):
    """对一个查询的候选实体打分，返回 numpy 数组"""
    h, r = query
    if len(entities) == 0:
        return np.zeros(0)
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(entities, dtype=np.int64))
        hs = torch.full_like(t, int(h))
        rs = torch.full_like(t, int(r))
        return model.score(hs, rs, t).double().numpy()


def predict(model, query, candidates):
    """用模型得分重排候选，保留原召回分数"""
    entities = candidates.entities
    scores = score_candidates(model, query, entities)
    order = np.lexsort((np.asarray(entities, dtype=np.int64), -scores))
    entries = tuple(
        Candidate(entities[i], float(scores[i]), candidates.entries[i].source, candidates.entries[i].score)
        for i in order
    )
    return CandidateList(query=tuple(query), entries=entries, cap=max(candidates.cap, len(entries), 1))


def save_checkpoint(path, model):
    """头部(JSON) + 小端 float32 参数块"""
    state = model.state_dict()
    encoder = model.encoder
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "dim": model.dim,
        "num_entities": model.num_entities,
        "num_relations": model.num_relations,
        "group_size": model.group_size,
        "gamma": model.gamma,
        "init_mode": model.init_mode,
        "feature_dim": encoder.feature_dim,
        "activation": encoder.activation,
        "params": [[name, list(tensor.shape)] for name, tensor in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for tensor in state.values():
            f.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path} is not a model checkpoint", key="checkpoint")
        (length,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(length).decode("utf-8"))
        payload = f.read()

    model = build_model(header["kind"], header["num_entities"], header["num_relations"], header["dim"],
                        gamma=header["gamma"], group_size=header["group_size"])
    model.encoder = EntityEncoder(header["num_entities"], header["dim"], header["feature_dim"], header["activation"])
    model.init_mode = header["init_mode"]

    state, offset = {}, 0
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        offset += count * 4
    model.load_state_dict(state)
    model.eval()
    return model
