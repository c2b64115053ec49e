"""流水线配置：JSON 文件 + 环境变量覆盖"""
import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

from modules.candidates import DEFAULT_CAP
from modules.errors import ConfigError
from modules.kge import (DEFAULT_GAMMA, DEFAULT_GROUP_SIZE, INIT_MODES, KINDS, TrainConfig, default_dim,
                         default_train_config)
from modules.path_rules import RuleId
from modules.rerank import DEFAULT_GRID_BUDGET, DEFAULT_GRID_STEP, MAX_ENSEMBLE_MODELS, NORMALIZATIONS
from modules.semantic import DEFAULT_CENTROIDS, DEFAULT_K, DEFAULT_KMEANS_ITERS, DEFAULT_SUBSPACES
from modules.typing_model import DEFAULT_CONTEXT_HOPS, DEFAULT_SMOOTHING

logger = logging.getLogger(__name__)

ENV_PREFIX = "KGRR_"


def _positive(obj, *names):
    for name in names:
        if getattr(obj, name) < 1:
            raise ConfigError(f"{name} must be >= 1", key=name)


@dataclass(frozen=True)
class DatasetConfig:
    train: str
    num_entities: int
    num_relations: int
    valid: str | None = None
    entity_features: str | None = None
    relation_features: str | None = None
    entity_vocab: str | None = None
    dev_ratio: float = 0.1  # 没有 valid 文件时按 (h, r) 哈希切分

    def __post_init__(self):
        _positive(self, "num_entities", "num_relations")
        if not 0.0 < self.dev_ratio < 1.0:
            raise ConfigError("dev_ratio must be in (0, 1)", key="dev_ratio")


@dataclass(frozen=True)
class PieConfig:
    tag: str
    sample_size: int
    upsample_weights: str | None = None

    def __post_init__(self):
        _positive(self, "sample_size")


def _default_pie():
    return (PieConfig("pie_6", 6), PieConfig("pie_10", 10))


@dataclass(frozen=True)
class SemanticConfig:
    enabled: bool = True
    num_subspaces: int = DEFAULT_SUBSPACES
    centroids: int = DEFAULT_CENTROIDS
    kmeans_iters: int = DEFAULT_KMEANS_ITERS
    k: int = DEFAULT_K

    def __post_init__(self):
        _positive(self, "num_subspaces", "centroids", "kmeans_iters", "k")


@dataclass(frozen=True)
class RetrievalConfig:
    rules: tuple = tuple(rule.value for rule in RuleId)
    rule_cap: int = DEFAULT_CAP
    pie: tuple = field(default_factory=_default_pie)
    pie_cap: int = DEFAULT_CAP
    context_hops: int = DEFAULT_CONTEXT_HOPS
    max_frontier: int | None = None
    smoothing: float = DEFAULT_SMOOTHING
    mask_fraction: float = 0.1
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    prune_rules_below_pie: bool = False
    num_partitions: int = 1

    def __post_init__(self):
        _positive(self, "rule_cap", "pie_cap", "context_hops", "num_partitions")
        for rule in self.rules:
            try:
                RuleId(rule)
            except ValueError:
                raise ConfigError(f"unknown rule {rule!r}", key="rules") from None
        if self.max_frontier is not None and self.max_frontier < 1:
            raise ConfigError("max_frontier must be >= 1", key="max_frontier")
        if self.smoothing < 0:
            raise ConfigError("smoothing must be >= 0", key="smoothing")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must be in (0, 1)", key="mask_fraction")
        tags = [p.tag for p in self.pie]
        if len(set(tags)) != len(tags):
            raise ConfigError("duplicate PIE tag", key="pie")


@dataclass(frozen=True)
class FusionConfig:
    n: int = DEFAULT_CAP
    mode: str = "priority"  # priority | vote

    def __post_init__(self):
        _positive(self, "n")
        if self.mode not in ("priority", "vote"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}", key="mode")


@dataclass(frozen=True)
class InitConfig:
    mode: str = "random"
    projection: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.mode not in INIT_MODES:
            raise ConfigError(f"unknown init mode {self.mode!r}", key="mode")
        if self.activation not in ("none", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}", key="activation")


@dataclass(frozen=True)
class KgeVariantConfig:
    tag: str
    kind: str
    dim: int
    train: TrainConfig
    init: InitConfig = field(default_factory=InitConfig)
    gamma: float = DEFAULT_GAMMA
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}", key="kind")
        _positive(self, "dim", "group_size")
        if self.kind == "NOTE" and self.dim % self.group_size:
            raise ConfigError("NOTE dim must be divisible by group_size", key="dim")
        if self.kind == "ComplEx" and self.dim % 2:
            raise ConfigError("ComplEx dim must be even", key="dim")


@dataclass(frozen=True)
class RerankConfig:
    grid_step: float = DEFAULT_GRID_STEP
    normalization: str = "rank"
    grid_budget: int = DEFAULT_GRID_BUDGET
    max_models: int = MAX_ENSEMBLE_MODELS
    workers: int = 1
    direct_ensemble: bool = True  # 所有模型、严格正权重的对照网格

    def __post_init__(self):
        if not 0.0 < self.grid_step <= 1.0:
            raise ConfigError("grid_step must be in (0, 1]", key="grid_step")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}", key="normalization")
        _positive(self, "grid_budget", "workers")
        if not 1 <= self.max_models <= MAX_ENSEMBLE_MODELS:
            raise ConfigError(f"max_models must be in [1, {MAX_ENSEMBLE_MODELS}]", key="max_models")


@dataclass(frozen=True)
class PipelineConfig:
    dataset: DatasetConfig
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    kge: tuple = ()
    rerank: RerankConfig = field(default_factory=RerankConfig)
    seed: int = 0
    stage_dir: str = "stages"
    deterministic: bool = False
    source_path: str | None = None

    @property
    def semantic_enabled(self):
        return (self.retrieval.semantic.enabled and self.dataset.entity_features is not None
                and self.dataset.relation_features is not None)

    def to_dict(self):
        data = asdict(self)
        for key in ("stage_dir", "deterministic", "source_path"):
            data.pop(key)
        return data

    @property
    def config_hash(self):
        """解析后配置的规范 JSON 的 sha256"""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _default_variants():
    return [
        {"tag": "TransE-0", "kind": "TransE"},
        {"tag": "ComplEx", "kind": "ComplEx"},
        {"tag": "NOTE-0", "kind": "NOTE"},
    ]


def _section(cls, data, path, nested=None, **extra):
    """把 dict 转成 dataclass，拒绝未知键，错误信息带完整键路径"""
    nested = nested or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object", key=path)
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {dotted!r}", key=dotted)
    kwargs = dict(extra)
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = nested[key](value, sub) if key in nested else value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        dotted = f"{path}.{e.key}" if path and e.key else (e.key or path)
        raise ConfigError(f"{dotted}: {e}", key=dotted) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}", key=path) from None


TRAIN_DEFAULTS = TrainConfig()


def _type_matches(default, value):
    """bool 不算数字；float 字段也接受整数"""
    if isinstance(value, bool):
        return isinstance(default, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    return isinstance(value, type(default))


def _variant(data, path, seed):
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError(f"{path} needs a kind", key=f"{path}.kind")
    kind = data["kind"]
    if kind not in KINDS:
        raise ConfigError(f"{path}.kind: unknown model kind {kind!r}", key=f"{path}.kind")
    train_raw = dict(data.get("train", {}))
    train_raw.setdefault("seed", seed)

    def train(value, sub):
        allowed = {f.name for f in fields(TrainConfig)}
        for key, item in value.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {sub}.{key!r}", key=f"{sub}.{key}")
            if not _type_matches(getattr(TRAIN_DEFAULTS, key), item):
                expected = type(getattr(TRAIN_DEFAULTS, key)).__name__
                raise ConfigError(f"{sub}.{key} must be {expected}, got {item!r}", key=f"{sub}.{key}")
        try:
            return default_train_config(kind, **value)
        except ConfigError as e:
            raise ConfigError(f"{sub}.{e.key}: {e}", key=f"{sub}.{e.key}") from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{sub}: {e}", key=sub) from None

    body = dict(data)
    body["train"] = train_raw
    body.setdefault("dim", default_dim(kind))
    body.setdefault("tag", kind)
    return _section(KgeVariantConfig, body, path, nested={
        "train": train,
        "init": lambda v, p: _section(InitConfig, v, p),
    })


def _set_path(data, keys, value):
    node = data
    for i, key in enumerate(keys):
        last = i == len(keys) - 1
        if isinstance(node, list):
            key = int(key)
            if last:
                node[key] = value
            else:
                node = node[key]
        else:
            if last:
                node[key] = value
            else:
                node = node.setdefault(key, {})


def apply_env_overrides(data, environ=None):
    """KGRR_<SECTION>__<KEY>=<json>，双下划线分隔层级，值解析失败时按字符串处理"""
    environ = os.environ if environ is None else environ
    data = copy.deepcopy(data)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__") if k]
        if not keys:
            continue
        raw = environ[name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(data, keys, value)
        logger.info("环境变量覆盖 %s", ".".join(keys))
    return data


def _resolve(base, path, key, must_exist=True):
    if path is None:
        return None
    full = path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))
    if must_exist and not os.path.exists(full):
        hint = ""
        folder = os.path.dirname(full)
        if key.startswith("dataset.") and not os.path.isdir(folder):
            hint = f"; directory {folder} is missing, run `python main.py make-toy --out {folder}` for the toy dataset"
        raise ConfigError(f"{key}: file not found: {full}{hint}", key=key)
    return full


def parse_config(data, base_dir=".", source_path=None):
    """由已经载入的 dict 构建 PipelineConfig"""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "dataset" not in data:
        raise ConfigError("missing section 'dataset'", key="dataset")
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer", key="seed")

    def dataset(value, path):
        ds = _section(DatasetConfig, value, path)
        return replace(
            ds,
            train=_resolve(base_dir, ds.train, f"{path}.train"),
            valid=_resolve(base_dir, ds.valid, f"{path}.valid"),
            entity_features=_resolve(base_dir, ds.entity_features, f"{path}.entity_features"),
            relation_features=_resolve(base_dir, ds.relation_features, f"{path}.relation_features"),
            entity_vocab=_resolve(base_dir, ds.entity_vocab, f"{path}.entity_vocab"),
        )

    def pie_list(value, path):
        out = []
        for i, item in enumerate(value):
            pie = _section(PieConfig, item, f"{path}.{i}")
            out.append(replace(pie, upsample_weights=_resolve(base_dir, pie.upsample_weights,
                                                              f"{path}.{i}.upsample_weights")))
        return tuple(out)

    def retrieval(value, path):
        return _section(RetrievalConfig, value, path, nested={
            "semantic": lambda v, p: _section(SemanticConfig, v, p),
            "pie": pie_list,
            "rules": lambda v, p: tuple(v),
        })

    def kge(value, path):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{path} must be a non-empty list", key=path)
        variants = tuple(_variant(item, f"{path}.{i}", seed) for i, item in enumerate(value))
        tags = [v.tag for v in variants]
        if len(set(tags)) != len(tags):
            raise ConfigError("duplicate KGE variant tag", key=path)
        return variants

    body = dict(data)
    body.setdefault("kge", _default_variants())
    config = _section(PipelineConfig, body, "", nested={
        "dataset": dataset,
        "retrieval": retrieval,
        "fusion": lambda v, p: _section(FusionConfig, v, p),
        "kge": kge,
        "rerank": lambda v, p: _section(RerankConfig, v, p),
    }, source_path=source_path)

    if config.retrieval.semantic.enabled and (config.dataset.entity_features is None) != (
            config.dataset.relation_features is None):
        raise ConfigError("semantic retrieval needs both entity and relation features",
                          key="dataset.relation_features")
    for i, variant in enumerate(config.kge):
        if variant.init.mode != "random" and config.dataset.entity_features is None:
            raise ConfigError(f"kge.{i}.init.mode {variant.init.mode!r} needs dataset.entity_features",
                              key=f"kge.{i}.init.mode")
    return config


def validate_config(path, overrides=None, environ=None):
    """读取并校验配置文件，返回解析后的 PipelineConfig

    overrides 是命令行参数（seed / stage_dir / deterministic），优先级最高。
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}", key="config")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}", key="config") from None
    data = apply_env_overrides(data, environ)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    base_dir = os.path.dirname(os.path.abspath(path))
    config = parse_config(data, base_dir=base_dir, source_path=os.path.abspath(path))
    if not os.path.isabs(config.stage_dir):
        config = replace(config, stage_dir=os.path.normpath(os.path.join(base_dir, config.stage_dir)))
    logger.info("配置 %s 校验通过 (hash %s)", path, config.config_hash[:12])
    return config
