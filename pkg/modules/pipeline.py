"""召回-重排流水线：ingest → retrieve → fuse → train → rerank → eval"""
import logging
import os
from collections import defaultdict
from dataclasses import asdict

import numpy as np

from modules.candidates import read_candidates, write_candidates
from modules.errors import ConfigError, EmptyInputError, GridTooLargeError
from modules.graph_store import ingest_triples, load_vocab, split_dev, write_triples
from modules.kge import (EmbeddingInit, build_model, configure_determinism, load_checkpoint, save_checkpoint,
                         score_candidates, train)
from modules.path_rules import RuleId, build_count_tables, retrieve_by_rule
from modules.report import RunReport
from modules.rerank import (ModelScoreSet, ensemble_rankings, greedy_select, grid_search_weights, hits_at_k,
                            labeled_examples, mrr_at_10, read_ensemble_spec, write_ensemble_spec,
                            write_predictions)
from modules.retrieval_ensemble import (EvalSplit, build_reports, fuse, prune_below_baseline, priority_order,
                                        recall_at_cap)
from modules.save_system import SaveSystem, file_digest, hash_payload
from modules.semantic import load_features, semantic_retrieve, train_pq
from modules.typing_model import (estimate_priors, fit_typing_model, load_upsample_weights, mask_and_score,
                                  pie_retrieve)

logger = logging.getLogger(__name__)

STAGES = ("ingest", "retrieve", "fuse", "train", "rerank", "eval")
UPSTREAM = {
    "ingest": (),
    "retrieve": ("ingest",),
    "fuse": ("ingest", "retrieve"),
    "train": ("ingest",),
    "rerank": ("ingest", "retrieve", "fuse", "train"),
    "eval": ("ingest", "retrieve", "fuse", "train", "rerank"),
}
SEMANTIC_TAG = "semantic"
REPORT_DIR = "report"


def _digest_or_none(path):
    return file_digest(path) if path else None


def save_score_set(path, score_set):
    queries = list(score_set.candidates)
    sizes = [len(score_set.candidates[q]) for q in queries]
    np.savez(
        path,
        tag=np.array(score_set.model_tag),
        queries=np.array(queries, dtype=np.int64).reshape(-1, 2),
        offsets=np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
        entities=np.concatenate([np.asarray(score_set.candidates[q], dtype=np.int64) for q in queries])
        if queries else np.zeros(0, dtype=np.int64),
        scores=np.concatenate([np.asarray(score_set.scores[q], dtype=np.float64) for q in queries])
        if queries else np.zeros(0),
    )


def load_score_set(path):
    with np.load(path) as z:
        tag, queries, offsets = str(z["tag"]), z["queries"], z["offsets"]
        entities, values = z["entities"], z["scores"]
    candidates, scores = {}, {}
    for i, (h, r) in enumerate(queries):
        q = (int(h), int(r))
        candidates[q] = entities[offsets[i]:offsets[i + 1]]
        scores[q] = values[offsets[i]:offsets[i + 1]]
    return ModelScoreSet(tag, candidates, scores)


class Pipeline:
    def __init__(self, config, progress=False):
        self.config = config
        self.progress = progress and not config.deterministic
        self.save_system = SaveSystem(config.stage_dir)
        configure_determinism(config.deterministic)

    # ---- 输入与哈希 ----

    def _input_hash(self, stage):
        cfg = self.config
        upstream = [self.save_system.manifest(up)["input_hash"] for up in UPSTREAM[stage]]
        ds = cfg.dataset
        if stage == "ingest":
            own = [asdict(ds), cfg.seed, file_digest(ds.train), _digest_or_none(ds.valid),
                   _digest_or_none(ds.entity_vocab)]
        elif stage == "retrieve":
            own = [asdict(cfg.retrieval), cfg.seed, cfg.semantic_enabled,
                   _digest_or_none(ds.entity_features) if cfg.semantic_enabled else None,
                   _digest_or_none(ds.relation_features) if cfg.semantic_enabled else None]
        elif stage == "fuse":
            own = [asdict(cfg.fusion), cfg.retrieval.prune_rules_below_pie]
        elif stage == "train":
            own = [[asdict(v) for v in cfg.kge], _digest_or_none(ds.entity_features)]
        elif stage == "rerank":
            own = [asdict(cfg.rerank)]
        else:
            own = []
        return hash_payload(stage, own, upstream)

    def _train_graph(self):
        ds = self.config.dataset
        return ingest_triples(self.save_system.file("ingest", "train.txt"), ds.num_entities, ds.num_relations)

    def _entity_labels(self):
        ds = self.config.dataset
        return load_vocab(ds.entity_vocab) if ds.entity_vocab else None

    def _dev(self):
        ds = self.config.dataset
        kg = ingest_triples(self.save_system.file("ingest", "dev.txt"), ds.num_entities, ds.num_relations)
        return EvalSplit.from_triples(kg.triples)

    @staticmethod
    def _filters(kg, dev):
        """评估时过滤：同一查询在训练集中的尾实体和验证集中的其他答案"""
        known = defaultdict(set)
        wanted = set(dev.queries)
        for h, r, t in kg.triples:
            q = (int(h), int(r))
            if q in wanted:
                known[q].add(int(t))
        for q, alts in dev.alternates.items():
            known[q].update(alts)
        return {q: known[q] - {dev.answers[q]} for q in dev.queries}

    def _entity_features(self):
        ds = self.config.dataset
        return load_features(ds.entity_features, "entity", expected_rows=ds.num_entities)

    # ---- 阶段 ----

    def run_stage(self, stage):
        """运行一个阶段；输入没有变化时直接跳过"""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        for up in UPSTREAM[stage]:
            self.save_system.require(up)
        input_hash = self._input_hash(stage)
        if self.save_system.is_current(stage, input_hash):
            logger.info("阶段 %s 已完成且输入未变，跳过", stage)
            return {"stage": stage, "skipped": True}

        logger.info("开始阶段 %s", stage)
        tmp = self.save_system.begin(stage)
        fragment = getattr(self, f"_run_{stage}")(tmp)
        self.save_system.commit(stage, tmp, self.config.config_hash, input_hash)
        return {"stage": stage, "skipped": False, **fragment}

    def run_all(self):
        fragments = [self.run_stage(stage) for stage in STAGES]
        report = self.emit_report()
        return fragments, report

    def _run_ingest(self, tmp):
        ds = self.config.dataset
        kg = ingest_triples(ds.train, ds.num_entities, ds.num_relations)
        labels = self._entity_labels()
        if labels is not None and len(labels) != ds.num_entities:
            raise ConfigError(f"entity vocab has {len(labels)} labels, expected {ds.num_entities}",
                              key="dataset.entity_vocab")
        if ds.valid:
            train_triples = kg.triples
            dev_triples = ingest_triples(ds.valid, ds.num_entities, ds.num_relations).triples
        else:
            train_triples, dev_triples = split_dev(kg.triples, ds.dev_ratio, self.config.seed)
        if len(dev_triples) == 0:
            raise EmptyInputError("dev split is empty; raise dataset.dev_ratio or provide dataset.valid")
        if len(train_triples) == 0:
            raise EmptyInputError("training split is empty")
        write_triples(os.path.join(tmp, "train.txt"), train_triples)
        write_triples(os.path.join(tmp, "dev.txt"), dev_triples)
        dev = EvalSplit.from_triples(dev_triples)
        summary = {"train_triples": int(len(train_triples)), "dev_triples": int(len(dev_triples)),
                   "dev_queries": len(dev)}
        SaveSystem.write_json(tmp, "summary.json", summary)
        return summary

    def _run_retrieve(self, tmp):
        cfg = self.config.retrieval
        kg, dev = self._train_graph(), self._dev()
        queries = dev.queries
        tags, self_eval = [], {}

        def emit(tag, lists):
            write_candidates(os.path.join(tmp, f"{tag}.txt"), lists, source_tag=tag, header=tag)
            tags.append(tag)

        if cfg.rules:
            tables = build_count_tables(kg, cfg.num_partitions)
            for rule in cfg.rules:
                rule = RuleId(rule)
                emit(rule.tag, [retrieve_by_rule(tables, rule, h, r, cfg.rule_cap) for h, r in queries])

        if cfg.pie:
            priors = estimate_priors(kg)
            for pie in cfg.pie:
                weights = load_upsample_weights(pie.upsample_weights, kg.num_relations) if pie.upsample_weights else None
                model = fit_typing_model(kg, pie.sample_size, weights, cfg.smoothing, self.config.seed, self.progress)
                masked = mask_and_score(model, kg, cfg.mask_fraction, self.config.seed)
                self_eval[pie.tag] = masked.mrr
                logger.info("%s 屏蔽自评估 MRR %.4f (跳过 %d)", pie.tag, masked.mrr, masked.num_skipped)
                emit(pie.tag, [
                    pie_retrieve(model, priors, kg, h, r, cfg.pie_cap, self.config.seed, cfg.context_hops,
                                 cfg.max_frontier, source=pie.tag)
                    for h, r in queries
                ])

        if self.config.semantic_enabled:
            ds, sem = self.config.dataset, cfg.semantic
            entity = self._entity_features()
            relation = load_features(ds.relation_features, "relation", expected_rows=ds.num_relations)
            index = train_pq(entity, sem.num_subspaces, sem.centroids, sem.kmeans_iters, self.config.seed)
            index.save(os.path.join(tmp, "pq_index.npz"))
            emit(SEMANTIC_TAG, [semantic_retrieve(index, relation, r, sem.k, h=h, source=SEMANTIC_TAG)
                                for h, r in queries])

        SaveSystem.write_json(tmp, "retrieval.json", {"models": tags, "self_eval": self_eval})
        return {"models": tags}

    def _load_candidate_sets(self):
        info = self.save_system.load_json("retrieve", "retrieval.json")
        sets = {
            tag: read_candidates(self.save_system.file("retrieve", f"{tag}.txt"), source_tag=tag)
            for tag in info["models"]
        }
        return sets, info["self_eval"]

    def _run_fuse(self, tmp):
        cfg = self.config
        dev = self._dev()
        candidate_sets, self_eval = self._load_candidate_sets()
        reports = build_reports(candidate_sets, dev, self_eval)
        if cfg.retrieval.prune_rules_below_pie:
            reports = prune_below_baseline(reports, "pie", "rule_")
        enabled = {rep.model_tag for rep in reports if rep.fused}
        order = [tag for tag in priority_order(reports) if tag in enabled]
        for rep in reports:
            logger.info("召回模型 %-16s recall %.4f accuracy %.4e 优先级 %d",
                        rep.model_tag, rep.recall_at_cap, rep.accuracy, rep.priority_rank)

        fused = fuse(candidate_sets, order, dev.queries, cfg.fusion.n, cfg.fusion.mode)
        write_candidates(os.path.join(tmp, "fused.txt"), [fused[q] for q in dev.queries], header="fused")

        # 对照行：纯结构的优先级填充与多数投票
        structural = [tag for tag in order if tag != SEMANTIC_TAG]
        comparison = [{"model_tag": f"fused_{cfg.fusion.mode}", "recall_at_cap": recall_at_cap(fused, dev)}]
        if structural and len(structural) != len(order):
            only = fuse(candidate_sets, structural, dev.queries, cfg.fusion.n, "priority")
            comparison.append({"model_tag": "fused_structural", "recall_at_cap": recall_at_cap(only, dev)})
        if structural:
            vote = fuse(candidate_sets, structural, dev.queries, cfg.fusion.n, "vote")
            comparison.append({"model_tag": "vote_structural", "recall_at_cap": recall_at_cap(vote, dev)})

        SaveSystem.write_json(tmp, "fusion.json", {
            "reports": [asdict(rep) for rep in reports],
            "order": order,
            "comparison": comparison,
        })
        return {"order": order, "recall": comparison[0]["recall_at_cap"]}

    def _run_train(self, tmp):
        ds = self.config.dataset
        kg = self._train_graph()
        features = None
        if any(v.init.mode != "random" for v in self.config.kge):
            features = self._entity_features()
        rows = []
        for variant in self.config.kge:
            model = build_model(variant.kind, ds.num_entities, ds.num_relations, variant.dim,
                                gamma=variant.gamma, group_size=variant.group_size, seed=variant.train.seed)
            init = EmbeddingInit(
                mode=variant.init.mode,
                feature_source=features if variant.init.mode != "random" else None,
                projection=variant.init.projection,
                activation=variant.init.activation,
            )
            model, trace = train(model, kg, init, variant.train, progress=self.progress)
            save_checkpoint(os.path.join(tmp, f"{variant.tag}.kgem"), model)
            SaveSystem.write_json(tmp, f"{variant.tag}.loss.json", trace)
            logger.info("%s 训练完成: 初始损失 %.4f, 最终损失 %.4f", variant.tag, trace[0], trace[-1])
            rows.append({"model_tag": variant.tag, "kind": variant.kind, "first_loss": trace[0],
                         "last_loss": trace[-1]})
        SaveSystem.write_json(tmp, "models.json", rows)
        return {"models": [row["model_tag"] for row in rows]}

    def _run_rerank(self, tmp):
        cfg = self.config.rerank
        kg, dev = self._train_graph(), self._dev()
        filters = self._filters(kg, dev)
        fused = read_candidates(self.save_system.file("fuse", "fused.txt"))
        queries = [q for q in dev.queries if q in fused]

        score_sets, rows = [], []
        for variant in self.config.kge:
            model = load_checkpoint(self.save_system.file("train", f"{variant.tag}.kgem"))
            candidates = {q: np.asarray(fused[q].entities, dtype=np.int64) for q in queries}
            scores = {q: score_candidates(model, q, candidates[q]) for q in queries}
            score_set = ModelScoreSet(variant.tag, candidates, scores)
            save_score_set(os.path.join(tmp, f"scores_{variant.tag}.npz"), score_set)
            score_sets.append(score_set)
            ranked = {q: score_set.ranking(q) for q in queries}
            rows.append({
                "model_tag": variant.tag,
                "kind": variant.kind,
                "init": variant.init.mode + ("+mlp" if variant.init.projection else ""),
                "mrr_at_10": mrr_at_10(ranked, dev, filters),
                "hits_at_1": hits_at_k(ranked, dev, 1, filters),
                "hits_at_3": hits_at_k(ranked, dev, 3, filters),
                "hits_at_10": hits_at_k(ranked, dev, 10, filters),
            })
            logger.info("%s dev MRR@10 %.4f", variant.tag, rows[-1]["mrr_at_10"])

        selection = greedy_select(score_sets, dev, cfg.normalization, filters)
        by_tag = {s.model_tag: s for s in score_sets}
        chosen = [by_tag[t] for t in selection.tags[:cfg.max_models]]
        spec = grid_search_weights(chosen, dev, cfg.grid_step, cfg.normalization, filters,
                                   budget=cfg.grid_budget, workers=cfg.workers, progress=self.progress)
        write_ensemble_spec(os.path.join(tmp, "ensemble.txt"), spec)

        direct = None
        if cfg.direct_ensemble:
            try:
                diag = grid_search_weights(score_sets, dev, cfg.grid_step, cfg.normalization, filters,
                                           budget=cfg.grid_budget, strictly_positive=True, workers=cfg.workers,
                                           progress=self.progress)
                direct = {"models": list(diag.selected_models), "weights": list(diag.weights),
                          "dev_mrr": diag.dev_mrr}
            except GridTooLargeError as e:
                logger.warning("跳过直接集成对照: %s", e)

        SaveSystem.write_json(tmp, "rerank.json", {
            "models": rows,
            "selection": {"tags": list(selection.tags), "trace": list(selection.trace)},
            "ensemble": {"selected_models": list(spec.selected_models), "weights": list(spec.weights),
                         "normalization": spec.normalization, "dev_mrr": spec.dev_mrr},
            "direct_ensemble": direct,
        })
        return {"selected": list(spec.selected_models), "dev_mrr": spec.dev_mrr}

    def _run_eval(self, tmp):
        kg, dev = self._train_graph(), self._dev()
        filters = self._filters(kg, dev)
        spec = read_ensemble_spec(self.save_system.file("rerank", "ensemble.txt"))
        score_sets = [load_score_set(self.save_system.file("rerank", f"scores_{t}.npz")) for t in spec.selected_models]
        queries = [q for q in dev.queries if q in score_sets[0].candidates]
        ranked = ensemble_rankings(spec, score_sets, queries)
        write_predictions(os.path.join(tmp, "predictions.txt"), ranked)
        labels = self._entity_labels()
        if labels is not None:
            write_predictions(os.path.join(tmp, "predictions_labeled.txt"), ranked, entity_labels=labels)
        SaveSystem.write_json(tmp, "examples.json", labeled_examples(ranked, labels))
        metrics = {
            "num_queries": len(dev),
            "mrr_at_10": mrr_at_10(ranked, dev, filters),
            "hits_at_1": hits_at_k(ranked, dev, 1, filters),
            "hits_at_3": hits_at_k(ranked, dev, 3, filters),
            "hits_at_10": hits_at_k(ranked, dev, 10, filters),
        }
        SaveSystem.write_json(tmp, "eval.json", metrics)
        logger.info("最终 dev MRR@10 %.4f", metrics["mrr_at_10"])
        return metrics

    # ---- 报告 ----

    def build_report(self):
        """从各阶段产物组装 RunReport"""
        for stage in STAGES:
            self.save_system.require(stage)
        fusion = self.save_system.load_json("fuse", "fusion.json")
        rerank = self.save_system.load_json("rerank", "rerank.json")
        final = self.save_system.load_json("eval", "eval.json")
        traces = {
            v.tag: self.save_system.load_json("train", f"{v.tag}.loss.json") for v in self.config.kge
        }
        return RunReport(
            retrieval=fusion["reports"],
            fusion=fusion["comparison"],
            kge=rerank["models"],
            ensemble=rerank["ensemble"],
            direct_ensemble=rerank["direct_ensemble"],
            final=final,
            examples=self.save_system.load_json("eval", "examples.json"),
            loss_traces=traces,
            config_hash=self.config.config_hash,
        )

    def emit_report(self, directory=None):
        report = self.build_report()
        directory = directory or os.path.join(self.config.stage_dir, REPORT_DIR)
        written = report.save(directory)
        logger.info("报告写入 %s: %s", directory, ", ".join(written))
        return report
