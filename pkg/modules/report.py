"""运行报告：JSON + 文本表格 + 图表"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import matplotlib
matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"


@dataclass(frozen=True)
class RunReport:
    """召回表（每个召回模型和融合方式一行）+ 重排表（每个 KGE 模型一行）+ 集成结果"""
    retrieval: list
    fusion: list
    kge: list
    ensemble: dict
    direct_ensemble: dict | None = None
    final: dict = field(default_factory=dict)
    examples: list = field(default_factory=list)
    loss_traces: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self):
        data = asdict(self)
        data.pop("loss_traces")
        return data

    def save(self, directory):
        """写 report.json、report.txt 和图表，返回写出的文件名"""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, REPORT_JSON), "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
        with open(os.path.join(directory, REPORT_TXT), "w", encoding="utf-8") as f:
            f.write(render_tables(self))
        written = [REPORT_JSON, REPORT_TXT]
        written += plot_retrieval_recall(self, directory)
        written += plot_loss_curves(self, directory)
        return written


def _fmt(value, spec):
    return "-" if value is None else format(value, spec)


def render_tables(report):
    """两张文本表：召回结果和重排结果"""
    lines = ["# Retrieval", f"{'model':<24}{'recall':>10}{'accuracy':>14}{'priority':>10}{'fused':>8}{'self_mrr':>10}"]
    for row in report.retrieval:
        lines.append(
            f"{row['model_tag']:<24}{row['recall_at_cap']:>10.4f}{_fmt(row['accuracy'], '.4e'):>14}"
            f"{row['priority_rank'] or '-':>10}{'yes' if row['fused'] else 'no':>8}"
            f"{_fmt(row['self_eval_mrr'], '.4f'):>10}"
        )
    for row in report.fusion:
        lines.append(f"{row['model_tag']:<24}{row['recall_at_cap']:>10.4f}{'-':>14}{'-':>10}{'-':>8}{'-':>10}")

    lines += ["", "# Rerank", f"{'model':<24}{'kind':>10}{'init':>20}{'mrr@10':>10}{'hits@1':>10}{'hits@10':>10}"]
    for row in report.kge:
        lines.append(
            f"{row['model_tag']:<24}{row['kind']:>10}{row['init']:>20}{row['mrr_at_10']:>10.4f}"
            f"{row['hits_at_1']:>10.4f}{row['hits_at_10']:>10.4f}"
        )
    ens = report.ensemble
    members = ",".join(f"{t}:{w:.2f}" for t, w in zip(ens["selected_models"], ens["weights"]))
    lines.append(f"{'ensemble':<24}{'':>10}{ens['normalization']:>20}{ens['dev_mrr']:>10.4f}  ({members})")
    if report.direct_ensemble:
        lines.append(f"{'direct ensemble':<24}{'':>10}{'':>20}{report.direct_ensemble['dev_mrr']:>10.4f}")
    if report.final:
        lines += ["", "# Final",
                  f"mrr@10 {report.final['mrr_at_10']:.4f}  hits@1 {report.final['hits_at_1']:.4f}  "
                  f"hits@3 {report.final['hits_at_3']:.4f}  hits@10 {report.final['hits_at_10']:.4f}"]
    if report.examples:
        lines += ["", "# Examples"]
        for ex in report.examples:
            lines.append(f"{ex['head']} r{ex['relation']} -> " + ", ".join(ex["top"]))
    return "\n".join(lines) + "\n"


def plot_retrieval_recall(report, directory, name="recall.png"):
    """每个召回模型与融合结果的召回率柱状图"""
    rows = list(report.retrieval) + list(report.fusion)
    if not rows:
        return []
    fig = Figure(figsize=(8, 4))
    ax = fig.add_subplot(111)
    tags = [row["model_tag"] for row in rows]
    ax.bar(range(len(tags)), [row["recall_at_cap"] for row in rows], color="#4a90e2")
    ax.set_xticks(range(len(tags)))
    ax.set_xticklabels(tags, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("recall")
    ax.set_title("Retrieval recall")
    fig.tight_layout()
    fig.savefig(os.path.join(directory, name), metadata={"Software": None})
    return [name]


def plot_loss_curves(report, directory, name="loss.png"):
    if not report.loss_traces:
        return []
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(111)
    for tag in sorted(report.loss_traces):
        ax.plot(report.loss_traces[tag], linewidth=1, label=tag)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("KGE training loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(directory, name), metadata={"Software": None})
    return [name]


def load_report(directory):
    with open(os.path.join(directory, REPORT_JSON), "r", encoding="utf-8") as f:
        return json.load(f)
