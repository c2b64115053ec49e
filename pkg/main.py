import argparse
import logging
import os
import sys

from modules.config import validate_config
from modules.errors import KgRerankError
from modules.pipeline import STAGES, Pipeline
from modules.save_system import SaveSystem
from modules.toy_data import write_toy_dataset

logger = logging.getLogger("kgrerank")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class KgRerankApp:
    def __init__(self, args):
        self.args = args
        overrides = {
            "seed": args.seed,
            "stage_dir": os.path.abspath(args.stage_dir) if args.stage_dir else None,
            "deterministic": True if args.deterministic else None,
        }
        self.config = validate_config(args.config, overrides=overrides)
        progress = logging.getLogger().isEnabledFor(logging.INFO)
        self.pipeline = Pipeline(self.config, progress=progress)

    def run(self, command):
        """执行一个子命令"""
        if command in STAGES:
            fragment = self.pipeline.run_stage(command)
            logger.info("%s 完成: %s", command, fragment)
        elif command == "run-all":
            _, report = self.pipeline.run_all()
            logger.info("全部阶段完成，最终 MRR@10 %.4f", report.final["mrr_at_10"])
        elif command == "report":
            self.pipeline.emit_report(self.args.out)
        elif command == "status":
            self.show_status()
        elif command == "export":
            success, message = self.pipeline.save_system.export_stage(self.args.stage, self.args.out)
            self._log_result(success, message)
            return 0 if success else 1
        elif command == "clean":
            success, message = self.pipeline.save_system.delete_stage(self.args.stage)
            self._log_result(success, message)
            return 0 if success else 1
        return 0

    @staticmethod
    def _log_result(success, message):
        if success:
            logger.info(message)
        else:
            logger.error(message)

    def show_status(self):
        """列出已完成的阶段"""
        stages = self.pipeline.save_system.list_stages()
        if not stages:
            print("没有已完成的阶段")
            return
        for s in stages:
            print(f"{s['name']:<10} {s['created']}  files={s['files']:<4} config={s['config_hash']} input={s['input_hash']}")


def build_parser():
    parser = argparse.ArgumentParser(prog="kgrerank", description="知识图谱链接预测：召回 + 重排")
    parser.add_argument("--log-level", default="INFO", help="日志级别")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON 配置文件")
        p.add_argument("--stage-dir", default=None, help="阶段产物目录（覆盖配置）")
        p.add_argument("--seed", type=int, default=None, help="随机种子（覆盖配置）")
        p.add_argument("--deterministic", action="store_true", help="单线程确定性模式")
        return p

    for stage in STAGES + ("run-all", "status"):
        with_config(sub.add_parser(stage))
    with_config(sub.add_parser("report")).add_argument("--out", default=None, help="报告目录")
    for name in ("export", "clean"):
        p = with_config(sub.add_parser(name))
        p.add_argument("--stage", required=True, choices=STAGES)
        if name == "export":
            p.add_argument("--out", required=True)

    toy = sub.add_parser("make-toy", help="生成内置玩具数据集")
    toy.add_argument("--out", default=os.path.join("data", "toy"))
    toy.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO), format=LOG_FORMAT)
    try:
        if args.command == "make-toy":
            write_toy_dataset(args.out, seed=args.seed)
            return 0
        app = KgRerankApp(args)
        return app.run(args.command)
    except KgRerankError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
