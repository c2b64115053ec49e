"""阶段产物存储：每个阶段一个目录，带 manifest，原子写入"""
import hashlib
import json
import logging
import os
import shutil
from datetime import datetime

from modules.errors import StageDependencyError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def file_digest(path):
    """文件内容的 sha256"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_payload(*parts):
    """任意可 JSON 序列化对象的稳定哈希"""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class SaveSystem:
    def __init__(self, stage_dir="stages"):
        self.stage_dir = stage_dir
        os.makedirs(self.stage_dir, exist_ok=True)

    def stage_path(self, stage):
        return os.path.join(self.stage_dir, stage)

    def manifest(self, stage):
        """读取阶段 manifest，不存在或损坏时返回 None"""
        path = os.path.join(self.stage_path(stage), MANIFEST)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("读取 %s 的 manifest 出错: %s", stage, e)
            return None

    def is_current(self, stage, input_hash):
        """阶段已完成且输入未变"""
        manifest = self.manifest(stage)
        if manifest is None or manifest.get("format_version") != FORMAT_VERSION:
            return False
        if manifest.get("input_hash") != input_hash:
            return False
        return all(os.path.exists(os.path.join(self.stage_path(stage), name)) for name in manifest["files"])

    def require(self, stage):
        """上游阶段必须已完成"""
        manifest = self.manifest(stage)
        if manifest is None:
            raise StageDependencyError(f"requires stage: {stage}", stage=stage)
        return manifest

    def begin(self, stage):
        """新建临时目录，阶段产物先写在这里"""
        tmp = os.path.join(self.stage_dir, f".{stage}.tmp")
        if os.path.exists(tmp):
            shutil.rmtree(tmp)
        os.makedirs(tmp)
        return tmp

    def commit(self, stage, tmp, config_hash, input_hash, extra=None):
        """写 manifest 后把临时目录整体换成正式目录"""
        files = sorted(name for name in os.listdir(tmp) if name != MANIFEST)
        manifest = {
            "stage": stage,
            "format_version": FORMAT_VERSION,
            "config_hash": config_hash,
            "input_hash": input_hash,
            "files": files,
            "created": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(tmp, MANIFEST), "w", encoding="utf-8") as f:
            json.dump(manifest, f, ensure_ascii=False, indent=2)

        final = self.stage_path(stage)
        old = os.path.join(self.stage_dir, f".{stage}.old")
        if os.path.exists(old):
            shutil.rmtree(old)
        if os.path.exists(final):
            os.replace(final, old)
        os.replace(tmp, final)
        if os.path.exists(old):
            shutil.rmtree(old)
        logger.info("阶段 %s 已写入 %s (%d 个文件)", stage, final, len(files))
        return manifest

    def file(self, stage, name):
        return os.path.join(self.stage_path(stage), name)

    def load_json(self, stage, name):
        with open(self.file(stage, name), "r", encoding="utf-8") as f:
            return json.load(f)

    @staticmethod
    def write_json(directory, name, data):
        with open(os.path.join(directory, name), "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)

    def export_stage(self, stage, dest):
        """把阶段目录复制出去"""
        try:
            self.require(stage)
            target = os.path.join(dest, stage)
            if os.path.exists(target):
                shutil.rmtree(target)
            shutil.copytree(self.stage_path(stage), target)
            return True, f"阶段 {stage} 已导出到 {target}"
        except Exception as e:
            return False, f"导出失败: {str(e)}"

    def delete_stage(self, stage):
        """删除阶段产物"""
        try:
            path = self.stage_path(stage)
            if not os.path.exists(path):
                return False, f"阶段 {stage} 不存在"
            shutil.rmtree(path)
            return True, f"阶段 {stage} 已删除"
        except Exception as e:
            return False, f"删除失败: {str(e)}"

    def list_stages(self):
        """列出所有已完成的阶段"""
        stages = []
        for name in sorted(os.listdir(self.stage_dir)):
            if name.startswith("."):
                continue
            manifest = self.manifest(name)
            if manifest is None:
                continue
            stages.append({
                "name": name,
                "created": manifest.get("created"),
                "files": len(manifest.get("files", [])),
                "config_hash": manifest.get("config_hash", "")[:12],
                "input_hash": manifest.get("input_hash", "")[:12],
            })
        return stages
