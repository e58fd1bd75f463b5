"""
SPECS dataset store
<root>/
    manifest.json
    papers.json                                  큐레이션 결과 (포함/제외 모두)
    <paper_id>/source/                           원본 LaTeX 소스
    <paper_id>/perturbations/<pert_id>/          proposal.json, modified-tree/, output.pdf
    eval/<run_id>/reviews.jsonl, judgments.jsonl 평가 산출물
"""

import json
import os
import threading
from typing import Iterable, List, Type, TypeVar

from pydantic import BaseModel, TypeAdapter

from schemas.specs import DatasetManifest, SourcePaper
from services.exceptions import CurationError

M = TypeVar("M", bound=BaseModel)


class DatasetStore:
    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._lock = threading.Lock()

    # ---------- layout ----------
    def source_dir(self, paper_id: str) -> str:
        return os.path.join(self.root, paper_id, "source")

    def perturbations_dir(self, paper_id: str) -> str:
        return os.path.join(self.root, paper_id, "perturbations")

    def eval_dir(self, run_id: str) -> str:
        path = os.path.join(self.root, "eval", run_id)
        os.makedirs(path, exist_ok=True)
        return path

    def eval_path(self, run_id: str, name: str) -> str:
        return os.path.join(self.eval_dir(run_id), name)

    # ---------- manifest ----------
    def write_manifest(self, manifest: DatasetManifest) -> str:
        path = os.path.join(self.root, "manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(manifest.model_dump_json(indent=2))
        return path

    def read_manifest(self) -> DatasetManifest:
        path = os.path.join(self.root, "manifest.json")
        if not os.path.exists(path):
            raise CurationError(f"no dataset manifest at {path}")
        with open(path, "r", encoding="utf-8") as f:
            return DatasetManifest.model_validate_json(f.read())

    def write_papers(self, papers: List[SourcePaper]) -> str:
        path = os.path.join(self.root, "papers.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(TypeAdapter(List[SourcePaper]).dump_json(papers, indent=2).decode("utf-8"))
        return path

    def read_papers(self) -> List[SourcePaper]:
        path = os.path.join(self.root, "papers.json")
        if not os.path.exists(path):
            raise CurationError(f"no curated paper list at {path}")
        with open(path, "r", encoding="utf-8") as f:
            return TypeAdapter(List[SourcePaper]).validate_json(f.read())

    # ---------- jsonl ----------
    def append_jsonl(self, path: str, items: Iterable[BaseModel]):
        with self._lock:
            with open(path, "a", encoding="utf-8", newline="\n") as f:
                for item in items:
                    f.write(item.model_dump_json() + "\n")
                f.flush()
                os.fsync(f.fileno())

    def write_jsonl(self, path: str, items: Iterable[BaseModel]):
        with self._lock:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                for item in items:
                    f.write(item.model_dump_json() + "\n")

    @staticmethod
    def read_jsonl(path: str, model: Type[M]) -> List[M]:
        if not os.path.exists(path):
            return []
        with open(path, "r", encoding="utf-8") as f:
            return [model.model_validate(json.loads(line)) for line in f if line.strip()]
