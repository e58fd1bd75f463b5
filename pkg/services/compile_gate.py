"""
Compile gate
LaTeX 소스 트리를 임시 복사본에서 외부 조판 명령으로 컴파일 (curation.compile_cmd, {root} 치환)
성공 = 종료 코드 0 + 제한 시간 내 + PDF 생성
"""

import os
import re
import shlex
import shutil
import signal
import subprocess
import tempfile
from typing import List, Optional

from schemas.specs import CompileStatus
from services.agents.utils import review_logger
from services.exceptions import ToolchainMissing


DEFAULT_COMPILE_CMD = "latexmk -pdf -interaction=nonstopmode -halt-on-error -file-line-error {root}"
ROOT_PREFERENCE = ("main.tex", "ms.tex", "paper.tex")
DOCUMENTCLASS = re.compile(r"^[^%\n]*\\documentclass", re.MULTILINE)
ERROR_LINE = re.compile(r"^(?:!|.*:\d+: )")
MAX_EXCERPT_LINES = 20


def find_root(source_tree: str) -> Optional[str]:
    """\\documentclass 가 있는 .tex 파일 (source_tree 기준 상대 경로)"""
    candidates: List[str] = []
    for directory, _, files in os.walk(source_tree):
        for name in files:
            if not name.endswith(".tex"):
                continue
            path = os.path.join(directory, name)
            with open(path, "r", encoding="utf-8", errors="replace") as f:
                if DOCUMENTCLASS.search(f.read()):
                    candidates.append(os.path.relpath(path, source_tree))
    if not candidates:
        return None
    candidates.sort(key=lambda rel: (rel.count(os.sep), os.path.basename(rel) not in ROOT_PREFERENCE, rel))
    return candidates[0]


def log_excerpt(text: str) -> str:
    """오류 줄('!' 또는 file:line: 형식)과 바로 다음 줄. 없으면 마지막 줄들"""
    lines = text.splitlines()
    picked: List[str] = []
    for index, line in enumerate(lines):
        if ERROR_LINE.match(line):
            picked.append(line)
            if index + 1 < len(lines) and not ERROR_LINE.match(lines[index + 1]):
                picked.append(lines[index + 1])
        if len(picked) >= MAX_EXCERPT_LINES:
            break
    if not picked:
        picked = lines[-MAX_EXCERPT_LINES:]
    return "\n".join(picked[:MAX_EXCERPT_LINES])


def _command(compile_cmd: str, root: str) -> List[str]:
    args = [arg.replace("{root}", root) for arg in shlex.split(compile_cmd)]
    if not args:
        raise ToolchainMissing("compile command is empty")
    if shutil.which(args[0]) is None and not os.path.isfile(args[0]):
        raise ToolchainMissing(f"typesetting toolchain not found: {args[0]}")
    return args


def check_toolchain(compile_cmd: str = DEFAULT_COMPILE_CMD):
    """실행 파일이 없으면 ToolchainMissing"""
    _command(compile_cmd, "main.tex")


def verify_compiles(
    source_tree: str,
    timeout: float = 120.0,
    compile_cmd: str = DEFAULT_COMPILE_CMD,
    root: Optional[str] = None,
    pdf_out: Optional[str] = None,
) -> CompileStatus:
    """임시 복사본에서 컴파일. pdf_out 이 있으면 결과 PDF 를 그 경로로 복사"""
    root = root or find_root(source_tree)
    if root is None:
        return CompileStatus(ok=False, reason="no_root", log_excerpt="no .tex file with \\documentclass")
    args = _command(compile_cmd, root)

    with tempfile.TemporaryDirectory(prefix="specs-compile-") as workdir:
        tree = os.path.join(workdir, "tree")
        shutil.copytree(source_tree, tree)
        process = subprocess.Popen(
            args,
            cwd=tree,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            stdin=subprocess.DEVNULL,
            start_new_session=True,
        )
        try:
            output, _ = process.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            # 하위 프로세스까지 그룹 단위로 종료
            os.killpg(process.pid, signal.SIGKILL)
            output, _ = process.communicate()
            review_logger.warning(f"⏱️ 컴파일 시간 초과 ({timeout}초): {source_tree}")
            return CompileStatus(ok=False, reason="timeout", log_excerpt=log_excerpt(output.decode("utf-8", "replace")))

        text = output.decode("utf-8", "replace")
        log_path = os.path.join(tree, os.path.splitext(root)[0] + ".log")
        if os.path.exists(log_path):
            with open(log_path, "r", encoding="utf-8", errors="replace") as f:
                text = f"{text}\n{f.read()}"
        if process.returncode != 0:
            return CompileStatus(ok=False, reason="error", log_excerpt=log_excerpt(text))

        pdf_path = os.path.join(tree, os.path.splitext(root)[0] + ".pdf")
        if not os.path.exists(pdf_path) or os.path.getsize(pdf_path) == 0:
            return CompileStatus(ok=False, reason="no_pdf", log_excerpt=log_excerpt(text))
        if pdf_out is not None:
            os.makedirs(os.path.dirname(os.path.abspath(pdf_out)), exist_ok=True)
            shutil.copyfile(pdf_path, pdf_out)
        return CompileStatus(ok=True, pdf_path=pdf_out)
