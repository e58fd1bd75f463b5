import io
import os
import shutil
import sys
from typing import Dict, List, Optional, Sequence

import fitz
import pytest
from PIL import Image

from schemas.gateway import RetryPolicy
from services.model_backends import FixtureBackend
from services.model_gateway import ModelGateway

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
FAKE_LATEX = f"{sys.executable} {os.path.join(FIXTURES, 'fake_latex.py')} {{root}}"


def pytest_addoption(parser):
    parser.addoption("--no-compile-tests", action="store_true", default=False, help="LaTeX 툴체인이 필요한 테스트 생략")


def pytest_collection_modifyitems(config, items):
    skip_all = config.getoption("--no-compile-tests")
    has_latexmk = shutil.which("latexmk") is not None
    for item in items:
        if "compile" in item.keywords and (skip_all or not has_latexmk):
            item.add_marker(pytest.mark.skip(reason="latexmk 없음 또는 --no-compile-tests"))


def build_pdf(pages: Sequence[str] = ("Hello paper",), image_px: Optional[int] = None, image_pt: float = 144.0) -> bytes:
    """텍스트 페이지 PDF. image_px 가 있으면 첫 쪽에 정사각형 이미지를 image_pt 폭으로 배치"""
    doc = fitz.open()
    for index, text in enumerate(pages):
        page = doc.new_page(width=612, height=792)
        page.insert_text((72, 72), text)
        if image_px and index == 0:
            buffer = io.BytesIO()
            Image.new("RGB", (image_px, image_px), (120, 30, 200)).save(buffer, format="PNG")
            page.insert_image(fitz.Rect(72, 144, 72 + image_pt, 144 + image_pt), stream=buffer.getvalue())
    data = doc.tobytes()
    doc.close()
    return data


@pytest.fixture
def pdf_file(tmp_path):
    def write(name: str = "paper.pdf", **kwargs) -> str:
        path = tmp_path / name
        path.write_bytes(build_pdf(**kwargs))
        return str(path)

    return write


class SleepRecorder:
    def __init__(self):
        self.delays: List[float] = []

    async def __call__(self, delay: float):
        self.delays.append(delay)


@pytest.fixture
def no_sleep():
    return SleepRecorder()


def fixture_gateway(scripts: Dict[str, dict], sleep=None, max_in_flight: int = 8, policy: Optional[RetryPolicy] = None) -> ModelGateway:
    """{backend_id: script} -> gateway"""
    gateway = ModelGateway(policy=policy, max_in_flight=max_in_flight, sleep=sleep or SleepRecorder())
    for backend_id, script in scripts.items():
        gateway.register_backend(backend_id, FixtureBackend(script, backend_id=backend_id))
    return gateway


@pytest.fixture
def output_root(tmp_path):
    root = tmp_path / "out"
    root.mkdir()
    return str(root)


def make_bundle(paper_id: str = "p1", markdown: str = "# A Paper\n\nWe propose a method.", degraded: bool = False):
    from services.ingest_service import build_bundle, convert_to_markdown, normalize_pdf
    from services.ocr_backends import FixtureOcrBackend

    pdf = normalize_pdf(build_pdf((f"paper {paper_id}",)), paper_id=paper_id)
    doc = None if degraded else convert_to_markdown(pdf, FixtureOcrBackend([markdown]))
    return build_bundle(pdf, doc)


def mock_gateway(overrides: Optional[Dict[str, list]] = None, sleep=None, backend_id: str = "reviewer") -> ModelGateway:
    """기본 mock 스크립트 + 키별 덮어쓰기"""
    from services.model_backends import default_mock_script

    script = default_mock_script()
    script.update(overrides or {})
    return fixture_gateway({backend_id: script}, sleep=sleep)


PAPER_TEX = r"""\documentclass{article}
\begin{document}
\section{Introduction}
We propose a sparse attention method for long documents.
Our method improves accuracy from 71.2 to 78.9 on the benchmark.
\section{Results}
The ablation removes {the gating unit} and accuracy drops to 74.0.
\end{document}
"""


@pytest.fixture
def source_tree(tmp_path):
    root = tmp_path / "source" / "paper1"
    root.mkdir(parents=True)
    (root / "main.tex").write_text(PAPER_TEX, encoding="utf-8")
    return str(root)
