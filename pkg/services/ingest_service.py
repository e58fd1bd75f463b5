"""
Paper ingestion service
입력 PDF -> 정규화 PDF(래스터 이미지 target DPI 로 재샘플) + markdown -> PaperBundle
"""

import io
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import fitz
from PIL import Image

from schemas.paper import (
    BundleManifest,
    ImageInfo,
    MarkdownDoc,
    NormalizedPdf,
    PagePayload,
    PaperBundle,
    PaperMetadata,
)
from services.agents.utils import review_logger, sha256_bytes, sha256_text
from services.exceptions import EmptyDocument, EncryptedPdf, IdMismatch, IngestError, MalformedPdf, OcrUnavailable
from services.ocr_backends import OcrBackend


PAGE_SEPARATOR = "\n\n"


@dataclass
class _ImageUsage:
    xref: int
    smask: int
    width_px: int
    height_px: int
    rect_width_pt: float
    page_index: int

    def desired_width(self, target_dpi: int) -> int:
        return max(1, round(self.rect_width_pt * target_dpi / 72.0))

    @property
    def effective_dpi(self) -> float:
        return self.width_px * 72.0 / self.rect_width_pt

    def nominal_dpi(self, target_dpi: int) -> int:
        """픽셀 폭이 목표 DPI 의 반올림 폭과 같으면 목표 DPI"""
        if self.width_px == self.desired_width(target_dpi):
            return target_dpi
        return round(self.effective_dpi)


def _open_pdf(raw_pdf: bytes) -> "fitz.Document":
    try:
        doc = fitz.open(stream=raw_pdf, filetype="pdf")
    except Exception as e:
        raise MalformedPdf(f"failed to open PDF: {e!r}") from e
    if doc.needs_pass:
        doc.close()
        raise EncryptedPdf("PDF is password-protected")
    return doc


def _collect_image_usage(doc: "fitz.Document") -> Dict[int, _ImageUsage]:
    """xref 별 최대 표시 폭 기준 사용 정보 (표시되지 않는 이미지는 제외)"""
    usages: Dict[int, _ImageUsage] = {}
    for page in doc:
        for image in page.get_images(full=True):
            xref, smask, width_px, height_px = image[0], image[1], image[2], image[3]
            for rect in page.get_image_rects(xref):
                if rect.width <= 0:
                    continue
                current = usages.get(xref)
                if current is None or rect.width > current.rect_width_pt:
                    usages[xref] = _ImageUsage(xref, smask, width_px, height_px, rect.width, page.number)
    return usages


def _resample(doc: "fitz.Document", usage: _ImageUsage, target_dpi: int):
    pix = fitz.Pixmap(doc, usage.xref)
    if usage.smask:
        pix = fitz.Pixmap(pix, fitz.Pixmap(doc, usage.smask))
    if pix.colorspace is not None and pix.colorspace.n not in (1, 3):
        pix = fitz.Pixmap(fitz.csRGB, pix)
    mode = {1: "L", 2: "LA", 3: "RGB", 4: "RGBA"}[pix.n]
    image = Image.frombytes(mode, (pix.width, pix.height), pix.samples)

    new_width = usage.desired_width(target_dpi)
    new_height = max(1, round(usage.height_px * new_width / usage.width_px))
    resized = image.resize((new_width, new_height), Image.LANCZOS)
    buffer = io.BytesIO()
    resized.save(buffer, format="PNG")
    doc[usage.page_index].replace_image(usage.xref, stream=buffer.getvalue())
    review_logger.debug(
        f"🖼️ xref {usage.xref}: {usage.width_px}x{usage.height_px} ({usage.effective_dpi:.1f} DPI) -> {new_width}x{new_height}"
    )


def _page_payloads(doc: "fitz.Document", target_dpi: int) -> List[PagePayload]:
    usages = _collect_image_usage(doc)
    payloads = []
    for page in doc:
        images = []
        seen = set()
        for image in page.get_images(full=True):
            usage = usages.get(image[0])
            if usage is None or usage.xref in seen:
                continue
            seen.add(usage.xref)
            images.append(ImageInfo(
                xref=usage.xref,
                width_px=usage.width_px,
                height_px=usage.height_px,
                dpi=usage.nominal_dpi(target_dpi),
                measured_dpi=usage.effective_dpi,
            ))
        payloads.append(PagePayload(
            index=page.number,
            width_pt=page.rect.width,
            height_pt=page.rect.height,
            images=images,
        ))
    return payloads


def normalize_pdf(raw_pdf: bytes, target_dpi: int = 250, paper_id: Optional[str] = None) -> NormalizedPdf:
    """모든 래스터 이미지를 target_dpi 로 재샘플 (업/다운 모두). 이미지 없으면 원본 바이트 그대로"""
    if target_dpi <= 0:
        raise ValueError("target_dpi must be positive")
    source_hash = sha256_bytes(raw_pdf)
    paper_id = paper_id or source_hash[:16]

    doc = _open_pdf(raw_pdf)
    try:
        page_count = doc.page_count
        usages = _collect_image_usage(doc)
        pending = [u for u in usages.values() if u.width_px != u.desired_width(target_dpi)]
        for usage in pending:
            _resample(doc, usage, target_dpi)
        content = doc.tobytes(garbage=3, deflate=True, no_new_id=True) if pending else raw_pdf
    except IngestError:
        raise
    except Exception as e:
        raise MalformedPdf(f"failed to normalize PDF: {e!r}") from e
    finally:
        doc.close()

    with fitz.open(stream=content, filetype="pdf") as out:
        if out.page_count != page_count:
            raise MalformedPdf(f"page count changed during normalization: {page_count} -> {out.page_count}")
        pages = _page_payloads(out, target_dpi)

    review_logger.info(f"📄 [{paper_id}] PDF 정규화: {page_count}쪽, 재샘플 이미지 {len(pending)}개 -> {target_dpi} DPI")
    return NormalizedPdf(
        paper_id=paper_id,
        pages=pages,
        image_dpi=target_dpi,
        byte_size=len(content),
        source_hash=source_hash,
        content=content,
    )


def convert_to_markdown(pdf: NormalizedPdf, ocr: OcrBackend) -> MarkdownDoc:
    """페이지별 OCR 결과를 이어 붙이고 페이지 시작 오프셋 기록"""
    if pdf.page_count == 0:
        raise EmptyDocument(f"{pdf.paper_id}: PDF has no pages")

    parts: List[str] = []
    anchors = []
    offset = 0
    for index in range(pdf.page_count):
        if index:
            offset += len(PAGE_SEPARATOR)
        anchors.append((index, offset))
        page_text = ocr.convert_page(pdf, index)
        parts.append(page_text)
        offset += len(page_text)

    text = PAGE_SEPARATOR.join(parts)
    if not text.strip():
        raise EmptyDocument(f"{pdf.paper_id}: no extractable content")
    return MarkdownDoc(paper_id=pdf.paper_id, text=text, page_anchors=anchors, ocr_engine_id=ocr.engine_id)


def build_bundle(pdf: NormalizedPdf, markdown: Optional[MarkdownDoc], metadata: Optional[PaperMetadata] = None) -> PaperBundle:
    if markdown is not None and markdown.paper_id != pdf.paper_id:
        raise IdMismatch(f"markdown paper_id {markdown.paper_id!r} != pdf paper_id {pdf.paper_id!r}")
    return PaperBundle(
        paper_id=pdf.paper_id,
        pdf=pdf,
        markdown=markdown,
        metadata=metadata or PaperMetadata(),
        degraded=markdown is None,
    )


def ingest_paper(
    path: str,
    ocr: OcrBackend,
    target_dpi: int = 250,
    paper_id: Optional[str] = None,
    metadata: Optional[PaperMetadata] = None,
) -> PaperBundle:
    """파일 -> 번들. OCR 실패 시 PDF 전용(degraded) 번들"""
    with open(path, "rb") as f:
        raw = f.read()
    paper_id = paper_id or os.path.splitext(os.path.basename(path))[0]
    pdf = normalize_pdf(raw, target_dpi=target_dpi, paper_id=paper_id)
    try:
        markdown = convert_to_markdown(pdf, ocr)
    except (OcrUnavailable, EmptyDocument) as e:
        review_logger.warning(f"⚠️ [{paper_id}] markdown 변환 실패, PDF 전용 번들로 진행: {e}")
        markdown = None
    return build_bundle(pdf, markdown, metadata)


# ============= [BUNDLE I/O] ==============
def save_bundle(bundle: PaperBundle, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "paper.pdf"), "wb") as f:
        f.write(bundle.pdf.content)
    if bundle.markdown is not None:
        with open(os.path.join(directory, "paper.md"), "w", encoding="utf-8", newline="") as f:
            f.write(bundle.markdown.text)

    manifest = BundleManifest(
        paper_id=bundle.paper_id,
        pdf_sha256=sha256_bytes(bundle.pdf.content),
        markdown_sha256=sha256_text(bundle.markdown.text) if bundle.markdown else None,
        source_hash=bundle.pdf.source_hash,
        image_dpi=bundle.pdf.image_dpi,
        byte_size=bundle.pdf.byte_size,
        ocr_engine_id=bundle.markdown.ocr_engine_id if bundle.markdown else None,
        degraded=bundle.degraded,
        pages=bundle.pdf.pages,
        page_anchors=bundle.markdown.page_anchors if bundle.markdown else [],
        metadata=bundle.metadata,
    )
    with open(os.path.join(directory, "bundle.json"), "w", encoding="utf-8") as f:
        f.write(manifest.model_dump_json(indent=2))
    return directory


def load_bundle(directory: str) -> PaperBundle:
    with open(os.path.join(directory, "bundle.json"), "r", encoding="utf-8") as f:
        manifest = BundleManifest.model_validate_json(f.read())
    with open(os.path.join(directory, "paper.pdf"), "rb") as f:
        content = f.read()
    if sha256_bytes(content) != manifest.pdf_sha256:
        raise IngestError(f"bundle {directory}: paper.pdf hash mismatch")

    pdf = NormalizedPdf(
        paper_id=manifest.paper_id,
        pages=manifest.pages,
        image_dpi=manifest.image_dpi,
        byte_size=manifest.byte_size,
        source_hash=manifest.source_hash,
        content=content,
    )
    markdown = None
    if manifest.markdown_sha256 is not None:
        with open(os.path.join(directory, "paper.md"), "r", encoding="utf-8", newline="") as f:
            text = f.read()
        if sha256_text(text) != manifest.markdown_sha256:
            raise IngestError(f"bundle {directory}: paper.md hash mismatch")
        markdown = MarkdownDoc(
            paper_id=manifest.paper_id,
            text=text,
            page_anchors=manifest.page_anchors,
            ocr_engine_id=manifest.ocr_engine_id or "",
        )
    return build_bundle(pdf, markdown, manifest.metadata)
