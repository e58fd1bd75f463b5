from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


MARKDOWN_UNAVAILABLE_NOTICE = (
    "NOTICE: the markdown conversion of this paper is unavailable. "
    "Rely on the attached PDF only."
)


class ImageInfo(BaseModel):
    xref: int
    width_px: int
    height_px: int
    # 목표 DPI 로 재샘플된 이미지는 목표 값. 픽셀 폭이 정수라 실제 표시 해상도(measured_dpi)는 1px 이내로 다를 수 있음
    dpi: int
    measured_dpi: float


class PagePayload(BaseModel):
    index: int
    width_pt: float
    height_pt: float
    images: List[ImageInfo] = Field(default_factory=list)


class NormalizedPdf(BaseModel):
    model_config = ConfigDict(frozen=True)

    paper_id: str
    pages: List[PagePayload]
    image_dpi: int
    byte_size: int
    source_hash: str
    content: bytes = Field(default=b"", exclude=True, repr=False)

    @property
    def page_count(self) -> int:
        return len(self.pages)


class MarkdownDoc(BaseModel):
    model_config = ConfigDict(frozen=True)

    paper_id: str
    text: str
    page_anchors: List[Tuple[int, int]] = Field(default_factory=list)  # (page index, char offset)
    ocr_engine_id: str

    @model_validator(mode="after")
    def _anchors_monotonic(self):
        offsets = [offset for _, offset in self.page_anchors]
        if any(later < earlier for earlier, later in zip(offsets, offsets[1:])):
            raise ValueError("page_anchors must be monotonically increasing in offset")
        return self


class PaperMetadata(BaseModel):
    title: Optional[str] = None
    venue: Optional[str] = None
    track: Optional[str] = None


class PaperBundle(BaseModel):
    """PDF + markdown 이중 표현. markdown 이 None 이면 degraded"""

    model_config = ConfigDict(frozen=True)

    paper_id: str
    pdf: NormalizedPdf
    markdown: Optional[MarkdownDoc] = None
    metadata: PaperMetadata = Field(default_factory=PaperMetadata)
    degraded: bool = False

    @property
    def markdown_text(self) -> str:
        return self.markdown.text if self.markdown is not None else MARKDOWN_UNAVAILABLE_NOTICE


class BundleManifest(BaseModel):
    """bundle.json 내용"""

    paper_id: str
    pdf_sha256: str
    markdown_sha256: Optional[str] = None
    source_hash: str
    image_dpi: int
    byte_size: int
    ocr_engine_id: Optional[str] = None
    degraded: bool = False
    pages: List[PagePayload]
    page_anchors: List[Tuple[int, int]] = Field(default_factory=list)
    metadata: PaperMetadata = Field(default_factory=PaperMetadata)
