import fitz
import pytest

from schemas.paper import MARKDOWN_UNAVAILABLE_NOTICE
from services.exceptions import EncryptedPdf, IdMismatch, IngestError, MalformedPdf
from services.ingest_service import (
    PAGE_SEPARATOR,
    build_bundle,
    convert_to_markdown,
    ingest_paper,
    load_bundle,
    normalize_pdf,
    save_bundle,
)
from services.ocr_backends import FixtureOcrBackend, TextLayerOcrBackend

from tests.conftest import build_pdf


def test_text_only_pdf_keeps_original_bytes():
    raw = build_pdf(pages=("one", "two", "three"))
    pdf = normalize_pdf(raw, target_dpi=250, paper_id="p1")
    assert pdf.content == raw
    assert pdf.page_count == 3
    assert pdf.image_dpi == 250
    assert pdf.paper_id == "p1"


@pytest.mark.parametrize("image_px", [100, 1000])
def test_raster_images_are_resampled_to_target_dpi(image_px):
    # 100pt 폭: 100px 는 72 DPI (업샘플), 1000px 는 720 DPI (다운샘플)
    raw = build_pdf(pages=("figure page", "text page"), image_px=image_px, image_pt=100)
    pdf = normalize_pdf(raw, target_dpi=250)

    assert pdf.page_count == 2
    images = pdf.pages[0].images
    assert len(images) == 1
    assert images[0].width_px == round(100 * 250 / 72)
    assert images[0].dpi == 250
    assert pdf.pages[1].images == []


@pytest.mark.parametrize("image_px", [100, 300, 1000])
def test_normalizing_twice_changes_nothing(image_px):
    raw = build_pdf(pages=("figure page", "text page"), image_px=image_px, image_pt=100)
    once = normalize_pdf(raw, target_dpi=250)
    twice = normalize_pdf(once.content, target_dpi=250)

    assert twice.pages == once.pages
    assert twice.content == once.content
    assert [image.dpi for image in twice.pages[0].images] == [250]


def test_small_figure_reports_target_dpi_despite_pixel_rounding():
    # 10pt 폭은 250 DPI 에서 34.7px -> 35px, 실제 표시 해상도 252 DPI
    raw = build_pdf(image_px=100, image_pt=10)
    image = normalize_pdf(raw, target_dpi=250).pages[0].images[0]

    assert image.width_px == 35
    assert image.dpi == 250
    assert image.measured_dpi == pytest.approx(252.0, abs=0.5)


def test_paper_id_defaults_to_source_hash_prefix():
    raw = build_pdf()
    pdf = normalize_pdf(raw)
    assert pdf.paper_id == pdf.source_hash[:16]


def test_malformed_pdf_is_rejected():
    with pytest.raises(MalformedPdf):
        normalize_pdf(b"%PDF-1.4 this is not really a pdf")


def test_encrypted_pdf_is_rejected():
    doc = fitz.open(stream=build_pdf(), filetype="pdf")
    raw = doc.tobytes(encryption=fitz.PDF_ENCRYPT_AES_256, owner_pw="owner", user_pw="secret")
    doc.close()
    with pytest.raises(EncryptedPdf):
        normalize_pdf(raw)


def test_markdown_page_anchors_track_separators():
    pdf = normalize_pdf(build_pdf(pages=("a", "b", "c")), paper_id="p1")
    ocr = FixtureOcrBackend(["# Page one", "Page two body", "Page three"])

    markdown = convert_to_markdown(pdf, ocr)

    assert markdown.text == PAGE_SEPARATOR.join(["# Page one", "Page two body", "Page three"])
    assert markdown.page_anchors == [(0, 0), (1, 12), (2, 27)]
    assert markdown.ocr_engine_id == "fixture-ocr"
    assert ocr.calls == [("p1", 0), ("p1", 1), ("p1", 2)]


def test_unavailable_ocr_degrades_to_pdf_only(pdf_file):
    bundle = ingest_paper(pdf_file(), FixtureOcrBackend(unavailable=True))
    assert bundle.degraded is True
    assert bundle.markdown is None
    assert bundle.markdown_text == MARKDOWN_UNAVAILABLE_NOTICE
    assert bundle.paper_id == "paper"


def test_blank_ocr_output_degrades(pdf_file):
    bundle = ingest_paper(pdf_file(), FixtureOcrBackend(["   "]))
    assert bundle.degraded is True


def test_text_layer_backend_reads_page_text(pdf_file):
    bundle = ingest_paper(pdf_file(pages=("Attention is all you need",)), TextLayerOcrBackend(), paper_id="p9")
    assert bundle.degraded is False
    assert "Attention" in bundle.markdown_text
    assert bundle.markdown.paper_id == "p9"


def test_bundle_rejects_mismatched_ids():
    pdf_a = normalize_pdf(build_pdf(), paper_id="a")
    pdf_b = normalize_pdf(build_pdf(), paper_id="b")
    markdown = convert_to_markdown(pdf_b, FixtureOcrBackend(["text"]))
    with pytest.raises(IdMismatch):
        build_bundle(pdf_a, markdown)


def test_saved_bundle_reloads_and_detects_tampering(tmp_path, pdf_file):
    bundle = ingest_paper(pdf_file(image_px=300, image_pt=100), FixtureOcrBackend(["page text"]), paper_id="p1")
    directory = save_bundle(bundle, str(tmp_path / "bundle"))

    loaded = load_bundle(directory)
    assert loaded.pdf.content == bundle.pdf.content
    assert loaded.markdown.text == bundle.markdown.text
    assert loaded.pdf.pages == bundle.pdf.pages

    (tmp_path / "bundle" / "paper.md").write_text("edited", encoding="utf-8")
    with pytest.raises(IngestError):
        load_bundle(directory)
