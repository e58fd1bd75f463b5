import asyncio
import itertools
import json

import pandas as pd
import pytest

from schemas.review import REVIEW_ELEMENTS, CitationAudit, CitationEntry, CitationVerdict, CriticFindings, Finding, Review
from services.agents import CriticAgent
from services.exceptions import ParseFailure
from services.model_backends import MOCK_REVIEW
from services.review_quality_service import (
    OVERSIGHT_COLUMNS,
    compile_oversight_report,
    parse_review,
    review_findings,
    run_quality_critic,
    validate_structure,
)

from tests.conftest import fixture_gateway

SECTION_TEXT = {
    "title": "# Title\nA Study of Things\n",
    "synopsis": "## Synopsis\nThe paper studies things.\n",
    "summary": "## Summary of the Review\nSolid but narrow.\n",
    "strengths": "## Strengths\n- Clear writing.\n- Open code.\n",
    "weaknesses": "## Weaknesses\n- Small datasets.\n",
    "references": "## References\n- Doe, J. (2020). Things. Journal of Stuff.\n",
}


def review_with(elements):
    return "\n".join(SECTION_TEXT[element] for element in elements) or "No structure at all."


@pytest.mark.parametrize(
    "present",
    [combo for size in range(len(REVIEW_ELEMENTS) + 1) for combo in itertools.combinations(REVIEW_ELEMENTS, size)],
)
def test_structure_reports_exactly_the_missing_elements(present):
    report = validate_structure(review_with(present))
    assert report.missing == [element for element in REVIEW_ELEMENTS if element not in present]
    assert report.valid == (len(present) == len(REVIEW_ELEMENTS))


def test_empty_body_misses_everything():
    assert validate_structure("").missing == list(REVIEW_ELEMENTS)


def test_label_style_headings_are_recognised():
    body = (
        "**Title:** Sparse Attention Revisited\n\n"
        "**Synopsis:** Revisits sparse attention.\n\n"
        "Summary of the Review: Useful, incremental.\n\n"
        "**Strengths**\n1. Careful ablations\n\n"
        "**Weaknesses**\n1. No theory\n\n"
        "**References**\n[1] Child, R. (2019). Generating long sequences with sparse transformers. arXiv.\n"
    )
    assert validate_structure(body).valid


def test_heading_without_content_counts_as_missing():
    body = review_with(REVIEW_ELEMENTS).replace("## Weaknesses\n- Small datasets.\n", "## Weaknesses\n\n")
    assert validate_structure(body).missing == ["weaknesses"]


def test_parse_review_extracts_sections():
    review = parse_review("p1", MOCK_REVIEW.replace("{paper_id}", "p1"))
    assert review.sections.title == "Review of submission p1"
    assert review.sections.strengths == [
        "The problem statement is precise.",
        "The method is described in enough detail to reimplement.",
    ]
    assert len(review.sections.weaknesses) == 2
    assert review.sections.references[0].startswith("Vaswani, A.")


def critic_response(**fields):
    payload = {
        "issues": [],
        "editorial_concerns": [],
        "appears_llm_written": "no",
        "unqualified_reviewer": "no",
        "apparent_effort": 4,
        "overall_quality": 4,
        "notes": "",
    }
    payload.update(fields)
    return json.dumps(payload)


def critic_gateway(text):
    return fixture_gateway({"critic": {"critic": [{"text": text, "repeat": True}]}})


def test_critic_sees_only_the_review_text():
    review = parse_review("p1", MOCK_REVIEW)
    gateway = critic_gateway(critic_response())
    findings = asyncio.run(run_quality_critic(review, gateway))

    request = gateway.resolve("critic").calls[0]
    assert request.attachments == []
    assert [segment.role for segment in request.segments] == ["system", "user"]
    assert request.segments[1].text == review.body
    assert not findings.flagged


def test_critic_findings_are_flagged():
    text = critic_response(issues=[{"kind": "identity_reveal", "rationale": "names the lab"}])
    findings = asyncio.run(run_quality_critic(parse_review("p1", MOCK_REVIEW), critic_gateway(text)))
    assert findings.flagged
    assert findings.issue_kinds == ["identity_reveal"]


@pytest.mark.parametrize(
    "text",
    [
        "I think the review is fine.",
        critic_response(issues=[{"kind": "too_long", "rationale": "long"}]),
        critic_response(overall_quality=9),
        critic_response(issues=[{"kind": "bias_concern", "rationale": ""}]),
    ],
)
def test_critic_output_outside_contract_is_a_parse_failure(text):
    with pytest.raises(ParseFailure):
        asyncio.run(run_quality_critic(parse_review("p1", MOCK_REVIEW), critic_gateway(text)))


def test_custom_rating_scale():
    agent = CriticAgent(rating_scale=range(1, 11))
    assert agent.parse(critic_response(overall_quality=9)).overall_quality == 9


def test_missing_structure_finding_is_added():
    review = parse_review("p1", "## Strengths\n- good\n")
    findings = asyncio.run(review_findings(review, critic_gateway(critic_response())))
    assert findings.issue_kinds == ["missing_structure"]
    assert "synopsis" in findings.issues[0].rationale


def test_oversight_report_orders_flagged_first(tmp_path):
    clean = CriticFindings(apparent_effort=3, overall_quality=3)
    flagged = CriticFindings(issues=[Finding(kind="offensive_content", rationale="insulting tone")], apparent_effort=2, overall_quality=1)
    fake_citation = CitationAudit(paper_id="a", citations=[CitationEntry(raw="x", verdict=CitationVerdict.FAKE, evidence="no record")])
    rows = [("c", clean, None), ("b", flagged, None), ("a", clean, fake_citation), ("d", clean, None)]

    report = compile_oversight_report(rows, str(tmp_path), "oversight")

    frame = pd.read_csv(report.csv_path)
    assert list(frame.columns) == list(OVERSIGHT_COLUMNS)
    assert list(frame["paper_id"]) == ["a", "b", "c", "d"]
    assert list(frame["flagged"]) == [1, 1, 0, 0]
    assert report.flagged_count == 2
    assert report.column_totals["offensive_content"] == 1
    assert report.column_totals["citations_fake"] == 1
    with open(report.csv_path, "rb") as f:
        assert b"\r\n" in f.read()
    with open(report.sidecar_path, encoding="utf-8") as f:
        assert json.load(f)["row_count"] == 4
