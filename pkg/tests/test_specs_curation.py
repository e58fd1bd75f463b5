import asyncio
import json
import os

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from schemas.specs import (
    SPECS_CRITERIA,
    CompileStatus,
    DatasetManifest,
    NoMatch,
    OversightVerdict,
    Perturbation,
    PerturbationProposal,
    ProceedingsEntry,
    QuotaPolicy,
    Rejected,
    SourceMatch,
    SourcePaper,
)
from services.agents import PerturbationAgent
from services.exceptions import (
    CountMismatch,
    CurationError,
    DuplicateVerdict,
    EmptyCategory,
    InsufficientVerdicts,
    MalformedProposal,
)
from services.model_backends import SourceEditFixtureBackend
from services.model_gateway import ModelGateway
from services.source_index import LocalSourceIndex
from services.specs_curation_service import (
    SubtypeRegistry,
    accept_perturbation,
    allocate_quota,
    build_manifest,
    curate_paper,
    generate_perturbations,
    match_source,
    perturb_paper,
    record_oversight,
    sample_candidates,
    sample_for_oversight,
    source_listing,
    span_matches,
    validate_manifest,
)

from tests.conftest import FAKE_LATEX


# ---------- sampling ----------
def test_proportional_quota_uses_largest_remainder():
    allocation = allocate_quota(QuotaPolicy(kind="proportional", total=5), {"a": 5, "b": 3, "c": 2})
    assert allocation == {"a": 3, "b": 1, "c": 1}


def test_uniform_quota_breaks_ties_by_name():
    assert allocate_quota(QuotaPolicy(kind="uniform", total=7), {"c": 9, "a": 9, "b": 9}) == {"a": 3, "b": 2, "c": 2}


def test_explicit_quota_beyond_category_size():
    with pytest.raises(EmptyCategory):
        allocate_quota(QuotaPolicy(kind="explicit", per_category={"a": 4}), {"a": 3})
    with pytest.raises(EmptyCategory):
        allocate_quota(QuotaPolicy(kind="explicit", per_category={"z": 1}), {"a": 3})


@given(
    sizes=st.dictionaries(st.sampled_from("abcdef"), st.integers(min_value=1, max_value=40), min_size=1),
    percent=st.integers(min_value=0, max_value=100),
)
def test_proportional_quota_sums_to_total(sizes, percent):
    total = sum(sizes.values()) * percent // 100
    allocation = allocate_quota(QuotaPolicy(kind="proportional", total=total), sizes)
    assert sum(allocation.values()) == total
    assert all(0 <= allocation[c] <= sizes[c] for c in sizes)


def entries(n_per_category):
    return [
        ProceedingsEntry(proceedings_id=f"{category}{i:03d}", title=f"Paper {category} {i}", authors=["Doe, J."], category=category)
        for category, n in n_per_category.items()
        for i in range(n)
    ]


def test_sampling_is_seeded():
    proceedings = entries({"vision": 20, "nlp": 10})
    quota = QuotaPolicy(kind="explicit", per_category={"vision": 4, "nlp": 2})
    first = sample_candidates(proceedings, quota, seed=7)
    assert [e.proceedings_id for e in first] == [e.proceedings_id for e in sample_candidates(list(reversed(proceedings)), quota, seed=7)]
    assert sum(1 for e in first if e.category == "vision") == 4
    assert len({e.proceedings_id for e in first}) == 6


# ---------- source matching ----------
@pytest.fixture
def local_index(tmp_path, source_tree):
    records = [
        {"source_id": "2401.00001", "title": "Sparse Attention for Long Documents!", "authors": ["Jane Doe", "Wei Zhang"],
         "source_path": os.path.relpath(source_tree, tmp_path)},
        {"source_id": "2401.00002", "title": "Sparse attention for long documents", "authors": ["Someone Else"],
         "source_path": os.path.relpath(source_tree, tmp_path)},
    ]
    path = tmp_path / "index.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return LocalSourceIndex(str(path))


ENTRY = ProceedingsEntry(proceedings_id="p1", title="Sparse attention for long documents", authors=["Doe, Jane", "Zhang, Wei"], category="nlp")


def test_match_requires_title_and_author_agreement(local_index):
    match = match_source(ENTRY, local_index)
    assert isinstance(match, SourceMatch)
    assert match.source_id == "2401.00001"
    assert match.author_overlap == 1.0

    stranger = ENTRY.model_copy(update={"authors": ["Nobody, A.", "Zhang, Wei", "Other, B."]})
    assert isinstance(match_source(stranger, local_index), NoMatch)
    unknown = ENTRY.model_copy(update={"title": "A completely different paper"})
    assert isinstance(match_source(unknown, local_index), NoMatch)


def test_curated_paper_is_included_when_it_compiles(local_index, tmp_path):
    paper = curate_paper(ENTRY, local_index, str(tmp_path / "dataset" / "p1"), compile_cmd=FAKE_LATEX)
    assert paper.included
    assert os.path.isfile(os.path.join(paper.source_archive, "main.tex"))


def test_curated_paper_excluded_when_compile_fails(local_index, tmp_path, source_tree):
    with open(os.path.join(source_tree, "main.tex"), "a", encoding="utf-8") as f:
        f.write("\\undefinedmacro\n")
    paper = curate_paper(ENTRY, local_index, str(tmp_path / "dataset" / "p1"), compile_cmd=FAKE_LATEX)
    assert paper.source_match is not None
    assert not paper.included
    assert paper.compile_status.reason == "error"


# ---------- perturbations ----------
def proposal(**fields):
    base = dict(
        criterion="evaluations",
        subtype="data_misinterpretation",
        description="changes a reported number",
        target_file="main.tex",
        line_range=(5, 5),
        original_span="Our method improves accuracy from 71.2 to 78.9 on the benchmark.\n",
        modified_span="Our method improves accuracy from 71.2 to 88.9 on the benchmark.\n",
    )
    base.update(fields)
    return PerturbationProposal(**base)


def test_source_listing_format(source_tree):
    listing = source_listing(source_tree)
    assert listing.splitlines()[0] == "=== file: main.tex ==="
    assert listing.splitlines()[5] == "  5| Our method improves accuracy from 71.2 to 78.9 on the benchmark."


def test_span_check_normalizes_line_endings(source_tree):
    path = os.path.join(source_tree, "main.tex")
    with open(path, "rb") as f:
        data = f.read()
    with open(path, "wb") as f:
        f.write(data.replace(b"\n", b"\r\n"))
    assert span_matches(source_tree, proposal())[0]
    assert not span_matches(source_tree, proposal(original_span="something else"))[0]
    assert not span_matches(source_tree, proposal(line_range=(40, 41)))[0]
    assert not span_matches(source_tree, proposal(target_file="../outside.tex"))[0]


SPAN = "Our method improves accuracy from 71.2 to 78.9 on the benchmark.\n"


def test_span_without_its_final_newline_is_a_mismatch(source_tree):
    assert span_matches(source_tree, proposal(original_span=SPAN))[0]
    ok, reason = span_matches(source_tree, proposal(original_span=SPAN.rstrip("\n")))
    assert not ok
    assert "differs" in reason


@settings(suppress_health_check=[HealthCheck.function_scoped_fixture], max_examples=200)
@given(position=st.integers(0, len(SPAN) - 1), replacement=st.sampled_from(["~", "|", "@", "^", ""]))
def test_any_single_character_mutation_is_a_span_mismatch(source_tree, position, replacement):
    mutated = SPAN[:position] + replacement + SPAN[position + 1:]
    ok, reason = span_matches(source_tree, proposal(original_span=mutated))
    assert not ok
    assert "differs" in reason


def test_accepted_perturbation_is_a_single_edit(source_tree, tmp_path):
    output_dir = str(tmp_path / "perturbations" / "p1__evaluations__01")
    result = accept_perturbation(source_tree, proposal(), output_dir, "p1__evaluations__01", "p1", compile_cmd=FAKE_LATEX)

    assert isinstance(result, Perturbation)
    assert os.path.isfile(result.perturbed_pdf)
    with open(os.path.join(source_tree, "main.tex"), encoding="utf-8") as f:
        original = f.read().splitlines()
    with open(os.path.join(output_dir, "modified-tree", "main.tex"), encoding="utf-8") as f:
        modified = f.read().splitlines()
    differing = [i for i, (a, b) in enumerate(zip(original, modified)) if a != b]
    assert differing == [4]
    assert len(original) == len(modified)


def test_rejections(source_tree, tmp_path):
    mismatch = accept_perturbation(source_tree, proposal(original_span="not in the file"), str(tmp_path / "a"), "a", "p1", compile_cmd=FAKE_LATEX)
    assert isinstance(mismatch, Rejected) and mismatch.reason == "span_mismatch"

    broken = proposal(modified_span="Our method improves \\undefinedclaim accuracy.")
    failure = accept_perturbation(source_tree, broken, str(tmp_path / "b"), "b", "p1", compile_cmd=FAKE_LATEX)
    assert isinstance(failure, Rejected) and failure.reason == "compile_failure"
    assert "Undefined control sequence" in failure.log_excerpt
    assert not os.path.exists(tmp_path / "b")


def generator_gateway():
    return ModelGateway().register_backend("generator", SourceEditFixtureBackend())


def test_perturb_paper_numbers_accepted_perturbations(source_tree, tmp_path):
    paper = SourcePaper(proceedings_id="p1", title="t", category="nlp")
    accepted, rejected = asyncio.run(perturb_paper(
        paper, source_tree, str(tmp_path / "perturbations"), generator_gateway(), SubtypeRegistry(),
        criteria=["evaluations", "correctness"], compile_cmd=FAKE_LATEX,
    ))
    assert rejected == []
    assert [p.perturbation_id for p in accepted] == [
        "p1__evaluations__01", "p1__evaluations__02", "p1__evaluations__03", "p1__correctness__01",
    ]
    assert {p.subtype for p in accepted if p.criterion == "evaluations"} == set(SubtypeRegistry.SEEDS["evaluations"])
    assert accepted[0].modified_span == "Our method improves accuracy from 81.2 to 78.9 on the benchmark.\n"


def test_subtype_registry_is_extensible(source_tree):
    registry = SubtypeRegistry()
    with pytest.raises(CurationError):
        asyncio.run(generate_perturbations(source_tree, "story", "buried_lede", generator_gateway(), subtypes=registry))
    registry.register("story", "buried_lede")
    proposals = asyncio.run(generate_perturbations(source_tree, "story", "buried_lede", generator_gateway(), subtypes=registry))
    assert proposals[0].subtype == "buried_lede"
    with pytest.raises(CurationError):
        registry.register("style", "anything")


@pytest.mark.parametrize("raw", ["no json here", '{"perturbations": "none"}', '{"perturbations": [{"line_start": 3, "line_end": 1}]}'])
def test_malformed_generator_output(raw):
    with pytest.raises(MalformedProposal):
        PerturbationAgent.parse(raw, "story", "overclaimed_contribution")


# ---------- oversight ----------
def oversight_fixture():
    """35개: 둘 다 valid 22, R1 만 1, R2 만 3, 둘 다 invalid 9"""
    pattern = [(True, True)] * 22 + [(True, False)] + [(False, True)] * 3 + [(False, False)] * 9
    verdicts, criteria = [], {}
    for index, (r1, r2) in enumerate(pattern):
        pid = f"x{index:02d}"
        criteria[pid] = SPECS_CRITERIA[index % 5]
        verdicts.append(OversightVerdict(perturbation_id=pid, reviewer_id="R1", valid=r1))
        verdicts.append(OversightVerdict(perturbation_id=pid, reviewer_id="R2", valid=r2))
    return verdicts, criteria


def test_consensus_table():
    verdicts, criteria = oversight_fixture()
    table = record_oversight(verdicts, criteria)

    assert table.reviewers == ["R1", "R2"]
    assert table.overall.n == 35
    assert table.overall.reviewer_valid == {"R1": 23, "R2": 25}
    assert table.overall.consensus == 22
    assert table.overall.agreed_invalid == 9
    assert table.overall.split == 4
    assert sum(row.n for row in table.rows) == 35
    assert sum(row.consensus for row in table.rows) == 22


def test_all_valid_means_full_consensus():
    verdicts = [OversightVerdict(perturbation_id=f"x{i}", reviewer_id=r, valid=True) for i in range(6) for r in ("A", "B", "C")]
    table = record_oversight(verdicts, {f"x{i}": "story" for i in range(6)})
    assert table.overall.consensus == 6


def test_oversight_input_errors():
    verdicts, criteria = oversight_fixture()
    with pytest.raises(DuplicateVerdict):
        record_oversight(verdicts + [verdicts[0]], criteria)
    with pytest.raises(InsufficientVerdicts):
        record_oversight([OversightVerdict(perturbation_id="x00", reviewer_id="R1", valid=True)], criteria)


# ---------- manifest ----------
PAPER_COUNTS = {"story": 153, "presentation": 173, "evaluations": 159, "correctness": 144, "significance": 154}


def synthetic_perturbations(counts):
    return [
        Perturbation(**proposal(criterion=criterion).model_dump(), perturbation_id=f"p{i % 40:02d}__{criterion}__{i:03d}", paper_id=f"p{i % 40:02d}")
        for criterion, n in counts.items()
        for i in range(n)
    ]


def included_papers(n=40):
    return [
        SourcePaper(
            proceedings_id=f"p{i:02d}", title=f"paper {i}", category="nlp",
            source_match=SourceMatch(source_id=str(i), normalized_title=f"paper {i}", author_overlap=1.0),
            compile_status=CompileStatus(ok=True),
        )
        for i in range(n)
    ]


def test_manifest_counts_match_dataset_shape():
    manifest = build_manifest("venue", included_papers(), synthetic_perturbations(PAPER_COUNTS))
    assert manifest.counts == PAPER_COUNTS
    assert manifest.total == 783
    assert manifest.perturbations == sorted(manifest.perturbations, key=lambda p: p.perturbation_id)


def test_manifest_rejects_orphans_and_bad_counts():
    with pytest.raises(CountMismatch):
        build_manifest("venue", included_papers(10), synthetic_perturbations({"story": 20}))

    manifest = build_manifest("venue", included_papers(), synthetic_perturbations({"story": 3}))
    tampered = DatasetManifest(**{**manifest.model_dump(), "total": 4})
    with pytest.raises(CountMismatch):
        validate_manifest(tampered)


def test_oversight_sample_per_criterion():
    sample = sample_for_oversight(synthetic_perturbations(PAPER_COUNTS), {c: 7 for c in SPECS_CRITERIA}, seed=3)
    assert len(sample) == 35
    assert sample == sample_for_oversight(synthetic_perturbations(PAPER_COUNTS), {c: 7 for c in SPECS_CRITERIA}, seed=3)
    with pytest.raises(EmptyCategory):
        sample_for_oversight(synthetic_perturbations({"story": 2}), {"story": 3})
