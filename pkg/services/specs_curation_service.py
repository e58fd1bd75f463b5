"""
SPECS curation service
학회 논문집 표본 추출 -> arXiv 소스 매칭 -> 컴파일 검증 -> 섭동 생성/수락 -> 감독 판정 -> 매니페스트

섭동은 모두 원본 소스에 대한 독립 수정 (한 섭동 = 한 결함)
"""

import asyncio
import os
import re
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from unidecode import unidecode

from schemas.specs import (
    SPECS_CRITERIA,
    CompileStatus,
    ConsensusRow,
    ConsensusTable,
    DatasetManifest,
    ManifestProvenance,
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
from services.agents.utils import review_logger
from services.citation_service import normalize_title
from services.compile_gate import DEFAULT_COMPILE_CMD, verify_compiles
from services.exceptions import (
    CountMismatch,
    CurationError,
    DuplicateVerdict,
    EmptyCategory,
    InsufficientVerdicts,
)
from services.model_gateway import ModelGateway
from services.source_index import SourceIndex


# ============= [SUBTYPES] ==============
class SubtypeRegistry:
    """기준별 결함 하위 유형. 기본값 외에 register 로 확장"""

    SEEDS: Dict[str, Tuple[str, ...]] = {
        "story": ("overclaimed_contribution",),
        "presentation": ("notation_inconsistency",),
        "evaluations": ("missing_baseline", "missing_metric", "data_misinterpretation"),
        "correctness": ("derivation_error",),
        "significance": ("misrepresented_prior_work",),
    }

    def __init__(self):
        self._subtypes: Dict[str, List[str]] = {criterion: list(self.SEEDS[criterion]) for criterion in SPECS_CRITERIA}
        self._lock = threading.Lock()

    def register(self, criterion: str, subtype: str):
        if criterion not in SPECS_CRITERIA:
            raise CurationError(f"unknown criterion: {criterion}")
        with self._lock:
            if subtype not in self._subtypes[criterion]:
                self._subtypes[criterion].append(subtype)

    def subtypes(self, criterion: str) -> List[str]:
        with self._lock:
            return list(self._subtypes.get(criterion, []))

    def contains(self, criterion: str, subtype: str) -> bool:
        return subtype in self.subtypes(criterion)


# ============= [SAMPLING] ==============
def _largest_remainder(total: int, weights: Mapping[str, int]) -> Dict[str, int]:
    """Hamilton 배분. 나머지 동률은 범주 이름 순"""
    weight_sum = sum(weights.values())
    if weight_sum == 0:
        return {category: 0 for category in weights}
    exact = {category: Fraction(total * weight, weight_sum) for category, weight in weights.items()}
    allocation = {category: int(value) for category, value in exact.items()}
    leftover = total - sum(allocation.values())
    order = sorted(weights, key=lambda category: (-(exact[category] - allocation[category]), category))
    for category in order[:leftover]:
        allocation[category] += 1
    return allocation


def allocate_quota(quota: QuotaPolicy, available: Mapping[str, int]) -> Dict[str, int]:
    if quota.kind == "explicit":
        unknown = sorted(set(quota.per_category) - set(available))
        if unknown:
            raise EmptyCategory(f"quota names categories with no papers: {', '.join(unknown)}")
        allocation = {category: int(quota.per_category.get(category, 0)) for category in available}
    elif quota.kind == "uniform":
        allocation = _largest_remainder(quota.total, {category: 1 for category in available})
    else:
        allocation = _largest_remainder(quota.total, available)

    for category, wanted in sorted(allocation.items()):
        if wanted > available[category]:
            raise EmptyCategory(f"category {category!r} has {available[category]} papers, quota needs {wanted}", category=category)
    return allocation


def sample_candidates(proceedings: Sequence[ProceedingsEntry], quota: QuotaPolicy, seed: int = 0) -> List[ProceedingsEntry]:
    """범주별 할당량만큼 무작위 추출 (seed 고정 시 결정적)"""
    if not proceedings:
        raise EmptyCategory("proceedings list is empty")
    by_category: Dict[str, List[ProceedingsEntry]] = {}
    for entry in sorted(proceedings, key=lambda e: e.proceedings_id):
        by_category.setdefault(entry.category, []).append(entry)

    allocation = allocate_quota(quota, {category: len(entries) for category, entries in by_category.items()})
    rng = np.random.default_rng(seed)
    sample: List[ProceedingsEntry] = []
    for category in sorted(by_category):
        entries = by_category[category]
        picked = rng.choice(len(entries), size=allocation[category], replace=False) if allocation[category] else []
        sample.extend(entries[int(index)] for index in sorted(picked))
    review_logger.info(f"🎲 후보 추출: {len(sample)}편 / {len(proceedings)}편 ({quota.kind}, seed={seed})")
    return sample


# ============= [SOURCE MATCHING] ==============
def surname(name: str) -> str:
    """'Last, First' 또는 'First Last' -> 정규화된 성"""
    name = unidecode(name or "").strip()
    part = name.split(",")[0] if "," in name else (name.split() or [""])[-1]
    return re.sub(r"[^a-z]", "", part.lower())


def author_agreement(a: Iterable[str], b: Iterable[str]) -> float:
    left = {surname(name) for name in a} - {""}
    right = {surname(name) for name in b} - {""}
    if not left or not right:
        return 0.0
    return len(left & right) / max(len(left), len(right))


def match_source(entry: ProceedingsEntry, index: SourceIndex, min_author_overlap: float = 0.8) -> Union[SourceMatch, NoMatch]:
    """정규화 제목 일치 + 저자 성 일치율 >= min_author_overlap"""
    title = normalize_title(entry.title)
    candidates = [record for record in index.search(entry.title) if normalize_title(record.title) == title]
    if not candidates:
        return NoMatch(reason="no source with a matching normalized title")
    scored = sorted(
        ((author_agreement(entry.authors, record.authors), record) for record in candidates),
        key=lambda pair: (-pair[0], pair[1].source_id),
    )
    overlap, best = scored[0]
    if overlap < min_author_overlap:
        return NoMatch(reason=f"author overlap {overlap:.2f} below {min_author_overlap:.2f} for {best.source_id}")
    return SourceMatch(source_id=best.source_id, normalized_title=title, author_overlap=round(overlap, 4), source_path=best.source_path)


def curate_paper(
    entry: ProceedingsEntry,
    index: SourceIndex,
    source_dir: str,
    compile_cmd: str = DEFAULT_COMPILE_CMD,
    timeout: float = 120.0,
    min_author_overlap: float = 0.8,
) -> SourcePaper:
    """매칭 -> 소스 준비 -> 컴파일. 포함 여부는 SourcePaper.included"""
    paper = SourcePaper(proceedings_id=entry.proceedings_id, title=entry.title, category=entry.category)
    match = match_source(entry, index, min_author_overlap)
    if isinstance(match, NoMatch):
        review_logger.info(f"➖ [{entry.proceedings_id}] 소스 없음: {match.reason}")
        return paper
    paper.source_match = match
    records = [record for record in index.search(entry.title) if record.source_id == match.source_id]
    path = index.fetch_source(records[0], source_dir)
    paper.source_archive = path
    paper.compile_status = verify_compiles(path, timeout=timeout, compile_cmd=compile_cmd)
    if not paper.compile_status.ok:
        review_logger.info(f"➖ [{entry.proceedings_id}] 컴파일 실패: {paper.compile_status.reason}")
    return paper


# ============= [PERTURBATIONS] ==============
def read_source_lines(path: str) -> List[str]:
    """LF 정규화 후 줄 목록 (줄 끝 포함)"""
    with open(path, "rb") as f:
        text = f.read().decode("utf-8", errors="surrogateescape")
    return text.replace("\r\n", "\n").replace("\r", "\n").splitlines(keepends=True)


def source_listing(source_tree: str) -> str:
    """=== file: <path> === 헤더 + '  <n>| <text>' 번호 줄"""
    blocks = []
    for directory, _, files in sorted(os.walk(source_tree)):
        for name in sorted(files):
            if not name.endswith(".tex"):
                continue
            path = os.path.join(directory, name)
            rel = os.path.relpath(path, source_tree).replace(os.sep, "/")
            lines = read_source_lines(path)
            width = len(str(len(lines)))
            body = "\n".join(f"  {number:>{width}}| {line.rstrip(chr(10))}" for number, line in enumerate(lines, 1))
            blocks.append(f"=== file: {rel} ===\n{body}")
    return "\n".join(blocks)


async def generate_perturbations(
    source_tree: str,
    criterion: str,
    subtype: str,
    gateway: ModelGateway,
    backend_id: str = "generator",
    paper_id: str = "",
    subtypes: Optional[SubtypeRegistry] = None,
) -> List[PerturbationProposal]:
    if criterion not in SPECS_CRITERIA:
        raise CurationError(f"unknown criterion: {criterion}")
    if subtypes is not None and not subtypes.contains(criterion, subtype):
        raise CurationError(f"unknown subtype {subtype!r} for {criterion}")
    listing = source_listing(source_tree)
    return await PerturbationAgent().propose(paper_id or os.path.basename(source_tree), listing, criterion, subtype, gateway, backend_id)


def _resolve_target(source_tree: str, target_file: str) -> Optional[str]:
    root = os.path.realpath(source_tree)
    path = os.path.realpath(os.path.join(root, target_file))
    if os.path.commonpath([root, path]) != root or not os.path.isfile(path):
        return None
    return path


def span_matches(source_tree: str, proposal: PerturbationProposal) -> Tuple[bool, str]:
    """LF 정규화 후 바이트 단위 완전 일치 (줄 끝 개행 포함)"""
    path = _resolve_target(source_tree, proposal.target_file)
    if path is None:
        return False, f"target file not in source tree: {proposal.target_file}"
    lines = read_source_lines(path)
    start, end = proposal.line_range
    if end > len(lines):
        return False, f"line range {start}-{end} beyond end of {proposal.target_file} ({len(lines)} lines)"
    actual = "".join(lines[start - 1:end])
    claimed = proposal.original_span.replace("\r\n", "\n")
    if actual == claimed:
        return True, ""
    return False, f"original span differs from {proposal.target_file}:{start}-{end}"


def apply_proposal(source_tree: str, proposal: PerturbationProposal, destination: str):
    """원본 트리를 복사하고 해당 줄 범위를 교체"""
    if os.path.exists(destination):
        shutil.rmtree(destination)
    shutil.copytree(source_tree, destination)
    path = os.path.join(destination, proposal.target_file)
    lines = read_source_lines(path)
    start, end = proposal.line_range
    replacement = proposal.modified_span.replace("\r\n", "\n")
    if lines[end - 1].endswith("\n") and not replacement.endswith("\n"):
        replacement += "\n"
    edited = "".join(lines[:start - 1]) + replacement + "".join(lines[end:])
    with open(path, "wb") as f:
        f.write(edited.encode("utf-8", errors="surrogateescape"))


def accept_perturbation(
    source_tree: str,
    proposal: PerturbationProposal,
    output_dir: str,
    perturbation_id: str,
    paper_id: str,
    compile_cmd: str = DEFAULT_COMPILE_CMD,
    timeout: float = 120.0,
) -> Union[Perturbation, Rejected]:
    """(a) 원문 구간 일치 (b) 수정 트리 컴파일 성공 -> 수락. output_dir 에 modified-tree/, output.pdf, proposal.json"""
    ok, detail = span_matches(source_tree, proposal)
    if not ok:
        review_logger.info(f"🚫 [{perturbation_id}] span_mismatch: {detail}")
        return Rejected(reason="span_mismatch", detail=detail)

    tree = os.path.join(output_dir, "modified-tree")
    pdf_path = os.path.join(output_dir, "output.pdf")
    apply_proposal(source_tree, proposal, tree)
    status: CompileStatus = verify_compiles(tree, timeout=timeout, compile_cmd=compile_cmd, pdf_out=pdf_path)
    if not status.ok:
        shutil.rmtree(output_dir, ignore_errors=True)
        review_logger.info(f"🚫 [{perturbation_id}] compile_failure ({status.reason})")
        return Rejected(reason="compile_failure", detail=status.reason, log_excerpt=status.log_excerpt)

    perturbation = Perturbation(
        **proposal.model_dump(),
        perturbation_id=perturbation_id,
        paper_id=paper_id,
        perturbed_pdf=pdf_path,
    )
    with open(os.path.join(output_dir, "proposal.json"), "w", encoding="utf-8") as f:
        f.write(perturbation.model_dump_json(indent=2))
    review_logger.info(f"✅ [{perturbation_id}] 섭동 수락 ({proposal.criterion}/{proposal.subtype})")
    return perturbation


async def perturb_paper(
    paper: SourcePaper,
    source_tree: str,
    output_root: str,
    gateway: ModelGateway,
    subtypes: SubtypeRegistry,
    criteria: Sequence[str] = SPECS_CRITERIA,
    backend_id: str = "generator",
    compile_cmd: str = DEFAULT_COMPILE_CMD,
    timeout: float = 120.0,
    compile_workers: int = 4,
) -> Tuple[List[Perturbation], List[Tuple[str, Rejected]]]:
    """기준 x 하위 유형별 제안 생성 후 컴파일 게이트를 병렬 실행"""
    jobs = [(criterion, subtype) for criterion in criteria for subtype in subtypes.subtypes(criterion)]
    batches = await asyncio.gather(*(
        generate_perturbations(source_tree, criterion, subtype, gateway, backend_id, paper.proceedings_id, subtypes)
        for criterion, subtype in jobs
    ))

    numbered: List[Tuple[str, PerturbationProposal]] = []
    counters: Dict[str, int] = {}
    for proposals in batches:
        for proposal in proposals:
            counters[proposal.criterion] = counters.get(proposal.criterion, 0) + 1
            numbered.append((f"{paper.proceedings_id}__{proposal.criterion}__{counters[proposal.criterion]:02d}", proposal))

    def gate(item: Tuple[str, PerturbationProposal]):
        perturbation_id, proposal = item
        output_dir = os.path.join(output_root, perturbation_id)
        return perturbation_id, accept_perturbation(source_tree, proposal, output_dir, perturbation_id, paper.proceedings_id, compile_cmd, timeout)

    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=max(1, compile_workers)) as pool:
        results = await asyncio.gather(*(loop.run_in_executor(pool, gate, item) for item in numbered))

    accepted = [result for _, result in results if isinstance(result, Perturbation)]
    rejected = [(perturbation_id, result) for perturbation_id, result in results if isinstance(result, Rejected)]
    return accepted, rejected


# ============= [OVERSIGHT] ==============
def sample_for_oversight(perturbations: Sequence[Perturbation], per_criterion: Mapping[str, int], seed: int = 0) -> List[Perturbation]:
    """기준별 개수만큼 무작위 추출 (감독 검토용)"""
    rng = np.random.default_rng(seed)
    picked: List[Perturbation] = []
    for criterion in SPECS_CRITERIA:
        pool = sorted((p for p in perturbations if p.criterion == criterion), key=lambda p: p.perturbation_id)
        wanted = per_criterion.get(criterion, 0)
        if wanted > len(pool):
            raise EmptyCategory(f"{criterion}: {len(pool)} perturbations, {wanted} requested", category=criterion)
        if wanted:
            picked.extend(pool[int(index)] for index in sorted(rng.choice(len(pool), size=wanted, replace=False)))
    return picked


def _consensus_row(criterion: str, ids: List[str], reviewers: List[str], table: Dict[str, Dict[str, bool]]) -> ConsensusRow:
    reviewer_valid = {reviewer: sum(1 for pid in ids if table[pid].get(reviewer)) for reviewer in reviewers}
    consensus = sum(1 for pid in ids if all(table[pid].values()))
    agreed_invalid = sum(1 for pid in ids if not any(table[pid].values()))
    return ConsensusRow(
        criterion=criterion,
        n=len(ids),
        reviewer_valid=reviewer_valid,
        consensus=consensus,
        agreed_invalid=agreed_invalid,
        split=len(ids) - consensus - agreed_invalid,
    )


def record_oversight(verdicts: Sequence[OversightVerdict], criteria: Mapping[str, str]) -> ConsensusTable:
    """consensus(p) = 모든 검토자가 valid. criteria: perturbation_id -> criterion"""
    table: Dict[str, Dict[str, bool]] = {}
    for verdict in verdicts:
        row = table.setdefault(verdict.perturbation_id, {})
        if verdict.reviewer_id in row:
            raise DuplicateVerdict(f"{verdict.reviewer_id} judged {verdict.perturbation_id} twice")
        row[verdict.reviewer_id] = verdict.valid

    for perturbation_id in sorted(table):
        if len(table[perturbation_id]) < 2:
            raise InsufficientVerdicts(f"{perturbation_id} needs verdicts from at least two reviewers", perturbation_id=perturbation_id)
        if perturbation_id not in criteria:
            raise CurationError(f"no criterion known for {perturbation_id}")

    reviewers = sorted({verdict.reviewer_id for verdict in verdicts})
    rows = []
    for criterion in SPECS_CRITERIA:
        ids = sorted(pid for pid in table if criteria[pid] == criterion)
        if ids:
            rows.append(_consensus_row(criterion, ids, reviewers, table))
    overall = _consensus_row("all", sorted(table), reviewers, table)
    return ConsensusTable(
        reviewers=reviewers,
        rows=rows,
        overall=overall,
        consensus_by_perturbation={pid: all(table[pid].values()) for pid in sorted(table)},
    )


# ============= [MANIFEST] ==============
def criterion_counts(perturbations: Iterable[Perturbation]) -> Dict[str, int]:
    counts = {criterion: 0 for criterion in SPECS_CRITERIA}
    for perturbation in perturbations:
        counts[perturbation.criterion] += 1
    return counts


def validate_manifest(manifest: DatasetManifest) -> DatasetManifest:
    expected = criterion_counts(manifest.perturbations)
    if manifest.counts != expected:
        raise CountMismatch(f"criterion counts {manifest.counts} disagree with perturbations {expected}")
    if sum(manifest.counts.values()) != manifest.total or manifest.total != len(manifest.perturbations):
        raise CountMismatch(f"counts sum to {sum(manifest.counts.values())}, total is {manifest.total}")
    return manifest


def build_manifest(
    venue_id: str,
    papers: Sequence[SourcePaper],
    perturbations: Sequence[Perturbation],
    provenance: Optional[ManifestProvenance] = None,
) -> DatasetManifest:
    included = {paper.proceedings_id for paper in papers if paper.included}
    orphans = sorted({p.paper_id for p in perturbations} - included)
    if orphans:
        raise CountMismatch(f"perturbations reference papers not in the dataset: {', '.join(orphans)}")
    ordered = sorted(perturbations, key=lambda p: p.perturbation_id)
    counts = criterion_counts(ordered)
    manifest = DatasetManifest(
        venue_id=venue_id,
        papers=sorted((p for p in papers if p.included), key=lambda p: p.proceedings_id),
        perturbations=ordered,
        counts=counts,
        total=sum(counts.values()),
        provenance=provenance or ManifestProvenance(),
    )
    return validate_manifest(manifest)
