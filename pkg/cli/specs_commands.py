"""
specs curate | perturb | judge | report | oversight
"""

import argparse
import asyncio
import json
import os
from typing import Dict, List

import pandas as pd

from db.dataset_store import DatasetStore
from db.run_store import RunStore
from schemas.specs import (
    SPECS_CRITERIA,
    DatasetManifest,
    Judgment,
    ManifestProvenance,
    OversightVerdict,
    Perturbation,
    ProceedingsEntry,
    QuotaPolicy,
    ReviewVariant,
)
from services.agents.utils import StepClock, SystemClock, review_logger, utc_iso
from services.compile_gate import check_toolchain
from services.exceptions import CurationError, EvaluationError
from services.source_index import ArxivSourceIndex, LocalSourceIndex, SourceIndex
from services.specs_curation_service import (
    SubtypeRegistry,
    build_manifest,
    curate_paper,
    perturb_paper,
    record_oversight,
    sample_candidates,
    sample_for_oversight,
)
from services.specs_eval_service import (
    RESULT_COLUMNS,
    expected_review_count,
    judge_reviews,
    perturbation_bundle_loader,
    results_table,
    run_variants,
    write_report,
)

from cli.common import EXIT_BACKEND, EXIT_OK, CliContext


def register(subparsers, parent: argparse.ArgumentParser):
    specs = subparsers.add_parser("specs", help="SPECS 섭동 벤치마크", parents=[parent])
    commands = specs.add_subparsers(dest="action", required=True)

    curate = commands.add_parser("curate", help="논문집 표본 추출 + 소스 매칭 + 컴파일 검증", parents=[parent])
    curate.add_argument("--proceedings", required=True, help="CSV/JSONL: proceedings_id, title, authors(; 구분), category")
    index = curate.add_mutually_exclusive_group(required=True)
    index.add_argument("--source-index", help="로컬 index.jsonl")
    index.add_argument("--arxiv", action="store_true", help="arXiv export API 사용")
    curate.add_argument("--venue-id", default="venue")
    curate.add_argument("--quota-kind", choices=["uniform", "proportional", "explicit"], default="proportional")
    curate.add_argument("--quota-total", type=int, default=0)
    curate.add_argument("--quota", action="append", default=[], help="explicit 할당: category=count")
    curate.add_argument("--dataset", help="데이터셋 디렉터리 (기본: <output-root>/specs)")
    curate.set_defaults(handler=cmd_specs_curate)

    perturb = commands.add_parser("perturb", help="섭동 생성 + 컴파일 게이트", parents=[parent])
    perturb.add_argument("--dataset")
    perturb.add_argument("--criteria", default=",".join(SPECS_CRITERIA))
    perturb.add_argument("--subtype", action="append", default=[], help="추가 하위 유형: criterion:name")
    perturb.set_defaults(handler=cmd_specs_perturb)

    judge = commands.add_parser("judge", help="변형 리뷰 생성 + judge 판정", parents=[parent])
    judge.add_argument("--dataset")
    judge.add_argument("--run-id", default="run1")
    judge.add_argument("--variants", help="쉼표 구분: baseline,targeted:story,...,final (기본: 전체)")
    judge.add_argument("--limit", type=int, help="앞에서부터 N개 섭동만")
    judge.set_defaults(handler=cmd_specs_judge)

    report = commands.add_parser("report", help="재현율 표 + 탐지 행렬", parents=[parent])
    report.add_argument("--judgments", required=True, help="judgments.jsonl 또는 그 디렉터리")
    report.add_argument("--out", help="출력 디렉터리 (기본: judgments 위치)")
    report.set_defaults(handler=cmd_specs_report)

    oversight = commands.add_parser("oversight", help="감독 검토 표본 추출 / 합의 표", parents=[parent])
    oversight.add_argument("--dataset")
    action = oversight.add_mutually_exclusive_group(required=True)
    action.add_argument("--sample-per-criterion", type=int, help="기준별 N개 추출해 검토 시트 작성")
    action.add_argument("--verdicts", help="CSV: perturbation_id, reviewer_id, valid, note")
    oversight.set_defaults(handler=cmd_specs_oversight)


def overrides(args: argparse.Namespace) -> dict:
    return {}


def _dataset(ctx: CliContext, args: argparse.Namespace) -> DatasetStore:
    return DatasetStore(args.dataset or os.path.join(ctx.config.output_root, "specs"))


def _clock(ctx: CliContext):
    return StepClock() if ctx.config.mock else SystemClock()


# ============= [CURATE] ==============
def load_proceedings(path: str) -> List[ProceedingsEntry]:
    if not os.path.isfile(path):
        raise CurationError(f"proceedings file not found: {path}")
    if path.endswith((".jsonl", ".json")):
        frame = pd.read_json(path, lines=path.endswith(".jsonl"), dtype=False)
    else:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = {"proceedings_id", "title", "authors", "category"} - set(frame.columns)
    if missing:
        raise CurationError(f"proceedings file lacks columns: {', '.join(sorted(missing))}")
    entries = []
    for record in frame.to_dict(orient="records"):
        authors = record["authors"]
        if isinstance(authors, str):
            authors = [name.strip() for name in authors.split(";") if name.strip()]
        entries.append(ProceedingsEntry(
            proceedings_id=str(record["proceedings_id"]),
            title=str(record["title"]),
            authors=list(authors),
            category=str(record["category"]),
        ))
    return entries


def _quota(args: argparse.Namespace) -> QuotaPolicy:
    per_category: Dict[str, int] = {}
    for item in args.quota:
        category, _, count = item.partition("=")
        if not count.isdigit():
            raise CurationError(f"explicit quota must look like category=count, got {item!r}")
        per_category[category] = int(count)
    return QuotaPolicy(kind=args.quota_kind, total=args.quota_total, per_category=per_category)


def cmd_specs_curate(ctx: CliContext, args: argparse.Namespace) -> int:
    settings = ctx.config.curation
    check_toolchain(settings.compile_cmd)
    store = _dataset(ctx, args)
    index: SourceIndex = ArxivSourceIndex(policy=ctx.config.gateway.retry) if args.arxiv else LocalSourceIndex(args.source_index)

    candidates = sample_candidates(load_proceedings(args.proceedings), _quota(args), ctx.config.seed)
    papers = [
        curate_paper(entry, index, store.source_dir(entry.proceedings_id), settings.compile_cmd, settings.compile_timeout, settings.min_author_overlap)
        for entry in candidates
    ]
    store.write_papers(papers)
    provenance = ManifestProvenance(created_at=utc_iso(_clock(ctx).now()), seed=ctx.config.seed)
    manifest = build_manifest(args.venue_id, papers, [], provenance)
    store.write_manifest(manifest)

    ctx.emit({
        "candidates": len(candidates),
        "included": len(manifest.papers),
        "no_source": sum(1 for paper in papers if paper.source_match is None),
        "compile_failed": sum(1 for paper in papers if paper.source_match is not None and not paper.included),
        "dataset": store.root,
    })
    return EXIT_OK


# ============= [PERTURB] ==============
def cmd_specs_perturb(ctx: CliContext, args: argparse.Namespace) -> int:
    settings = ctx.config.curation
    check_toolchain(settings.compile_cmd)
    store = _dataset(ctx, args)
    manifest = store.read_manifest()
    criteria = [criterion.strip() for criterion in args.criteria.split(",") if criterion.strip()]
    subtypes = SubtypeRegistry()
    for item in args.subtype:
        criterion, _, name = item.partition(":")
        subtypes.register(criterion, name)

    async def run():
        accepted, rejected = [], []
        for paper in manifest.papers:
            ok, bad = await perturb_paper(
                paper,
                store.source_dir(paper.proceedings_id),
                store.perturbations_dir(paper.proceedings_id),
                ctx.gateway,
                subtypes,
                criteria,
                settings.generator_backend,
                settings.compile_cmd,
                settings.compile_timeout,
                settings.compile_workers,
            )
            accepted.extend(ok)
            rejected.extend(bad)
        return accepted, rejected

    accepted, rejected = asyncio.run(run())
    provenance = ManifestProvenance(
        generator_backend_id=settings.generator_backend,
        created_at=utc_iso(_clock(ctx).now()),
        seed=ctx.config.seed,
    )
    updated = build_manifest(manifest.venue_id, manifest.papers, accepted, provenance)
    store.write_manifest(updated)
    with open(os.path.join(store.root, "rejections.json"), "w", encoding="utf-8") as f:
        json.dump([{"perturbation_id": pid, **r.model_dump()} for pid, r in rejected], f, ensure_ascii=False, indent=2)

    ctx.emit({"accepted": len(accepted), "rejected": len(rejected), "counts": updated.counts, "total": updated.total})
    return EXIT_OK


# ============= [JUDGE] ==============
def _variants(spec: str) -> List[ReviewVariant]:
    if not spec:
        return ReviewVariant.all_variants()
    try:
        return [ReviewVariant.parse(key.strip()) for key in spec.split(",") if key.strip()]
    except ValueError as e:
        raise EvaluationError(f"invalid variant list {spec!r}: {e}") from e


def cmd_specs_judge(ctx: CliContext, args: argparse.Namespace) -> int:
    store = _dataset(ctx, args)
    manifest: DatasetManifest = store.read_manifest()
    perturbations: List[Perturbation] = manifest.perturbations[:args.limit] if args.limit else manifest.perturbations
    variants = _variants(args.variants)
    eval_dir = store.eval_dir(args.run_id)
    loader = perturbation_bundle_loader(ctx.ocr(), ctx.config.ingest.target_dpi)

    async def run():
        reviews, review_failures = await run_variants(
            perturbations,
            ctx.gateway,
            loader,
            variants,
            registry=ctx.registry,
            store_factory=lambda plan_key: RunStore(eval_dir, plan_key),
            workers=ctx.config.pipeline.workers,
            clock_factory=ctx.clock_factory(),
        )
        judgments, judge_failures = await judge_reviews(
            reviews, perturbations, ctx.gateway, ctx.config.evaluation.judge_backend, ctx.config.evaluation.workers
        )
        return reviews, judgments, review_failures + judge_failures

    reviews, judgments, failures = asyncio.run(run())
    store.write_jsonl(store.eval_path(args.run_id, "reviews.jsonl"), reviews)
    store.write_jsonl(store.eval_path(args.run_id, "judgments.jsonl"), judgments)
    store.write_jsonl(store.eval_path(args.run_id, "failures.jsonl"), failures)

    ctx.emit({
        "perturbations": len(perturbations),
        "variants": [variant.key for variant in variants],
        "expected_reviews": expected_review_count(len(perturbations), variants),
        "reviews": len(reviews),
        "judgments": len(judgments),
        "caught": sum(1 for judgment in judgments if judgment.caught),
        "failures": len(failures),
        "output": eval_dir,
    })
    return EXIT_BACKEND if failures else EXIT_OK


# ============= [REPORT] ==============
def cmd_specs_report(ctx: CliContext, args: argparse.Namespace) -> int:
    path = args.judgments
    if os.path.isdir(path):
        path = os.path.join(path, "judgments.jsonl")
    if not os.path.isfile(path):
        raise EvaluationError(f"judgments file not found: {path}")
    judgments = DatasetStore.read_jsonl(path, Judgment)
    if not judgments:
        raise EvaluationError(f"no judgments in {path}")

    paths = write_report(judgments, args.out or os.path.dirname(os.path.abspath(path)))
    rows = [{column: row[column] for column in RESULT_COLUMNS} for row in results_table(judgments)]
    ctx.emit({"rows": rows, **paths}, pd.DataFrame(rows, columns=list(RESULT_COLUMNS)).to_string(index=False))
    return EXIT_OK


# ============= [OVERSIGHT] ==============
TRUTHY = {"1", "true", "yes", "y", "valid"}
FALSY = {"0", "false", "no", "n", "invalid"}


def load_verdicts(path: str) -> List[OversightVerdict]:
    if not os.path.isfile(path):
        raise CurationError(f"verdict file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    verdicts = []
    for row_number, record in enumerate(frame.to_dict(orient="records"), start=1):
        flag = str(record.get("valid", "")).strip().lower()
        if flag not in TRUTHY | FALSY:
            raise CurationError(f"row {row_number}: valid must be true/false, got {record.get('valid')!r}")
        verdicts.append(OversightVerdict(
            perturbation_id=record["perturbation_id"].strip(),
            reviewer_id=record["reviewer_id"].strip(),
            valid=flag in TRUTHY,
            note=record.get("note", ""),
        ))
    return verdicts


def cmd_specs_oversight(ctx: CliContext, args: argparse.Namespace) -> int:
    store = _dataset(ctx, args)
    manifest = store.read_manifest()

    if args.sample_per_criterion is not None:
        per_criterion = {criterion: args.sample_per_criterion for criterion in SPECS_CRITERIA if manifest.counts.get(criterion)}
        sample = sample_for_oversight(manifest.perturbations, per_criterion, ctx.config.seed)
        sheet = os.path.join(store.root, "oversight_sample.csv")
        pd.DataFrame(
            [{"perturbation_id": p.perturbation_id, "criterion": p.criterion, "subtype": p.subtype, "description": p.description,
              "reviewer_id": "", "valid": "", "note": ""} for p in sample]
        ).to_csv(sheet, index=False, encoding="utf-8", lineterminator="\n")
        ctx.emit({"sampled": len(sample), "sheet": sheet})
        return EXIT_OK

    criteria = {p.perturbation_id: p.criterion for p in manifest.perturbations}
    table = record_oversight(load_verdicts(args.verdicts), criteria)
    path = os.path.join(store.root, "consensus.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(table.model_dump_json(indent=2))
    review_logger.info(f"🤝 합의 {table.overall.consensus}/{table.overall.n}, 불일치 {table.overall.split}")
    lines = [f"{row.criterion}: n={row.n} consensus={row.consensus} agreed_invalid={row.agreed_invalid} split={row.split} "
             + " ".join(f"{reviewer}={count}" for reviewer, count in row.reviewer_valid.items())
             for row in table.rows + [table.overall]]
    ctx.emit(table.overall.model_dump() | {"consensus_file": path}, "\n".join(lines))
    return EXIT_OK


