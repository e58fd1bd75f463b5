"""
qa check: 구조 검사 + 품질 critic + 인용 검증 -> 감독 보고서(oversight.csv)
"""

import argparse
import asyncio
import os
from typing import List, Optional, Tuple

from db.run_store import RunStore
from schemas.review import CitationAudit, CriticFindings
from services.agents.utils import review_logger
from services.citation_service import CitationResolver, CrossrefResolver, OfflineIndexResolver, audit_citations, audit_summary
from services.exceptions import ReviewQualityError
from services.review_quality_service import compile_oversight_report, parse_review, review_findings

from cli.common import EXIT_OK, CliContext


def register(subparsers, parent: argparse.ArgumentParser):
    qa = subparsers.add_parser("qa", help="리뷰 품질 검사", parents=[parent])
    commands = qa.add_subparsers(dest="action", required=True)

    check = commands.add_parser("check", help="critic + 인용 검증 + 감독 보고서", parents=[parent])
    source = check.add_mutually_exclusive_group(required=True)
    source.add_argument("--review", action="append", help="review.md 경로 (여러 번 지정 가능)")
    source.add_argument("--run-id", help="실행 결과의 review.md 전체")
    check.add_argument("--citation-index", help="오프라인 서지 인덱스 (JSONL)")
    check.add_argument("--name", default="oversight")
    check.set_defaults(handler=cmd_qa_check)


def overrides(args: argparse.Namespace) -> dict:
    return {"quality.citation_index": getattr(args, "citation_index", None)}


def _review_files(ctx: CliContext, args: argparse.Namespace) -> List[Tuple[str, str]]:
    """(paper_id, 경로)"""
    if args.review:
        files = []
        for path in args.review:
            if not os.path.isfile(path):
                raise ReviewQualityError(f"review file not found: {path}")
            paper_id = os.path.basename(os.path.dirname(os.path.abspath(path))) if os.path.basename(path) == "review.md" \
                else os.path.splitext(os.path.basename(path))[0]
            files.append((paper_id, path))
        return files
    store = RunStore(ctx.config.output_root, args.run_id)
    files = []
    for paper_id in sorted(os.listdir(store.run_dir)):
        path = os.path.join(store.run_dir, paper_id, "review.md")
        if os.path.isfile(path):
            files.append((paper_id, path))
    if not files:
        raise ReviewQualityError(f"no reviews under {store.run_dir}")
    return files


def _resolver(ctx: CliContext) -> Optional[CitationResolver]:
    settings = ctx.config.quality
    if settings.citation_index:
        return OfflineIndexResolver.from_file(settings.citation_index)
    if ctx.config.mock:
        return None
    return CrossrefResolver(policy=ctx.config.gateway.retry)


def cmd_qa_check(ctx: CliContext, args: argparse.Namespace) -> int:
    settings = ctx.config.quality
    resolver = _resolver(ctx)
    if resolver is None:
        review_logger.warning("⚠️ mock 모드 + 인용 인덱스 없음: 인용 검증 생략")

    async def check() -> List[Tuple[str, CriticFindings, Optional[CitationAudit]]]:
        rows = []
        for paper_id, path in _review_files(ctx, args):
            with open(path, "r", encoding="utf-8") as f:
                body = f.read()
            review = parse_review(paper_id, body)
            findings = await review_findings(review, ctx.gateway, settings.critic_backend, settings.rating_scale)
            audit = audit_citations(review, resolver, settings.valid_threshold, settings.fake_threshold) if resolver else None
            rows.append((paper_id, findings, audit))
        return rows

    rows = asyncio.run(check())
    output_dir = os.path.join(ctx.config.output_root, "qa")
    report = compile_oversight_report(rows, output_dir, args.name)
    audits = [audit for _, _, audit in rows if audit is not None]
    ctx.emit({
        "reviews": report.row_count,
        "flagged": report.flagged_count,
        "csv": report.csv_path,
        "sidecar": report.sidecar_path,
        "citations": audit_summary(audits) if audits else None,
    })
    return EXIT_OK
