"""
review run | batch | approve | status | serve
"""

import argparse
import asyncio
import json
import os
import threading
from typing import List

from db.run_store import RunStore, format_status
from schemas.paper import PaperBundle
from schemas.pipeline import BatchState, Gate, RolloutPolicy
from services.batch_service import BatchHandle, approve_rollout, load_batch, prepare_batch
from services.exceptions import IngestError, PipelineError
from services.ingest_service import ingest_paper, load_bundle, save_bundle
from services.review_pipeline_service import ReviewPipeline, plan_by_id

from cli.common import EXIT_BACKEND, EXIT_INPUT, EXIT_INTERRUPTED, EXIT_OK, CliContext, install_cancel_handlers


def register(subparsers, parent: argparse.ArgumentParser):
    review = subparsers.add_parser("review", help="논문 리뷰 파이프라인", parents=[parent])
    commands = review.add_subparsers(dest="action", required=True)

    run = commands.add_parser("run", help="논문 한 편 리뷰", parents=[parent])
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--paper", help="PDF 경로")
    source.add_argument("--bundle", help="저장된 번들 디렉터리")
    run.add_argument("--paper-id")
    run.add_argument("--run-id")
    run.add_argument("--plan", help="default | baseline | targeted:<stage>")
    run.add_argument("--stop-after", help="이 단계까지만 실행 (체크포인트 유지)")
    run.set_defaults(handler=cmd_review_run)

    batch = commands.add_parser("batch", help="롤아웃 게이트가 있는 배치 실행", parents=[parent])
    batch.add_argument("--manifest", required=True, help='JSON: ["a.pdf", ...] 또는 {"papers": [{"paper_id", "path"}]}')
    batch.add_argument("--run-id", default="batch")
    batch.add_argument("--plan")
    batch.add_argument("--workers", type=int)
    batch.add_argument("--rollout-fraction", type=float)
    batch.add_argument("--gate", choices=["manual", "auto"])
    batch.add_argument("--initial-stop-after")
    batch.add_argument("--progress", action="store_true")
    batch.set_defaults(handler=cmd_review_batch)

    approve = commands.add_parser("approve", help="대기 중인 배치 승인 후 나머지 실행", parents=[parent])
    approve.add_argument("--run-id", required=True)
    approve.add_argument("--workers", type=int)
    approve.set_defaults(handler=cmd_review_approve)

    status = commands.add_parser("status", help="배치 상태", parents=[parent])
    status.add_argument("--run-id", required=True)
    status.set_defaults(handler=cmd_review_status)

    serve = commands.add_parser("serve", help="배치 제어 HTTP API", parents=[parent])
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(handler=cmd_review_serve)


def overrides(args: argparse.Namespace) -> dict:
    return {
        "pipeline.plan_id": getattr(args, "plan", None),
        "pipeline.workers": getattr(args, "workers", None),
        "pipeline.rollout_fraction": getattr(args, "rollout_fraction", None),
        "pipeline.gate": getattr(args, "gate", None),
        "pipeline.initial_stop_after": getattr(args, "initial_stop_after", None),
    }


def _ingest(ctx: CliContext, path: str, paper_id: str = None) -> PaperBundle:
    if not os.path.isfile(path):
        raise IngestError(f"input file not found: {path}")
    return ingest_paper(path, ctx.ocr(), target_dpi=ctx.config.ingest.target_dpi, paper_id=paper_id)


def _pipeline(ctx: CliContext, store: RunStore) -> ReviewPipeline:
    return ReviewPipeline(ctx.gateway, ctx.registry, store, ctx.clock_factory())


def _write_manifest(ctx: CliContext, store: RunStore, pipeline: ReviewPipeline, plan, paper_ids: List[str]):
    store.write_run_manifest({
        "run_id": os.path.basename(store.run_dir),
        "plan_id": plan.plan_id,
        "plan_digest": pipeline.digest(plan),
        "config_digest": ctx.digest,
        "seed": ctx.config.seed,
        "mock": ctx.config.mock,
        "paper_ids": paper_ids,
    })


def cmd_review_run(ctx: CliContext, args: argparse.Namespace) -> int:
    if args.bundle:
        if not os.path.isdir(args.bundle):
            raise IngestError(f"bundle directory not found: {args.bundle}")
        bundle = load_bundle(args.bundle)
    else:
        bundle = _ingest(ctx, args.paper, args.paper_id)
    plan = plan_by_id(ctx.config.pipeline.plan_id)
    store = RunStore(ctx.config.output_root, args.run_id or bundle.paper_id)
    save_bundle(bundle, store.bundle_dir(bundle.paper_id))
    pipeline = _pipeline(ctx, store)
    _write_manifest(ctx, store, pipeline, plan, [bundle.paper_id])

    async def run():
        cancelled = threading.Event()
        install_cancel_handlers(cancelled.set)
        return await pipeline.run(
            bundle,
            plan,
            checkpoint=store.load_checkpoint(bundle.paper_id),
            stop_after=args.stop_after,
            should_stop=cancelled.is_set,
        )

    records, artifact = asyncio.run(run())
    payload = {
        "paper_id": bundle.paper_id,
        "plan": plan.plan_id,
        "stages": [record.stage for record in records],
        "records": store.records_path(bundle.paper_id),
        "review": store.review_path(bundle.paper_id) if artifact else None,
        "degraded": bundle.degraded,
    }
    ctx.emit(payload)
    return EXIT_OK


def _read_batch_manifest(path: str) -> List[dict]:
    if not os.path.isfile(path):
        raise IngestError(f"batch manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise IngestError(f"batch manifest is not valid JSON: {e}") from e
    entries = data.get("papers", []) if isinstance(data, dict) else data
    base = os.path.dirname(os.path.abspath(path))
    papers = []
    for entry in entries:
        if isinstance(entry, str):
            entry = {"path": entry}
        entry_path = entry["path"] if os.path.isabs(entry["path"]) else os.path.join(base, entry["path"])
        papers.append({"paper_id": entry.get("paper_id"), "path": entry_path})
    return papers


def _batch_exit_code(handle: BatchHandle) -> int:
    report = handle.status()
    if report.state == BatchState.CANCELLED:
        return EXIT_INTERRUPTED
    if any(paper.failed_stage for paper in report.papers if paper.status == "failed"):
        return EXIT_BACKEND
    if report.failed:
        return EXIT_INPUT
    return EXIT_OK


def _emit_status(ctx: CliContext, handle: BatchHandle):
    report = handle.status()
    ctx.emit(report.summary(), format_status(report))


def cmd_review_batch(ctx: CliContext, args: argparse.Namespace) -> int:
    settings = ctx.config.pipeline
    plan = plan_by_id(settings.plan_id)
    rollout = RolloutPolicy(
        initial_fraction=settings.rollout_fraction,
        gate=Gate.parse(settings.gate),
        initial_stop_after=settings.initial_stop_after,
    )
    store = RunStore(ctx.config.output_root, args.run_id)
    bundles = []
    for entry in _read_batch_manifest(args.manifest):
        bundle = _ingest(ctx, entry["path"], entry["paper_id"])
        save_bundle(bundle, store.bundle_dir(bundle.paper_id))
        bundles.append(bundle)
    pipeline = _pipeline(ctx, store)
    _write_manifest(ctx, store, pipeline, plan, [bundle.paper_id for bundle in bundles])

    async def run():
        handle = prepare_batch(bundles, plan, pipeline, rollout, args.run_id, settings.workers, ctx.digest, args.progress)
        install_cancel_handlers(handle.cancel)
        await handle.run_initial()
        return handle

    handle = asyncio.run(run())
    _emit_status(ctx, handle)
    return _batch_exit_code(handle)


def restore_handle(ctx: CliContext, run_id: str) -> BatchHandle:
    """run.json + batch.json 으로 핸들 복원 (approve, serve)"""
    store = RunStore(ctx.config.output_root, run_id)
    manifest = store.read_run_manifest()
    plan = plan_by_id(manifest["plan_id"])
    pipeline = _pipeline(ctx, store)
    return load_batch(store, plan, pipeline, lambda paper_id: load_bundle(store.bundle_dir(paper_id)), ctx.config.pipeline.workers)


def cmd_review_approve(ctx: CliContext, args: argparse.Namespace) -> int:
    handle = restore_handle(ctx, args.run_id)

    async def run():
        continuation = approve_rollout(handle)
        install_cancel_handlers(handle.cancel)
        await continuation

    asyncio.run(run())
    _emit_status(ctx, handle)
    return _batch_exit_code(handle)


def cmd_review_status(ctx: CliContext, args: argparse.Namespace) -> int:
    store = RunStore(ctx.config.output_root, args.run_id)
    report = store.load_batch()
    if report is None:
        raise PipelineError(f"no batch state for run {args.run_id}")
    ctx.emit(report.summary(), format_status(report))
    return EXIT_OK


def cmd_review_serve(ctx: CliContext, args: argparse.Namespace) -> int:
    import uvicorn

    from main import create_app
    from routers.batch_router import BatchRegistry

    registry = BatchRegistry(loader=lambda run_id: restore_handle(ctx, run_id))
    uvicorn.run(create_app(registry), host=args.host, port=args.port)
    return EXIT_OK
