"""
survey analyze: AI 리뷰 vs 사람 리뷰 설문 비교 (Mann-Whitney U)
"""

import argparse
import os

from services.survey_service import GROUPS, analyze_survey

from cli.common import EXIT_OK, CliContext


def register(subparsers, parent: argparse.ArgumentParser):
    survey = subparsers.add_parser("survey", help="설문 응답 분석", parents=[parent])
    commands = survey.add_subparsers(dest="action", required=True)

    analyze = commands.add_parser("analyze", help="항목별 평균 차이 + 유의성 검정", parents=[parent])
    analyze.add_argument("--responses", required=True, help="CSV: role, review_type, item_id, value")
    analyze.add_argument("--out", help="출력 디렉터리 (기본: <output-root>/survey)")
    analyze.add_argument("--alpha", type=float)
    analyze.add_argument("--group", action="append", choices=sorted(GROUPS), help="기본: 전체 그룹")
    analyze.set_defaults(handler=cmd_survey_analyze)


def overrides(args: argparse.Namespace) -> dict:
    return {"survey.alpha": getattr(args, "alpha", None)}


def cmd_survey_analyze(ctx: CliContext, args: argparse.Namespace) -> int:
    settings = ctx.config.survey
    summary = analyze_survey(
        args.responses,
        args.out or os.path.join(ctx.config.output_root, "survey"),
        groups=args.group or list(GROUPS),
        alpha=settings.alpha,
        exact_max_n=settings.exact_max_n,
    )
    ctx.emit(summary)
    return EXIT_OK
