"""
review-harness 명령줄 진입점

    review run|batch|approve|status|serve
    qa check
    specs curate|perturb|judge|report|oversight
    survey analyze
"""

import argparse
import sys
from typing import Dict, List, Optional

from cli import qa_commands, review_commands, specs_commands, survey_commands
from cli.common import EXIT_INTERRUPTED, CliContext, add_global_options, report_error

COMMAND_MODULES = (review_commands, qa_commands, specs_commands, survey_commands)


def build_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    add_global_options(parent, nested=True)

    parser = argparse.ArgumentParser(prog="review-harness", description="AI 논문 리뷰 파이프라인 + SPECS 벤치마크")
    add_global_options(parser)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in COMMAND_MODULES:
        module.register(subparsers, parent)
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, object]:
    """명령별 플래그 -> 설정 키. None 은 설정 파일 값 유지"""
    overrides: Dict[str, object] = {}
    for module in COMMAND_MODULES:
        overrides.update({key: value for key, value in module.overrides(args).items() if value is not None})
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = CliContext(args, collect_overrides(args))
        return args.handler(ctx, args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED
    except Exception as e:
        return report_error(e)
