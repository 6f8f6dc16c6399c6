"""Command-line surface: build, ask, eval, inspect.

Exit codes: 0 success, 2 input error, 3 backend error, 4 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import BackendSuite, MockScript
from .captioning import QTYPES, QuestionBundle, classify_question, infer_subtype
from .config import EngineConfig
from .errors import InputError, VideoQAError
from .knowledge import KnowledgeStore, load_profiles
from .pipeline import (
    answer_question,
    build_video,
    evaluate,
    load_question_file,
)
from .tree import load_tree, tree_to_json

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="engine config JSON file")
    parser.add_argument("--seed", type=int, help="override the engine seed")
    parser.add_argument("--mock-script",
                        help="serve all model calls from this scripted mock")
    parser.add_argument("--cache", action="store_true",
                        help="cache backend responses on disk")
    parser.add_argument("--verbose", action="store_true")


def _add_ablations(parser: argparse.ArgumentParser, *names: str) -> None:
    if "uniform" in names:
        parser.add_argument("--uniform-sampling", action="store_true",
                            help="replace the tree with evenly spaced leaf shots")
    if "generic" in names:
        parser.add_argument("--generic-captions", action="store_true",
                            help="skip prompt synthesis, caption generically")
    if "fixed" in names:
        parser.add_argument("--fixed-workflow", action="store_true",
                            help="skip planning, always run all four agents")


def _load_config(args: argparse.Namespace) -> EngineConfig:
    config = (EngineConfig.from_file(args.config) if args.config
              else EngineConfig())
    if args.seed is not None:
        config.seed = args.seed
    if args.cache:
        config.cache_enabled = True
    for flag in ("uniform_sampling", "generic_captions", "fixed_workflow",
                 "reclassify", "parallel_videos"):
        if getattr(args, flag, False):
            setattr(config, flag, True)
    return config


def _make_suite(args: argparse.Namespace, config: EngineConfig) -> BackendSuite:
    if args.mock_script:
        suite = BackendSuite.from_mock(MockScript.from_file(args.mock_script))
    else:
        suite = BackendSuite.from_config(config.backend)
    if config.cache_enabled:
        cache_dir = config.backend.cache_dir or ".videoqa_cache"
        suite = suite.cached(cache_dir)
    return suite


def _derive_sidecar_path(out_tree: str) -> Path:
    p = Path(out_tree)
    return p.with_name(p.stem + ".sidecar.json")


def cmd_build(args: argparse.Namespace) -> int:
    config = _load_config(args)
    suite = _make_suite(args, config)
    questions = load_question_file(args.questions)
    result = build_video(args.frame_manifest, questions, config, suite)

    out_tree = Path(args.out_tree)
    out_tree.write_text(tree_to_json(result.tree) + "\n", encoding="utf-8")
    sidecar_path = (Path(args.out_sidecar) if args.out_sidecar
                    else _derive_sidecar_path(args.out_tree))
    sidecar_path.write_text(
        json.dumps(result.store.to_sidecar(), sort_keys=True,
                   separators=(",", ":")) + "\n", encoding="utf-8")

    expanded = sum(1 for sid in result.tree.shot_order
                   if result.tree.nodes[sid].children)
    print(f"built {result.tree.video_id}: {len(result.tree.shot_order)} shots, "
          f"{expanded} expanded, {len(result.retrieved_frames)} frames "
          f"captioned -> {out_tree}, {sidecar_path}")
    return 0


def cmd_ask(args: argparse.Namespace) -> int:
    config = _load_config(args)
    suite = _make_suite(args, config)
    tree = load_tree(args.tree)

    sidecar_path = Path(args.sidecar)
    if not sidecar_path.exists():
        raise InputError(f"sidecar file not found: {sidecar_path}")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"sidecar {sidecar_path} is not valid JSON: {exc}") from exc
    store = KnowledgeStore.from_sidecar(tree, sidecar, fps=config.fps)

    options = tuple(args.option or [])
    if args.qtype:
        qtype, qsubtype = args.qtype, infer_subtype(args.qtype, args.question)
    else:
        cls = classify_question(args.question, list(options), suite.chat)
        qtype, qsubtype = cls.qtype, cls.qsubtype
    bundle = QuestionBundle(question_id=args.question_id, text=args.question,
                            options=options, qtype=qtype, qsubtype=qsubtype)

    profiles = load_profiles(config.profile_dir)
    record = answer_question(bundle, store, profiles, config, suite)
    print(record.to_json())
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    suite = _make_suite(args, config)
    records, report = evaluate(args.manifest, config, suite)

    out_records = Path(args.out_records)
    out_records.write_text(
        "".join(r.to_json() + "\n" for r in records), encoding="utf-8")
    out_report = Path(args.out_report)
    out_report.write_text(report.to_json() + "\n", encoding="utf-8")

    summary = f"{report.num_questions} questions, mean rounds {report.mean_rounds:.2f}"
    if report.accuracy_overall is not None:
        summary += f", accuracy {report.accuracy_overall:.3f}"
        for qtype, acc in sorted(report.accuracy_by_type.items()):
            summary += f", {qtype} {acc:.3f}"
    print(f"eval complete: {summary} -> {out_records}, {out_report}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    tree = load_tree(args.tree)
    print(f"video {tree.video_id}: {len(tree.shot_order)} shots, "
          f"tau={tree.params.tau} k={tree.params.k} "
          f"max_depth={tree.params.max_depth} gamma={tree.params.gamma}")
    for sid in tree.shot_order:
        shot = tree.nodes[sid]
        rel = (f"{shot.relevance.value:.1f}" if shot.relevance else "unscored")
        depth_counts: dict[int, int] = {}
        stack = list(shot.children)
        while stack:
            node = tree.nodes[stack.pop()]
            depth_counts[node.depth] = depth_counts.get(node.depth, 0) + 1
            stack.extend(node.children)
        subtree = (" ".join(f"d{d}:{c}" for d, c in sorted(depth_counts.items()))
                   or "leaf")
        print(f"  shot {sid} [{shot.start_frame}-{shot.end_frame}] "
              f"rep={shot.representative_frame} relevance={rel} {subtree}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="videoqa",
        description="Long-video multiple-choice QA over a shot-structured tree")
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="build a tree + knowledge sidecar")
    p_build.add_argument("frame_manifest")
    p_build.add_argument("questions", help="question file JSON")
    p_build.add_argument("out_tree")
    p_build.add_argument("--out-sidecar")
    p_build.add_argument("--reclassify", action="store_true",
                         help="classify even when the file declares a type")
    _add_common(p_build)
    _add_ablations(p_build, "uniform", "generic")
    p_build.set_defaults(func=cmd_build)

    p_ask = sub.add_parser("ask", help="answer one question over a built tree")
    p_ask.add_argument("tree")
    p_ask.add_argument("sidecar")
    p_ask.add_argument("--question", required=True)
    p_ask.add_argument("--option", action="append",
                       help="answer option (repeat 2-5 times)")
    p_ask.add_argument("--question-id", default="q0")
    p_ask.add_argument("--qtype", choices=QTYPES,
                       help="skip classification and use this type")
    _add_common(p_ask)
    _add_ablations(p_ask, "fixed")
    p_ask.set_defaults(func=cmd_ask)

    p_eval = sub.add_parser("eval", help="run a dataset manifest")
    p_eval.add_argument("manifest")
    p_eval.add_argument("--out-records", default="records.jsonl")
    p_eval.add_argument("--out-report", default="report.json")
    p_eval.add_argument("--reclassify", action="store_true",
                        help="classify even when the manifest declares types")
    p_eval.add_argument("--parallel-videos", action="store_true",
                        help="process manifest entries concurrently")
    _add_common(p_eval)
    _add_ablations(p_eval, "uniform", "generic", "fixed")
    p_eval.set_defaults(func=cmd_eval)

    p_inspect = sub.add_parser("inspect", help="pretty-print a tree")
    p_inspect.add_argument("tree")
    p_inspect.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VideoQAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
