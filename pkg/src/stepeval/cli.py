"""Command-line entry point.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors. The CLI
never prints secrets; endpoint echoes only name the environment variable
that holds the key.
"""

from __future__ import annotations

import argparse
import json
import mimetypes
import sys
from pathlib import Path
from typing import Any, Sequence

from .beam import (
    BeamConfig,
    SelectionStrategy,
    beam_generate,
    stage_level_generate,
)
from .core import Category, ImageKind, ImageRef
from .curation import (
    CurationStore,
    EVENT_GENERATED,
    GenerationParseError,
    GenerationTask,
    SampleStub,
    generate_chain,
    make_event,
)
from .dataset import export_sft, load_dataset
from .gateway import EndpointConfig, ModelGateway
from .reporting import ReportFormat, parse_report, render_report
from .runner import RunConfig, RunStore, run_evaluation


class UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise UsageError(message, self)


def _load_json_arg(value: str) -> dict[str, Any]:
    """Accept either inline JSON or a path to a JSON file."""
    text = value.strip()
    if not text.startswith("{"):
        text = Path(value).read_text(encoding="utf-8")
    return json.loads(text)


def _endpoint_from_dict(data: dict[str, Any]) -> EndpointConfig:
    return EndpointConfig(
        base_url=data["base_url"],
        model_id=data["model_id"],
        api_key_env=data.get("api_key_env", ""),
        max_in_flight=data.get("max_in_flight", 4),
        requests_per_minute=data.get("requests_per_minute", 600),
        max_retries=data.get("max_retries", 2),
        timeout=data.get("timeout", 60.0),
        supports_multi_sample=data.get("supports_multi_sample", True),
        want_logprobs=data.get("want_logprobs", False),
    )


def _image_from_arg(value: str) -> ImageRef:
    if value.startswith("http://") or value.startswith("https://"):
        return ImageRef(kind=ImageKind.URL, value=value)
    media, _ = mimetypes.guess_type(value)
    return ImageRef(kind=ImageKind.FILE_PATH, value=value, media_type=media or "")


def _strategy_from_arg(value: str) -> SelectionStrategy:
    by_name = {s.value.lower(): s for s in SelectionStrategy}
    strategy = by_name.get(value.lower())
    if strategy is None:
        raise ValueError(
            f"unknown strategy {value!r}; choose from "
            + ", ".join(s.value for s in SelectionStrategy)
        )
    return strategy


def build_parser() -> _Parser:
    parser = _Parser(prog="stepeval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_validate = sub.add_parser("validate", help="validate a dataset file")
    p_validate.add_argument("--dataset", required=True)

    p_export = sub.add_parser("export-sft", help="export curriculum conversations")
    p_export.add_argument("--dataset", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--report", default=None)
    p_export.add_argument("--skip-unverified", action="store_true")

    p_report = sub.add_parser("report", help="render a stored run report")
    p_report.add_argument("--run", required=True)
    p_report.add_argument("--runs-dir", default="runs")
    p_report.add_argument(
        "--format", default="markdown", choices=[f.value for f in ReportFormat]
    )

    p_eval = sub.add_parser("eval", help="evaluate a dataset against a model")
    p_eval.add_argument("--config", default=None, help="JSON file mirroring RunConfig")
    p_eval.add_argument("--dataset", default=None)
    p_eval.add_argument("--target", default=None, help="endpoint JSON (inline or path)")
    p_eval.add_argument("--judge", default=None, help="endpoint JSON (inline or path)")
    p_eval.add_argument("--beams", type=int, default=None)
    p_eval.add_argument("--strategy", default=None)
    p_eval.add_argument("--concurrency", type=int, default=None)
    p_eval.add_argument("--run-id", default=None)
    p_eval.add_argument("--runs-dir", default=None)
    p_eval.add_argument("--limit", type=int, default=None)

    p_infer = sub.add_parser("infer", help="scaled inference for one question")
    p_infer.add_argument("--question", required=True)
    p_infer.add_argument("--image", default=None)
    p_infer.add_argument("--beams", type=int, default=1)
    p_infer.add_argument("--strategy", default="MajorityAnswer")
    p_infer.add_argument("--mode", default="beam", choices=["beam", "stage"])
    p_infer.add_argument("--target", required=True)
    p_infer.add_argument("--judge", default=None)

    p_generate = sub.add_parser(
        "generate", help="generate candidate chains for a question file"
    )
    p_generate.add_argument("--questions", required=True)
    p_generate.add_argument("--store", required=True)
    p_generate.add_argument("--target", required=True)

    p_review = sub.add_parser("review", help="review-stage services")
    review_sub = p_review.add_subparsers(
        dest="review_command", required=True, parser_class=_Parser
    )
    p_serve = review_sub.add_parser("serve", help="start the review API")
    p_serve.add_argument("--store", required=True)
    p_serve.add_argument("--port", type=int, required=True)
    p_serve.add_argument("--lease-ttl", type=float, default=None)

    return parser


def _cmd_validate(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    print(
        f"OK: {len(dataset)} samples, {dataset.total_steps()} reasoning steps"
    )
    return 0


def _cmd_export_sft(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    report = export_sft(
        dataset,
        args.out,
        report_path=args.report,
        skip_unverified=args.skip_unverified,
    )
    print(
        f"exported {report.total} conversations "
        f"({len(report.synthesized_captions)} synthesized captions, "
        f"{len(report.dropped)} dropped)"
    )
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    store = RunStore(Path(args.runs_dir), args.run)
    if not store.report_json_path.exists():
        raise FileNotFoundError(f"no stored report for run {args.run!r}")
    report = parse_report(store.report_json_path.read_text(encoding="utf-8"))
    sys.stdout.write(render_report(report, ReportFormat(args.format)))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    file_config: dict[str, Any] = {}
    if args.config:
        file_config = _load_json_arg(args.config)

    def pick(flag_value, key, default=None):
        if flag_value is not None:
            return flag_value
        return file_config.get(key, default)

    missing = [
        name
        for name, value in (
            ("--dataset", pick(args.dataset, "dataset")),
            ("--target", pick(args.target, "target")),
            ("--judge", pick(args.judge, "judge")),
            ("--run-id", pick(args.run_id, "run_id")),
        )
        if value is None
    ]
    if missing:
        raise UsageError(
            "missing required options: " + ", ".join(missing), build_parser()
        )

    target_raw = pick(args.target, "target")
    judge_raw = pick(args.judge, "judge")
    target = _endpoint_from_dict(
        target_raw if isinstance(target_raw, dict) else _load_json_arg(target_raw)
    )
    judge = _endpoint_from_dict(
        judge_raw if isinstance(judge_raw, dict) else _load_json_arg(judge_raw)
    )
    beam = None
    beams = pick(args.beams, "beams")
    if beams:
        strategy = pick(args.strategy, "strategy", "MajorityAnswer")
        beam = BeamConfig(
            num_beams=int(beams), strategy=_strategy_from_arg(str(strategy))
        )
    config = RunConfig(
        run_id=str(pick(args.run_id, "run_id")),
        dataset_path=Path(pick(args.dataset, "dataset")),
        target=target,
        judge=judge,
        beam=beam,
        concurrency=int(pick(args.concurrency, "concurrency", 1)),
        runs_root=Path(pick(args.runs_dir, "runs_dir", "runs")),
    )
    run = run_evaluation(config, ModelGateway(), limit=args.limit)
    scored = sum(1 for r in run.results if r.scored)
    print(
        f"run {run.run_id}: {len(run.results)} results ({scored} scored), "
        f"{'complete' if run.complete else 'partial'}; artifacts in {run.run_dir}"
    )
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    target = _endpoint_from_dict(_load_json_arg(args.target))
    judge = (
        _endpoint_from_dict(_load_json_arg(args.judge)) if args.judge else None
    )
    image = _image_from_arg(args.image) if args.image else None
    config = BeamConfig(
        num_beams=args.beams, strategy=_strategy_from_arg(args.strategy)
    )
    gateway = ModelGateway()
    if args.mode == "stage":
        result = stage_level_generate(
            gateway, target, args.question, image, config, judge_endpoint=judge
        )
    else:
        result = beam_generate(
            gateway, target, args.question, image, config, judge_endpoint=judge
        )
    print(result.selected_text)
    print(
        json.dumps(
            {
                "mode": args.mode,
                "B": args.beams,
                "strategy": config.strategy.value,
                "selected_index": result.selected_index,
                "selection_reason": result.selection_reason,
                "ledger_delta": result.ledger_delta.to_dict(),
            }
        ),
        file=sys.stderr,
    )
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    target = _endpoint_from_dict(_load_json_arg(args.target))
    store = CurationStore(args.store)
    gateway = ModelGateway()
    known = set(store.sample_ids())
    generated = 0
    failed = 0
    with open(args.questions, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            data = json.loads(line)
            image_data = data["image"]
            stub = SampleStub(
                id=data["id"],
                category=Category.from_wire(data["category"]),
                question=data["question"],
                choices=tuple(data["choices"]) if data.get("choices") else None,
                image=ImageRef(
                    kind=ImageKind(image_data["kind"]),
                    value=image_data["value"],
                    media_type=image_data.get("media_type", ""),
                ),
                provenance=data.get("provenance", ""),
                min_step_exempt=bool(data.get("min_step_exempt", False)),
            )
            if stub.id not in known:
                store.register(stub)
                known.add(stub.id)
            task = GenerationTask(
                sample_id=stub.id,
                question=stub.question,
                choices=stub.choices,
                image=stub.image,
                target_endpoint=target,
            )
            try:
                chain = generate_chain(gateway, task)
            except GenerationParseError as exc:
                print(f"{stub.id}: generation failed ({exc})", file=sys.stderr)
                failed += 1
                continue
            store.apply_event(
                make_event(
                    stub.id,
                    EVENT_GENERATED,
                    payload={
                        "steps": list(chain.step_texts()),
                        "final_answer": chain.final_answer,
                    },
                    actor="generator",
                )
            )
            generated += 1
    print(f"generated {generated} candidate chains, {failed} failures")
    return 0


def _cmd_review(args: argparse.Namespace) -> int:
    from .review_api import serve

    serve(args.store, args.port, lease_ttl=args.lease_ttl)
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "export-sft": _cmd_export_sft,
    "report": _cmd_report,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "generate": _cmd_generate,
    "review": _cmd_review,
}


def cli_dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
