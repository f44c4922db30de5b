"""Full-benchmark evaluation: inference, judging, and deterministic aggregation.

A run lives in its own directory (``runs/<run_id>/``): a manifest pinning
the config, prompt hashes, and dataset digest; an inference trace
(``responses.jsonl``); per-sample score records (``scores.jsonl``); and the
rendered report. Results append incrementally, so a crashed run resumes from
the last appended result without re-querying finished samples. Per-sample
failures never abort a run; they are carried in the result and excluded
from aggregate means.

Aggregation is order independent: results are folded sorted by sample id,
so the report bytes do not depend on completion order or concurrency.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

from .beam import (
    BeamConfig,
    CandidateSet,
    InferenceError,
    beam_generate,
    extract_final_answer,
)
from .core import (
    BenchmarkSample,
    Category,
    JudgeScorecard,
    MetricName,
    ScorecardError,
)
from .dataset import Dataset, load_dataset
from .gateway import (
    GENERATION,
    CallLedger,
    ChatMessage,
    ChatRequest,
    EndpointConfig,
    GatewayError,
    ImagePart,
    LedgerSnapshot,
    ModelGateway,
    TextPart,
)
from .judging import (
    FinalAnswerVerdict,
    JudgeError,
    StepEvalInput,
    judge_final_answer,
    prompt_hashes,
    score_steps,
)

SINGLE_INFERENCE_MAX_TOKENS = 1024
SINGLE_INFERENCE_TEMPERATURE = 0.0

REPORT_FOOTER = (
    "Step score maps the judge's 1-10 overall to percent (x10); "
    "final answer is the percent of judge-matched answers; "
    "samples with any judge failure are excluded from means and "
    "reported under Failed."
)


class RunError(Exception):
    """Run-level setup problems (missing dataset, clashing manifest, ...)."""


@dataclass(frozen=True, slots=True)
class RunConfig:
    run_id: str
    dataset_path: Path
    target: EndpointConfig
    judge: EndpointConfig
    beam: Optional[BeamConfig] = None
    concurrency: int = 1
    runs_root: Path = Path("runs")
    max_tokens: int = SINGLE_INFERENCE_MAX_TOKENS
    temperature: float = SINGLE_INFERENCE_TEMPERATURE

    def __post_init__(self) -> None:
        if not self.run_id.strip():
            raise ValueError("run_id must be non-empty")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        object.__setattr__(self, "dataset_path", Path(self.dataset_path))
        object.__setattr__(self, "runs_root", Path(self.runs_root))


@dataclass(frozen=True, slots=True)
class SampleResult:
    """Outcome for one sample; exactly one of value/error is set per pair."""

    sample_id: str
    model_response: str
    scorecard: Optional[JudgeScorecard] = None
    scorecard_error: Optional[str] = None
    verdict: Optional[FinalAnswerVerdict] = None
    verdict_error: Optional[str] = None
    ledger_delta: LedgerSnapshot = LedgerSnapshot()

    def __post_init__(self) -> None:
        if (self.scorecard is None) == (self.scorecard_error is None):
            raise ValueError("exactly one of scorecard/scorecard_error must be set")
        if (self.verdict is None) == (self.verdict_error is None):
            raise ValueError("exactly one of verdict/verdict_error must be set")

    @property
    def scored(self) -> bool:
        return self.scorecard is not None and self.verdict is not None


@dataclass(frozen=True, slots=True)
class CategoryAggregate:
    final_answer_pct: Optional[float]
    step_score_pct: Optional[float]
    scored: int
    failed: int
    metric_means: Optional[dict[MetricName, float]]


@dataclass(frozen=True, slots=True)
class AggregateReport:
    categories: dict[Category, CategoryAggregate]
    overall: CategoryAggregate
    footer: str = REPORT_FOOTER

    @property
    def empty(self) -> bool:
        return self.overall.scored == 0 and self.overall.failed == 0


@dataclass(frozen=True, slots=True)
class EvaluationRun:
    run_id: str
    results: tuple[SampleResult, ...]
    report: Optional[AggregateReport]
    run_dir: Path
    complete: bool


def _fold(results: Sequence[SampleResult]) -> CategoryAggregate:
    scored = [r for r in results if r.scored]
    failed = len(results) - len(scored)
    if not scored:
        return CategoryAggregate(
            final_answer_pct=None,
            step_score_pct=None,
            scored=0,
            failed=failed,
            metric_means=None,
        )
    final_pct = 100.0 * math.fsum(r.verdict.score for r in scored) / len(scored)
    step_pct = 10.0 * math.fsum(r.scorecard.overall for r in scored) / len(scored)
    means = {
        metric: math.fsum(r.scorecard.score(metric) for r in scored) / len(scored)
        for metric in MetricName.ordered()
    }
    return CategoryAggregate(
        final_answer_pct=final_pct,
        step_score_pct=step_pct,
        scored=len(scored),
        failed=failed,
        metric_means=means,
    )


def aggregate(results: Sequence[SampleResult], dataset: Dataset) -> AggregateReport:
    """Category-wise and overall percentages over a run's results.

    Deterministic under permutation: results are sorted by sample id before
    folding, and the overall row is by construction the count-weighted
    combination of the category rows.
    """
    by_id = dataset.by_id()
    ordered = sorted(results, key=lambda r: r.sample_id)
    per_category: dict[Category, list[SampleResult]] = {c: [] for c in Category}
    for result in ordered:
        sample = by_id.get(result.sample_id)
        if sample is None:
            raise ValueError(f"result for unknown sample {result.sample_id!r}")
        per_category[sample.category].append(result)
    categories = {c: _fold(rs) for c, rs in per_category.items()}
    overall = _fold(ordered)
    return AggregateReport(categories=categories, overall=overall)


# ---------------------------------------------------------------------------
# Serialization of per-sample records


def result_to_dict(result: SampleResult) -> dict[str, Any]:
    return {
        "sample_id": result.sample_id,
        "model_response": result.model_response,
        "scorecard": result.scorecard.to_dict() if result.scorecard else None,
        "scorecard_overall": result.scorecard.overall if result.scorecard else None,
        "scorecard_error": result.scorecard_error,
        "verdict": (
            {"score": result.verdict.score, "raw_judge_text": result.verdict.raw_judge_text}
            if result.verdict
            else None
        ),
        "verdict_error": result.verdict_error,
        "ledger_delta": result.ledger_delta.to_dict(),
    }


def result_from_dict(data: dict[str, Any]) -> SampleResult:
    scorecard = None
    if data.get("scorecard") is not None:
        raw = dict(data["scorecard"])
        judge_overall = raw.pop("Overall Score", None)
        scores = {MetricName.from_wire(k): v for k, v in raw.items()}
        scorecard = JudgeScorecard.from_scores(
            scores, judge_reported_overall=judge_overall
        )
    verdict = None
    if data.get("verdict") is not None:
        verdict = FinalAnswerVerdict(
            score=data["verdict"]["score"],
            raw_judge_text=data["verdict"].get("raw_judge_text", ""),
        )
    delta = data.get("ledger_delta", {})
    return SampleResult(
        sample_id=data["sample_id"],
        model_response=data.get("model_response", ""),
        scorecard=scorecard,
        scorecard_error=data.get("scorecard_error"),
        verdict=verdict,
        verdict_error=data.get("verdict_error"),
        ledger_delta=LedgerSnapshot(
            generation_calls=delta.get("generation_calls", 0),
            judge_calls=delta.get("judge_calls", 0),
            retried_calls=delta.get("retried_calls", 0),
        ),
    )


class RunStore:
    """Filesystem layout of one run; appends are serialized and atomic."""

    def __init__(self, root: Path, run_id: str):
        self.run_dir = Path(root) / run_id
        self.manifest_path = self.run_dir / "manifest.json"
        self.responses_path = self.run_dir / "responses.jsonl"
        self.scores_path = self.run_dir / "scores.jsonl"
        self.report_json_path = self.run_dir / "report.json"
        self.report_md_path = self.run_dir / "report.md"
        self.report_csv_path = self.run_dir / "report.csv"
        self._io_lock = threading.Lock()

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def write_manifest(self, manifest: dict[str, Any]) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(
            json.dumps(manifest, indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    def read_manifest(self) -> dict[str, Any]:
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def append_records(
        self, response_record: dict[str, Any], score_record: dict[str, Any]
    ) -> None:
        with self._io_lock:
            with open(self.responses_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(response_record, ensure_ascii=False) + "\n")
            with open(self.scores_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(score_record, ensure_ascii=False) + "\n")

    def load_results(self) -> list[SampleResult]:
        if not self.scores_path.exists():
            return []
        results = []
        with open(self.scores_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    results.append(result_from_dict(json.loads(line)))
        return results

    def completed_ids(self) -> set[str]:
        return {r.sample_id for r in self.load_results()}


def dataset_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_manifest(config: RunConfig) -> dict[str, Any]:
    beam = None
    if config.beam is not None:
        beam = {
            "num_beams": config.beam.num_beams,
            "strategy": config.beam.strategy.value,
            "max_tokens": config.beam.max_tokens,
            "temperature": config.beam.temperature,
        }
    return {
        "run_id": config.run_id,
        "dataset": {
            "path": str(config.dataset_path),
            "sha256": dataset_digest(config.dataset_path),
        },
        "target": config.target.redacted(),
        "judge": config.judge.redacted(),
        "beam": beam,
        "concurrency": config.concurrency,
        "prompt_hashes": prompt_hashes(),
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }


def _single_inference(
    gateway: ModelGateway,
    config: RunConfig,
    sample: BenchmarkSample,
    scope: CallLedger,
) -> str:
    parts: list = [TextPart(sample.question)]
    if sample.choices:
        parts.append(TextPart("Choices:\n" + "\n".join(sample.choices)))
    parts.append(ImagePart(sample.image))
    request = ChatRequest(
        messages=(ChatMessage(role="user", parts=tuple(parts)),),
        max_tokens=config.max_tokens,
        temperature=config.temperature,
    )
    response = gateway.complete(config.target, request, GENERATION, scope=scope)
    return response.text


def _process_sample(
    gateway: ModelGateway,
    config: RunConfig,
    sample: BenchmarkSample,
    clock_monotonic,
) -> tuple[SampleResult, dict[str, Any]]:
    scope = CallLedger()
    started = clock_monotonic()
    candidate_set: Optional[CandidateSet] = None
    inference_error: Optional[str] = None
    response_text = ""
    try:
        if config.beam is not None:
            candidate_set = beam_generate(
                gateway,
                config.target,
                sample.question,
                sample.image,
                config.beam,
                judge_endpoint=config.judge,
                scope=scope,
            )
            response_text = candidate_set.selected_text
        else:
            response_text = _single_inference(gateway, config, sample, scope)
    except (InferenceError, GatewayError) as exc:
        inference_error = f"inference failed: {exc}"

    scorecard = None
    scorecard_error = None
    verdict = None
    verdict_error = None
    if inference_error is not None:
        scorecard_error = inference_error
        verdict_error = inference_error
    else:
        try:
            scorecard = score_steps(
                gateway,
                config.judge,
                StepEvalInput(
                    question=sample.question,
                    ground_truth=sample.ground_truth,
                    model_response=response_text,
                ),
                sample_id=sample.id,
                scope=scope,
            )
        except (JudgeError, ScorecardError, ValueError) as exc:
            scorecard_error = str(exc)
        try:
            verdict = judge_final_answer(
                gateway,
                config.judge,
                question=sample.question,
                ground_truth=sample.ground_truth.final_answer,
                prediction=extract_final_answer(response_text),
                sample_id=sample.id,
                scope=scope,
            )
        except (JudgeError, ValueError) as exc:
            verdict_error = str(exc)

    result = SampleResult(
        sample_id=sample.id,
        model_response=response_text,
        scorecard=scorecard,
        scorecard_error=scorecard_error,
        verdict=verdict,
        verdict_error=verdict_error,
        ledger_delta=scope.snapshot(),
    )
    trace: dict[str, Any] = {
        "question_id": sample.id,
        "mode": "beam" if config.beam is not None else "single",
        "B": config.beam.num_beams if config.beam is not None else 1,
        "strategy": config.beam.strategy.value if config.beam is not None else None,
        "selected_index": candidate_set.selected_index if candidate_set else 0,
        "selection_reason": (
            candidate_set.selection_reason if candidate_set else "single call"
        ),
        "candidates": (
            [
                {
                    "text": c.text,
                    "logprob_sum": c.logprob_sum,
                    "token_count": c.token_count,
                }
                for c in candidate_set.candidates
            ]
            if candidate_set
            else [{"text": response_text, "logprob_sum": None, "token_count": None}]
        ),
        "ledger_delta": scope.snapshot().to_dict(),
        "wall_time": clock_monotonic() - started,
        "error": inference_error,
    }
    return result, trace


def run_evaluation(
    config: RunConfig,
    gateway: ModelGateway,
    limit: Optional[int] = None,
) -> EvaluationRun:
    """Evaluate a dataset end to end, resuming any earlier partial run.

    ``limit`` caps how many pending samples this invocation processes; the
    report is written once every sample has a stored result.
    """
    if not config.dataset_path.exists():
        raise RunError(f"dataset not found: {config.dataset_path}")
    dataset = load_dataset(config.dataset_path)
    store = RunStore(config.runs_root, config.run_id)
    manifest = build_manifest(config)
    if store.exists():
        previous = store.read_manifest()
        if previous["dataset"]["sha256"] != manifest["dataset"]["sha256"]:
            raise RunError(
                f"run {config.run_id!r} already exists for a different dataset"
            )
    else:
        store.write_manifest(manifest)

    done = store.completed_ids()
    pending = [s for s in dataset.samples if s.id not in done]
    if limit is not None:
        pending = pending[:limit]

    clock_monotonic = gateway.clock.monotonic
    judge_model = config.judge.model_id
    if pending:
        def work(sample: BenchmarkSample) -> None:
            result, trace = _process_sample(gateway, config, sample, clock_monotonic)
            score_record = result_to_dict(result)
            score_record["judge_model"] = judge_model
            score_record["ts"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
            store.append_records(trace, score_record)

        if config.concurrency == 1:
            for sample in pending:
                work(sample)
        else:
            with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
                futures = [pool.submit(work, s) for s in pending]
                for future in futures:
                    future.result()

    results = sorted(store.load_results(), key=lambda r: r.sample_id)
    complete = len(results) == len(dataset)
    report = None
    if complete:
        from .reporting import ReportFormat, render_report

        report = aggregate(results, dataset)
        store.report_json_path.write_text(
            render_report(report, ReportFormat.JSON), encoding="utf-8"
        )
        store.report_md_path.write_text(
            render_report(report, ReportFormat.MARKDOWN), encoding="utf-8"
        )
        store.report_csv_path.write_text(
            render_report(report, ReportFormat.CSV), encoding="utf-8"
        )
    return EvaluationRun(
        run_id=config.run_id,
        results=tuple(results),
        report=report,
        run_dir=store.run_dir,
        complete=complete,
    )
