"""End-to-end pipeline runner, synthetic tasks, measurement and reports.

A benchmark run compresses the models once (adapter merge plus
mixed-precision packing), then per task routes the prompt through
retrieval and decodes it speculatively, recording exact-match
correctness, wall-clock latency and allocation-tracked peak memory.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
import threading
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import load_weights
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    NanoInferError,
    ShapeError,
    VersionMismatchError,
)
from .hsd import DecodeTrace, HsdConfig, decode, model_logits, verifier_only_decode
from .lobi import (
    PrecisionMap,
    assign_precisions,
    load_adapters,
    load_precision_map,
    merge_lora,
    quantize_model,
)
from .model import ModelWeights
from .rag import DocIndex, complexity, load_index, route_and_augment
from .tokenizer import detokenize, tokenize

REPORT_SCHEMA_VERSION = 1

ROW_FIELDS = (
    "task_id",
    "correct",
    "latency_micros",
    "peak_bytes",
    "verifier_calls",
    "draft_calls",
    "accepted_count",
    "emitted_tokens",
    "retrieved_docs",
    "complexity",
    "answer",
)

AGGREGATE_FIELDS = (
    "accuracy_pct",
    "latency_avg_ms",
    "latency_std_ms",
    "latency_per_token_avg_ms",
    "mem_avg_mb",
    "mem_std_mb",
    "modeled_speedup",
    "cost_draft_micros",
    "cost_verifier_micros",
    "verifier_calls_total",
    "emitted_tokens_total",
    "model_bytes",
    "contended",
)


@dataclass(frozen=True)
class Task:
    task_id: str
    prompt: bytes
    answer: str


def gen_synthetic_tasks(seed: int, n: int) -> list[Task]:
    """Deterministic single-step addition prompts with exact-match answers."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n):
        a, b = int(rng.integers(0, 21)), int(rng.integers(0, 21))
        tasks.append(
            Task(task_id=f"task-{i:04d}", prompt=f"Q: {a}+{b}=? A:".encode("ascii"), answer=str(a + b))
        )
    return tasks


def save_tasks(tasks: list[Task], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(
                json.dumps({"id": t.task_id, "prompt": t.prompt.decode("utf-8"), "answer": t.answer})
                + "\n"
            )


def load_tasks(path) -> list[Task]:
    tasks = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if set(obj) != {"id", "prompt", "answer"}:
                raise FormatError(f"task record keys {sorted(obj)} do not match schema")
            tasks.append(
                Task(task_id=str(obj["id"]), prompt=obj["prompt"].encode("utf-8"), answer=str(obj["answer"]))
            )
    if not tasks:
        raise FormatError(f"task file {path} holds no tasks")
    return tasks


_trace_lock = threading.Lock()
_trace_users = 0
_trace_owned = False


def _acquire_tracing() -> None:
    # stopping tracemalloc while another thread allocates segfaults, so
    # the session is refcounted and torn down only by its last user; a
    # session the caller started stays untouched
    global _trace_users, _trace_owned
    with _trace_lock:
        if _trace_users == 0:
            _trace_owned = not tracemalloc.is_tracing()
            if _trace_owned:
                tracemalloc.start()
        _trace_users += 1


def _release_tracing() -> None:
    global _trace_users
    with _trace_lock:
        _trace_users -= 1
        if _trace_users == 0 and _trace_owned and tracemalloc.is_tracing():
            tracemalloc.stop()


@contextmanager
def tracing_session():
    """Hold the allocation tracker open across a batch of measure() calls."""
    _acquire_tracing()
    try:
        yield
    finally:
        _release_tracing()


def _noop():
    return None


def _warm_frames(depth=3):
    # nested live frames of one code object force entries onto the
    # interpreter's frame freelist, so a closure's first call can reuse
    # one instead of tripping the allocation tracker
    if depth:
        _warm_frames(depth - 1)


def _traced_window(fn):
    current0, _ = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    t0 = time.perf_counter_ns()
    value = fn()
    t1 = time.perf_counter_ns()
    _, peak = tracemalloc.get_traced_memory()
    return value, t1 - t0, max(0, peak - current0)


def measure(run):
    """Run a closure, returning (value, latency micros, peak allocated bytes).

    Peak memory comes from the interpreter's allocation tracker scoped to
    this call, not from OS RSS, so results are machine independent. The
    tracker's own read overhead is calibrated against a no-op window and
    subtracted, so a closure that allocates nothing reports zero.
    """
    _acquire_tracing()
    try:
        _noop()
        _warm_frames()
        _, _, baseline = _traced_window(_noop)
        value, nanos, raw_peak = _traced_window(run)
    finally:
        _release_tracing()
    return value, int(nanos // 1000), max(0, raw_peak - baseline)


def calibrate_delta(weights: ModelWeights, validation_queries) -> float:
    """Median query complexity over a validation set: a suggested routing threshold."""
    queries = list(validation_queries)
    if len(queries) < 2:
        raise DomainError("calibrate_delta needs at least 2 validation queries")
    scores = []
    for q in queries:
        if isinstance(q, (str, bytes)):
            q = tokenize(q)
        scores.append(complexity(weights, q))
    return float(statistics.median(scores))


@dataclass
class PipelineConfig:
    draft_path: str
    verifier_path: str
    index_path: str | None = None
    adapters_path: str | None = None
    precision_map_draft_path: str | None = None
    precision_map_verifier_path: str | None = None
    tau: float = 1.5
    delta: float = 0.85
    topk: int = 3
    calib_size: int = 64
    block_size: int = 32
    seed: int = 0
    n_tasks: int = 20
    tasks_path: str | None = None
    max_tokens: int = 32
    draft_chunk: int = 8
    out_path: str | None = None
    report_format: str = "json"
    no_hsd: bool = False
    no_rag: bool = False
    no_lobi: bool = False
    parallel: int = 1

    def validate(self) -> None:
        if self.report_format not in ("json", "csv"):
            raise ConfigError(f"report format must be json or csv, got {self.report_format!r}")
        if self.tau < 0 or self.delta < 0:
            raise ConfigError("tau and delta must be >= 0")
        if min(self.topk, self.calib_size, self.max_tokens, self.parallel, self.draft_chunk) < 1:
            raise ConfigError("topk, calib_size, max_tokens, parallel and draft_chunk must be >= 1")
        if self.block_size < 2 or self.block_size % 2 != 0:
            raise ConfigError(f"block_size must be a positive even number, got {self.block_size}")
        if self.tasks_path is None and self.n_tasks < 1:
            raise ConfigError("n_tasks must be >= 1 when no task file is given")
        if not self.no_rag and self.index_path is None:
            raise ConfigError("retrieval is enabled but no index path was given (pass --no-rag to skip)")
        for label, p in (
            ("draft", self.draft_path),
            ("verifier", self.verifier_path),
            ("index", self.index_path),
            ("adapters", self.adapters_path),
            ("precision map (draft)", self.precision_map_draft_path),
            ("precision map (verifier)", self.precision_map_verifier_path),
            ("tasks", self.tasks_path),
        ):
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"{label} file not found: {p}")

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BenchRow:
    task_id: str
    correct: bool
    latency_micros: int
    peak_bytes: int
    verifier_calls: int
    draft_calls: int
    accepted_count: int
    emitted_tokens: int
    retrieved_docs: list[str]
    complexity: float | None
    answer: str


@dataclass(frozen=True)
class BenchAggregates:
    accuracy_pct: float
    latency_avg_ms: float
    latency_std_ms: float
    latency_per_token_avg_ms: float
    mem_avg_mb: float
    mem_std_mb: float
    modeled_speedup: float
    cost_draft_micros: float
    cost_verifier_micros: float
    verifier_calls_total: int
    emitted_tokens_total: int
    model_bytes: int
    contended: bool


@dataclass
class BenchReport:
    schema_version: int
    config: dict
    rows: list[BenchRow]
    aggregates: BenchAggregates


@dataclass
class PipelineArtifacts:
    traces: list[DecodeTrace]
    precision_maps: dict[str, PrecisionMap]
    tau: float


def compute_aggregates(
    rows: list[BenchRow],
    cost_draft_micros: float,
    cost_verifier_micros: float,
    model_bytes: int,
    contended: bool,
    no_hsd: bool,
) -> BenchAggregates:
    """Aggregate per-run rows; every statistic is recomputable from the rows."""
    n = len(rows)
    lat = [r.latency_micros for r in rows]
    mem = [r.peak_bytes for r in rows]
    emitted_total = sum(r.emitted_tokens for r in rows)
    verifier_total = sum(r.verifier_calls for r in rows)
    if no_hsd or emitted_total == 0:
        speedup = 1.0
    else:
        speedup = (emitted_total * cost_verifier_micros) / (
            emitted_total * cost_draft_micros + verifier_total * cost_verifier_micros
        )
    return BenchAggregates(
        accuracy_pct=100.0 * sum(1 for r in rows if r.correct) / n,
        latency_avg_ms=float(np.mean(lat)) / 1000.0,
        latency_std_ms=float(np.std(lat)) / 1000.0,
        latency_per_token_avg_ms=(sum(lat) / emitted_total / 1000.0) if emitted_total else 0.0,
        mem_avg_mb=float(np.mean(mem)) / 2**20,
        mem_std_mb=float(np.std(mem)) / 2**20,
        modeled_speedup=float(speedup),
        cost_draft_micros=float(cost_draft_micros),
        cost_verifier_micros=float(cost_verifier_micros),
        verifier_calls_total=verifier_total,
        emitted_tokens_total=emitted_total,
        model_bytes=int(model_bytes),
        contended=bool(contended),
    )


@contextmanager
def _stage(name: str):
    try:
        yield
    except NanoInferError as e:
        raise type(e)(f"[{name}] {e}") from e


def _mean_forward_micros(model, probe, repeats: int = 5) -> float:
    for _ in range(2):
        model_logits(model, probe)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        model_logits(model, probe)
        times.append((time.perf_counter_ns() - t0) / 1000.0)
    return float(np.mean(times))


def run_pipeline_artifacts(cfg: PipelineConfig) -> tuple[BenchReport, PipelineArtifacts]:
    cfg.validate()
    with _stage("load-models"):
        draft = load_weights(cfg.draft_path)
        verifier = load_weights(cfg.verifier_path)

    if cfg.adapters_path is not None and not cfg.no_lobi:
        with _stage("merge-lora"):
            verifier = merge_lora(verifier, load_adapters(cfg.adapters_path))

    route_model = draft  # routing and embeddings run on the full-precision draft
    pmaps: dict[str, PrecisionMap] = {}
    if cfg.no_lobi:
        dec_draft, dec_verifier = draft, verifier
        model_bytes = draft.nbytes + verifier.nbytes
    else:
        with _stage("assign-precisions"):
            calib = [tokenize(t.prompt) for t in gen_synthetic_tasks(cfg.seed + 1, cfg.calib_size)]
            for name, model, mpath in (
                ("draft", draft, cfg.precision_map_draft_path),
                ("verifier", verifier, cfg.precision_map_verifier_path),
            ):
                if mpath is not None:
                    pmaps[name] = load_precision_map(mpath)
                else:
                    pmaps[name] = assign_precisions(model, calib, block_size=cfg.block_size)
        with _stage("quantize"):
            dec_draft = quantize_model(draft, pmaps["draft"], cfg.block_size)
            dec_verifier = quantize_model(verifier, pmaps["verifier"], cfg.block_size)
            model_bytes = dec_draft.model_bytes + dec_verifier.model_bytes

    index: DocIndex | None = None
    if not cfg.no_rag:
        with _stage("load-index"):
            index = load_index(cfg.index_path)
            if index.dimension != route_model.config.d_model:
                raise ShapeError(
                    f"index dimension {index.dimension} does not match the draft model "
                    f"d_model {route_model.config.d_model}"
                )

    with _stage("load-tasks"):
        tasks = load_tasks(cfg.tasks_path) if cfg.tasks_path else gen_synthetic_tasks(cfg.seed, cfg.n_tasks)

    budget = min(draft.config.max_seq_len, verifier.config.max_seq_len) - cfg.max_tokens
    if budget < 1:
        raise ConfigError(f"max_tokens {cfg.max_tokens} leaves no room for prompts")

    with _stage("measure-costs"):
        probe = tokenize(tasks[0].prompt)
        cost_draft = _mean_forward_micros(dec_draft, probe)
        cost_verifier = _mean_forward_micros(dec_verifier, probe)

    def run_one(task: Task) -> tuple[BenchRow, DecodeTrace]:
        def work():
            prompt_ids = tokenize(task.prompt)
            if cfg.no_rag:
                x, decision = list(prompt_ids), None
            else:
                with _stage("route-and-augment"):
                    x, decision = route_and_augment(
                        route_model, index, prompt_ids, cfg.delta, cfg.topk, max_len=budget
                    )
            with _stage("decode"):
                if cfg.no_hsd:
                    out, trace = verifier_only_decode(dec_verifier, x, cfg.max_tokens)
                else:
                    hsd_cfg = HsdConfig(
                        tau=cfg.tau, max_tokens=cfg.max_tokens, draft_chunk=cfg.draft_chunk
                    )
                    out, trace = decode(dec_draft, dec_verifier, x, hsd_cfg)
            return x, decision, out, trace

        (x, decision, out, trace), micros, peak = measure(work)
        answer = detokenize(out[len(x):]).decode("utf-8", errors="replace").strip()
        row = BenchRow(
            task_id=task.task_id,
            correct=(answer == task.answer),
            latency_micros=micros,
            peak_bytes=peak,
            verifier_calls=trace.verifier_calls,
            draft_calls=trace.draft_calls,
            accepted_count=trace.accepted_count,
            emitted_tokens=trace.emitted,
            retrieved_docs=list(decision.retrieved) if decision is not None else [],
            complexity=decision.complexity if decision is not None else None,
            answer=answer,
        )
        return row, trace

    with tracing_session():
        if cfg.parallel > 1:
            with ThreadPoolExecutor(max_workers=cfg.parallel) as pool:
                results = list(pool.map(run_one, tasks))
        else:
            results = [run_one(t) for t in tasks]

    rows = [row for row, _ in results]
    traces = [trace for _, trace in results]
    aggregates = compute_aggregates(
        rows,
        cost_draft,
        cost_verifier,
        model_bytes,
        contended=cfg.parallel > 1,
        no_hsd=cfg.no_hsd,
    )
    report = BenchReport(
        schema_version=REPORT_SCHEMA_VERSION, config=cfg.snapshot(), rows=rows, aggregates=aggregates
    )
    return report, PipelineArtifacts(traces=traces, precision_maps=pmaps, tau=cfg.tau)


def run_pipeline(cfg: PipelineConfig) -> BenchReport:
    report, _ = run_pipeline_artifacts(cfg)
    return report


def _row_to_json(row: BenchRow) -> dict:
    return asdict(row)


def _row_from_json(obj: dict) -> BenchRow:
    if set(obj) != set(ROW_FIELDS):
        raise FormatError(f"row keys {sorted(obj)} do not match the report schema")
    return BenchRow(
        task_id=str(obj["task_id"]),
        correct=bool(obj["correct"]),
        latency_micros=int(obj["latency_micros"]),
        peak_bytes=int(obj["peak_bytes"]),
        verifier_calls=int(obj["verifier_calls"]),
        draft_calls=int(obj["draft_calls"]),
        accepted_count=int(obj["accepted_count"]),
        emitted_tokens=int(obj["emitted_tokens"]),
        retrieved_docs=[str(d) for d in obj["retrieved_docs"]],
        complexity=None if obj["complexity"] is None else float(obj["complexity"]),
        answer=str(obj["answer"]),
    )


def save_report(report: BenchReport, path) -> None:
    doc = {
        "schema_version": report.schema_version,
        "config": report.config,
        "rows": [_row_to_json(r) for r in report.rows],
        "aggregates": asdict(report.aggregates),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_report(path) -> BenchReport:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise FormatError(f"report {path} lacks a schema_version")
    if doc["schema_version"] != REPORT_SCHEMA_VERSION:
        raise VersionMismatchError(f"unsupported report schema version {doc['schema_version']}")
    if set(doc) != {"schema_version", "config", "rows", "aggregates"}:
        raise FormatError(f"report keys {sorted(doc)} do not match the schema")
    agg = doc["aggregates"]
    if set(agg) != set(AGGREGATE_FIELDS):
        raise FormatError(f"aggregate keys {sorted(agg)} do not match the schema")
    return BenchReport(
        schema_version=int(doc["schema_version"]),
        config=dict(doc["config"]),
        rows=[_row_from_json(r) for r in doc["rows"]],
        aggregates=BenchAggregates(**agg),
    )


def save_rows_csv(rows: list[BenchRow], path) -> None:
    """Delimited per-run output; retrieved doc ids are joined with ';'."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ROW_FIELDS)
        for r in rows:
            writer.writerow(
                [
                    r.task_id,
                    str(r.correct).lower(),
                    r.latency_micros,
                    r.peak_bytes,
                    r.verifier_calls,
                    r.draft_calls,
                    r.accepted_count,
                    r.emitted_tokens,
                    ";".join(r.retrieved_docs),
                    "" if r.complexity is None else repr(r.complexity),
                    r.answer,
                ]
            )


def load_rows_csv(path) -> list[BenchRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(ROW_FIELDS):
            raise FormatError(f"csv header {header} does not match the report schema")
        rows = []
        for rec in reader:
            if len(rec) != len(ROW_FIELDS):
                raise FormatError(f"csv row has {len(rec)} fields, expected {len(ROW_FIELDS)}")
            obj = dict(zip(ROW_FIELDS, rec))
            rows.append(
                BenchRow(
                    task_id=obj["task_id"],
                    correct=obj["correct"] == "true",
                    latency_micros=int(obj["latency_micros"]),
                    peak_bytes=int(obj["peak_bytes"]),
                    verifier_calls=int(obj["verifier_calls"]),
                    draft_calls=int(obj["draft_calls"]),
                    accepted_count=int(obj["accepted_count"]),
                    emitted_tokens=int(obj["emitted_tokens"]),
                    retrieved_docs=[d for d in obj["retrieved_docs"].split(";") if d],
                    complexity=float(obj["complexity"]) if obj["complexity"] else None,
                    answer=obj["answer"],
                )
            )
    return rows
