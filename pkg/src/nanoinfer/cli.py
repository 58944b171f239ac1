"""Command line interface.

Global flags live on the group and can also come from a key=value
config file; explicit command-line values win over the file. Exit
codes: 0 success, 2 config error, 3 data/format error, 4 capacity error.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import click

from . import bench as bench_mod
from .checkpoint import load_checkpoint, load_weights, save_quantized, save_weights
from .errors import (
    CapacityError,
    ConfigError,
    DomainError,
    FormatError,
    NanoInferError,
    NumericError,
    RoutingError,
    ShapeError,
    ValidationError,
)
from .hsd import HsdConfig, decode, verifier_only_decode
from .lobi import assign_precisions, load_adapters, load_precision_map, merge_lora, quantize_model, save_precision_map
from .model import ModelConfig, PRESETS, init_random
from .plots import render_report_figures
from .rag import build_index, save_index
from .tokenizer import detokenize, tokenize

_CONFIG_KEYS = {
    "seed": int,
    "format": str,
    "tau": float,
    "delta": float,
    "topk": int,
    "calib_size": int,
    "block_size": int,
    "parallel": int,
    "no_hsd": bool,
    "no_rag": bool,
    "no_lobi": bool,
}


@dataclass
class Settings:
    seed: int = 0
    format: str = "json"
    tau: float = 1.5
    delta: float = 0.85
    topk: int = 3
    calib_size: int = 64
    block_size: int = 32
    parallel: int = 1
    no_hsd: bool = False
    no_rag: bool = False
    no_lobi: bool = False


def _parse_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        kind = _CONFIG_KEYS[key]
        try:
            if kind is bool:
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                values[key] = value.lower() == "true"
            else:
                values[key] = kind(value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return values


@click.group()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "report_format", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
@click.option("--tau", type=float, default=1.5, show_default=True, help="Entropy gate threshold (nats).")
@click.option("--delta", type=float, default=0.85, show_default=True, help="Retrieval routing threshold.")
@click.option("--topk", type=int, default=3, show_default=True, help="Documents retrieved per routed query.")
@click.option("--calib-size", type=int, default=64, show_default=True)
@click.option("--block-size", type=int, default=32, show_default=True)
@click.option("--no-hsd", is_flag=True, help="Decode with the verifier only.")
@click.option("--no-rag", is_flag=True, help="Skip retrieval routing.")
@click.option("--no-lobi", is_flag=True, help="Skip adapter merge and quantization.")
@click.option("--parallel", type=int, default=1, show_default=True, help="Concurrent benchmark tasks.")
@click.pass_context
def cli(ctx, seed, config_path, report_format, tau, delta, topk, calib_size, block_size,
        no_hsd, no_rag, no_lobi, parallel):
    """Desk-scale inference optimization toolkit."""
    settings = Settings()
    if config_path:
        settings = replace(settings, **_parse_config_file(config_path))
    explicit = {}
    for key, value in (
        ("seed", seed), ("format", report_format), ("tau", tau), ("delta", delta),
        ("topk", topk), ("calib_size", calib_size), ("block_size", block_size),
        ("no_hsd", no_hsd), ("no_rag", no_rag), ("no_lobi", no_lobi), ("parallel", parallel),
    ):
        name = {"format": "report_format"}.get(key, key)
        source = ctx.get_parameter_source(name)
        if source is not None and source.name == "COMMANDLINE":
            explicit[key] = value
    ctx.obj = replace(settings, **explicit)


@cli.command("init-model")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="draft", show_default=True)
@click.option("--layers", type=int, default=None)
@click.option("--d-model", type=int, default=None)
@click.option("--heads", type=int, default=None)
@click.option("--vocab-size", type=int, default=None)
@click.option("--max-seq-len", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def init_model_cmd(settings, preset, layers, d_model, heads, vocab_size, max_seq_len, out):
    """Write a seeded random checkpoint for a preset (or overridden) architecture."""
    base = PRESETS[preset]
    config = ModelConfig(
        n_layers=layers if layers is not None else base.n_layers,
        d_model=d_model if d_model is not None else base.d_model,
        n_heads=heads if heads is not None else base.n_heads,
        vocab_size=vocab_size if vocab_size is not None else base.vocab_size,
        max_seq_len=max_seq_len if max_seq_len is not None else base.max_seq_len,
    )
    save_weights(init_random(config, settings.seed), out)
    click.echo(f"wrote {config.n_layers}-layer d_model={config.d_model} checkpoint to {out}")


@cli.command("gen-tasks")
@click.option("--n", type=int, default=100, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def gen_tasks_cmd(settings, n, out):
    """Generate deterministic synthetic addition tasks (JSON lines)."""
    bench_mod.save_tasks(bench_mod.gen_synthetic_tasks(settings.seed, n), out)
    click.echo(f"wrote {n} tasks to {out}")


@cli.command("build-index")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--docs", "docs_path", type=click.Path(exists=True), required=True,
              help="JSON lines with fields id and text.")
@click.option("--out", type=click.Path(), required=True)
def build_index_cmd(model_path, docs_path, out):
    """Embed documents with a model and persist the retrieval index."""
    weights = load_weights(model_path)
    docs = []
    for line in Path(docs_path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if set(obj) != {"id", "text"}:
            raise FormatError(f"doc record keys {sorted(obj)} do not match schema (id, text)")
        docs.append((str(obj["id"]), obj["text"]))
    index = build_index(weights, docs)
    save_index(index, out)
    click.echo(f"indexed {len(index)} docs at dimension {index.dimension} into {out}")


@cli.command("merge-lora")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--adapters", "adapters_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def merge_lora_cmd(model_path, adapters_path, out):
    """Fold low-rank adapters into a checkpoint."""
    weights = load_weights(model_path)
    adapters = load_adapters(adapters_path)
    save_weights(merge_lora(weights, adapters), out)
    click.echo(f"merged {len(adapters)} adapters into {out}")


@cli.command("assign-precisions")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def assign_precisions_cmd(settings, model_path, out):
    """Calibrate per-subblock bit widths and write the precision map."""
    weights = load_weights(model_path)
    calib = [
        tokenize(t.prompt)
        for t in bench_mod.gen_synthetic_tasks(settings.seed + 1, settings.calib_size)
    ]

    def progress(name, done, total):
        if done == total:
            click.echo(f"  {name}: {total} blocks", err=True)

    pmap = assign_precisions(weights, calib, block_size=settings.block_size, progress=progress)
    save_precision_map(pmap, out)
    click.echo(
        f"assigned {pmap.total_blocks()} blocks "
        f"(4-bit {pmap.fraction_at(4):.1%}, 8-bit {pmap.fraction_at(8):.1%}, "
        f"16-bit {pmap.fraction_at(16):.1%}) into {out}"
    )


@cli.command("quantize")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--map", "map_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def quantize_cmd(model_path, map_path, out):
    """Pack a checkpoint according to a precision map."""
    weights = load_weights(model_path)
    qmodel = quantize_model(weights, load_precision_map(map_path))
    save_quantized(qmodel, out)
    ratio = qmodel.model_bytes / weights.nbytes
    click.echo(f"packed {weights.nbytes} -> {qmodel.model_bytes} bytes ({ratio:.2f}x) into {out}")


@cli.command("decode")
@click.option("--draft", "draft_path", type=click.Path(exists=True), required=True)
@click.option("--verifier", "verifier_path", type=click.Path(exists=True), required=True)
@click.option("--prompt", required=True)
@click.option("--max-tokens", type=int, default=32, show_default=True)
@click.option("--draft-chunk", type=int, default=8, show_default=True)
@click.option("--trace", "trace_path", type=click.Path(), default=None,
              help="Write the per-token trace as JSON lines.")
@click.pass_obj
def decode_cmd(settings, draft_path, verifier_path, prompt, max_tokens, draft_chunk, trace_path):
    """Speculatively decode one prompt and print the generation."""
    draft = load_checkpoint(draft_path)
    verifier = load_checkpoint(verifier_path)
    prompt_ids = tokenize(prompt)
    if settings.no_hsd:
        out, trace = verifier_only_decode(verifier, prompt_ids, max_tokens)
    else:
        cfg = HsdConfig(tau=settings.tau, max_tokens=max_tokens, draft_chunk=draft_chunk)
        out, trace = decode(draft, verifier, prompt_ids, cfg)
    text = detokenize(out[len(prompt_ids):]).decode("utf-8", errors="replace")
    click.echo(text)
    click.echo(
        f"emitted={trace.emitted} accepted={trace.accepted_count} "
        f"verifier_calls={trace.verifier_calls} draft_calls={trace.draft_calls}",
        err=True,
    )
    if trace_path:
        Path(trace_path).write_text(trace.to_jsonl(), encoding="utf-8")


@cli.command("calibrate-delta")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--queries", "queries_path", type=click.Path(exists=True), default=None,
              help="Task file (JSON lines); prompts become validation queries.")
@click.option("--n", type=int, default=32, show_default=True,
              help="Synthetic validation queries when no file is given.")
@click.pass_obj
def calibrate_delta_cmd(settings, model_path, queries_path, n):
    """Suggest a routing threshold from validation-set complexity scores."""
    weights = load_weights(model_path)
    if queries_path:
        queries = [t.prompt for t in bench_mod.load_tasks(queries_path)]
    else:
        queries = [t.prompt for t in bench_mod.gen_synthetic_tasks(settings.seed, n)]
    suggested = bench_mod.calibrate_delta(weights, queries)
    click.echo(f"{suggested!r}")


@cli.command("bench")
@click.option("--draft", "draft_path", type=click.Path(exists=True), required=True)
@click.option("--verifier", "verifier_path", type=click.Path(exists=True), required=True)
@click.option("--index", "index_path", type=click.Path(), default=None)
@click.option("--adapters", "adapters_path", type=click.Path(), default=None)
@click.option("--precision-map-draft", type=click.Path(), default=None,
              help="Reuse a saved precision map instead of recalibrating the draft.")
@click.option("--precision-map-verifier", type=click.Path(), default=None)
@click.option("--tasks", "tasks_path", type=click.Path(), default=None)
@click.option("--n", "n_tasks", type=int, default=20, show_default=True)
@click.option("--max-tokens", type=int, default=32, show_default=True)
@click.option("--draft-chunk", type=int, default=8, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="Render summary figures next to the report.")
@click.pass_obj
def bench_cmd(settings, draft_path, verifier_path, index_path, adapters_path,
              precision_map_draft, precision_map_verifier, tasks_path, n_tasks,
              max_tokens, draft_chunk, out_path, figures):
    """Run the full pipeline over a task set and write the report."""
    cfg = bench_mod.PipelineConfig(
        draft_path=draft_path,
        verifier_path=verifier_path,
        index_path=index_path,
        adapters_path=adapters_path,
        precision_map_draft_path=precision_map_draft,
        precision_map_verifier_path=precision_map_verifier,
        tau=settings.tau,
        delta=settings.delta,
        topk=settings.topk,
        calib_size=settings.calib_size,
        block_size=settings.block_size,
        seed=settings.seed,
        n_tasks=n_tasks,
        tasks_path=tasks_path,
        max_tokens=max_tokens,
        draft_chunk=draft_chunk,
        out_path=out_path,
        report_format=settings.format,
        no_hsd=settings.no_hsd,
        no_rag=settings.no_rag,
        no_lobi=settings.no_lobi,
        parallel=settings.parallel,
    )
    report, artifacts = bench_mod.run_pipeline_artifacts(cfg)
    if settings.format == "json":
        bench_mod.save_report(report, out_path)
    else:
        bench_mod.save_rows_csv(report.rows, out_path)
    agg = report.aggregates
    click.echo(f"accuracy: {agg.accuracy_pct:.1f}%")
    click.echo(f"latency: {agg.latency_avg_ms:.3f} ms avg, {agg.latency_std_ms:.3f} ms std "
               f"({agg.latency_per_token_avg_ms:.3f} ms/token)")
    click.echo(f"memory: {agg.mem_avg_mb:.3f} MB avg peak, {agg.mem_std_mb:.3f} MB std")
    click.echo(f"model bytes: {agg.model_bytes}")
    click.echo(f"verifier calls: {agg.verifier_calls_total} over {agg.emitted_tokens_total} tokens")
    click.echo(f"modeled speedup: {agg.modeled_speedup:.2f}x")
    for name, pmap in artifacts.precision_maps.items():
        click.echo(
            f"{name} precision mix: 4-bit {pmap.fraction_at(4):.1%}, "
            f"8-bit {pmap.fraction_at(8):.1%}, 16-bit {pmap.fraction_at(16):.1%}"
        )
    if figures:
        paths = render_report_figures(
            report, artifacts.traces, artifacts.precision_maps, Path(out_path).parent
        )
        for p in paths:
            click.echo(f"figure: {p}")
    click.echo(f"report: {out_path}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except CapacityError as e:
        click.echo(f"error: {e}", err=True)
        return 4
    except (FormatError, ValidationError, DomainError, ShapeError, RoutingError, NumericError) as e:
        click.echo(f"error: {e}", err=True)
        return 3
    except NanoInferError as e:
        click.echo(f"error: {e}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
