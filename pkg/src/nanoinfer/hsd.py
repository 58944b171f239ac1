"""Hierarchical speculative decoding with an entropy gate.

A cheap draft model proposes greedy tokens; any proposal whose draft
distribution entropy reaches the threshold is replaced by the verifier's
greedy choice over the accepted prefix. Every emitted token is traced.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DomainError, FormatError
from .kernels import entropy, softmax
from .lobi import QuantizedModel, quantized_forward
from .model import ModelWeights, forward
from .tokenizer import EOS_ID

ACCEPTED = "accepted"
VERIFIED = "verified"


@dataclass(frozen=True)
class HsdConfig:
    tau: float = 1.5
    max_tokens: int = 64
    draft_chunk: int = 8

    def __post_init__(self):
        if self.tau < 0:
            raise DomainError(f"tau must be >= 0, got {self.tau}")
        if self.max_tokens < 1:
            raise DomainError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.draft_chunk < 1:
            raise DomainError(f"draft_chunk must be >= 1, got {self.draft_chunk}")


@dataclass(frozen=True)
class TraceRecord:
    t: int
    token: int
    entropy: float | None
    decision: str
    micros: int


@dataclass
class DecodeTrace:
    records: list[TraceRecord] = field(default_factory=list)
    draft_calls: int = 0
    verifier_calls: int = 0
    accepted_count: int = 0

    @property
    def emitted(self) -> int:
        return len(self.records)

    @property
    def verified_count(self) -> int:
        return sum(1 for r in self.records if r.decision == VERIFIED)

    def entropies(self) -> list[float]:
        return [r.entropy for r in self.records if r.entropy is not None]

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "t": r.t,
                    "token": r.token,
                    "entropy": r.entropy,
                    "decision": r.decision,
                    "micros": r.micros,
                }
            )
            for r in self.records
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def parse_trace_jsonl(text: str) -> list[TraceRecord]:
    records = []
    expected_keys = {"t", "token", "entropy", "decision", "micros"}
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if set(obj) != expected_keys:
            raise FormatError(f"trace record keys {sorted(obj)} do not match schema")
        records.append(
            TraceRecord(
                t=int(obj["t"]),
                token=int(obj["token"]),
                entropy=None if obj["entropy"] is None else float(obj["entropy"]),
                decision=str(obj["decision"]),
                micros=int(obj["micros"]),
            )
        )
    return records


def gate(dist, tau: float) -> bool:
    """True when the distribution is confident enough to skip verification."""
    return entropy(dist) < tau


def model_logits(model, seq) -> np.ndarray:
    """Forward dispatch over plain or quantized models."""
    if isinstance(model, QuantizedModel):
        return quantized_forward(model, seq)
    return forward(model, seq)


def _max_seq_len(model) -> int:
    return model.config.max_seq_len


def _check_budget(draft, verifier, prompt, max_tokens: int) -> list[int]:
    ids = [int(t) for t in prompt]
    if not ids:
        raise DomainError("prompt must be nonempty")
    limit = min(_max_seq_len(draft), _max_seq_len(verifier))
    if len(ids) + max_tokens > limit:
        raise CapacityError(
            f"prompt of {len(ids)} tokens plus {max_tokens} generated tokens "
            f"exceeds max_seq_len {limit}"
        )
    return ids


def decode(
    draft: ModelWeights | QuantizedModel,
    verifier: ModelWeights | QuantizedModel,
    prompt,
    cfg: HsdConfig,
) -> tuple[list[int], DecodeTrace]:
    """Generate up to cfg.max_tokens tokens, gating each draft proposal on entropy.

    Drafting runs in bursts of cfg.draft_chunk greedy proposals; a burst
    is discarded past the first verifier substitution so that every
    emitted proposal was conditioned on the accepted prefix. The output
    token stream is independent of draft_chunk.
    """
    out = _check_budget(draft, verifier, prompt, cfg.max_tokens)
    trace = DecodeTrace()
    done = False
    while not done and trace.emitted < cfg.max_tokens:
        burst = min(cfg.draft_chunk, cfg.max_tokens - trace.emitted)
        proposals = []
        sim = list(out)
        for _ in range(burst):
            t0 = time.perf_counter_ns()
            dist = softmax(model_logits(draft, sim)[-1])
            trace.draft_calls += 1
            token = int(np.argmax(dist))
            proposals.append((token, entropy(dist), (time.perf_counter_ns() - t0) // 1000))
            if token == EOS_ID:
                break
            sim.append(token)
        for token, h, draft_micros in proposals:
            t0 = time.perf_counter_ns()
            if h < cfg.tau:
                decision = ACCEPTED
                trace.accepted_count += 1
            else:
                vlogits = model_logits(verifier, out)
                trace.verifier_calls += 1
                token = int(np.argmax(vlogits[-1]))
                decision = VERIFIED
            out.append(token)
            micros = draft_micros + (time.perf_counter_ns() - t0) // 1000
            trace.records.append(
                TraceRecord(
                    t=trace.emitted, token=token, entropy=h, decision=decision, micros=micros
                )
            )
            if token == EOS_ID or trace.emitted >= cfg.max_tokens:
                done = True
                break
            if decision == VERIFIED:
                # the rest of the burst was drafted on a prefix we rejected
                break
    return out, trace


def greedy_decode(model, prompt, max_tokens: int) -> list[int]:
    """Plain greedy generation with one model; stops at EOS or max_tokens."""
    out = _check_budget(model, model, prompt, max_tokens)
    for _ in range(max_tokens):
        token = int(np.argmax(model_logits(model, out)[-1]))
        out.append(token)
        if token == EOS_ID:
            break
    return out


def verifier_only_decode(verifier, prompt, max_tokens: int) -> tuple[list[int], DecodeTrace]:
    """Greedy verifier decoding traced like a gate that never accepts."""
    out = _check_budget(verifier, verifier, prompt, max_tokens)
    trace = DecodeTrace()
    for _ in range(max_tokens):
        t0 = time.perf_counter_ns()
        token = int(np.argmax(model_logits(verifier, out)[-1]))
        trace.verifier_calls += 1
        out.append(token)
        trace.records.append(
            TraceRecord(
                t=trace.emitted,
                token=token,
                entropy=None,
                decision=VERIFIED,
                micros=(time.perf_counter_ns() - t0) // 1000,
            )
        )
        if token == EOS_ID:
            break
    return out, trace


def speedup_report(trace: DecodeTrace, cost_draft: float, cost_verifier: float) -> float:
    """Modeled speedup over verifier-only decoding for the traced generation."""
    if trace.emitted == 0:
        raise DomainError("speedup_report: empty trace")
    if not (cost_draft > 0 and cost_verifier > 0):
        raise DomainError("speedup_report: costs must be positive")
    t = trace.emitted
    return (t * cost_verifier) / (t * cost_draft + trace.verifier_calls * cost_verifier)
