"""Gradient-routed retrieval over a dense document index.

A query's complexity is the L2 norm of the loss gradient at its pooled
input embedding. Queries at or above the routing threshold pull the
top-k cosine neighbours from the index and get them appended behind
separator tokens; everything else passes through untouched.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    DomainError,
    FormatError,
    RoutingError,
    ShapeError,
    ValidationError,
    VersionMismatchError,
)
from .kernels import softmax
from .model import ModelWeights, embedding_gradient, hidden_states
from .tokenizer import SEP_ID, tokenize

INDEX_FILE_VERSION = 1


@dataclass(frozen=True)
class DocEntry:
    doc_id: str
    text: bytes
    embedding: np.ndarray
    norm: float


@dataclass
class DocIndex:
    dimension: int
    entries: list[DocEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RoutingDecision:
    complexity: float
    retrieved: list[str]
    augmented_length: int


def embed_text(weights: ModelWeights, tokens) -> np.ndarray:
    """Mean of the final hidden states over the (truncated) token sequence."""
    ids = list(tokens)[: weights.config.max_seq_len]
    states = hidden_states(weights, ids)
    return states.astype(np.float64).mean(axis=0).astype(np.float32)


def complexity(weights: ModelWeights, query) -> float:
    """Query complexity: L2 norm of the pooled-embedding loss gradient."""
    grad = embedding_gradient(weights, query)
    return float(np.linalg.norm(grad.astype(np.float64)))


def build_index(weights: ModelWeights, docs) -> DocIndex:
    """Embed (doc_id, text) pairs with the generator model."""
    entries: list[DocEntry] = []
    seen: set[str] = set()
    docs = list(docs)
    if not docs:
        raise ValidationError("build_index: no documents")
    for doc_id, text in docs:
        if doc_id in seen:
            raise ValidationError(f"duplicate doc id {doc_id!r}")
        seen.add(doc_id)
        if isinstance(text, str):
            text = text.encode("utf-8")
        emb = embed_text(weights, tokenize(text))
        norm = float(np.linalg.norm(emb.astype(np.float64)))
        if norm == 0.0:
            raise ValidationError(f"doc {doc_id!r} embeds to the zero vector")
        entries.append(DocEntry(doc_id=str(doc_id), text=bytes(text), embedding=emb, norm=norm))
    return DocIndex(dimension=weights.config.d_model, entries=entries)


def retrieve_topk(index: DocIndex, query_embedding, k: int) -> list[tuple[str, float]]:
    """Top-k cosine matches, best first; score ties break on ascending doc id."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise RoutingError("retrieval against an empty index")
    q = np.asarray(query_embedding, dtype=np.float64).ravel()
    if q.size != index.dimension:
        raise ShapeError(
            f"query embedding has dimension {q.size}, index is {index.dimension}"
        )
    qnorm = float(np.linalg.norm(q))
    if qnorm == 0.0:
        raise DomainError("query embedding is the zero vector")
    scored = [
        (e.doc_id, float(q @ e.embedding.astype(np.float64) / (qnorm * e.norm)))
        for e in index.entries
    ]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


def route_and_augment(
    weights: ModelWeights,
    index: DocIndex | None,
    query,
    delta: float,
    k: int,
    max_len: int | None = None,
) -> tuple[list[int], RoutingDecision]:
    """Append top-k documents behind separators when complexity reaches delta.

    The query always survives truncation whole; document tokens are cut
    from the tail, so the lowest-ranked context goes first.
    """
    if delta < 0:
        raise DomainError(f"delta must be >= 0, got {delta}")
    ids = [int(t) for t in query]
    limit = max_len if max_len is not None else weights.config.max_seq_len
    if len(ids) > limit:
        raise CapacityError(f"query of {len(ids)} tokens exceeds the {limit}-token budget")
    score = complexity(weights, ids)
    if score < delta:
        return list(ids), RoutingDecision(
            complexity=score, retrieved=[], augmented_length=len(ids)
        )
    if index is None or len(index) == 0:
        raise RoutingError("routing chose retrieval but the index is empty")
    results = retrieve_topk(index, embed_text(weights, ids), k)
    by_id = {e.doc_id: e for e in index.entries}
    augmented = list(ids)
    for doc_id, _ in results:
        augmented.append(SEP_ID)
        augmented.extend(tokenize(by_id[doc_id].text))
    augmented = augmented[:limit]
    return augmented, RoutingDecision(
        complexity=score,
        retrieved=[doc_id for doc_id, _ in results],
        augmented_length=len(augmented),
    )


def compositional_attention(q, k_doc, k_input) -> np.ndarray:
    """Row-wise attention of queries over document keys concatenated before input keys."""
    qm = np.asarray(q, dtype=np.float32)
    kd = np.asarray(k_doc, dtype=np.float32)
    ki = np.asarray(k_input, dtype=np.float32)
    if kd.size == 0:
        kd = kd.reshape(0, qm.shape[-1] if qm.ndim == 2 else 0)
    for name, arr in (("q", qm), ("k_doc", kd), ("k_input", ki)):
        if arr.ndim != 2:
            raise ShapeError(f"compositional_attention: {name} must be rank 2")
    if ki.shape[0] < 1:
        raise ShapeError("compositional_attention: k_input must hold at least one row")
    d = qm.shape[1]
    if kd.shape[1] != d or ki.shape[1] != d:
        raise ShapeError(
            f"compositional_attention: inner dims disagree "
            f"(q {qm.shape}, k_doc {kd.shape}, k_input {ki.shape})"
        )
    keys = np.concatenate([kd, ki], axis=0)
    scores = (qm.astype(np.float64) @ keys.astype(np.float64).T).astype(np.float32)
    scores = scores / np.float32(math.sqrt(d))
    return np.stack([softmax(row) for row in scores])


def save_index(index: DocIndex, path) -> None:
    """JSON lines: a header record, then one record per document.

    Embeddings travel as base64 of little-endian float32 so the round
    trip is bit-exact.
    """
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"dim": index.dimension, "version": INDEX_FILE_VERSION}) + "\n")
        for e in index.entries:
            f.write(
                json.dumps(
                    {
                        "id": e.doc_id,
                        "text": base64.b64encode(e.text).decode("ascii"),
                        "embedding": base64.b64encode(
                            np.ascontiguousarray(e.embedding, dtype="<f4").tobytes()
                        ).decode("ascii"),
                    }
                )
                + "\n"
            )


def load_index(path) -> DocIndex:
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    if not lines:
        raise FormatError(f"index file {path} is empty")
    header = json.loads(lines[0])
    if set(header) != {"dim", "version"}:
        raise FormatError(f"index header keys {sorted(header)} do not match schema")
    if header["version"] != INDEX_FILE_VERSION:
        raise VersionMismatchError(f"unsupported index version {header['version']}")
    dim = int(header["dim"])
    entries: list[DocEntry] = []
    seen: set[str] = set()
    for line in lines[1:]:
        obj = json.loads(line)
        if set(obj) != {"id", "text", "embedding"}:
            raise FormatError(f"index record keys {sorted(obj)} do not match schema")
        doc_id = str(obj["id"])
        if doc_id in seen:
            raise ValidationError(f"duplicate doc id {doc_id!r}")
        seen.add(doc_id)
        emb = np.frombuffer(base64.b64decode(obj["embedding"]), dtype="<f4").astype(np.float32)
        if emb.size != dim:
            raise FormatError(f"doc {doc_id!r} embedding has {emb.size} dims, header says {dim}")
        norm = float(np.linalg.norm(emb.astype(np.float64)))
        if norm == 0.0:
            raise ValidationError(f"doc {doc_id!r} embeds to the zero vector")
        entries.append(
            DocEntry(
                doc_id=doc_id,
                text=base64.b64decode(obj["text"]),
                embedding=emb,
                norm=norm,
            )
        )
    return DocIndex(dimension=dim, entries=entries)
