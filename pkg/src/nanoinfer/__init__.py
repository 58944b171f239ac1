"""Desk-scale inference optimization toolkit for toy decoder-only transformers.

Three cooperating stages: entropy-gated speculative decoding, gradient-
norm-routed retrieval augmentation, and low-rank adapter merging with
per-subblock mixed-precision quantization, plus a benchmark harness
that reports latency, memory and verifier-call counts.
"""

from .bench import (
    BenchReport,
    PipelineConfig,
    calibrate_delta,
    gen_synthetic_tasks,
    load_report,
    measure,
    run_pipeline,
    save_report,
)
from .checkpoint import load_checkpoint, load_weights, save_quantized, save_weights
from .hsd import DecodeTrace, HsdConfig, decode, gate, greedy_decode, speedup_report
from .kernels import entropy, layer_norm, matmul, softmax
from .lobi import (
    LoraAdapter,
    PrecisionMap,
    QuantizedModel,
    assign_precisions,
    block_error,
    merge_lora,
    quantize_model,
    quantized_forward,
)
from .model import (
    ModelConfig,
    ModelWeights,
    embedding_gradient,
    forward,
    init_random,
    next_token_loss,
)
from .quant import BLOCK_SIZE, QuantBlock, dequantize_block, quantize_block
from .rag import (
    DocIndex,
    RoutingDecision,
    build_index,
    complexity,
    compositional_attention,
    load_index,
    retrieve_topk,
    route_and_augment,
    save_index,
)
from .tokenizer import EOS_ID, SEP_ID, VOCAB_SIZE, detokenize, tokenize

__version__ = "0.1.0"

__all__ = [
    "BLOCK_SIZE",
    "BenchReport",
    "DecodeTrace",
    "DocIndex",
    "EOS_ID",
    "HsdConfig",
    "LoraAdapter",
    "ModelConfig",
    "ModelWeights",
    "PipelineConfig",
    "PrecisionMap",
    "QuantBlock",
    "QuantizedModel",
    "RoutingDecision",
    "SEP_ID",
    "VOCAB_SIZE",
    "assign_precisions",
    "block_error",
    "build_index",
    "calibrate_delta",
    "complexity",
    "compositional_attention",
    "decode",
    "dequantize_block",
    "detokenize",
    "embedding_gradient",
    "entropy",
    "forward",
    "gate",
    "gen_synthetic_tasks",
    "greedy_decode",
    "init_random",
    "layer_norm",
    "load_checkpoint",
    "load_index",
    "load_report",
    "load_weights",
    "matmul",
    "measure",
    "merge_lora",
    "next_token_loss",
    "quantize_block",
    "quantize_model",
    "quantized_forward",
    "retrieve_topk",
    "route_and_augment",
    "run_pipeline",
    "save_index",
    "save_quantized",
    "save_report",
    "save_weights",
    "softmax",
    "speedup_report",
    "tokenize",
]
