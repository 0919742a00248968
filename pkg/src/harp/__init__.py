"""Desk-scale GQA transformer engine with high-layer attention skipping.

The package pairs a deterministic float32 inference engine with a pruning
toolkit: skip the self-attention of chosen layers, replace it with a rescaled
value-projection residual, and pick each layer's rescaling factor by greedy
perplexity-driven grid search.
"""

from .config import PRESETS, ModelConfig, resolve_config
from .checkpoint import Checkpoint, from_bytes, generate_model, load, save, strip, to_bytes
from .errors import (
    CapacityError,
    CheckpointError,
    ContractError,
    FormatVersionError,
    HarpError,
    InputError,
    NumericError,
    SearchError,
)
from .evaluation import (
    DiagnosticsRecord,
    PerplexityResult,
    attention_entropy,
    dm_distance,
    frobenius_ratio,
    layer_diagnostics,
    mean_nll,
    perplexity,
    sim_metric,
)
from .model import (
    ForwardResult,
    LayerWeights,
    ffn_block,
    forward,
    forward_batch,
    gqa_attention,
    rmsnorm,
    skipped_attention,
)
from .pruning import (
    DEFAULT_GRID,
    AlphaSchedule,
    LayerImportance,
    PruneSpec,
    TraceEntry,
    bi_score,
    build_importance_report,
    hessian_importance,
    scale_directional_derivative,
    search_alpha,
    select_layers,
    similarity_score,
)
from .benchmark import BenchPoint, emit_report, run_bench
from .tokenizer import Corpus, detokenize, load_corpus, tokenize

__version__ = "0.1.0"

__all__ = [
    "AlphaSchedule",
    "BenchPoint",
    "CapacityError",
    "Checkpoint",
    "CheckpointError",
    "ContractError",
    "Corpus",
    "DEFAULT_GRID",
    "DiagnosticsRecord",
    "FormatVersionError",
    "ForwardResult",
    "HarpError",
    "InputError",
    "LayerImportance",
    "LayerWeights",
    "ModelConfig",
    "NumericError",
    "PRESETS",
    "PerplexityResult",
    "PruneSpec",
    "SearchError",
    "TraceEntry",
    "attention_entropy",
    "bi_score",
    "build_importance_report",
    "detokenize",
    "dm_distance",
    "emit_report",
    "ffn_block",
    "forward",
    "forward_batch",
    "frobenius_ratio",
    "from_bytes",
    "generate_model",
    "gqa_attention",
    "hessian_importance",
    "layer_diagnostics",
    "load",
    "load_corpus",
    "mean_nll",
    "perplexity",
    "resolve_config",
    "rmsnorm",
    "run_bench",
    "save",
    "scale_directional_derivative",
    "search_alpha",
    "select_layers",
    "sim_metric",
    "similarity_score",
    "skipped_attention",
    "strip",
    "to_bytes",
    "tokenize",
]
