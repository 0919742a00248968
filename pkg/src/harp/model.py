"""Deterministic forward pass of a decoder-only grouped-query transformer.

Every layer has two interchangeable attention paths:

* the full path: causal softmax attention with rotary position encoding,
  query heads grouped onto shared key/value heads;
* the skipped path: the attention scores and softmax are bypassed entirely
  and the residual update collapses to a rescaled value->output projection.

All arithmetic is float32. Matrix products reduce in a fixed order, so a
given (checkpoint, tokens, prune set, alphas) always produces bit-identical
logits. Functions here are pure: they never mutate weights, so arbitrarily
many forward passes may run concurrently over one checkpoint.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import expit

from .config import ModelConfig
from .errors import CapacityError, ContractError, InputError, NumericError

if TYPE_CHECKING:
    from .checkpoint import Checkpoint

RMSNORM_EPS = 1e-5

# Cap on live float32 score-matrix elements per attention head; evaluation
# batches are chunked so batch * N^2 stays below this.
_SCORE_BUDGET = 32 * 1024 * 1024


@dataclass
class LayerWeights:
    """One transformer block's parameters.

    ``w_q``/``w_k`` are None for layers whose attention weights were stripped
    from the checkpoint; such layers can only run the skipped path.
    """

    w_q: np.ndarray | None  # d x (n_q * head_dim)
    w_k: np.ndarray | None  # d x (n_kv * head_dim)
    w_v: np.ndarray  # d x (n_kv * head_dim)
    w_o: np.ndarray  # (n_q * head_dim) x d
    ffn_gate: np.ndarray  # d x d_ff
    ffn_up: np.ndarray  # d x d_ff
    ffn_down: np.ndarray  # d_ff x d
    attn_norm: np.ndarray  # d
    ffn_norm: np.ndarray  # d

    def validate(self, config: ModelConfig, layer: int) -> None:
        d, dff = config.hidden_size, config.ffn_size
        qw, kvw = config.num_query_heads * config.head_dim, config.kv_width
        expected = {
            "w_q": (d, qw),
            "w_k": (d, kvw),
            "w_v": (d, kvw),
            "w_o": (qw, d),
            "ffn_gate": (d, dff),
            "ffn_up": (d, dff),
            "ffn_down": (dff, d),
            "attn_norm": (d,),
            "ffn_norm": (d,),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if t is None:
                if name in ("w_q", "w_k"):
                    continue
                raise ContractError(f"layer {layer}: tensor {name} missing")
            if t.shape != shape:
                raise ContractError(
                    f"layer {layer}: tensor {name} has shape {t.shape}, expected {shape}"
                )
            if not np.isfinite(t).all():
                raise ContractError(f"layer {layer}: tensor {name} contains NaN/Inf")


@dataclass
class ForwardResult:
    logits: np.ndarray  # N x V
    hidden_states: list[np.ndarray] | None = None  # L + 1 entries of N x d
    attentions: list[np.ndarray | None] | None = None  # per layer n_q x N x N; None if skipped
    attn_residuals: list[np.ndarray] | None = None  # per layer N x d, post attention residual


def rmsnorm(h: np.ndarray, gain: np.ndarray, eps: float = RMSNORM_EPS) -> np.ndarray:
    """Root-mean-square normalization over the last axis with a learned gain."""
    h = np.asarray(h, dtype=np.float32)
    ms = np.mean(np.square(h), axis=-1, keepdims=True)
    return (h / np.sqrt(ms + np.float32(eps))) * gain.astype(np.float32)


def rope_tables(n: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (n, head_dim // 2), computed in float64 then cast."""
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(n, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate adjacent feature pairs of ``x`` (..., n, heads, head_dim) by position."""
    even, odd = x[..., 0::2], x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def _causal_bias(n: int) -> np.ndarray:
    bias = np.zeros((n, n), dtype=np.float32)
    bias[np.triu_indices(n, k=1)] = -np.inf
    return bias


def _attention_batch(
    h: np.ndarray,
    weights: LayerWeights,
    config: ModelConfig,
    score_bias: np.ndarray | None = None,
    want_attention: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Full GQA attention on a (B, N, d) batch; returns (B, N, d) and optional scores."""
    if weights.w_q is None or weights.w_k is None:
        raise ContractError("attention weights were stripped; only the skipped path is available")
    b, n, d = h.shape
    n_q, n_kv, hd, g = config.num_query_heads, config.num_kv_heads, config.head_dim, config.group_size
    scale = np.float32(1.0 / np.sqrt(hd))

    q = (h @ weights.w_q).reshape(b, n, n_q, hd)
    k = (h @ weights.w_k).reshape(b, n, n_kv, hd)
    v = (h @ weights.w_v).reshape(b, n, n_kv, hd)
    cos, sin = rope_tables(n, hd, config.rope_base)
    q = apply_rope(q, cos, sin)
    k = apply_rope(k, cos, sin)

    bias = _causal_bias(n)
    if score_bias is not None:
        sb = np.asarray(score_bias, dtype=np.float32)
        if sb.shape != (n, n):
            raise ContractError(f"score_bias must be {n}x{n}, got {sb.shape}")
        bias = bias + sb

    ctx = np.empty((b, n, n_q, hd), dtype=np.float32)
    attn = np.empty((b, n_q, n, n), dtype=np.float32) if want_attention else None
    for qh in range(n_q):
        kv = qh // g
        scores = q[:, :, qh, :] @ k[:, :, kv, :].transpose(0, 2, 1)
        scores *= scale
        scores += bias
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        if attn is not None:
            attn[:, qh] = scores
        ctx[:, :, qh, :] = scores @ v[:, :, kv, :]
    out = ctx.reshape(b, n, n_q * hd) @ weights.w_o
    return out, attn


def gqa_attention(
    h: np.ndarray,
    weights: LayerWeights,
    config: ModelConfig,
    score_bias: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Causal grouped-query attention on an (N, d) input.

    Query head ``qh`` attends over key/value head ``qh // g``. Returns the
    attention output (residual not added) and the per-query-head row-stochastic
    attention matrices, shape (n_q, N, N). ``score_bias`` is an optional N x N
    additive term on the pre-softmax scores, used by diagnostics to force
    specific attention patterns.
    """
    h = _as_2d(h, config)
    out, attn = _attention_batch(h[None], weights, config, score_bias, want_attention=True)
    assert attn is not None
    return out[0], attn[0]


def skipped_attention(
    h: np.ndarray,
    w_v: np.ndarray,
    w_o: np.ndarray,
    alpha: float,
    config: ModelConfig,
    norm_gain: np.ndarray | None = None,
) -> np.ndarray:
    """Attention block with the score/softmax machinery removed.

    Computes ``h + alpha * replicate_g(norm(h) @ w_v) @ w_o`` where
    ``replicate_g`` copies each key/value head's value slice g times along the
    head axis, so query-head block ``kv*g + j`` receives value head ``kv``.
    With ``norm_gain=None`` the pre-attention normalization is disabled
    (comparison mode); by default callers pass the layer's attention-norm gain.
    Cost is O(N d^2): no scores, no softmax, no position encoding.
    """
    if not np.isfinite(alpha):
        raise ContractError(f"alpha must be finite, got {alpha!r}")
    h = np.asarray(h, dtype=np.float32)
    if h.ndim not in (2, 3) or h.shape[-1] != config.hidden_size:
        raise ContractError(f"hidden state must be (..., N, {config.hidden_size}), got {h.shape}")
    x = rmsnorm(h, norm_gain) if norm_gain is not None else h
    update = _replicated_value_path(x, w_v, w_o, config)
    return h + np.float32(alpha) * update


def _replicated_value_path(
    x: np.ndarray, w_v: np.ndarray, w_o: np.ndarray, config: ModelConfig
) -> np.ndarray:
    n_kv, hd, g = config.num_kv_heads, config.head_dim, config.group_size
    d = config.hidden_size
    if w_v.shape != (d, config.kv_width) or w_o.shape != (config.num_query_heads * hd, d):
        raise ContractError(
            f"value/output projection shapes {w_v.shape}/{w_o.shape} inconsistent with config"
        )
    v = (x @ w_v).reshape(*x.shape[:-1], n_kv, hd)
    v = np.repeat(v, g, axis=-2)  # kv head i fills query-head blocks i*g .. i*g+g-1
    return v.reshape(*x.shape[:-1], n_kv * g * hd) @ w_o


def ffn_block(h: np.ndarray, weights: LayerWeights, config: ModelConfig) -> np.ndarray:
    """SwiGLU feed-forward with pre-normalization and residual: h + down(silu(gate(x)) * up(x))."""
    if h.shape[-1] != config.hidden_size:
        raise ContractError(f"hidden size {h.shape[-1]} != config {config.hidden_size}")
    x = rmsnorm(h, weights.ffn_norm)
    gate = x @ weights.ffn_gate
    gate *= expit(gate)
    gate *= x @ weights.ffn_up
    return h + gate @ weights.ffn_down


def _as_2d(h: np.ndarray, config: ModelConfig) -> np.ndarray:
    h = np.asarray(h, dtype=np.float32)
    if h.ndim != 2 or h.shape[1] != config.hidden_size:
        raise ContractError(f"hidden state must be N x {config.hidden_size}, got {h.shape}")
    return h


def normalize_prune_layers(prune_spec, num_layers: int) -> tuple[int, ...]:
    """Accept a PruneSpec-like object or a plain iterable of layer indices."""
    if prune_spec is None:
        return ()
    indices = getattr(prune_spec, "layer_indices", prune_spec)
    out = tuple(sorted(int(i) for i in indices))
    for i in out:
        if not 0 <= i < num_layers:
            raise ContractError(f"pruned layer {i} out of range [0, {num_layers})")
    if len(set(out)) != len(out):
        raise ContractError("duplicate layer indices in prune spec")
    return out


def normalize_alphas(alphas, pruned: tuple[int, ...]) -> dict[int, float]:
    """Accept an AlphaSchedule-like object, a mapping, or one scalar for all layers."""
    if not pruned:
        return {}
    if alphas is None:
        raise ContractError("alphas required when layers are pruned")
    if hasattr(alphas, "by_layer"):
        mapping = dict(alphas.by_layer)
    elif isinstance(alphas, Mapping):
        mapping = {int(k): float(v) for k, v in alphas.items()}
    elif isinstance(alphas, (int, float)):
        mapping = {i: float(alphas) for i in pruned}
    else:
        raise ContractError(f"cannot interpret alphas of type {type(alphas).__name__}")
    if set(mapping) != set(pruned):
        raise ContractError(
            f"alphas cover layers {sorted(mapping)} but prune spec names {list(pruned)}"
        )
    return mapping


def _check_finite(h: np.ndarray, where: str) -> None:
    if not np.isfinite(h).all():
        raise NumericError(f"non-finite values produced at {where}")


def _run_stack(
    checkpoint: "Checkpoint",
    h: np.ndarray,
    pruned: tuple[int, ...],
    alpha_map: dict[int, float],
    prenorm_skipped: bool = True,
    capture_hidden: bool = False,
    capture_attention: bool = False,
    capture_attn_residual: bool = False,
) -> tuple[np.ndarray, ForwardResult]:
    config = checkpoint.config
    pruned_set = set(pruned)
    res = ForwardResult(logits=np.empty(0))
    if capture_hidden:
        res.hidden_states = [h[0].copy()]
    if capture_attention:
        res.attentions = []
    if capture_attn_residual:
        res.attn_residuals = []

    for i, lw in enumerate(checkpoint.layers):
        if i in pruned_set:
            gain = lw.attn_norm if prenorm_skipped else None
            h = skipped_attention(h, lw.w_v, lw.w_o, alpha_map[i], config, norm_gain=gain)
            if res.attentions is not None:
                res.attentions.append(None)
        else:
            attn_out, attn = _attention_batch(
                rmsnorm(h, lw.attn_norm), lw, config, want_attention=capture_attention
            )
            h = h + attn_out
            if res.attentions is not None:
                res.attentions.append(attn[0])
        if res.attn_residuals is not None:
            res.attn_residuals.append(h[0].copy())
        h = ffn_block(h, lw, config)
        _check_finite(h, f"layer {i}")
        if res.hidden_states is not None:
            res.hidden_states.append(h[0].copy())
    return h, res


def _project_logits(checkpoint: "Checkpoint", h: np.ndarray) -> np.ndarray:
    out = rmsnorm(h, checkpoint.final_norm)
    proj = checkpoint.embedding if checkpoint.tied else checkpoint.output_proj
    return out @ proj.T


def _validate_tokens(tokens, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.shape[0] == 0:
        raise InputError("tokens must be a non-empty 1-D sequence of ids")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(
            f"token id out of range: ids must lie in [0, {config.vocab_size})"
        )
    if ids.shape[0] > config.max_seq_len:
        raise CapacityError(
            f"sequence of {ids.shape[0]} tokens exceeds max_seq_len {config.max_seq_len}"
        )
    return ids.astype(np.int64)


def forward(
    checkpoint: "Checkpoint",
    tokens,
    prune_spec=None,
    alphas=None,
    prenorm_skipped: bool = True,
    capture_hidden: bool = False,
    capture_attention: bool = False,
    capture_attn_residual: bool = False,
) -> ForwardResult:
    """Run the model over one token sequence.

    Layers named by ``prune_spec`` take the skipped attention path with their
    entry from ``alphas``; all other layers run full attention. Capture flags
    record per-layer hidden states (L+1 entries including the embedding
    output), per-layer attention matrices (None for skipped layers), and the
    post-attention-residual states used by the similarity metric.
    """
    config = checkpoint.config
    ids = _validate_tokens(tokens, config)
    pruned = normalize_prune_layers(prune_spec, config.num_layers)
    alpha_map = normalize_alphas(alphas, pruned)
    checkpoint.require_attention_weights(exclude=pruned)

    h = checkpoint.embedding[ids][None].astype(np.float32)
    h, res = _run_stack(
        checkpoint,
        h,
        pruned,
        alpha_map,
        prenorm_skipped=prenorm_skipped,
        capture_hidden=capture_hidden,
        capture_attention=capture_attention,
        capture_attn_residual=capture_attn_residual,
    )
    logits = _project_logits(checkpoint, h)
    _check_finite(logits, "output projection")
    res.logits = logits[0]
    return res


def forward_batch(
    checkpoint: "Checkpoint",
    token_rows: np.ndarray,
    prune_spec=None,
    alphas=None,
    prenorm_skipped: bool = True,
) -> np.ndarray:
    """Logits for a (B, N) batch of equal-length sequences, chunked to bound memory.

    Row b of the result is bit-identical to ``forward(checkpoint, token_rows[b], ...)``
    logits; batching only amortizes projection work across rows.
    """
    config = checkpoint.config
    rows = np.asarray(token_rows)
    if rows.ndim != 2:
        raise ContractError(f"token_rows must be 2-D, got shape {rows.shape}")
    b, n = rows.shape
    pruned = normalize_prune_layers(prune_spec, config.num_layers)
    alpha_map = normalize_alphas(alphas, pruned)
    checkpoint.require_attention_weights(exclude=pruned)
    for r in range(b):
        _validate_tokens(rows[r], config)

    chunk = max(1, _SCORE_BUDGET // max(1, n * n))
    out = np.empty((b, n, config.vocab_size), dtype=np.float32)
    for start in range(0, b, chunk):
        sel = rows[start : start + chunk].astype(np.int64)
        h = checkpoint.embedding[sel].astype(np.float32)
        h, _ = _run_stack(checkpoint, h, pruned, alpha_map, prenorm_skipped=prenorm_skipped)
        logits = _project_logits(checkpoint, h)
        _check_finite(logits, "output projection")
        out[start : start + chunk] = logits
    return out
