"""Perplexity and the measurable diagnostics behind the pruning rationale.

Perplexity is exp(mean per-token negative log-likelihood) in nats under
teacher forcing. The corpus is scanned with a sliding window; every token
after the first is scored exactly once (with ``stride < window_size`` each
window contributes only its last ``stride`` predictions, so earlier positions
serve as context). The remaining functions quantify, on real activations,
the effects the pruning method is built on: token-representation similarity,
distance to the rank-one ("all rows equal") subspace, how much row-stochastic
aggregation changes Frobenius norm, and how close attention rows are to
uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .model import forward, forward_batch, rmsnorm

_WINDOW_BATCH = 32  # forward windows scored per batched call


@dataclass
class PerplexityResult:
    ppl: float
    token_count: int
    window_size: int
    stride: int
    window_nlls: list[float]  # summed NLL per window, in scan order

    @property
    def mean_nll(self) -> float:
        return float(np.log(self.ppl))


def _corpus_ids(corpus) -> np.ndarray:
    ids = np.asarray(getattr(corpus, "ids", corpus))
    if ids.ndim != 1:
        raise ContractError("corpus ids must be one-dimensional")
    return ids


def _score_plan(m: int, window: int, stride: int) -> list[tuple[int, int, int]]:
    """Windows as (begin, first_target, last_target); targets are token indices.

    The logit row at window-relative position r predicts the token at absolute
    index begin + r + 1, so a window may score its own final position's
    successor; window starts are placed so each later window scores exactly
    ``stride`` fresh targets with the rest of the window as context.
    """
    plan = []
    next_target = 1
    begin = 0
    while next_target <= m - 1:
        end = min(begin + window, m)
        hi = min(end, m - 1)
        plan.append((begin, next_target, hi))
        next_target = hi + 1
        begin = max(0, next_target - 1 - (window - stride))
    return plan


def mean_nll(
    checkpoint,
    corpus,
    prune_spec=None,
    alphas=None,
    window_size: int = 512,
    stride: int | None = None,
    max_tokens: int | None = None,
    prenorm_skipped: bool = True,
) -> tuple[float, int, list[float]]:
    """Teacher-forced mean negative log-likelihood in nats.

    Returns (mean nll, scored token count, per-window nll sums). Accumulation
    runs in float64 in scan order, so results are reproducible bit for bit.
    """
    cfg = checkpoint.config
    ids = _corpus_ids(corpus)
    if max_tokens is not None:
        ids = ids[:max_tokens]
    m = int(ids.shape[0])
    if m < 2:
        raise ContractError("corpus must contain at least 2 tokens to score next-token loss")
    if window_size < 2:
        raise ContractError("window_size must be at least 2")
    if window_size > cfg.max_seq_len:
        raise ContractError(f"window_size {window_size} exceeds max_seq_len {cfg.max_seq_len}")
    stride = window_size if stride is None else stride
    if not 1 <= stride <= window_size:
        raise ContractError(f"stride must lie in [1, window_size], got {stride}")

    plan = _score_plan(m, window_size, stride)
    window_nlls = [0.0] * len(plan)
    count = 0
    indexed = list(enumerate(plan))
    for group_start in range(0, len(indexed), _WINDOW_BATCH):
        group = indexed[group_start : group_start + _WINDOW_BATCH]
        # Batch windows of equal length together (only the final one can differ).
        by_len: dict[int, list[tuple[int, int, int, int]]] = {}
        for idx, (begin, lo, hi) in group:
            n = min(begin + window_size, m) - begin
            by_len.setdefault(n, []).append((idx, begin, lo, hi))
        for n, items in by_len.items():
            rows = np.stack([ids[b : b + n] for _, b, _, _ in items])
            logits = forward_batch(
                checkpoint, rows, prune_spec, alphas, prenorm_skipped=prenorm_skipped
            )
            for r, (idx, begin, lo, hi) in enumerate(items):
                sel = logits[r, lo - begin - 1 : hi - begin].astype(np.float64)
                targets = ids[lo : hi + 1]
                maxes = sel.max(axis=1)
                lse = maxes + np.log(np.exp(sel - maxes[:, None]).sum(axis=1))
                nll = lse - sel[np.arange(sel.shape[0]), targets]
                window_nlls[idx] = float(nll.sum())
                count += int(hi - lo + 1)
    total = float(np.sum(np.asarray(window_nlls, dtype=np.float64)))
    if not np.isfinite(total):
        raise NumericError("non-finite loss encountered during evaluation")
    return total / count, count, window_nlls


def perplexity(
    checkpoint,
    corpus,
    prune_spec=None,
    alphas=None,
    window_size: int = 512,
    stride: int | None = None,
    max_tokens: int | None = None,
    prenorm_skipped: bool = True,
) -> PerplexityResult:
    """Perplexity over a corpus; see module docstring for the windowing rule."""
    stride = window_size if stride is None else stride
    nll, count, per_window = mean_nll(
        checkpoint,
        corpus,
        prune_spec,
        alphas,
        window_size=window_size,
        stride=stride,
        max_tokens=max_tokens,
        prenorm_skipped=prenorm_skipped,
    )
    return PerplexityResult(
        ppl=float(np.exp(nll)),
        token_count=count,
        window_size=window_size,
        stride=stride,
        window_nlls=per_window,
    )


def _unit_rows(h: np.ndarray, who: str) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ContractError(f"{who}: expected a 2-D matrix, got shape {h.shape}")
    norms = np.linalg.norm(h, axis=1)
    if (norms == 0).any():
        raise ContractError(f"{who}: zero-norm row makes cosine undefined")
    return h / norms[:, None]


def sim_metric(h: np.ndarray) -> float:
    """Average pairwise cosine similarity among the rows of ``h``."""
    h = np.asarray(h)
    n = h.shape[0]
    if n < 2:
        raise ContractError("sim_metric needs at least 2 rows")
    r = _unit_rows(h, "sim_metric")
    gram_sum = float(r.sum(axis=0) @ r.sum(axis=0))  # sum of all pairwise dots incl. diagonal
    return (gram_sum - n) / (n * (n - 1))


def dm_distance(h: np.ndarray) -> float:
    """Frobenius distance from ``h`` to the subspace of matrices with identical rows.

    The minimizing row is the column-wise mean, so the distance has the closed
    form ||h - ones * mean_row(h)||_F.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ContractError(f"dm_distance: expected a 2-D matrix, got shape {h.shape}")
    return float(np.linalg.norm(h - h.mean(axis=0, keepdims=True)))


def _check_row_stochastic(a: np.ndarray, who: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"{who}: expected a square attention matrix, got {a.shape}")
    if (a < -1e-9).any():
        raise ContractError(f"{who}: attention entries must be non-negative")
    sums = a.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ContractError(f"{who}: rows must sum to 1 within 1e-5")
    return a


def frobenius_ratio(a_hat: np.ndarray, h: np.ndarray) -> float:
    """||a_hat @ h||_F / ||h||_F for a row-stochastic aggregation matrix.

    Equals 1 exactly when every row of ``a_hat`` is one-hot; any soft
    averaging changes the norm.
    """
    a = _check_row_stochastic(a_hat, "frobenius_ratio")
    h = np.asarray(h, dtype=np.float64)
    denom = float(np.linalg.norm(h))
    if denom == 0.0:
        raise ContractError("frobenius_ratio: h must be nonzero")
    return float(np.linalg.norm(a @ h)) / denom


def attention_entropy(a_hat: np.ndarray) -> float:
    """Mean per-row entropy of a causal attention matrix, normalized to [0, 1].

    Row i is normalized by log(i+1), the maximum entropy on its causal
    support, so short-support rows do not deflate the mean. The first row has
    a single-element support and is excluded. Returns 0.0 for a 1x1 matrix.
    """
    a = _check_row_stochastic(a_hat, "attention_entropy")
    n = a.shape[0]
    if n == 1:
        return 0.0
    vals = []
    for i in range(1, n):
        p = a[i, : i + 1]
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        vals.append(float(terms.sum()) / np.log(i + 1))
    return float(np.mean(vals))


@dataclass
class DiagnosticsRecord:
    """Per-layer probe values measured on one captured forward pass."""

    layer: int
    sim: float  # average pairwise cosine of the layer's input hidden state
    dm: float  # distance of that hidden state to the identical-rows subspace
    attn_entropy: float | None  # mean normalized attention entropy; None if skipped
    frobenius: float | None  # mean ||A V||_F / ||V||_F over query heads; None if skipped

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "sim": self.sim,
            "dm": self.dm,
            "attn_entropy": self.attn_entropy,
            "frobenius": self.frobenius,
        }


def layer_diagnostics(
    checkpoint,
    corpus,
    prune_spec=None,
    alphas=None,
    window_size: int = 256,
) -> list[DiagnosticsRecord]:
    """Probe every layer on the first corpus window.

    Skipped layers have no attention matrix, so their entropy and Frobenius
    fields are None.
    """
    cfg = checkpoint.config
    ids = _corpus_ids(corpus)
    n = int(min(window_size, cfg.max_seq_len, ids.shape[0]))
    if n < 2:
        raise ContractError("diagnostics need at least 2 tokens")
    res = forward(
        checkpoint,
        ids[:n],
        prune_spec,
        alphas,
        capture_hidden=True,
        capture_attention=True,
    )
    records = []
    for layer in range(cfg.num_layers):
        h_in = res.hidden_states[layer]
        attn = res.attentions[layer]
        entropy = None
        frob = None
        if attn is not None:
            lw = checkpoint.layers[layer]
            x = rmsnorm(h_in, lw.attn_norm)
            v = (x @ lw.w_v).reshape(n, cfg.num_kv_heads, cfg.head_dim)
            entropy = float(np.mean([attention_entropy(attn[q]) for q in range(cfg.num_query_heads)]))
            frob = float(
                np.mean(
                    [
                        frobenius_ratio(attn[q], v[:, q // cfg.group_size, :])
                        for q in range(cfg.num_query_heads)
                    ]
                )
            )
        records.append(
            DiagnosticsRecord(
                layer=layer,
                sim=sim_metric(h_in),
                dm=dm_distance(h_in),
                attn_entropy=entropy,
                frobenius=frob,
            )
        )
    return records
