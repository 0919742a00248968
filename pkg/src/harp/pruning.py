"""Layer selection strategies and the greedy top-down search for rescaling factors.

The search fixes one layer at a time, starting from the topmost pruned layer:
it sweeps the candidate grid in ascending order, keeps the value that strictly
improves perplexity (so ties resolve to the smallest candidate), then moves
one layer down with all deeper pruned layers still at their initial value 1.0.
Each search therefore costs exactly P * len(grid) perplexity evaluations.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError, SearchError
from .evaluation import mean_nll, perplexity, sim_metric
from .model import forward

log = logging.getLogger(__name__)

DEFAULT_GRID: tuple[float, ...] = tuple(round(i / 10, 1) for i in range(11))

STRATEGIES = ("top_p", "bottom_p", "hessian", "similarity", "explicit")


@dataclass(frozen=True)
class PruneSpec:
    """The set of layers whose attention path is skipped, with provenance."""

    layer_indices: tuple[int, ...]
    strategy: str = "explicit"

    def __post_init__(self) -> None:
        idx = tuple(sorted(int(i) for i in self.layer_indices))
        if len(set(idx)) != len(idx):
            raise ContractError("prune spec has duplicate layer indices")
        if any(i < 0 for i in idx):
            raise ContractError("prune spec has negative layer indices")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        object.__setattr__(self, "layer_indices", idx)

    @property
    def p(self) -> int:
        return len(self.layer_indices)

    def validate(self, num_layers: int) -> None:
        if self.layer_indices and self.layer_indices[-1] >= num_layers:
            raise ContractError(
                f"layer {self.layer_indices[-1]} out of range for a {num_layers}-layer model"
            )
        if self.strategy == "top_p":
            expected = tuple(range(num_layers - self.p, num_layers))
            if self.layer_indices != expected:
                raise ContractError("top_p spec must name exactly the highest P layers")
        if self.strategy == "bottom_p":
            expected = tuple(range(self.p))
            if self.layer_indices != expected:
                raise ContractError("bottom_p spec must name exactly the lowest P layers")

    def descending(self) -> tuple[int, ...]:
        return tuple(sorted(self.layer_indices, reverse=True))


@dataclass(frozen=True)
class AlphaSchedule:
    """Per-pruned-layer rescaling factors, stored top-down (highest layer first)."""

    alphas: tuple[float, ...]
    layer_indices: tuple[int, ...]  # ascending, mirrors PruneSpec
    grid: tuple[float, ...] = DEFAULT_GRID
    corpus_digest: str = ""
    checkpoint_digest: str = ""
    format_version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "layer_indices", tuple(sorted(int(i) for i in self.layer_indices)))
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        if len(self.alphas) != len(self.layer_indices):
            raise ContractError("schedule must carry one alpha per pruned layer")
        for a in self.alphas:
            if a not in self.grid:
                raise ContractError(f"alpha {a} is not a member of the search grid {self.grid}")
            if not 0.0 <= a <= 1.0:
                raise ContractError(f"alpha {a} outside [0, 1]")

    @property
    def by_layer(self) -> dict[int, float]:
        return dict(zip(sorted(self.layer_indices, reverse=True), self.alphas))

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "layer_indices": list(self.layer_indices),
            "alphas": list(self.alphas),
            "grid": list(self.grid),
            "corpus_digest": self.corpus_digest,
            "checkpoint_digest": self.checkpoint_digest,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AlphaSchedule":
        doc = json.loads(text)
        return cls(
            alphas=tuple(doc["alphas"]),
            layer_indices=tuple(doc["layer_indices"]),
            grid=tuple(doc["grid"]),
            corpus_digest=doc.get("corpus_digest", ""),
            checkpoint_digest=doc.get("checkpoint_digest", ""),
            format_version=int(doc.get("format_version", 1)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "AlphaSchedule":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def spec(self, strategy: str = "explicit") -> PruneSpec:
        return PruneSpec(layer_indices=self.layer_indices, strategy=strategy)


@dataclass
class LayerImportance:
    """One layer's scores under the four importance metrics."""

    layer: int
    bi: float
    similarity: float
    hessian: float
    sim_hidden: float

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "bi_score": self.bi,
            "similarity_score": self.similarity,
            "hessian_importance": self.hessian,
            "sim_of_hidden": self.sim_hidden,
        }


def bi_score(h_l: np.ndarray, h_l1: np.ndarray) -> float:
    """1 minus the mean token-wise cosine between a block's input and output."""
    a = np.asarray(h_l, dtype=np.float64)
    b = np.asarray(h_l1, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(f"bi_score expects matching 2-D matrices, got {a.shape} / {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ContractError("bi_score: zero-norm row makes cosine undefined")
    cos = np.sum(a * b, axis=1) / (na * nb)
    return float(1.0 - cos.mean())


def _capture_windows(checkpoint, corpus, window_size: int, max_windows: int):
    ids = np.asarray(getattr(corpus, "ids", corpus))
    if ids.shape[0] < 2:
        raise ContractError("corpus too short for capture-based metrics")
    n = int(min(window_size, checkpoint.config.max_seq_len, ids.shape[0]))
    starts = range(0, max(1, ids.shape[0] - n + 1), n)
    for w, s in enumerate(starts):
        if w >= max_windows:
            return
        yield forward(
            checkpoint,
            ids[s : s + n],
            capture_hidden=True,
            capture_attn_residual=True,
        )


def similarity_score(
    checkpoint,
    layer: int,
    corpus,
    window_size: int = 256,
    max_windows: int = 4,
) -> float:
    """How much the attention sub-block transforms its input, on real data.

    Measures 1 minus the mean token-wise cosine between the attention
    sub-block's input and its post-residual output, averaged over corpus
    windows. Zero means the sub-block is a no-op; bigger means it matters.
    """
    cfg = checkpoint.config
    if not 0 <= layer < cfg.num_layers:
        raise ContractError(f"layer {layer} out of range")
    if checkpoint.layers[layer].w_q is None:
        raise ContractError(f"layer {layer} is stripped; similarity needs the full attention path")
    scores = [
        bi_score(res.hidden_states[layer], res.attn_residuals[layer])
        for res in _capture_windows(checkpoint, corpus, window_size, max_windows)
    ]
    return float(np.mean(scores))


def scale_directional_derivative(loss_fn: Callable[[float], float], epsilon: float = 1e-2) -> float:
    """Central-difference derivative of ``loss_fn`` at scale 1.0.

    ``loss_fn(c)`` must evaluate the loss with the parameter of interest
    multiplied by ``c``; the result approximates d loss / d c at c = 1, which
    equals the sum over elements of gradient * weight. Truncation error is
    O(epsilon^2) for smooth losses.
    """
    if not 0.0 < epsilon <= 0.5:
        raise ContractError(f"epsilon must lie in (0, 0.5], got {epsilon}")
    f_plus = float(loss_fn(1.0 + epsilon))
    f_minus = float(loss_fn(1.0 - epsilon))
    if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
        raise NumericError("loss is non-finite at a perturbed point")
    return (f_plus - f_minus) / (2.0 * epsilon)


def hessian_importance(
    checkpoint,
    layer: int,
    corpus,
    epsilon: float = 1e-2,
    prune_spec=None,
    alphas=None,
    window_size: int = 256,
    max_tokens: int | None = 4096,
) -> float:
    """First-order importance of a layer's q/k/v projections.

    For each projection, the directional derivative of the mean cross-entropy
    loss along the weights themselves is estimated by a central finite
    difference over a multiplicative perturbation; the importance is the sum
    of squares of the three derivatives. A layer whose attention path is
    skipped with alpha = 0 scores exactly 0: the loss does not depend on its
    q/k/v weights.
    """
    from .checkpoint import Checkpoint  # local import to avoid a module cycle

    cfg = checkpoint.config
    if not 0 <= layer < cfg.num_layers:
        raise ContractError(f"layer {layer} out of range")
    lw = checkpoint.layers[layer]
    if lw.w_q is None or lw.w_k is None:
        raise ContractError(f"layer {layer} is stripped; cannot perturb its q/k weights")

    def loss_with(name: str, scale: float) -> float:
        import dataclasses

        scaled = dataclasses.replace(lw, **{name: getattr(lw, name) * np.float32(scale)})
        layers = list(checkpoint.layers)
        layers[layer] = scaled
        probe = Checkpoint(
            config=cfg,
            embedding=checkpoint.embedding,
            layers=layers,
            final_norm=checkpoint.final_norm,
            output_proj=checkpoint.output_proj,
            tied=checkpoint.tied,
            seed=checkpoint.seed,
            pruned_layers=checkpoint.pruned_layers,
        )
        nll, _, _ = mean_nll(
            probe,
            corpus,
            prune_spec,
            alphas,
            window_size=window_size,
            max_tokens=max_tokens,
        )
        return nll

    total = 0.0
    for name in ("w_q", "w_k", "w_v"):
        deriv = scale_directional_derivative(lambda c, n=name: loss_with(n, c), epsilon)
        total += deriv * deriv
    return total


def build_importance_report(
    checkpoint,
    corpus,
    epsilon: float = 1e-2,
    window_size: int = 256,
    max_windows: int = 4,
    hessian_max_tokens: int | None = 4096,
) -> list[LayerImportance]:
    """All four importance metrics for every layer, from shared captured runs."""
    cfg = checkpoint.config
    captures = list(_capture_windows(checkpoint, corpus, window_size, max_windows))
    if not captures:
        raise ContractError("corpus produced no capture windows")
    report = []
    for layer in range(cfg.num_layers):
        bi = float(np.mean([bi_score(r.hidden_states[layer], r.hidden_states[layer + 1]) for r in captures]))
        sa = float(np.mean([bi_score(r.hidden_states[layer], r.attn_residuals[layer]) for r in captures]))
        sim = float(np.mean([sim_metric(r.hidden_states[layer]) for r in captures]))
        hess = hessian_importance(
            checkpoint,
            layer,
            corpus,
            epsilon=epsilon,
            window_size=window_size,
            max_tokens=hessian_max_tokens,
        )
        report.append(LayerImportance(layer=layer, bi=bi, similarity=sa, hessian=hess, sim_hidden=sim))
    return report


def _smallest_with_high_ties(scores: Sequence[float], p: int) -> tuple[int, ...]:
    order = sorted(range(len(scores)), key=lambda layer: (scores[layer], -layer))
    return tuple(sorted(order[:p]))


def select_layers(
    strategy: str,
    p: int,
    checkpoint,
    corpus=None,
    epsilon: float = 1e-2,
    window_size: int = 256,
) -> PruneSpec:
    """Pick the P layers to prune under one of the four selection strategies.

    ``top_p``/``bottom_p`` are positional; ``hessian`` and ``similarity`` keep
    the P layers with the smallest metric value (ties go to the higher layer)
    and require a corpus.
    """
    num_layers = checkpoint.config.num_layers
    if not 0 <= p <= num_layers:
        raise ContractError(f"P must lie in [0, {num_layers}], got {p}")
    if strategy == "top_p":
        spec = PruneSpec(tuple(range(num_layers - p, num_layers)), "top_p")
    elif strategy == "bottom_p":
        spec = PruneSpec(tuple(range(p)), "bottom_p")
    elif strategy in ("hessian", "similarity"):
        if corpus is None:
            raise ContractError(f"strategy {strategy!r} needs a corpus")
        if strategy == "hessian":
            scores = [
                hessian_importance(checkpoint, layer, corpus, epsilon=epsilon, window_size=window_size)
                for layer in range(num_layers)
            ]
        else:
            scores = [
                similarity_score(checkpoint, layer, corpus, window_size=window_size)
                for layer in range(num_layers)
            ]
        spec = PruneSpec(_smallest_with_high_ties(scores, p), strategy)
    else:
        raise ContractError(f"unknown strategy {strategy!r}")
    spec.validate(num_layers)
    return spec


@dataclass
class TraceEntry:
    layer: int
    alpha: float
    ppl: float  # NaN when the candidate failed to evaluate


def search_alpha(
    checkpoint,
    prune_spec: PruneSpec,
    corpus,
    grid: Sequence[float] = DEFAULT_GRID,
    window_size: int = 256,
    stride: int | None = None,
    max_tokens: int | None = None,
) -> tuple[AlphaSchedule, list[TraceEntry]]:
    """Greedy top-down sweep of the rescaling factor for each pruned layer.

    Returns the chosen schedule and the full (layer, alpha, perplexity) trace,
    len(grid) rows per pruned layer. Candidates that fail numerically are
    recorded with NaN and skipped; a layer where every candidate fails raises
    SearchError.
    """
    cfg = checkpoint.config
    prune_spec.validate(cfg.num_layers)
    swept = sorted({float(g) for g in grid})
    if not swept:
        raise ContractError("grid must be non-empty")
    for g in swept:
        if not 0.0 <= g <= 1.0:
            raise ContractError(f"grid value {g} outside [0, 1]")

    current = {layer: 1.0 for layer in prune_spec.layer_indices}
    trace: list[TraceEntry] = []
    for layer in prune_spec.descending():
        ppl_best = np.inf
        alpha_best = None
        for alpha in swept:
            trial = dict(current)
            trial[layer] = alpha
            try:
                ppl = perplexity(
                    checkpoint,
                    corpus,
                    prune_spec,
                    trial,
                    window_size=window_size,
                    stride=stride,
                    max_tokens=max_tokens,
                ).ppl
            except NumericError as exc:
                log.warning("layer %d alpha %.2f discarded: %s", layer, alpha, exc)
                trace.append(TraceEntry(layer, alpha, float("nan")))
                continue
            trace.append(TraceEntry(layer, alpha, ppl))
            if ppl < ppl_best:
                ppl_best = ppl
                alpha_best = alpha
        if alpha_best is None:
            raise SearchError(f"every candidate failed for layer {layer}")
        current[layer] = alpha_best

    schedule = AlphaSchedule(
        alphas=tuple(current[layer] for layer in prune_spec.descending()),
        layer_indices=prune_spec.layer_indices,
        grid=tuple(swept),
        corpus_digest=getattr(corpus, "digest", ""),
        checkpoint_digest=checkpoint.digest(),
    )
    return schedule, trace
