"""Wall-clock latency of dense vs pruned forward passes across sequence lengths.

Protocol: for each sequence length, run a few unmeasured warmup passes and
then ``repeats`` timed passes on the same seeded random tokens for both
variants, strictly sequentially on one worker. The measured region is the
forward pass only; tokens and weights are prepared up front. Confidence
half-widths use the t distribution at 95%.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ContractError
from .model import forward

VARIANTS = ("dense", "pruned")


@dataclass
class BenchPoint:
    label: str
    seq_len: int
    variant: str
    repeats: int
    mean_s: float
    std_s: float
    ci95_s: float
    speedup: float  # dense mean over pruned mean at this seq_len; NaN if either failed
    error: str = ""


def _time_variants(checkpoint, tokens, variants: dict, repeats: int, warmup: int) -> dict:
    """Per-variant wall-clock samples; repeats are interleaved across variants.

    Interleaving means slow machine drift hits every variant equally instead
    of biasing whichever one was measured last.
    """
    samples = {name: np.empty(repeats, dtype=np.float64) for name in variants}
    failed: dict[str, str] = {}
    for name, (spec, alphas) in variants.items():
        try:
            for _ in range(warmup):
                forward(checkpoint, tokens, spec, alphas)
        except MemoryError:
            failed[name] = "out of memory"
    for r in range(repeats):
        for name, (spec, alphas) in variants.items():
            if name in failed:
                continue
            try:
                t0 = time.perf_counter()
                forward(checkpoint, tokens, spec, alphas)
                samples[name][r] = time.perf_counter() - t0
            except MemoryError:
                failed[name] = "out of memory"
    return {
        name: (failed.get(name, ""), samples[name]) for name in variants
    }


def run_bench(
    checkpoint,
    prune_spec,
    alphas,
    seq_lengths,
    repeats: int = 10,
    warmup: int = 2,
    seed: int = 0,
    label: str = "model",
) -> list[BenchPoint]:
    """Measure both variants at every sequence length.

    A MemoryError at one point is recorded on that row and the run continues.
    Both variants of one sequence length see identical token inputs.
    """
    if repeats < 3:
        raise ContractError(f"repeats must be at least 3, got {repeats}")
    lens = [int(n) for n in seq_lengths]
    if not lens:
        raise ContractError("seq_lengths must be non-empty")
    cfg = checkpoint.config
    for n in lens:
        if not 1 <= n <= cfg.max_seq_len:
            raise ContractError(f"sequence length {n} outside [1, {cfg.max_seq_len}]")

    rng = np.random.default_rng(seed)
    tcrit = float(stats.t.ppf(0.975, repeats - 1))
    points: list[BenchPoint] = []
    for n in lens:
        tokens = rng.integers(0, cfg.vocab_size, size=n, dtype=np.int64)
        variants = {"dense": (None, None), "pruned": (prune_spec, alphas)}
        timed = _time_variants(checkpoint, tokens, variants, repeats, warmup)
        means: dict[str, float] = {}
        rows: list[BenchPoint] = []
        for variant in VARIANTS:
            error, samples = timed[variant]
            if error:
                rows.append(
                    BenchPoint(label, n, variant, repeats, float("nan"), float("nan"),
                               float("nan"), float("nan"), error=error)
                )
                continue
            mean = float(samples.mean())
            std = float(samples.std(ddof=1))
            rows.append(
                BenchPoint(label, n, variant, repeats, mean, std,
                           tcrit * std / np.sqrt(repeats), float("nan"))
            )
            means[variant] = mean
        if "dense" in means and "pruned" in means:
            speedup = means["dense"] / means["pruned"]
            for row in rows:
                row.speedup = speedup
        points.extend(rows)
    return points


CSV_FIELDS = ("label", "seq_len", "variant", "repeats", "mean_s", "std_s", "ci95_s", "speedup")


def _fmt(value) -> str:
    if isinstance(value, float):
        return "%.9g" % value
    return str(value)


def write_csv(points: list[BenchPoint], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for p in points:
            writer.writerow([_fmt(getattr(p, f)) for f in CSV_FIELDS])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _svg_chart(points: list[BenchPoint]) -> str:
    """Standalone latency-vs-length chart: one polyline per variant, CI whiskers."""
    ok = [p for p in points if not p.error and np.isfinite(p.mean_s)]
    if not ok:
        raise ContractError("no successful benchmark points to chart")
    width, height = 640, 420
    ml, mr, mt, mb = 70, 20, 30, 50
    xs = sorted({p.seq_len for p in ok})
    lo_x, hi_x = np.log2(min(xs)), np.log2(max(xs))
    span_x = (hi_x - lo_x) or 1.0
    hi_y = max(p.mean_s + p.ci95_s for p in ok) * 1.05

    def x_at(n: int) -> float:
        return ml + (np.log2(n) - lo_x) / span_x * (width - ml - mr)

    def y_at(s: float) -> float:
        return height - mb - (s / hi_y) * (height - mt - mb)

    colors = {"dense": "#1f77b4", "pruned": "#ff7f0e"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
        f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13">sequence length (tokens)</text>',
        f'<text x="16" y="{(mt + height - mb) / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {(mt + height - mb) / 2:.1f})">forward latency (s)</text>',
    ]
    for n in xs:
        parts.append(
            f'<text x="{x_at(n):.1f}" y="{height - mb + 16}" text-anchor="middle" '
            f'font-size="11">{n}</text>'
        )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        s = hi_y * frac
        parts.append(
            f'<text x="{ml - 6}" y="{y_at(s) + 4:.1f}" text-anchor="end" '
            f'font-size="11">{s:.3g}</text>'
        )
    for variant in VARIANTS:
        series = sorted((p for p in ok if p.variant == variant), key=lambda p: p.seq_len)
        if not series:
            continue
        color = colors.get(variant, "black")
        for p in series:  # CI whiskers as plain lines so polylines stay one-per-variant
            x = x_at(p.seq_len)
            y0, y1 = y_at(p.mean_s - p.ci95_s), y_at(p.mean_s + p.ci95_s)
            parts.append(
                f'<line x1="{x:.1f}" y1="{y0:.1f}" x2="{x:.1f}" y2="{y1:.1f}" '
                f'stroke="{color}" stroke-width="1"/>'
            )
            parts.append(
                f'<line x1="{x - 4:.1f}" y1="{y0:.1f}" x2="{x + 4:.1f}" y2="{y0:.1f}" '
                f'stroke="{color}" stroke-width="1"/>'
            )
            parts.append(
                f'<line x1="{x - 4:.1f}" y1="{y1:.1f}" x2="{x + 4:.1f}" y2="{y1:.1f}" '
                f'stroke="{color}" stroke-width="1"/>'
            )
        pts = " ".join(f"{x_at(p.seq_len):.1f},{y_at(p.mean_s):.1f}" for p in series)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for p in series:
            parts.append(
                f'<circle cx="{x_at(p.seq_len):.1f}" cy="{y_at(p.mean_s):.1f}" r="3" '
                f'fill="{color}"/>'
            )
    legend_y = mt + 8
    for variant in VARIANTS:
        color = colors.get(variant, "black")
        parts.append(
            f'<line x1="{width - mr - 120}" y1="{legend_y}" x2="{width - mr - 96}" '
            f'y2="{legend_y}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{width - mr - 90}" y="{legend_y + 4}" font-size="12">{variant}</text>'
        )
        legend_y += 18
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(points: list[BenchPoint], out_dir: str | Path) -> dict[str, Path]:
    """Write bench.csv plus a standalone SVG chart and a rendered PNG figure."""
    if not points:
        raise ContractError("emit_report needs at least one benchmark point")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "bench.csv",
        "svg": out / "bench.svg",
        "png": out / "bench.png",
    }
    write_csv(points, paths["csv"])
    paths["svg"].write_text(_svg_chart(points), encoding="utf-8")
    from .figures import plot_latency

    plot_latency(points, paths["png"])
    return paths
