"""Command-line entry point: one subcommand per experiment workflow.

Every command takes ``--out DIR``; all artifacts land there together with a
``manifest.json`` recording the command, resolved parameters, input digests,
and output file list. Given identical inputs and flags, every command's
outputs are byte-identical across runs (the manifest timestamp aside).
Set HARP_THREADS to cap the numeric libraries' internal thread pools.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import HarpError

_THREAD_LIMIT_HOLDER = None


def _limit_threads() -> None:
    global _THREAD_LIMIT_HOLDER
    value = os.environ.get("HARP_THREADS")
    if value:
        from threadpoolctl import threadpool_limits

        _THREAD_LIMIT_HOLDER = threadpool_limits(limits=int(value))


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, params: dict, inputs: dict, outputs: list[str]) -> None:
    doc = {
        "command": command,
        "parameters": params,
        "input_digests": inputs,
        "tool_version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": sorted(outputs),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_schedule(path: str | None):
    from .pruning import AlphaSchedule, PruneSpec

    if path is None:
        return PruneSpec(()), None
    schedule = AlphaSchedule.load(path)
    return schedule.spec(), schedule


def cmd_gen_model(args) -> int:
    from .checkpoint import generate_model, save
    from .config import resolve_config

    out = _out_dir(args)
    config = resolve_config(args.config)
    ckpt = generate_model(config, args.seed)
    path = save(ckpt, out / "model.ckpt")
    digest = _sha256_file(path)
    print(f"wrote {path}")
    print(f"parameters: {ckpt.param_count()}")
    print(f"sha256: {digest}")
    _write_manifest(
        out,
        "gen-model",
        {"config": args.config, "seed": args.seed},
        {},
        ["model.ckpt"],
    )
    return 0


def cmd_metrics(args) -> int:
    from .checkpoint import load
    from .evaluation import layer_diagnostics
    from .figures import plot_importance
    from .pruning import build_importance_report

    out = _out_dir(args)
    ckpt = load(args.ckpt)
    corpus = _read_corpus(args.corpus)
    report = build_importance_report(
        ckpt,
        corpus,
        epsilon=args.epsilon,
        window_size=args.window,
        max_windows=args.max_windows,
        hessian_max_tokens=args.hessian_max_tokens,
    )
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for record in report:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    ranks = {}
    for key in ("bi_score", "similarity_score", "hessian_importance", "sim_of_hidden"):
        scored = [(record.to_dict()[key], -record.layer) for record in report]
        ranks[key] = [-pair[1] for pair in sorted(scored)]
    _dump_json(out / "ranks.json", ranks)

    diagnostics = layer_diagnostics(ckpt, corpus, window_size=args.window)
    with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
        for record in diagnostics:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    plot_importance(report, out / "metrics.png")

    header = f"{'layer':>5} {'bi_score':>12} {'similarity':>12} {'hessian':>12} {'sim':>9}"
    print(header)
    for r in report:
        print(f"{r.layer:>5} {r.bi:>12.6f} {r.similarity:>12.6f} {r.hessian:>12.6g} {r.sim_hidden:>9.5f}")
    outputs = ["metrics.jsonl", "ranks.json", "diagnostics.jsonl", "metrics.png"]
    _write_manifest(
        out,
        "metrics",
        {
            "ckpt": str(args.ckpt),
            "corpus": str(args.corpus),
            "epsilon": args.epsilon,
            "window": args.window,
            "max_windows": args.max_windows,
            "hessian_max_tokens": args.hessian_max_tokens,
        },
        {"checkpoint": _sha256_file(Path(args.ckpt)), "corpus": corpus.digest},
        outputs,
    )
    return 0


def _read_corpus(path: str):
    from .tokenizer import load_corpus

    return load_corpus(path)


def _parse_grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip() != "")
    except ValueError as exc:
        raise HarpError(f"bad --grid value: {exc}") from exc


def cmd_search_alpha(args) -> int:
    from .checkpoint import load
    from .figures import plot_search
    from .pruning import search_alpha, select_layers

    out = _out_dir(args)
    ckpt = load(args.ckpt)
    corpus = _read_corpus(args.corpus)
    grid = _parse_grid(args.grid)
    spec = select_layers("top_p", args.layers, ckpt)
    schedule, trace = search_alpha(
        ckpt,
        spec,
        corpus,
        grid=grid,
        window_size=args.window,
        stride=args.stride,
        max_tokens=args.max_tokens,
    )
    schedule.save(out / "schedule.json")
    with open(out / "trace.csv", "w", encoding="utf-8") as fh:
        fh.write("layer,alpha,ppl\n")
        for t in trace:
            fh.write(f"{t.layer},{t.alpha!r},{t.ppl!r}\n")
    plot_search(schedule, trace, out / "search.png")

    if spec.p:
        top = max(spec.layer_indices)
        before = next((t.ppl for t in trace if t.layer == top and t.alpha == 1.0), None)
        chosen = schedule.by_layer
        bottom = min(spec.layer_indices)
        after = next(
            (t.ppl for t in trace if t.layer == bottom and t.alpha == chosen[bottom]), None
        )
        print(f"alphas (top-down): {list(schedule.alphas)}")
        if before is not None:
            print(f"ppl before (all rescaling at 1.0): {before:.6f}")
        if after is not None:
            print(f"ppl after search: {after:.6f}")
    else:
        print("no layers pruned; empty schedule written")
    outputs = ["schedule.json", "trace.csv", "search.png"]
    _write_manifest(
        out,
        "search-alpha",
        {
            "ckpt": str(args.ckpt),
            "corpus": str(args.corpus),
            "layers": args.layers,
            "grid": list(grid),
            "window": args.window,
            "stride": args.stride,
            "max_tokens": args.max_tokens,
        },
        {"checkpoint": _sha256_file(Path(args.ckpt)), "corpus": corpus.digest},
        outputs,
    )
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load
    from .evaluation import perplexity

    out = _out_dir(args)
    ckpt = load(args.ckpt)
    corpus = _read_corpus(args.corpus)
    spec, schedule = _load_schedule(args.schedule)
    result = perplexity(
        ckpt,
        corpus,
        spec,
        schedule,
        window_size=args.window,
        stride=args.stride,
        max_tokens=args.max_tokens,
    )
    doc = {
        "ppl": result.ppl,
        "mean_nll": result.mean_nll,
        "token_count": result.token_count,
        "window_size": result.window_size,
        "stride": result.stride,
        "window_nlls": result.window_nlls,
        "pruned_layers": list(spec.layer_indices),
    }
    _dump_json(out / "eval.json", doc)
    print(f"ppl: {result.ppl:.6f} over {result.token_count} tokens")
    inputs = {"checkpoint": _sha256_file(Path(args.ckpt)), "corpus": corpus.digest}
    if args.schedule:
        inputs["schedule"] = _sha256_file(Path(args.schedule))
    _write_manifest(
        out,
        "eval",
        {
            "ckpt": str(args.ckpt),
            "corpus": str(args.corpus),
            "schedule": args.schedule,
            "window": args.window,
            "stride": args.stride,
            "max_tokens": args.max_tokens,
        },
        inputs,
        ["eval.json"],
    )
    return 0


def cmd_bench(args) -> int:
    from .benchmark import emit_report, run_bench
    from .checkpoint import load

    out = _out_dir(args)
    ckpt = load(args.ckpt)
    spec, schedule = _load_schedule(args.schedule)
    lens = [int(x) for x in args.lens.split(",") if x.strip()]
    points = run_bench(
        ckpt,
        spec,
        schedule,
        lens,
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
        label=args.label,
    )
    emit_report(points, out)
    print(f"{'N':>7} {'variant':>8} {'mean_s':>12} {'ci95_s':>12} {'speedup':>9}")
    for p in points:
        print(f"{p.seq_len:>7} {p.variant:>8} {p.mean_s:>12.6f} {p.ci95_s:>12.6f} {p.speedup:>9.4f}")
    inputs = {"checkpoint": _sha256_file(Path(args.ckpt))}
    if args.schedule:
        inputs["schedule"] = _sha256_file(Path(args.schedule))
    _write_manifest(
        out,
        "bench",
        {
            "ckpt": str(args.ckpt),
            "schedule": args.schedule,
            "lens": lens,
            "repeats": args.repeats,
            "warmup": args.warmup,
            "seed": args.seed,
            "label": args.label,
        },
        inputs,
        ["bench.csv", "bench.svg", "bench.png"],
    )
    return 0


def cmd_prune(args) -> int:
    from .checkpoint import load, save, strip

    out = _out_dir(args)
    ckpt = load(args.ckpt)
    spec, _ = _load_schedule(args.schedule)
    stripped, report = strip(ckpt, spec)
    path = save(stripped, out / "model.ckpt")
    _dump_json(out / "strip_report.json", report)
    print(f"wrote {path}")
    print(
        f"removed {report['removed_params']} of {report['total_params']} parameters "
        f"({100 * report['removed_fraction']:.2f}%)"
    )
    _write_manifest(
        out,
        "prune",
        {"ckpt": str(args.ckpt), "schedule": args.schedule},
        {
            "checkpoint": _sha256_file(Path(args.ckpt)),
            "schedule": _sha256_file(Path(args.schedule)),
        },
        ["model.ckpt", "strip_report.json"],
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harp",
        description="Desk-scale GQA transformer with high-layer attention skipping",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="generate a seeded random checkpoint")
    p.add_argument("--config", default="desk", help="preset name or JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("metrics", help="per-layer importance metrics and diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--max-windows", type=int, default=4)
    p.add_argument("--hessian-max-tokens", type=int, default=4096)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("search-alpha", help="greedy top-down rescaling search")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--layers", type=int, required=True, help="number of top layers to prune")
    p.add_argument("--grid", default=",".join(str(round(i / 10, 1)) for i in range(11)))
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search_alpha)

    p = sub.add_parser("eval", help="perplexity of a (possibly pruned) model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schedule", default=None)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency of dense vs pruned forward passes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schedule", default=None)
    p.add_argument("--lens", default="256,512,1024,2048")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", default="desk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("prune", help="strip pruned layers' q/k weights from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)
    return parser


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (HarpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
