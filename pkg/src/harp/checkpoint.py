"""Checkpoint container plus generation, binary (de)serialization, and stripping.

File layout: 8-byte magic ``HARPCKPT``, u64 little-endian header length, UTF-8
JSON header (config, flags, tensor table with per-tensor name/shape/offset),
then a payload of raw little-endian float32 bytes. Writing is canonical, so
save -> load -> save reproduces the file byte for byte on any platform.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError, ContractError, FormatVersionError
from .model import LayerWeights, normalize_prune_layers

MAGIC = b"HARPCKPT"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)

_LAYER_TENSORS = ("w_q", "w_k", "w_v", "w_o", "ffn_gate", "ffn_up", "ffn_down", "attn_norm", "ffn_norm")


@dataclass
class Checkpoint:
    config: ModelConfig
    embedding: np.ndarray  # V x d
    layers: list[LayerWeights]
    final_norm: np.ndarray  # d
    output_proj: np.ndarray | None  # V x d, None when tied to the embedding
    tied: bool = False
    seed: int | None = None
    pruned_layers: tuple[int, ...] = ()
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise ContractError(
                f"checkpoint has {len(self.layers)} layers, config says {cfg.num_layers}"
            )
        if self.embedding.shape != (cfg.vocab_size, cfg.hidden_size):
            raise ContractError(f"embedding shape {self.embedding.shape} inconsistent with config")
        if self.final_norm.shape != (cfg.hidden_size,):
            raise ContractError("final_norm has wrong shape")
        if self.tied != (self.output_proj is None):
            raise ContractError("tied flag inconsistent with presence of output projection")
        if self.output_proj is not None and self.output_proj.shape != self.embedding.shape:
            raise ContractError("output projection must be V x d")
        pruned = set(self.pruned_layers)
        for i, lw in enumerate(self.layers):
            lw.validate(cfg, i)
            if i not in pruned and (lw.w_q is None or lw.w_k is None):
                raise ContractError(f"layer {i} lacks attention weights but is not marked pruned")

    def require_attention_weights(self, exclude=()) -> None:
        """Fail early if any layer outside ``exclude`` cannot run full attention."""
        excluded = set(exclude)
        for i, lw in enumerate(self.layers):
            if i in excluded:
                continue
            if lw.w_q is None or lw.w_k is None:
                raise ContractError(
                    f"layer {i} was stripped of its attention weights; "
                    f"it must be listed in the prune spec"
                )

    def param_count(self) -> int:
        total = self.embedding.size + self.final_norm.size
        if self.output_proj is not None:
            total += self.output_proj.size
        for lw in self.layers:
            for name in _LAYER_TENSORS:
                t = getattr(lw, name)
                if t is not None:
                    total += t.size
        return int(total)

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


def generate_model(config: ModelConfig, seed: int) -> Checkpoint:
    """Draw a random checkpoint from a seeded PRNG.

    Weights are Gaussian with standard deviation 0.02; the residual-output
    matrices (attention output and FFN down projections) are further scaled by
    1/sqrt(2 L) so activations stay bounded as depth grows. Norm gains start
    at one. Identical (config, seed) pairs produce byte-identical checkpoints.
    """
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ContractError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    rng = np.random.default_rng(seed)
    std = np.float32(0.02)
    out_std = np.float32(0.02 / np.sqrt(2 * config.num_layers))

    def draw(rows: int, cols: int, scale: np.float32) -> np.ndarray:
        return rng.standard_normal((rows, cols), dtype=np.float32) * scale

    d, dff, v = config.hidden_size, config.ffn_size, config.vocab_size
    qw, kvw = config.num_query_heads * config.head_dim, config.kv_width
    embedding = draw(v, d, std)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_q=draw(d, qw, std),
                w_k=draw(d, kvw, std),
                w_v=draw(d, kvw, std),
                w_o=draw(qw, d, out_std),
                ffn_gate=draw(d, dff, std),
                ffn_up=draw(d, dff, std),
                ffn_down=draw(dff, d, out_std),
                attn_norm=np.ones(d, dtype=np.float32),
                ffn_norm=np.ones(d, dtype=np.float32),
            )
        )
    ckpt = Checkpoint(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=np.ones(d, dtype=np.float32),
        output_proj=draw(v, d, std),
        tied=False,
        seed=seed,
    )
    ckpt.validate()
    return ckpt


def _tensor_items(ckpt: Checkpoint):
    yield "embedding", ckpt.embedding
    for i, lw in enumerate(ckpt.layers):
        for name in _LAYER_TENSORS:
            t = getattr(lw, name)
            if t is not None:
                yield f"layers.{i}.{name}", t
    yield "final_norm", ckpt.final_norm
    if ckpt.output_proj is not None:
        yield "output_proj", ckpt.output_proj


def to_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    table = []
    blobs = []
    offset = 0
    for name, tensor in _tensor_items(ckpt):
        blob = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset, "dtype": "f32"})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "tied": ckpt.tied,
        "seed": ckpt.seed,
        "pruned_layers": list(ckpt.pruned_layers),
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def _expected_tensors(config: ModelConfig, pruned: set[int], tied: bool) -> dict[str, tuple[int, ...]]:
    d, dff = config.hidden_size, config.ffn_size
    qw, kvw = config.num_query_heads * config.head_dim, config.kv_width
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, d)}
    per_layer = {
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
    for i in range(config.num_layers):
        for name, shape in per_layer.items():
            if i in pruned and name in ("w_q", "w_k"):
                continue
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_norm"] = (d,)
    if not tied:
        shapes["output_proj"] = (config.vocab_size, d)
    return shapes


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    header_end = len(MAGIC) + 8 + hlen
    if header_end > len(data):
        raise CheckpointError("truncated checkpoint: header extends past end of file")
    try:
        header = json.loads(data[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc

    version = header.get("format_version")
    if version not in SUPPORTED_VERSIONS:
        raise FormatVersionError(
            f"checkpoint format_version {version!r} is not supported; "
            f"this reader supports {list(SUPPORTED_VERSIONS)}"
        )
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ContractError) as exc:
        raise CheckpointError(f"invalid config in header: {exc}") from exc

    pruned = tuple(sorted(int(i) for i in header.get("pruned_layers", [])))
    tied = bool(header.get("tied", False))
    expected = _expected_tensors(config, set(pruned), tied)

    table = {entry["name"]: entry for entry in header.get("tensors", [])}
    if set(table) != set(expected):
        missing = sorted(set(expected) - set(table))
        extra = sorted(set(table) - set(expected))
        raise CheckpointError(
            f"tensor table inconsistent with config: missing {missing or 'none'}, "
            f"unexpected {extra or 'none'}"
        )

    payload = data[header_end:]
    payload_size = sum(4 * int(np.prod(e["shape"])) for e in table.values())
    if len(payload) != payload_size:
        raise CheckpointError(
            f"truncated or oversized checkpoint: payload is {len(payload)} bytes, "
            f"tensor table requires {payload_size}"
        )

    def read(name: str) -> np.ndarray:
        entry = table[name]
        shape = tuple(int(s) for s in entry["shape"])
        if shape != expected[name]:
            raise CheckpointError(
                f"tensor {name} has shape {shape} in header, expected {expected[name]}"
            )
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
        start = int(entry["offset"])
        count = int(np.prod(shape))
        end = start + 4 * count
        if start < 0 or end > len(payload):
            raise CheckpointError(f"tensor {name}: offsets fall outside the payload")
        return np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)

    layers = []
    pruned_set = set(pruned)
    for i in range(config.num_layers):
        kwargs = {}
        for name in _LAYER_TENSORS:
            if i in pruned_set and name in ("w_q", "w_k"):
                kwargs[name] = None
            else:
                kwargs[name] = read(f"layers.{i}.{name}")
        layers.append(LayerWeights(**kwargs))

    ckpt = Checkpoint(
        config=config,
        embedding=read("embedding"),
        layers=layers,
        final_norm=read("final_norm"),
        output_proj=None if tied else read("output_proj"),
        tied=tied,
        seed=header.get("seed"),
        pruned_layers=pruned,
        format_version=int(version),
    )
    try:
        ckpt.validate()
    except ContractError as exc:
        raise CheckpointError(f"checkpoint fails validation: {exc}") from exc
    return ckpt


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def strip(ckpt: Checkpoint, prune_spec) -> tuple[Checkpoint, dict]:
    """Remove the query/key projections of pruned layers from the checkpoint.

    Retained tensors are shared, not copied, and their bytes never change.
    Returns the stripped checkpoint and a parameter-accounting report.
    """
    cfg = ckpt.config
    pruned = normalize_prune_layers(prune_spec, cfg.num_layers)
    already = set(ckpt.pruned_layers)
    all_pruned = sorted(already | set(pruned))
    # Denominator is the dense model's parameter count, so repeated strips
    # report the same ratio.
    qk_per_layer = cfg.hidden_size * (cfg.num_query_heads * cfg.head_dim + cfg.kv_width)
    total = ckpt.param_count() + len(already) * qk_per_layer
    removed = len(all_pruned) * qk_per_layer
    layers = []
    for i, lw in enumerate(ckpt.layers):
        if i in set(pruned) and lw.w_q is not None:
            layers.append(
                LayerWeights(
                    w_q=None,
                    w_k=None,
                    w_v=lw.w_v,
                    w_o=lw.w_o,
                    ffn_gate=lw.ffn_gate,
                    ffn_up=lw.ffn_up,
                    ffn_down=lw.ffn_down,
                    attn_norm=lw.attn_norm,
                    ffn_norm=lw.ffn_norm,
                )
            )
        else:
            layers.append(lw)
    stripped = Checkpoint(
        config=ckpt.config,
        embedding=ckpt.embedding,
        layers=layers,
        final_norm=ckpt.final_norm,
        output_proj=ckpt.output_proj,
        tied=ckpt.tied,
        seed=ckpt.seed,
        pruned_layers=tuple(all_pruned),
        format_version=ckpt.format_version,
    )
    report = {
        "total_params": int(total),
        "removed_params": int(removed),
        "remaining_params": int(total - removed),
        "removed_fraction": (removed / total) if total else 0.0,
        "pruned_layers": list(stripped.pruned_layers),
    }
    return stripped, report
