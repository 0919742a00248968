"""Model architecture configuration and the built-in desk-scale presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of a decoder-only grouped-query transformer.

    ``num_query_heads`` must be a multiple of ``num_kv_heads``; the quotient is
    the query-group size ``g``. ``num_query_heads * head_dim`` must equal
    ``hidden_size`` so the output projection is square in the hidden dimension.
    """

    num_layers: int
    hidden_size: int
    ffn_size: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    vocab_size: int
    max_seq_len: int
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        ints = {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "ffn_size": self.ffn_size,
            "num_query_heads": self.num_query_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }
        for name, value in ints.items():
            if not isinstance(value, int) or value <= 0:
                raise ContractError(f"{name} must be a positive integer, got {value!r}")
        if not self.rope_base > 0:
            raise ContractError(f"rope_base must be positive, got {self.rope_base!r}")
        if self.num_query_heads % self.num_kv_heads != 0:
            raise ContractError(
                f"num_query_heads ({self.num_query_heads}) must be divisible by "
                f"num_kv_heads ({self.num_kv_heads})"
            )
        if self.num_query_heads * self.head_dim != self.hidden_size:
            raise ContractError(
                f"num_query_heads * head_dim must equal hidden_size: "
                f"{self.num_query_heads} * {self.head_dim} != {self.hidden_size}"
            )
        if self.head_dim % 2 != 0:
            raise ContractError(f"head_dim must be even for rotary embedding, got {self.head_dim}")

    @property
    def group_size(self) -> int:
        """Query heads per key/value head."""
        return self.num_query_heads // self.num_kv_heads

    @property
    def kv_width(self) -> int:
        return self.num_kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ContractError(f"unknown config fields: {sorted(extra)}")
        return cls(**data)


# Presets sized so every experiment runs on a workstation in minutes.
PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(
        num_layers=8,
        hidden_size=256,
        ffn_size=512,
        num_query_heads=8,
        num_kv_heads=2,
        head_dim=32,
        vocab_size=256,
        max_seq_len=4096,
    ),
    "mini": ModelConfig(
        num_layers=4,
        hidden_size=64,
        ffn_size=256,
        num_query_heads=8,
        num_kv_heads=2,
        head_dim=8,
        vocab_size=256,
        max_seq_len=1024,
    ),
}


def resolve_config(spec: str) -> ModelConfig:
    """Resolve a preset name or a JSON file path into a ModelConfig."""
    if spec in PRESETS:
        return PRESETS[spec]
    path = Path(spec)
    if not path.is_file():
        raise ContractError(
            f"config {spec!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor a file"
        )
    with open(path, "r", encoding="utf-8") as fh:
        return ModelConfig.from_dict(json.load(fh))
