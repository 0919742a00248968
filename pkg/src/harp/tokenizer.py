"""Byte-level tokenizer: token id == byte value, vocabulary fixed at 256.

Chosen over a trained subword vocabulary so corpora need no external assets
and every run is exactly reproducible from the raw text bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError

BYTE_VOCAB = 256


@dataclass(frozen=True)
class Corpus:
    """A tokenized text with provenance: name plus content digest of the raw bytes."""

    ids: np.ndarray  # int32, each in [0, 256)
    digest: str
    name: str

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def tokenize(data: bytes, name: str = "<bytes>") -> Corpus:
    """Map raw bytes to token ids one-to-one."""
    if not isinstance(data, (bytes, bytearray)):
        raise ContractError(f"tokenize expects bytes, got {type(data).__name__}")
    if len(data) == 0:
        raise InputError("empty text: a corpus must contain at least one byte")
    ids = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int32)
    digest = hashlib.sha256(bytes(data)).hexdigest()
    return Corpus(ids=ids, digest=digest, name=name)


def detokenize(ids: np.ndarray) -> bytes:
    """Inverse of tokenize; rejects ids outside the byte range."""
    arr = np.asarray(ids)
    if arr.size and (arr.min() < 0 or arr.max() >= BYTE_VOCAB):
        raise ContractError("detokenize: token id outside [0, 256)")
    return arr.astype(np.uint8).tobytes()


def load_corpus(path: str | Path) -> Corpus:
    """Read a UTF-8 (or arbitrary-byte) text file as a corpus."""
    p = Path(path)
    data = p.read_bytes()
    if len(data) == 0:
        raise InputError(f"empty corpus file: {p}")
    return tokenize(data, name=p.name)
