"""Byte-level corpus loading and minibatch sampling.

Token id == byte value; id 256 is the end-of-document separator inserted
between files when loading through a manifest.  The last tenth of every
corpus is reserved as a held-out region so evaluation windows never overlap
training windows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import IngestionError, UsageError

EOS_TOKEN = 256
VOCAB_SIZE = 257
HOLDOUT_FRACTION = 0.1


@dataclass
class Corpus:
    name: str
    tokens: np.ndarray  # int32, values in [0, 256]

    def __len__(self) -> int:
        return int(self.tokens.size)

    def train_window(self) -> tuple[int, int]:
        """Offset range [lo, hi) training batches are drawn from."""
        return 0, len(self) - int(len(self) * HOLDOUT_FRACTION)

    def holdout_window(self) -> tuple[int, int]:
        return len(self) - int(len(self) * HOLDOUT_FRACTION), len(self)


@dataclass
class Batch:
    inputs: np.ndarray  # [B, T] int32
    targets: np.ndarray  # [B, T] int32, targets[b, t] == inputs[b, t+1] in the source


def _tokens_from_bytes(raw: bytes) -> np.ndarray:
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int32)


def load_corpus(path: str) -> Corpus:
    """Load one file as a single document."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise IngestionError(f"cannot read corpus {path!r}: {exc}") from exc
    if not raw:
        raise IngestionError(f"corpus file {path!r} is empty")
    return Corpus(name=os.path.basename(path), tokens=_tokens_from_bytes(raw))


def load_corpus_manifest(manifest_path: str) -> Corpus:
    """Load a manifest (one document path per line), EOS between documents."""
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {manifest_path!r}: {exc}") from exc
    if not lines:
        raise IngestionError(f"manifest {manifest_path!r} lists no documents")
    base = os.path.dirname(os.path.abspath(manifest_path))
    pieces: list[np.ndarray] = []
    for i, rel in enumerate(lines):
        doc = rel if os.path.isabs(rel) else os.path.join(base, rel)
        try:
            with open(doc, "rb") as f:
                raw = f.read()
        except OSError as exc:
            raise IngestionError(f"cannot read document {doc!r}: {exc}") from exc
        if not raw:
            raise IngestionError(f"document {doc!r} is empty")
        if i > 0:
            pieces.append(np.array([EOS_TOKEN], dtype=np.int32))
        pieces.append(_tokens_from_bytes(raw))
    return Corpus(name=os.path.basename(manifest_path), tokens=np.concatenate(pieces))


def bundled_corpus_path() -> str:
    """Path of the corpus shipped inside the package."""
    return os.path.join(os.path.dirname(__file__), "assets", "tinytext.txt")


def sample_batch(
    corpus: Corpus,
    batch_size: int,
    seq_len: int,
    rng: np.random.Generator,
    window: tuple[int, int] | None = None,
) -> Batch:
    """Draw ``batch_size`` windows of ``seq_len`` tokens uniformly.

    ``window`` restricts the sampled start offsets to [lo, hi); by default
    the whole corpus is eligible.  Each window needs ``seq_len + 1`` tokens
    (inputs plus the shifted targets).
    """
    lo, hi = window if window is not None else (0, len(corpus))
    max_start = min(hi, len(corpus)) - (seq_len + 1)
    if batch_size < 1 or seq_len < 1:
        raise UsageError("batch_size and seq_len must be >= 1")
    if max_start < lo:
        raise UsageError(
            f"corpus window [{lo}, {hi}) too short for seq_len {seq_len} (+1 target)"
        )
    starts = rng.integers(lo, max_start + 1, size=batch_size)
    inputs = np.stack([corpus.tokens[s : s + seq_len] for s in starts])
    targets = np.stack([corpus.tokens[s + 1 : s + seq_len + 1] for s in starts])
    return Batch(inputs=inputs, targets=targets)
