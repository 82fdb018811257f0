"""Caption embeddings for text cross-attention.

The builtin embedder is a hashed bag of words over a fixed, seeded table, so
the same caption maps to the same tokens on every platform.  Embeddings made
elsewhere (a real text encoder) can be ingested from JSON-lines files.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedderConfig:
    text_dim: int = 32
    max_tokens: int = 16
    vocab_hash_buckets: int = 4096
    seed: int = 1234

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class CaptionEmbedding:
    tokens: np.ndarray  # M x text_dim float32
    source: str  # "builtin_hash" | "external_file"
    caption_text: str = ""

    @property
    def is_null(self) -> bool:
        return self.source == "builtin_hash" and not self.caption_text.split()


@lru_cache(maxsize=8)
def _table(cfg: EmbedderConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    # last row is the null token
    return (rng.standard_normal((cfg.vocab_hash_buckets + 1, cfg.text_dim)) / np.sqrt(cfg.text_dim)).astype(np.float32)


def word_bucket(word: str, buckets: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


def embed_caption(text: str, cfg: EmbedderConfig | None = None) -> CaptionEmbedding:
    cfg = cfg or EmbedderConfig()
    table = _table(cfg)
    words = (text or "").lower().split()[: cfg.max_tokens]
    if not words:
        return CaptionEmbedding(table[-1:].copy(), "builtin_hash", text or "")
    rows = [word_bucket(w, cfg.vocab_hash_buckets) for w in words]
    return CaptionEmbedding(table[rows].copy(), "builtin_hash", text)


def null_embedding(cfg: EmbedderConfig | None = None) -> CaptionEmbedding:
    return embed_caption("", cfg)


def save_embeddings(path, embeddings: dict[str, CaptionEmbedding]) -> None:
    """JSON-lines, one ``{"id", "tokens"}`` record per sample.

    float32 values are written via ``repr`` of the float, which round-trips exactly.
    """
    with open(path, "w") as fh:
        for sid in sorted(embeddings):
            tokens = embeddings[sid].tokens.astype(np.float32)
            record = {"id": sid, "tokens": [[float(x) for x in row] for row in tokens],
                      "caption": embeddings[sid].caption_text}
            fh.write(json.dumps(record) + "\n")


class EmbeddingFileError(ValueError):
    pass


def load_external_embeddings(path, manifest, cfg: EmbedderConfig | None = None):
    """Read a JSON-lines embedding file, keyed by manifest sample id.

    Bad records (wrong width, non-finite, unparsable) are rejected individually
    and those ids fall back to the builtin embedder, as do ids missing from the
    file.  Returns ``(embeddings, rejected)`` where ``rejected`` maps id to the
    reason.  If no record has the configured width, the whole file is rejected.
    """
    cfg = cfg or EmbedderConfig()
    wanted = {s.id: s.caption for s in manifest.samples}
    loaded: dict[str, CaptionEmbedding] = {}
    rejected: dict[str, str] = {}
    n_records = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        n_records += 1
        try:
            rec = json.loads(line)
            sid = str(rec["id"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            rejected[f"line {lineno}"] = f"corrupt record: {exc}"
            continue
        try:
            tokens = np.asarray(rec["tokens"], dtype=np.float32)
        except (KeyError, ValueError, TypeError) as exc:
            rejected[sid] = f"corrupt record {sid}: {exc}"
            continue
        if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] != cfg.text_dim:
            rejected[sid] = f"record {sid}: tokens shape {tokens.shape}, expected M x {cfg.text_dim}"
            continue
        if not np.all(np.isfinite(tokens)):
            rejected[sid] = f"record {sid}: non-finite values"
            continue
        if sid not in wanted:
            log.warning("embedding record %s not in manifest; ignored", sid)
            continue
        loaded[sid] = CaptionEmbedding(tokens[: cfg.max_tokens], "external_file", rec.get("caption", wanted[sid]))
    if n_records and not loaded and rejected and all("shape" in r for r in rejected.values()):
        raise EmbeddingFileError(f"{path}: no record matches text_dim={cfg.text_dim}")
    for sid, reason in rejected.items():
        log.warning("rejected %s", reason)
    out = {}
    for sid, caption in wanted.items():
        if sid in loaded:
            out[sid] = loaded[sid]
        else:
            log.warning("no external embedding for %s; using builtin embedder", sid)
            out[sid] = embed_caption(caption, cfg)
    return out, rejected


def batch_tokens(embeddings: list[CaptionEmbedding], max_tokens: int | None = None):
    """Pad a list of embeddings into ``(B x M x D tokens, B x M mask)`` tensors.

    Null (empty-caption) embeddings get an all-zero mask row; the denoiser
    swaps in its learned null token for those samples.
    """
    m = max(e.tokens.shape[0] for e in embeddings)
    if max_tokens is not None:
        m = min(m, max_tokens)
    d = embeddings[0].tokens.shape[1]
    tokens = np.zeros((len(embeddings), m, d), dtype=np.float32)
    mask = np.zeros((len(embeddings), m), dtype=np.float32)
    for i, e in enumerate(embeddings):
        k = min(m, e.tokens.shape[0])
        tokens[i, :k] = e.tokens[:k]
        mask[i, :k] = 0.0 if e.is_null else 1.0
    return torch.from_numpy(tokens), torch.from_numpy(mask)
