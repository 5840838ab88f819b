"""Embedding sources: static word-vector tables, and precomputed
news-embedding stores exchanged through the NRE1 binary format.

NRE1 layout (little-endian):

    magic  b"NRE1"
    u32    record count
    u32    vector dim
    then per record: u16 id byte length, UTF-8 news id, dim * f32

The byte layout has no room for provenance, so the store's source tag
(model id, pooling mode, prompt hash) travels in a companion
``<path>.meta.json`` written next to the store. A store without a meta
file is simply untagged.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import PAD_ID

# Fixed prompt wrapped around news text for last-token pooling; the hash of
# this exact template is recorded in store tags so producer and consumer
# cannot silently disagree.
NEWS_PROMPT_TEMPLATE = "This news: [{news}] means in one word:"


def prompt_hash(template=NEWS_PROMPT_TEMPLATE):
    return hashlib.sha256(template.encode("utf-8")).hexdigest()


class DimMismatch(ValueError):
    def __init__(self, detail, line_no=None):
        self.line_no = line_no
        super().__init__(detail)


class EmptyFile(ValueError):
    pass


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class MissingEmbedding(KeyError):
    def __init__(self, news_id):
        self.news_id = news_id
        super().__init__(news_id)


class IdOutOfRange(IndexError):
    pass


class StoreTagMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# static word-vector tables

@dataclass
class StaticTable:
    """Vocab-aligned embedding matrix; row 0 (pad) is pinned to zero."""
    matrix: np.ndarray
    trainable: bool
    coverage: float = 1.0


def load_static_table(stream, vocab, trainable=False, rng=None) -> StaticTable:
    """Read whitespace-separated "word v1 .. vd" lines into a vocab-aligned
    table.

    Words missing from the file get the unknown-init policy: zeros when the
    table is frozen, seeded uniform(-0.1, 0.1) when trainable. Multi-token
    words are supported by taking the trailing d fields as the vector.
    """
    if trainable and rng is None:
        raise ValueError("trainable table needs an rng for unknown-word init")
    def _floats_from_right(parts):
        n = 0
        for tok in reversed(parts):
            try:
                float(tok)
            except ValueError:
                break
            n += 1
        return n

    vectors = {}
    dim = None
    for line_no, line in enumerate(stream, start=1):
        parts = line.rstrip("\n").split(" ")
        if len(parts) < 2:
            raise DimMismatch(f"line {line_no}: no vector payload", line_no)
        if dim is None:
            # trailing float-parseable fields are the vector; anything before
            # them (possibly containing spaces) is the word
            dim = min(_floats_from_right(parts), len(parts) - 1)
            if dim == 0:
                raise DimMismatch(f"line {line_no}: no numeric payload", line_no)
        if len(parts) < dim + 1:
            raise DimMismatch(
                f"line {line_no}: expected {dim} values, got {len(parts) - 1}", line_no)
        word = " ".join(parts[:-dim])
        try:
            vec = np.array([float(x) for x in parts[-dim:]], dtype=np.float64)
        except ValueError:
            raise DimMismatch(f"line {line_no}: non-numeric vector entry", line_no)
        vectors[word] = vec
    if dim is None:
        raise EmptyFile("no vector lines")

    n = len(vocab)
    matrix = np.zeros((n, dim), dtype=np.float64)
    if trainable:
        matrix[1:] = rng.uniform(-0.1, 0.1, size=(n - 1, dim))
    hits = 0
    for idx in range(2, n):
        word = vocab.word_of(idx)
        if word in vectors:
            matrix[idx] = vectors[word]
            hits += 1
    words = vocab.words()
    coverage = hits / len(words) if words else 1.0
    matrix[PAD_ID] = 0.0
    return StaticTable(matrix=matrix, trainable=trainable, coverage=coverage)


def random_static_table(vocab, dim, rng, trainable) -> StaticTable:
    """Seeded uniform(-0.1, 0.1) table; the frozen variant is the
    random-embedding baseline."""
    matrix = np.zeros((len(vocab), dim), dtype=np.float64)
    matrix[1:] = rng.uniform(-0.1, 0.1, size=(len(vocab) - 1, dim))
    return StaticTable(matrix=matrix, trainable=trainable, coverage=0.0)


def lookup_tokens(table, ids) -> np.ndarray:
    """Row-gather; pad rows come back zero. Raises IdOutOfRange."""
    ids = np.asarray(ids)
    matrix = table.matrix if isinstance(table, StaticTable) else np.asarray(table)
    if ids.size and (ids.min() < 0 or ids.max() >= matrix.shape[0]):
        raise IdOutOfRange(f"token id outside table of {matrix.shape[0]} rows")
    return matrix[ids]


# ---------------------------------------------------------------------------
# precomputed news-embedding stores

@dataclass
class PrecomputedStore:
    vectors: dict[str, np.ndarray]
    dim: int
    tag: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.vectors)

    def lookup(self, news_id):
        try:
            return self.vectors[news_id]
        except KeyError:
            raise MissingEmbedding(news_id) from None


def lookup_news(store, news_id):
    return store.lookup(news_id)


MAGIC = b"NRE1"


def write_interchange(store, path):
    """Write a store to NRE1 plus its meta sidecar. Vectors are stored as
    32-bit; the round trip is bit-exact at that width."""
    if not store.vectors:
        raise ValueError("refusing to write an empty store")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", len(store.vectors), store.dim))
        for news_id, vec in store.vectors.items():
            vec = np.asarray(vec)
            if vec.shape != (store.dim,):
                raise DimMismatch(f"{news_id}: vector shape {vec.shape} != ({store.dim},)")
            idb = news_id.encode("utf-8")
            f.write(struct.pack("<H", len(idb)))
            f.write(idb)
            f.write(vec.astype("<f4").tobytes())
    if store.tag:
        meta_path(path).write_text(json.dumps(store.tag, indent=2, sort_keys=True))


def meta_path(path):
    return Path(str(path) + ".meta.json")


def read_interchange(path) -> PrecomputedStore:
    """Read an NRE1 store; upcasts to float64 in memory (values remain
    exactly representable)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}")
    count, dim = struct.unpack("<II", raw[4:12])
    off = 12
    vectors = {}
    for _ in range(count):
        if off + 2 > len(raw):
            raise TruncatedFile(f"{path}: record header past end of file")
        (id_len,) = struct.unpack("<H", raw[off:off + 2])
        off += 2
        end = off + id_len + 4 * dim
        if end > len(raw):
            raise TruncatedFile(f"{path}: record payload past end of file")
        news_id = raw[off:off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(raw[off:off + 4 * dim], dtype="<f4").astype(np.float64)
        off += 4 * dim
        if news_id in vectors:
            raise CountMismatch(f"{path}: duplicate id {news_id}")
        vectors[news_id] = vec
    if off != len(raw):
        raise CountMismatch(f"{path}: {len(raw) - off} trailing bytes after "
                            f"{count} declared records")
    tag = {}
    mp = meta_path(path)
    if mp.exists():
        tag = json.loads(mp.read_text())
    return PrecomputedStore(vectors=vectors, dim=dim, tag=tag)


def validate_store_tag(store, expect_pooling=None, expect_prompt_hash=None):
    """Reject a tagged store whose pooling or prompt disagrees with the
    engine's expectations. Untagged stores are accepted as-is."""
    if not store.tag:
        return
    if expect_pooling and store.tag.get("pooling") not in (None, expect_pooling):
        raise StoreTagMismatch(
            f"store pooling {store.tag.get('pooling')!r}, engine wants {expect_pooling!r}")
    if expect_prompt_hash and store.tag.get("prompt_sha256") not in (None, expect_prompt_hash):
        raise StoreTagMismatch("store was built with a different prompt template")


def aligned_store_matrix(store, news_ids) -> np.ndarray:
    """Stack store vectors in catalog row order; row for the pad article
    (index 0) is zero. Missing ids raise MissingEmbedding."""
    out = np.zeros((len(news_ids), store.dim), dtype=np.float64)
    for i, nid in enumerate(news_ids):
        if i == 0:
            continue
        out[i] = store.lookup(nid)
    return out
