"""Translation-memory retrieval: BM25 inverted index over source sentences.

Terms are subword token ids. The idf uses the non-negative variant
ln((N - df + 0.5) / (df + 0.5) + 1) so every score is >= 0, and repeated
query terms contribute once per distinct term.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, SentencePair

INDEX_MAGIC = b"TMIX"
INDEX_FORMAT_VERSION = 1


@dataclass
class RetrievedPair:
    """Top retrieved (source, target) pair for one query sentence.

    An empty pair (score 0, source_global_id -1) means nothing matched; the
    layout then emits an empty translation-memory segment.
    """

    query_global_id: int
    source_global_id: int = -1
    score: float = 0.0
    retrieved_src: list[int] = field(default_factory=list)
    retrieved_tgt: list[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.source_global_id < 0

    def to_record(self) -> dict:
        return {
            "query_global_id": self.query_global_id,
            "source_global_id": self.source_global_id,
            "score": self.score,
            "retrieved_src": self.retrieved_src,
            "retrieved_tgt": self.retrieved_tgt,
        }


class TmIndex:
    """Immutable BM25 index over the source side of an encoded corpus."""

    def __init__(self, corpus: Corpus, k1: float = 1.2, b: float = 0.75):
        if k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= b <= 1.0:
            raise ValueError("b must lie in [0, 1]")
        pairs = list(corpus.pairs())
        if not pairs:
            raise ValueError("cannot index an empty corpus")
        self.k1 = k1
        self.b = b
        self.pairs_by_gid: dict[int, SentencePair] = {p.global_id: p for p in pairs}
        self.lengths: dict[int, int] = {p.global_id: len(p.src_tokens) for p in pairs}
        self.num_sentences = len(pairs)
        self.avg_len = sum(self.lengths.values()) / self.num_sentences
        # term -> list of (global_id, term frequency), sorted by global_id
        self.postings: dict[int, list[tuple[int, int]]] = {}
        for p in sorted(pairs, key=lambda p: p.global_id):
            counts: dict[int, int] = {}
            for t in p.src_tokens:
                counts[t] = counts.get(t, 0) + 1
            for t, tf in counts.items():
                self.postings.setdefault(t, []).append((p.global_id, tf))

    def df(self, term: int) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: int) -> float:
        n = self.df(term)
        return math.log((self.num_sentences - n + 0.5) / (n + 0.5) + 1.0)

    def _tf_factor(self, tf: int, length: int) -> float:
        norm = self.k1 * (1.0 - self.b + self.b * length / self.avg_len)
        return tf * (self.k1 + 1.0) / (tf + norm)

    def score(self, query_terms: list[int], candidate_id: int) -> float:
        """BM25 score of one indexed sentence against the query terms."""
        if candidate_id not in self.lengths:
            raise KeyError(f"unknown candidate_id {candidate_id}")
        length = self.lengths[candidate_id]
        total = 0.0
        for term in sorted(set(query_terms)):
            for gid, tf in self.postings.get(term, ()):
                if gid == candidate_id:
                    total += self.idf(term) * self._tf_factor(tf, length)
                    break
        return total

    def retrieve(
        self,
        query_sentence: list[int],
        query_global_id: int = -1,
        exclude_self: bool = True,
    ) -> RetrievedPair:
        """Top-1 pair by BM25; ties break toward the lowest global_id.

        Scores every candidate sharing at least one query term (others score
        exactly 0). If nothing scores above 0, returns an empty pair.
        """
        # accumulate in sorted-term order so per-candidate addition order is
        # identical to a per-candidate scan (bitwise-equal scores)
        acc: dict[int, float] = {}
        for term in sorted(set(query_sentence)):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for gid, tf in plist:
                acc[gid] = acc.get(gid, 0.0) + idf * self._tf_factor(tf, self.lengths[gid])
        if exclude_self:
            acc.pop(query_global_id, None)
        if not acc:
            return RetrievedPair(query_global_id=query_global_id)
        best_gid = min(acc, key=lambda g: (-acc[g], g))
        hit = self.pairs_by_gid[best_gid]
        return RetrievedPair(
            query_global_id=query_global_id,
            source_global_id=best_gid,
            score=acc[best_gid],
            retrieved_src=list(hit.src_tokens),
            retrieved_tgt=list(hit.tgt_tokens),
        )


def build_index(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> TmIndex:
    return TmIndex(corpus, k1=k1, b=b)


def retrieve_corpus(
    index: TmIndex, corpus: Corpus, exclude_self: bool
) -> dict[int, RetrievedPair]:
    """Retrieve one pair per sentence of `corpus`, keyed by global_id."""
    return {
        p.global_id: index.retrieve(p.src_tokens, p.global_id, exclude_self)
        for p in corpus.pairs()
    }


def export_retrievals_jsonl(retrievals: dict[int, RetrievedPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for gid in sorted(retrievals):
            f.write(json.dumps(retrievals[gid].to_record()) + "\n")


# ---------------------------------------------------------------------------
# binary persistence: header, term dictionary, delta-encoded postings


def _write_varint(buf: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError("varint values must be non-negative")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.append(byte | 0x80)
        else:
            buf.append(byte)
            return


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def save_index(index: TmIndex, path: str | Path) -> None:
    buf = bytearray()
    buf += INDEX_MAGIC
    buf += struct.pack("<I", INDEX_FORMAT_VERSION)
    buf += struct.pack("<dd", index.k1, index.b)
    buf += struct.pack("<Qd", index.num_sentences, index.avg_len)
    gids = sorted(index.lengths)
    _write_varint(buf, len(gids))
    prev = 0
    for gid in gids:
        _write_varint(buf, gid - prev)
        _write_varint(buf, index.lengths[gid])
        prev = gid
    _write_varint(buf, len(index.postings))
    for term in sorted(index.postings):
        plist = index.postings[term]
        _write_varint(buf, term)
        _write_varint(buf, len(plist))
        prev = 0
        for gid, tf in plist:
            _write_varint(buf, gid - prev)
            _write_varint(buf, tf)
            prev = gid
    Path(path).write_bytes(bytes(buf))


def load_index(path: str | Path, corpus: Corpus) -> TmIndex:
    """Load an index and re-attach it to the corpus it was built from."""
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise ValueError("not a translation-memory index file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != INDEX_FORMAT_VERSION:
        raise ValueError(
            f"index format version mismatch: found {version}, expected {INDEX_FORMAT_VERSION}"
        )
    k1, b = struct.unpack_from("<dd", data, 8)
    num_sentences, avg_len = struct.unpack_from("<Qd", data, 24)
    pos = 40

    index = TmIndex.__new__(TmIndex)
    index.k1, index.b = k1, b
    index.num_sentences = num_sentences
    index.avg_len = avg_len

    count, pos = _read_varint(data, pos)
    lengths: dict[int, int] = {}
    gid = 0
    for _ in range(count):
        delta, pos = _read_varint(data, pos)
        gid += delta
        length, pos = _read_varint(data, pos)
        lengths[gid] = length
    index.lengths = lengths

    nterms, pos = _read_varint(data, pos)
    postings: dict[int, list[tuple[int, int]]] = {}
    for _ in range(nterms):
        term, pos = _read_varint(data, pos)
        plen, pos = _read_varint(data, pos)
        plist = []
        gid = 0
        for _ in range(plen):
            delta, pos = _read_varint(data, pos)
            gid += delta
            tf, pos = _read_varint(data, pos)
            plist.append((gid, tf))
        postings[term] = plist
    index.postings = postings

    pairs = {p.global_id: p for p in corpus.pairs()}
    missing = set(lengths) - set(pairs)
    if missing:
        raise ValueError(
            f"index references {len(missing)} sentence ids absent from the corpus"
        )
    for gid, length in lengths.items():
        if len(pairs[gid].src_tokens) != length:
            raise ValueError(f"sentence {gid} length differs from the indexed corpus")
    index.pairs_by_gid = pairs
    return index
