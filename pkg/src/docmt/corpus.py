"""Bilingual document corpus: ingestion, subword vocabulary, truncation.

Source and target share one vocabulary because retrieved target sentences
are embedded in the encoder input stream. Subword units are learned with
BPE over raw character streams (spaces are ordinary symbols), which makes
encode/decode an exact round trip for any in-alphabet text.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD, BOS, EOS, UNK, SEP, RS, RT = range(7)
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<rs>", "<rt>"]
NUM_RESERVED = len(RESERVED_TOKENS)

VOCAB_FORMAT_VERSION = 1


@dataclass
class SentencePair:
    """One aligned sentence pair inside a document."""

    doc_id: str
    index_in_doc: int
    global_id: int
    src_text: str = ""
    tgt_text: str = ""
    src_tokens: list[int] = field(default_factory=list)
    tgt_tokens: list[int] = field(default_factory=list)


@dataclass
class Document:
    doc_id: str
    pairs: list[SentencePair]
    oversize: bool = False  # single pair longer than the truncation limit

    @property
    def token_count(self) -> int:
        return sum(len(p.src_tokens) for p in self.pairs)


@dataclass
class Corpus:
    documents: list[Document]
    vocab: "Vocabulary | None" = None
    split: str = "train"

    def pairs(self):
        for doc in self.documents:
            yield from doc.pairs

    @property
    def num_pairs(self) -> int:
        return sum(len(d.pairs) for d in self.documents)


class Vocabulary:
    """Shared subword vocabulary: reserved ids 0..6, then alphabet and merges.

    Reserved tokens live in a separate id range and are never produced when
    encoding text, so text can safely contain strings like "<sep>".
    """

    def __init__(self, symbols: list[str], merges: list[tuple[str, str]]):
        self.tokens = list(RESERVED_TOKENS) + list(symbols)
        self.merges = [tuple(m) for m in merges]
        # text symbols only; reserved ids are never looked up from text
        self._sym_to_id = {s: NUM_RESERVED + i for i, s in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        """Greedy merge application in learned order; unknown chars -> UNK."""
        if not text:
            return []
        seq = list(text)
        for a, b in self.merges:
            seq = _merge_sequence(seq, a, b)
        return [self._sym_to_id.get(s, UNK) for s in seq]

    def decode(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if i < NUM_RESERVED:
                continue
            out.append(self.tokens[i])
        return "".join(out)

    def save(self, path: str | Path) -> None:
        payload = {
            "version": VOCAB_FORMAT_VERSION,
            "reserved": {t: i for i, t in enumerate(RESERVED_TOKENS)},
            "tokens": self.tokens,
            "merges": [list(m) for m in self.merges],
        }
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=0), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(
                f"vocabulary format version mismatch: "
                f"found {payload.get('version')!r}, expected {VOCAB_FORMAT_VERSION}"
            )
        if payload["tokens"][:NUM_RESERVED] != RESERVED_TOKENS:
            raise ValueError("vocabulary file has a corrupted reserved-token block")
        symbols = payload["tokens"][NUM_RESERVED:]
        merges = [tuple(m) for m in payload["merges"]]
        return cls(symbols, merges)


def _merge_sequence(seq: list[str], a: str, b: str) -> list[str]:
    # left-to-right, non-overlapping replacement of the pair (a, b)
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def _read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def _read_doc_map(path: str | Path) -> list[tuple[str, int, int]]:
    entries = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"doc map line {lineno}: expected doc_id<TAB>start<TAB>end")
        doc_id, start_s, end_s = parts
        try:
            start, end = int(start_s), int(end_s)
        except ValueError as exc:
            raise ValueError(f"doc map line {lineno}: non-integer range") from exc
        entries.append((doc_id, start, end))
    return entries


def ingest_parallel_corpus(
    src_path: str | Path,
    tgt_path: str | Path,
    doc_map_path: str | Path,
    split: str = "train",
) -> Corpus:
    """Read aligned line files plus a TSV doc map into a raw-text Corpus.

    The doc map must partition line numbers [0, n) exactly: no gaps, no
    overlaps, no empty documents.
    """
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"line-count mismatch: {len(src_lines)} source vs {len(tgt_lines)} target lines"
        )
    n = len(src_lines)
    entries = _read_doc_map(doc_map_path)
    entries.sort(key=lambda e: e[1])

    documents = []
    cursor = 0
    for doc_id, start, end in entries:
        if end <= start:
            raise ValueError(f"empty document {doc_id!r}: range [{start}, {end})")
        if start < cursor:
            raise ValueError(f"overlapping doc ranges at document {doc_id!r}")
        if start > cursor:
            raise ValueError(f"gapped doc ranges: lines [{cursor}, {start}) uncovered")
        if end > n:
            raise ValueError(f"document {doc_id!r} range [{start}, {end}) exceeds {n} lines")
        pairs = [
            SentencePair(
                doc_id=doc_id,
                index_in_doc=i - start,
                global_id=i,
                src_text=src_lines[i],
                tgt_text=tgt_lines[i],
            )
            for i in range(start, end)
        ]
        documents.append(Document(doc_id=doc_id, pairs=pairs))
        cursor = end
    if cursor != n:
        raise ValueError(f"gapped doc ranges: lines [{cursor}, {n}) uncovered")
    return Corpus(documents=documents, split=split)


def learn_subwords(corpus: Corpus, num_merges: int) -> Vocabulary:
    """Learn a BPE merge table jointly over source and target raw text.

    Most frequent adjacent symbol pair merges first; frequency ties break
    lexicographically by pair so two runs produce identical tables.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    lines = []
    for pair in corpus.pairs():
        if pair.src_text:
            lines.append(list(pair.src_text))
        if pair.tgt_text:
            lines.append(list(pair.tgt_text))
    if not lines:
        raise ValueError("empty corpus: no raw text to learn subwords from")

    alphabet = sorted({c for line in lines for c in line})
    merges: list[tuple[str, str]] = []
    produced: list[str] = []
    for _ in range(num_merges):
        counts: Counter = Counter()
        for seq in lines:
            for i in range(len(seq) - 1):
                counts[(seq[i], seq[i + 1])] += 1
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        produced.append(best[0] + best[1])
        lines = [_merge_sequence(seq, best[0], best[1]) for seq in lines]

    symbols = list(alphabet)
    seen = set(alphabet)
    for s in produced:
        # distinct merge paths can yield the same surface string; keep one id
        if s not in seen:
            symbols.append(s)
            seen.add(s)
    return Vocabulary(symbols, merges)


def encode_sentence(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def encode_corpus(corpus: Corpus, vocab: Vocabulary) -> Corpus:
    """Fill token ids for every pair in place and attach the vocabulary."""
    for pair in corpus.pairs():
        pair.src_tokens = vocab.encode(pair.src_text)
        pair.tgt_tokens = vocab.encode(pair.tgt_text)
        if not pair.src_tokens or not pair.tgt_tokens:
            raise ValueError(
                f"pair {pair.global_id} encodes to an empty sequence "
                f"(doc {pair.doc_id!r}, sentence {pair.index_in_doc})"
            )
    corpus.vocab = vocab
    return corpus


def truncate_document(doc: Document, limit: int) -> Document:
    """Drop whole trailing pairs until source token count fits the limit.

    Never splits a sentence. A single pair over the limit is kept and the
    document is flagged oversize.
    """
    if limit < 1:
        raise ValueError("truncation limit must be >= 1")
    kept: list[SentencePair] = []
    total = 0
    for pair in doc.pairs:
        if kept and total + len(pair.src_tokens) > limit:
            break
        kept.append(pair)
        total += len(pair.src_tokens)
    oversize = len(kept) == 1 and total > limit
    return Document(doc_id=doc.doc_id, pairs=kept, oversize=oversize)


def truncate_corpus(corpus: Corpus, limit: int) -> Corpus:
    docs = [truncate_document(d, limit) for d in corpus.documents]
    return Corpus(documents=docs, vocab=corpus.vocab, split=corpus.split)
