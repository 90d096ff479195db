"""Concatenated encoder input and the sparse attention mask families.

Encoder stream: x_1 .. x_m <sep> <rs> x_1^r <rt> y_1^r .. <rs> x_m^r <rt> y_m^r.
Retrieved sub-spans include their opening marker. Decoder stream: one block
per sentence, <bos> followed by the target tokens (gold at training time,
the growing hypothesis at decoding time).

Masks are additive matrices over (query, key) positions with entries in
{0, -1e9}; -1e9 rather than -inf so an accidentally all-masked row cannot
produce NaNs, though every builder here guarantees a non-empty row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .corpus import BOS, EOS, RS, RT, SEP, Document
from .retrieval import RetrievedPair

NEG = -1e9

SRC_SENT = "src_sent"
RET_SRC = "ret_src"
RET_TGT = "ret_tgt"
SEP_TAG = "sep"

MEMORY_FOCUS = "memory_focus"
DOCUMENT = "document"
ADJACENT = "adjacent"
GLOBAL_KINDS = (MEMORY_FOCUS, DOCUMENT, ADJACENT)


class SegmentTag(NamedTuple):
    kind: str
    sentence_index: int  # -1 for the document/TM separator


@dataclass
class InstanceLayout:
    """Token streams and span bookkeeping for one document instance."""

    tokens: list[int]
    tags: list[SegmentTag]
    sentence_spans: list[tuple[int, int]]          # x_i, half-open
    tm_src_spans: list[tuple[int, int]]            # <rs> + x_i^r
    tm_tgt_spans: list[tuple[int, int]]            # <rt> + y_i^r
    tm_empty: list[bool]                           # pair i has no content
    sep_position: int
    target_tokens: list[list[int]]                 # y_i, no bos/eos
    target_spans: list[tuple[int, int]]            # decoder blocks [bos y_i]
    dec_tokens: list[int]                          # concat of blocks
    dec_labels: list[int]                          # concat of y_i + [eos]

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_spans)

    @property
    def enc_len(self) -> int:
        return len(self.tokens)

    @property
    def dec_len(self) -> int:
        return len(self.dec_tokens)

    def tm_positions(self) -> list[int]:
        """Encoder positions inside any retrieved sub-span, markers included."""
        out = []
        for (s0, e0), (s1, e1) in zip(self.tm_src_spans, self.tm_tgt_spans):
            out.extend(range(s0, e0))
            out.extend(range(s1, e1))
        return out


@dataclass
class MaskSet:
    """Additive masks for one layout; decoder masks use gold target lengths."""

    enc_local: np.ndarray
    enc_memory_focus: np.ndarray
    enc_document: np.ndarray
    enc_adjacent: np.ndarray
    dec_self_local: np.ndarray
    dec_self_document: np.ndarray
    cross_local: np.ndarray
    cross_global: np.ndarray
    adjacent_window: int
    tm_retain: np.ndarray | None = None  # filled by the selection layer

    def named(self) -> dict[str, np.ndarray]:
        return {
            "enc_local": self.enc_local,
            "enc_memory_focus": self.enc_memory_focus,
            "enc_document": self.enc_document,
            "enc_adjacent": self.enc_adjacent,
            "dec_self_local": self.dec_self_local,
            "dec_self_document": self.dec_self_document,
            "cross_local": self.cross_local,
            "cross_global": self.cross_global,
        }


def assemble_instance(
    document: Document, retrieved_pairs: list[RetrievedPair]
) -> InstanceLayout:
    """Build the concatenated encoder stream plus decoder-side blocks."""
    m = len(document.pairs)
    if m == 0:
        raise ValueError("cannot assemble an instance from an empty document")
    if len(retrieved_pairs) != m:
        raise ValueError(
            f"need one retrieved pair per sentence: got {len(retrieved_pairs)} for {m}"
        )

    tokens: list[int] = []
    tags: list[SegmentTag] = []
    sentence_spans = []
    for i, pair in enumerate(document.pairs):
        start = len(tokens)
        tokens.extend(pair.src_tokens)
        tags.extend([SegmentTag(SRC_SENT, i)] * len(pair.src_tokens))
        sentence_spans.append((start, len(tokens)))

    sep_position = len(tokens)
    tokens.append(SEP)
    tags.append(SegmentTag(SEP_TAG, -1))

    tm_src_spans = []
    tm_tgt_spans = []
    tm_empty = []
    for i, ret in enumerate(retrieved_pairs):
        start = len(tokens)
        tokens.append(RS)
        tokens.extend(ret.retrieved_src)
        tm_src_spans.append((start, len(tokens)))
        tags.extend([SegmentTag(RET_SRC, i)] * (len(tokens) - start))
        start = len(tokens)
        tokens.append(RT)
        tokens.extend(ret.retrieved_tgt)
        tm_tgt_spans.append((start, len(tokens)))
        tags.extend([SegmentTag(RET_TGT, i)] * (len(tokens) - start))
        tm_empty.append(not ret.retrieved_src and not ret.retrieved_tgt)

    target_tokens = [list(p.tgt_tokens) for p in document.pairs]
    target_spans = []
    dec_tokens: list[int] = []
    dec_labels: list[int] = []
    for y in target_tokens:
        start = len(dec_tokens)
        dec_tokens.extend([BOS] + y)
        dec_labels.extend(y + [EOS])
        target_spans.append((start, len(dec_tokens)))

    return InstanceLayout(
        tokens=tokens,
        tags=tags,
        sentence_spans=sentence_spans,
        tm_src_spans=tm_src_spans,
        tm_tgt_spans=tm_tgt_spans,
        tm_empty=tm_empty,
        sep_position=sep_position,
        target_tokens=target_tokens,
        target_spans=target_spans,
        dec_tokens=dec_tokens,
        dec_labels=dec_labels,
    )


# ---------------------------------------------------------------------------
# encoder masks


def _blank(nq: int, nk: int) -> np.ndarray:
    return np.full((nq, nk), NEG, dtype=np.float64)


def build_enc_local(layout: InstanceLayout) -> np.ndarray:
    m = _blank(layout.enc_len, layout.enc_len)
    for s, e in layout.sentence_spans:
        m[s:e, s:e] = 0.0
    for s, e in layout.tm_src_spans:
        m[s:e, s:e] = 0.0
    for s, e in layout.tm_tgt_spans:
        m[s:e, s:e] = 0.0
    p = layout.sep_position
    m[p, p] = 0.0
    return m


def build_enc_memory_focus(layout: InstanceLayout) -> np.ndarray:
    m = _blank(layout.enc_len, layout.enc_len)
    for i, (xs, xe) in enumerate(layout.sentence_spans):
        rs, re_ = layout.tm_src_spans[i]
        ts, te = layout.tm_tgt_spans[i]
        if layout.tm_empty[i]:
            # no retrieved content: the sentence keeps only itself
            m[xs:xe, xs:xe] = 0.0
        else:
            for qs, qe in ((xs, xe),):
                m[qs:qe, xs:xe] = 0.0
                m[qs:qe, rs:re_] = 0.0
                m[qs:qe, ts:te] = 0.0
        # retrieved-span queries see their sentence and their own pair
        for qs, qe in ((rs, re_), (ts, te)):
            m[qs:qe, xs:xe] = 0.0
            m[qs:qe, rs:re_] = 0.0
            m[qs:qe, ts:te] = 0.0
    p = layout.sep_position
    m[p, p] = 0.0
    return m


def _tm_fallback_local(m: np.ndarray, layout: InstanceLayout) -> None:
    # document/adjacent attention exclude retrieved spans: those queries
    # fall back to their own sub-span so no row is fully masked
    for s, e in layout.tm_src_spans:
        m[s:e, s:e] = 0.0
    for s, e in layout.tm_tgt_spans:
        m[s:e, s:e] = 0.0
    p = layout.sep_position
    m[p, p] = 0.0


def build_enc_document(layout: InstanceLayout) -> np.ndarray:
    m = _blank(layout.enc_len, layout.enc_len)
    doc_end = layout.sentence_spans[-1][1]
    for s, e in layout.sentence_spans:
        m[s:e, 0:doc_end] = 0.0
    _tm_fallback_local(m, layout)
    return m


def build_enc_adjacent(layout: InstanceLayout, window: int) -> np.ndarray:
    if window < 1:
        raise ValueError("adjacent_window must be >= 1")
    m = _blank(layout.enc_len, layout.enc_len)
    n = layout.num_sentences
    for i, (qs, qe) in enumerate(layout.sentence_spans):
        for j in range(max(0, i - window), min(n, i + window + 1)):
            ks, ke = layout.sentence_spans[j]
            m[qs:qe, ks:ke] = 0.0
    _tm_fallback_local(m, layout)
    return m


# ---------------------------------------------------------------------------
# decoder masks, parameterized by per-sentence block lengths so the same
# builders serve teacher forcing (gold lengths) and incremental decoding


def _block_spans(block_lengths: list[int]) -> list[tuple[int, int]]:
    spans = []
    pos = 0
    for n in block_lengths:
        spans.append((pos, pos + n))
        pos += n
    return spans


def build_dec_self_local(block_lengths: list[int]) -> np.ndarray:
    total = sum(block_lengths)
    m = _blank(total, total)
    for s, e in _block_spans(block_lengths):
        n = e - s
        m[s:e, s:e] = np.triu(np.full((n, n), NEG), k=1)
    return m


def build_dec_self_document(block_lengths: list[int]) -> np.ndarray:
    total = sum(block_lengths)
    m = _blank(total, total)
    spans = _block_spans(block_lengths)
    for i, (s, e) in enumerate(spans):
        n = e - s
        m[s:e, 0:s] = 0.0  # every token of every preceding sentence
        m[s:e, s:e] = np.triu(np.full((n, n), NEG), k=1)
    return m


def build_cross_local(layout: InstanceLayout, block_lengths: list[int]) -> np.ndarray:
    total = sum(block_lengths)
    m = _blank(total, layout.enc_len)
    for i, (s, e) in enumerate(_block_spans(block_lengths)):
        xs, xe = layout.sentence_spans[i]
        m[s:e, xs:xe] = 0.0
    return m


def build_cross_global(layout: InstanceLayout, block_lengths: list[int]) -> np.ndarray:
    total = sum(block_lengths)
    m = _blank(total, layout.enc_len)
    for xs, xe in layout.sentence_spans:
        m[:, xs:xe] = 0.0
    for s, e in layout.tm_src_spans:
        m[:, s:e] = 0.0
    for s, e in layout.tm_tgt_spans:
        m[:, s:e] = 0.0
    return m


def build_local_masks(layout: InstanceLayout):
    block_lengths = [e - s for s, e in layout.target_spans]
    return (
        build_enc_local(layout),
        build_dec_self_local(block_lengths),
        build_cross_local(layout, block_lengths),
    )


def build_global_masks(layout: InstanceLayout, adjacent_window: int):
    block_lengths = [e - s for s, e in layout.target_spans]
    return (
        build_enc_memory_focus(layout),
        build_enc_document(layout),
        build_enc_adjacent(layout, adjacent_window),
        build_dec_self_document(block_lengths),
        build_cross_global(layout, block_lengths),
    )


def build_mask_set(layout: InstanceLayout, adjacent_window: int) -> MaskSet:
    enc_local, dec_self_local, cross_local = build_local_masks(layout)
    mf, doc, adj, dec_self_doc, cross_global = build_global_masks(layout, adjacent_window)
    return MaskSet(
        enc_local=enc_local,
        enc_memory_focus=mf,
        enc_document=doc,
        enc_adjacent=adj,
        dec_self_local=dec_self_local,
        dec_self_document=dec_self_doc,
        cross_local=cross_local,
        cross_global=cross_global,
        adjacent_window=adjacent_window,
    )


def build_decoder_masks(
    layout: InstanceLayout, block_lengths: list[int]
) -> dict[str, np.ndarray]:
    """Decoder-side masks for arbitrary prefix lengths (incremental decoding)."""
    if len(block_lengths) > layout.num_sentences:
        raise ValueError("more decoder blocks than sentences")
    return {
        "dec_self_local": build_dec_self_local(block_lengths),
        "dec_self_document": build_dec_self_document(block_lengths),
        "cross_local": build_cross_local(layout, block_lengths),
        "cross_global": build_cross_global(layout, block_lengths),
    }


def allocate_heads(num_heads: int, allocation: tuple[int, int, int]) -> list[str]:
    """Per-head global-attention kinds: memory-focus, then document, then adjacent."""
    if len(allocation) != 3:
        raise ValueError("allocation must have three entries")
    if any(a < 0 for a in allocation):
        raise ValueError("allocation entries must be non-negative")
    total = sum(allocation)
    if total != num_heads:
        raise ValueError(f"allocation sums to {total} != {num_heads}")
    kinds = []
    for kind, count in zip(GLOBAL_KINDS, allocation):
        kinds.extend([kind] * count)
    return kinds


# ---------------------------------------------------------------------------
# inspection helpers for the dump-masks command


def mask_row_ranges(mask: np.ndarray) -> list[list[list[int]]]:
    """Per query row, the half-open key ranges that are allowed (entry 0)."""
    rows = []
    for row in mask:
        allowed = np.flatnonzero(row == 0.0)
        ranges: list[list[int]] = []
        for k in allowed:
            if ranges and ranges[-1][1] == k:
                ranges[-1][1] = int(k) + 1
            else:
                ranges.append([int(k), int(k) + 1])
        rows.append(ranges)
    return rows


def mask_grid(mask: np.ndarray) -> str:
    """Text rendering: '#' allowed, '.' blocked."""
    return "\n".join("".join("#" if v == 0.0 else "." for v in row) for row in mask)
