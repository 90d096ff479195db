"""Two-stream document translation model.

Every layer runs a local-attention stream; the top layers add a global
stream whose heads split between memory-focus, whole-document and adjacent
sentence masks, fused with the local stream by a learned sigmoid gate.
A selection layer on top of the encoder classifies each retrieved-memory
position as retained or discarded: retain probabilities softly weight
cross-attention keys/values during training, and the hard argmax masks
discarded positions out of global cross-attention at inference.

Weight layout: one query/key/value/output projection per attention site,
with head i owning columns [i*d_k, (i+1)*d_k); both streams of a layer
share these projections and differ only in their masks.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS
from .layout import (
    ADJACENT,
    DOCUMENT,
    MEMORY_FOCUS,
    NEG,
    InstanceLayout,
    MaskSet,
    allocate_heads,
    build_decoder_masks,
)

CHECKPOINT_MAGIC = b"DMTC"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_ff: int = 256
    num_heads: int = 8
    num_layers: int = 4
    two_stream_top_layers: int = 2
    head_allocation: tuple[int, int, int] = (3, 3, 2)
    dropout: float = 0.3
    label_smoothing: float = 0.1
    adjacent_window: int = 1

    def __post_init__(self):
        self.head_allocation = tuple(self.head_allocation)
        if self.vocab_size < 8:
            raise ValueError("vocab_size must cover the reserved ids")
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        if self.two_stream_top_layers > self.num_layers:
            raise ValueError("two_stream_top_layers cannot exceed num_layers")
        if sum(self.head_allocation) != self.num_heads:
            raise ValueError(
                f"allocation sums to {sum(self.head_allocation)} != {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.adjacent_window < 1:
            raise ValueError("adjacent_window must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_allocation"] = list(self.head_allocation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "head_allocation": tuple(d["head_allocation"])})


class ModelParameters:
    """All learnable tensors, flat name -> Tensor, creation order fixed."""

    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        d, dff = config.d_model, config.d_ff
        rng = ad.get_rng()

        def mat(name, rows, cols):
            if init:
                limit = math.sqrt(6.0 / (rows + cols))
                data = rng.uniform(-limit, limit, size=(rows, cols))
            else:
                data = np.zeros((rows, cols))
            self.tensors[name] = ad.parameter(data)

        def vec(name, size, value=0.0):
            self.tensors[name] = ad.parameter(np.full(size, value))

        if init:
            emb = rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.vocab_size, d))
        else:
            emb = np.zeros((config.vocab_size, d))
        self.tensors["embed"] = ad.parameter(emb)

        def attention_site(prefix):
            mat(f"{prefix}.wq", d, d)
            mat(f"{prefix}.wk", d, d)
            mat(f"{prefix}.wv", d, d)
            mat(f"{prefix}.wo", d, d)

        def gate(prefix):
            # zero init: the gate starts at 0.5, an even blend of both streams
            vec(f"{prefix}.w", (2 * d, d))
            vec(f"{prefix}.b", d)

        def ffn(prefix):
            mat(f"{prefix}.w1", d, dff)
            vec(f"{prefix}.b1", dff)
            mat(f"{prefix}.w2", dff, d)
            vec(f"{prefix}.b2", d)

        def norm(prefix):
            vec(f"{prefix}.g", d, 1.0)
            vec(f"{prefix}.b", d)

        for l in range(config.num_layers):
            attention_site(f"enc.{l}.attn")
            if self.is_two_stream(l):
                gate(f"enc.{l}.gate")
            ffn(f"enc.{l}.ff")
            norm(f"enc.{l}.ln1")
            norm(f"enc.{l}.ln2")
        norm("enc.final_ln")

        attention_site("sel.attn")
        norm("sel.ln")
        vec("sel.block_logits", config.num_layers)
        vec("sel.ws", (d, 2))

        for l in range(config.num_layers):
            attention_site(f"dec.{l}.self")
            attention_site(f"dec.{l}.cross")
            if self.is_two_stream(l):
                gate(f"dec.{l}.self_gate")
                gate(f"dec.{l}.cross_gate")
            ffn(f"dec.{l}.ff")
            norm(f"dec.{l}.ln1")
            norm(f"dec.{l}.ln2")
            norm(f"dec.{l}.ln3")
        norm("dec.final_ln")

    def is_two_stream(self, layer: int) -> bool:
        return layer >= self.config.num_layers - self.config.two_stream_top_layers

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def all(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        ad.zero_grads(self.tensors.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.tensors):
            raise ValueError("parameter name sets differ")
        for k, t in self.tensors.items():
            if values[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = values[k].astype(np.float64, copy=True)


@dataclass
class SelectionResult:
    """Per encoder position: probability of keeping it for cross-attention.

    Only retrieved-memory positions are classified; everything else is
    forced to retain (probability 1, sigma 1). Argmax ties retain.
    """

    retain_weights: Tensor            # (enc_len,), 1.0 outside memory spans
    hard_sigma: np.ndarray            # (enc_len,) of {0, 1}
    tm_mask: np.ndarray               # bool, True on retrieved-span positions

    def eval_column_penalty(self) -> np.ndarray:
        """Additive key-column mask discarding sigma=0 memory positions."""
        drop = self.tm_mask & (self.hard_sigma == 0)
        return np.where(drop, NEG, 0.0)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    dim = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v, rows normalized."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query/key dimension mismatch")
    if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ValueError("mask shape must be queries x keys")
    kt = transpose_last(k)
    scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    probs = ad.softmax(ad.add_const(scores, mask))
    return ad.matmul(probs, v)


def transpose_last(t: Tensor) -> Tensor:
    axes = tuple(range(t.data.ndim - 2)) + (t.data.ndim - 1, t.data.ndim - 2)
    return ad.transpose(t, axes)


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    mask_stack: np.ndarray,
    params: ModelParameters,
    prefix: str,
    train: bool,
    kv_weights: Tensor | None = None,
) -> Tensor:
    """Heads share the projections; each head applies its own mask slice.

    mask_stack is (num_heads, queries, keys). kv_weights, when given,
    multiplicatively scales key/value rows (soft memory selection).
    """
    cfg = params.config
    h, dk, d = cfg.num_heads, cfg.d_k, cfg.d_model
    if mask_stack.shape[0] != h:
        raise ValueError(f"need {h} per-head masks, got {mask_stack.shape[0]}")
    tq, tk = x_q.shape[0], x_kv.shape[0]

    if kv_weights is not None:
        x_kv = ad.mul(x_kv, ad.reshape(kv_weights, (tk, 1)))

    q = ad.matmul(x_q, params[f"{prefix}.wq"])
    k = ad.matmul(x_kv, params[f"{prefix}.wk"])
    v = ad.matmul(x_kv, params[f"{prefix}.wv"])
    q3 = ad.transpose(ad.reshape(q, (tq, h, dk)), (1, 0, 2))
    k3t = ad.transpose(ad.reshape(k, (tk, h, dk)), (1, 2, 0))
    v3 = ad.transpose(ad.reshape(v, (tk, h, dk)), (1, 0, 2))

    scores = ad.scale(ad.matmul(q3, k3t), 1.0 / math.sqrt(dk))
    probs = ad.softmax(ad.add_const(scores, mask_stack))
    probs = ad.dropout(probs, cfg.dropout, train)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v3), (1, 0, 2)), (tq, d))
    return ad.matmul(ctx, params[f"{prefix}.wo"])


def gate_sum(local: Tensor, global_: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    """Per-dimension sigmoid gate: g*local + (1-g)*global."""
    both = ad.concat([local, global_], axis=-1)
    g = ad.sigmoid(ad.add(ad.matmul(both, params[f"{prefix}.w"]), params[f"{prefix}.b"]))
    inv = ad.add_const(ad.scale(g, -1.0), 1.0)
    return ad.add(ad.mul(g, local), ad.mul(inv, global_))


def _ffn(x: Tensor, params: ModelParameters, prefix: str, train: bool) -> Tensor:
    cfg = params.config
    hidden = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    hidden = ad.dropout(hidden, cfg.dropout, train)
    return ad.add(ad.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _norm(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _broadcast_stack(mask: np.ndarray, heads: int) -> np.ndarray:
    return np.broadcast_to(mask[None, :, :], (heads, *mask.shape))


def global_mask_stack(masks: MaskSet, config: ModelConfig) -> np.ndarray:
    """Per-head encoder global masks in allocate_heads order."""
    by_kind = {
        MEMORY_FOCUS: masks.enc_memory_focus,
        DOCUMENT: masks.enc_document,
        ADJACENT: masks.enc_adjacent,
    }
    kinds = allocate_heads(config.num_heads, config.head_allocation)
    return np.stack([by_kind[k] for k in kinds])


def two_stream_layer(
    x: Tensor,
    masks: MaskSet,
    params: ModelParameters,
    layer_index: int,
    train: bool,
    global_stack: np.ndarray | None = None,
) -> Tensor:
    """One encoder block: local stream always, global stream at top layers."""
    cfg = params.config
    h = _norm(x, params, f"enc.{layer_index}.ln1")
    local_stack = _broadcast_stack(masks.enc_local, cfg.num_heads)
    local = multi_head_attention(h, h, local_stack, params, f"enc.{layer_index}.attn", train)
    if params.is_two_stream(layer_index):
        if global_stack is None:
            global_stack = global_mask_stack(masks, cfg)
        glob = multi_head_attention(h, h, global_stack, params, f"enc.{layer_index}.attn", train)
        fused = gate_sum(local, glob, params, f"enc.{layer_index}.gate")
    else:
        fused = local
    x = ad.add(x, ad.dropout(fused, cfg.dropout, train))
    h2 = _norm(x, params, f"enc.{layer_index}.ln2")
    return ad.add(x, ad.dropout(_ffn(h2, params, f"enc.{layer_index}.ff", train), cfg.dropout, train))


def build_selection_mask(layout: InstanceLayout) -> np.ndarray:
    """Visibility for the selection layer's self-attention.

    Retrieved-span positions see the whole retrieved block; sentence
    positions see their own sentence; the separator sees itself.
    """
    n = layout.enc_len
    m = np.full((n, n), NEG)
    for s, e in layout.sentence_spans:
        m[s:e, s:e] = 0.0
    tm = layout.tm_positions()
    if tm:
        idx = np.asarray(tm)
        m[np.ix_(idx, idx)] = 0.0
    p = layout.sep_position
    m[p, p] = 0.0
    return m


def selection_layer(
    block_states: list[Tensor],
    layout: InstanceLayout,
    params: ModelParameters,
    train: bool,
) -> SelectionResult:
    """Weighted block combination, one self-attention pass, binary retain."""
    if not block_states:
        raise ValueError("selection layer needs at least one block state")
    shapes = {s.shape for s in block_states}
    if len(shapes) != 1:
        raise ValueError("block states must share one shape")

    a = ad.softmax(params["sel.block_logits"])
    combined = None
    for i, state in enumerate(block_states):
        weighted = ad.mul(state, ad.slice_rows(a, i, i + 1))
        combined = weighted if combined is None else ad.add(combined, weighted)

    x = _norm(combined, params, "sel.ln")
    mask = build_selection_mask(layout)
    attn = attention(
        ad.matmul(x, params["sel.attn.wq"]),
        ad.matmul(x, params["sel.attn.wk"]),
        ad.matmul(x, params["sel.attn.wv"]),
        mask,
    )
    h_top = ad.matmul(attn, params["sel.attn.wo"])
    class_probs = ad.softmax(ad.matmul(h_top, params["sel.ws"]))  # (T, 2)
    retain = ad.reshape(
        ad.matmul(class_probs, Tensor(np.array([[0.0], [1.0]]))), (layout.enc_len,)
    )

    tm_mask = np.zeros(layout.enc_len, dtype=bool)
    tm_mask[layout.tm_positions()] = True

    # argmax over {discard, retain} with ties resolved to retain
    probs = class_probs.data
    hard = np.where(tm_mask, (probs[:, 1] >= probs[:, 0]).astype(np.int64), 1)

    # weights: retain probability on memory positions, exactly 1 elsewhere
    tm_f = Tensor(tm_mask.astype(np.float64))
    weights = ad.add_const(ad.mul(retain, tm_f), (~tm_mask).astype(np.float64))
    return SelectionResult(retain_weights=weights, hard_sigma=hard, tm_mask=tm_mask)


def encode(
    layout: InstanceLayout,
    masks: MaskSet,
    params: ModelParameters,
    train: bool,
) -> tuple[Tensor, SelectionResult]:
    """Run the encoder stack and the selection layer."""
    cfg = params.config
    x = ad.add_const(
        ad.scale(ad.embedding(params["embed"], layout.tokens), math.sqrt(cfg.d_model)),
        positional_encoding(layout.enc_len, cfg.d_model),
    )
    global_stack = global_mask_stack(masks, cfg)
    block_states: list[Tensor] = []
    for l in range(cfg.num_layers):
        x = two_stream_layer(x, masks, params, l, train, global_stack)
        block_states.append(x)
    enc_out = _norm(x, params, "enc.final_ln")
    selection = selection_layer(block_states, layout, params, train)
    return enc_out, selection


def decoder_forward(
    enc_out: Tensor,
    selection: SelectionResult,
    dec_tokens: list[int],
    dec_masks: dict[str, np.ndarray],
    params: ModelParameters,
    train: bool,
) -> Tensor:
    """Teacher-forced (or prefix) decoder pass; returns (dec_len, vocab) logits.

    Training applies the soft selection weights to global cross-attention
    keys/values; evaluation instead hard-masks discarded memory columns.
    """
    cfg = params.config
    heads = cfg.num_heads
    x = ad.add_const(
        ad.scale(ad.embedding(params["embed"], dec_tokens), math.sqrt(cfg.d_model)),
        positional_encoding(len(dec_tokens), cfg.d_model),
    )

    cross_global = dec_masks["cross_global"]
    if train:
        kv_weights = selection.retain_weights
    else:
        kv_weights = None
        cross_global = np.minimum(cross_global, selection.eval_column_penalty()[None, :])

    self_local = _broadcast_stack(dec_masks["dec_self_local"], heads)
    self_doc = _broadcast_stack(dec_masks["dec_self_document"], heads)
    cross_local = _broadcast_stack(dec_masks["cross_local"], heads)
    cross_glob = _broadcast_stack(cross_global, heads)

    for l in range(cfg.num_layers):
        two_stream = params.is_two_stream(l)
        h = _norm(x, params, f"dec.{l}.ln1")
        local = multi_head_attention(h, h, self_local, params, f"dec.{l}.self", train)
        if two_stream:
            glob = multi_head_attention(h, h, self_doc, params, f"dec.{l}.self", train)
            fused = gate_sum(local, glob, params, f"dec.{l}.self_gate")
        else:
            fused = local
        x = ad.add(x, ad.dropout(fused, cfg.dropout, train))

        h = _norm(x, params, f"dec.{l}.ln2")
        local = multi_head_attention(h, enc_out, cross_local, params, f"dec.{l}.cross", train)
        if two_stream:
            glob = multi_head_attention(
                h, enc_out, cross_glob, params, f"dec.{l}.cross", train,
                kv_weights=kv_weights,
            )
            fused = gate_sum(local, glob, params, f"dec.{l}.cross_gate")
        else:
            fused = local
        x = ad.add(x, ad.dropout(fused, cfg.dropout, train))

        h = _norm(x, params, f"dec.{l}.ln3")
        x = ad.add(x, ad.dropout(_ffn(h, params, f"dec.{l}.ff", train), cfg.dropout, train))

    x = _norm(x, params, "dec.final_ln")
    return ad.matmul(x, transpose_last(params["embed"]))  # tied output projection


def decode_step(
    enc_out: Tensor,
    selection: SelectionResult,
    layout: InstanceLayout,
    prefixes: list[list[int]],
    params: ModelParameters,
) -> np.ndarray:
    """Next-token logits for the last position of the final prefix block."""
    for p in prefixes:
        if not p or p[0] != BOS:
            raise ValueError("every decoder prefix must begin with <bos>")
    dec_tokens = [t for p in prefixes for t in p]
    dec_masks = build_decoder_masks(layout, [len(p) for p in prefixes])
    with ad.no_grad():
        logits = decoder_forward(enc_out, selection, dec_tokens, dec_masks, params, train=False)
    return logits.data[-1]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParameters, path) -> None:
    header = json.dumps(params.config.to_dict()).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_FORMAT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        ad.write_named_tensors(f, params.named())


def load_checkpoint(path) -> ModelParameters:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"checkpoint format version mismatch: found {version}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}"
            )
        (hlen,) = struct.unpack("<I", f.read(4))
        config = ModelConfig.from_dict(json.loads(f.read(hlen).decode("utf-8")))
        values = ad.read_named_tensors(f)
    params = ModelParameters(config, init=False)
    params.load_values(values)
    return params
