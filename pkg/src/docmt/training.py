"""Multi-task training: document translation plus a sentence-level auxiliary.

Each stream draw is a sentence instance with probability
sentence_task_ratio (one pair plus its retrieved memory, so the document
degenerates to a single sentence) and otherwise a full truncated document.
Optimization is Adam (beta1 0.9, beta2 0.98) under an inverse-square-root
schedule with linear warmup, label-smoothed cross entropy, and early
stopping on document-task validation loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, Document
from .layout import InstanceLayout, MaskSet, assemble_instance, build_mask_set
from .model import ModelConfig, ModelParameters, decoder_forward, encode
from .retrieval import TmIndex

DOCUMENT_TASK = "document"
SENTENCE_TASK = "sentence"


@dataclass
class TrainingInstance:
    layout: InstanceLayout
    mask_set: MaskSet
    task: str


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_valid: float = math.inf
    evals_without_improvement: int = 0
    seed: int = 0


@dataclass
class TrainSettings:
    lr: float = 5e-4
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    max_steps: int = 20000
    eval_interval: int = 100
    patience: int = 3
    sentence_task_ratio: float = 0.25
    sentence_batch: int = 4
    seed: int = 1


def make_instance(
    document: Document, index: TmIndex, adjacent_window: int, exclude_self: bool, task: str
) -> TrainingInstance:
    retrieved = [
        index.retrieve(p.src_tokens, p.global_id, exclude_self=exclude_self)
        for p in document.pairs
    ]
    layout = assemble_instance(document, retrieved)
    return TrainingInstance(layout, build_mask_set(layout, adjacent_window), task)


def build_training_stream(
    corpus: Corpus,
    tm_index: TmIndex,
    sentence_task_ratio: float,
    seed: int,
    adjacent_window: int = 1,
):
    """Endless instance generator; deterministic under the seed."""
    if not 0.0 <= sentence_task_ratio <= 1.0:
        raise ValueError("sentence_task_ratio must lie in [0, 1]")
    documents = corpus.documents
    pairs = list(corpus.pairs())
    if not pairs:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    while True:
        if rng.random() < sentence_task_ratio:
            pair = pairs[int(rng.integers(len(pairs)))]
            doc = Document(doc_id=f"sent:{pair.global_id}", pairs=[pair])
            yield make_instance(doc, tm_index, adjacent_window, True, SENTENCE_TASK)
        else:
            doc = documents[int(rng.integers(len(documents)))]
            yield make_instance(doc, tm_index, adjacent_window, True, DOCUMENT_TASK)


def batch_stream(stream, sentence_batch: int = 4):
    """Group consecutive sentence instances; documents train alone."""
    buf: list[TrainingInstance] = []
    for inst in stream:
        if inst.task == SENTENCE_TASK:
            buf.append(inst)
            if len(buf) == sentence_batch:
                yield buf
                buf = []
        else:
            if buf:
                yield buf
                buf = []
            yield [inst]


def compute_loss(
    instance: TrainingInstance, params: ModelParameters, train: bool
) -> Tensor:
    """Teacher-forced label-smoothed cross entropy, mean over target tokens."""
    layout = instance.layout
    if not layout.dec_labels:
        raise ValueError("instance has an empty target")
    enc_out, selection = encode(layout, instance.mask_set, params, train)
    dec_masks = {
        "dec_self_local": instance.mask_set.dec_self_local,
        "dec_self_document": instance.mask_set.dec_self_document,
        "cross_local": instance.mask_set.cross_local,
        "cross_global": instance.mask_set.cross_global,
    }
    logits = decoder_forward(enc_out, selection, layout.dec_tokens, dec_masks, params, train)
    return ad.cross_entropy_label_smoothed(
        logits, layout.dec_labels, params.config.label_smoothing
    )


def lr_at(step: int, settings: TrainSettings) -> float:
    """Linear warmup to the peak rate, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("schedule is defined for steps >= 1")
    return settings.lr * min(step / settings.warmup, math.sqrt(settings.warmup / step))


def adam_step(
    state: TrainState, params: ModelParameters, settings: TrainSettings
) -> None:
    """One Adam update from the gradients stored on the parameters.

    Raises FloatingPointError on any non-finite gradient without touching
    parameters or moments.
    """
    grads: dict[str, np.ndarray] = {}
    for name, t in params.tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        grads[name] = g

    state.step += 1
    t_ = state.step
    lr = lr_at(t_, settings)
    b1, b2, eps = settings.beta1, settings.beta2, settings.adam_eps
    for name, tensor in params.tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t_)
        v_hat = state.v[name] / (1 - b2**t_)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def prepare_validation(
    corpus_valid: Corpus, tm_index: TmIndex, adjacent_window: int
) -> list[TrainingInstance]:
    """Document-task validation instances; retrieval keeps self-matches."""
    return [
        make_instance(doc, tm_index, adjacent_window, False, DOCUMENT_TASK)
        for doc in corpus_valid.documents
    ]


def validation_loss(instances: list[TrainingInstance], params: ModelParameters) -> float:
    total = 0.0
    with ad.no_grad():
        for inst in instances:
            total += compute_loss(inst, params, train=False).item()
    return total / len(instances)


def token_accuracy(instances: list[TrainingInstance], params: ModelParameters) -> float:
    """Teacher-forced argmax accuracy over all target positions."""
    correct = 0
    total = 0
    with ad.no_grad():
        for inst in instances:
            layout = inst.layout
            enc_out, selection = encode(layout, inst.mask_set, params, train=False)
            dec_masks = {
                "dec_self_local": inst.mask_set.dec_self_local,
                "dec_self_document": inst.mask_set.dec_self_document,
                "cross_local": inst.mask_set.cross_local,
                "cross_global": inst.mask_set.cross_global,
            }
            logits = decoder_forward(
                enc_out, selection, layout.dec_tokens, dec_masks, params, train=False
            )
            pred = logits.data.argmax(axis=-1)
            gold = np.asarray(layout.dec_labels)
            correct += int((pred == gold).sum())
            total += gold.size
    return correct / total


def train(
    corpus_train: Corpus,
    corpus_valid: Corpus,
    tm_index: TmIndex,
    config: ModelConfig,
    settings: TrainSettings,
    log=None,
) -> tuple[ModelParameters, TrainState, list[dict]]:
    """Train until early stop or max_steps; returns best-validation weights.

    `log` receives one dict per evaluation: step, train_loss, valid_loss,
    best flag. Training aborts with RuntimeError if the loss goes
    non-finite; a non-finite gradient skips that step and is reported.
    """
    ad.seed_rng(settings.seed)
    params = ModelParameters(config)
    state = TrainState(seed=settings.seed)
    stream = build_training_stream(
        corpus_train, tm_index, settings.sentence_task_ratio,
        settings.seed, config.adjacent_window,
    )
    batches = batch_stream(stream, settings.sentence_batch)
    valid_instances = prepare_validation(corpus_valid, tm_index, config.adjacent_window)

    best_values = params.copy_values()
    history: list[dict] = []
    recent_losses: list[float] = []
    stop = False

    while not stop and state.step < settings.max_steps:
        batch = next(batches)
        params.zero_grads()
        batch_loss = 0.0
        for inst in batch:
            loss = compute_loss(inst, params, train=True)
            if not math.isfinite(loss.item()):
                raise RuntimeError(
                    f"training diverged: non-finite loss at step {state.step + 1}"
                )
            ad.backward(ad.scale(loss, 1.0 / len(batch)))
            batch_loss += loss.item() / len(batch)
        try:
            adam_step(state, params, settings)
        except FloatingPointError as exc:
            if log is not None:
                log({"step": state.step, "skipped_step": str(exc)})
            continue
        recent_losses.append(batch_loss)

        if state.step % settings.eval_interval == 0:
            valid = validation_loss(valid_instances, params)
            improved = valid < state.best_valid
            if improved:
                state.best_valid = valid
                state.evals_without_improvement = 0
                best_values = params.copy_values()
            else:
                state.evals_without_improvement += 1
            record = {
                "step": state.step,
                "train_loss": sum(recent_losses) / len(recent_losses),
                "valid_loss": valid,
                "best": improved,
            }
            history.append(record)
            if log is not None:
                log(record)
            recent_losses = []
            if state.evals_without_improvement > settings.patience:
                stop = True

    params.load_values(best_values)
    return params, state, history
