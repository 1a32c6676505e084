"""Training objectives: QA-generation, caption distillation, their joint sum,
and the VQA fine-tuning loss.

All four are mean negative log-likelihood over the masked-in positions of a
batch and are minimized. Batches pad to a common length; padding is always
masked out and (being strictly trailing under causal attention) contributes
exactly nothing to values or gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ParameterStore, VisualInput, forward_batch
from .tensor import Tensor, add, scale, softmax_cross_entropy
from .vocab import (
    PAD,
    TokenSequence,
    Vocabulary,
    assemble_caption_sequence,
    assemble_qa_sequence,
    assemble_vqa_sequence,
)


@dataclass(frozen=True)
class CaptionExample:
    visual: VisualInput
    caption: str

    def __post_init__(self):
        if not self.caption.split():
            raise ValueError("caption is empty")


class Batch:
    """Visuals plus right-padded token/mask matrices ready for the model."""

    def __init__(self, visuals: Sequence[VisualInput], sequences: Sequence[TokenSequence]):
        if not sequences:
            raise ValueError("empty batch")
        if len(visuals) != len(sequences):
            raise ValueError(f"{len(visuals)} visuals for {len(sequences)} sequences")
        self.visuals = list(visuals)
        t = max(len(s) for s in sequences)
        b = len(sequences)
        self.ids = np.full((b, t), PAD, dtype=np.intp)
        self.mask = np.zeros((b, t), dtype=bool)
        for i, seq in enumerate(sequences):
            self.ids[i, : len(seq)] = seq.ids
            self.mask[i, : len(seq)] = seq.loss_mask

    def __len__(self) -> int:
        return len(self.visuals)


def next_token_frame(params: ParameterStore, batch: Batch) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Logits plus flattened next-token targets and mask.

    Logit row (b, t) predicts ids[b, t+1] and carries the sequence's loss-mask
    flag of position t+1; the last row of each block is always masked out.
    """
    logits = forward_batch(params, batch.visuals, batch.ids)
    b, t = batch.ids.shape
    targets = np.zeros(b * t, dtype=np.intp)
    mask = np.zeros(b * t, dtype=bool)
    flat_ids = batch.ids.reshape(-1)
    flat_mask = batch.mask.reshape(-1)
    for i in range(b):
        lo = i * t
        targets[lo : lo + t - 1] = flat_ids[lo + 1 : lo + t]
        mask[lo : lo + t - 1] = flat_mask[lo + 1 : lo + t]
    return logits, targets, mask


def _next_token_nll(params: ParameterStore, batch: Batch) -> Tensor:
    logits, targets, mask = next_token_frame(params, batch)
    return softmax_cross_entropy(logits, targets, mask)


def qa_batch(examples, vocab: Vocabulary, max_len: int | None = None) -> Batch:
    """Batch of generator targets from (question, answer) carrying examples."""
    seqs = [assemble_qa_sequence(ex.question, ex.answer, vocab, max_len) for ex in examples]
    return Batch([ex.visual for ex in examples], seqs)


def vqa_batch(examples, vocab: Vocabulary, max_len: int | None = None) -> Batch:
    seqs = [assemble_vqa_sequence(ex.question, ex.answer, vocab, max_len) for ex in examples]
    return Batch([ex.visual for ex in examples], seqs)


def caption_batch(examples: Sequence[CaptionExample], vocab: Vocabulary, max_len: int | None = None) -> Batch:
    seqs = [assemble_caption_sequence(ex.caption, vocab, max_len) for ex in examples]
    return Batch([ex.visual for ex in examples], seqs)


def qa_loss(params: ParameterStore, batch: Batch) -> Tensor:
    """Mean NLL of full generator targets (question, answer, delimiters, EOS)."""
    return _next_token_nll(params, batch)


def caption_loss(params: ParameterStore, batch: Batch) -> Tensor:
    """Mean NLL of teacher captions; identical contract to qa_loss."""
    return _next_token_nll(params, batch)


def vqa_loss(params: ParameterStore, batch: Batch) -> Tensor:
    """Mean NLL over answer tokens and EOS only; questions condition, never score."""
    return _next_token_nll(params, batch)


def generator_loss(
    params: ParameterStore,
    labeled: Batch,
    captions: Batch,
    caption_weight: float = 1.0,
) -> Tensor:
    """Joint generator objective: QA loss plus (optionally weighted) caption loss."""
    qa = qa_loss(params, labeled)
    cap = caption_loss(params, captions)
    if caption_weight == 1.0:
        return add(qa, cap)
    return add(qa, scale(cap, caption_weight))
