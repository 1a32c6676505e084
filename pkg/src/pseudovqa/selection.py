"""Gradient-magnitude parameter importance, top-K-per-neuron masks, and masked
optimizer steps.

Importance of a coordinate is the absolute value of the gradient of the QA
loss averaged over the labeled set (magnitude of the mean, so sign-opposed
gradients cancel). A "neuron" is the slice of a linear weight along its
output axis; within each neuron only the K highest-scoring coordinates stay
trainable, everything else stays bit-identical to initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .losses import qa_batch, qa_loss
from .model import ParameterStore
from .tensor import Tape
from .vocab import Vocabulary


class MissingGradientError(RuntimeError):
    """A trainable tensor has no gradient buffer at step time."""


@dataclass(frozen=True)
class ScoreTable:
    """Per-coordinate importance scores for every selectable tensor."""

    scores: dict[str, np.ndarray]
    example_count: int

    def __post_init__(self):
        for arr in self.scores.values():
            arr.setflags(write=False)


SCORE_MODES = ("mean-gradient", "mean-abs-gradient")


def accumulate_scores(params: ParameterStore, labeled, vocab: Vocabulary,
                      mode: str = "mean-gradient") -> ScoreTable:
    """Per-coordinate importance of the QA loss over the labeled set.

    The default ("mean-gradient") is the magnitude OF THE MEAN gradient:
    examples are fully accumulated before the single division, so
    equal-and-opposite per-example gradients cancel to zero.
    "mean-abs-gradient" averages per-example magnitudes instead; it cannot
    cancel and is NOT the published rule, only a comparison knob.
    Leaves params' grad buffers cleared.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}, expected one of {SCORE_MODES}")
    labeled = list(labeled)
    if not labeled:
        raise ValueError("accumulate_scores needs a non-empty labeled set")
    max_len = params.config.max_text_len
    acc: dict[str, np.ndarray] = {}
    for ex in labeled:
        params.zero_grad()
        with Tape() as tape:
            loss = qa_loss(params, qa_batch([ex], vocab, max_len))
            tape.backward(loss)
        for name in params.selectable_names():
            g = params[name].grad
            if g is None:
                g = np.zeros_like(params[name].data)
            term = np.abs(g) if mode == "mean-abs-gradient" else g
            if name in acc:
                acc[name] += term
            else:
                acc[name] = term.copy()
    params.zero_grad()
    n = len(labeled)
    scores = {}
    for name in params.selectable_names():
        mean = acc[name] / n
        scores[name] = np.abs(mean) if mode == "mean-gradient" else mean
    return ScoreTable(scores=scores, example_count=n)


@dataclass(frozen=True)
class UpdateMask:
    """Boolean trainability per tensor; tensors absent from ``masks`` are frozen.

    ``policy`` records how the mask was built ("selective" top-K or "dense").
    """

    masks: dict[str, np.ndarray]
    policy: str
    k: int | None = None

    def __post_init__(self):
        for arr in self.masks.values():
            arr.setflags(write=False)

    def trainable_names(self) -> list[str]:
        return list(self.masks)

    def is_frozen(self, name: str) -> bool:
        return name not in self.masks

    @classmethod
    def dense(cls, params: ParameterStore) -> "UpdateMask":
        return cls(
            masks={n: np.ones(t.data.shape, dtype=bool) for n, t in params.items()},
            policy="dense",
        )


def top_k_rows(scores: np.ndarray, k: int, row_axis: int) -> np.ndarray:
    """Boolean mask marking the k largest scores within each slice along
    ``row_axis``; ties broken toward the lowest index."""
    moved = np.moveaxis(scores, row_axis, 0)  # (neurons, width)
    width = moved.shape[1]
    kk = min(k, width)
    # stable argsort of negated scores: equal scores keep ascending column order
    order = np.argsort(-moved, axis=1, kind="stable")[:, :kk]
    mask = np.zeros_like(moved, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return np.moveaxis(mask, 0, row_axis)


def build_mask(params: ParameterStore, scores: ScoreTable, k: int) -> UpdateMask:
    """Top-K-per-neuron trainability over the selectable tensors; all other
    tensors are frozen."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    masks = {}
    for name in params.selectable_names():
        row_axis = params.meta(name).row_axis
        masks[name] = top_k_rows(scores.scores[name], k, row_axis)
    return UpdateMask(masks=masks, policy="selective", k=k)


@dataclass
class _Slot:
    idx: np.ndarray | None  # flat masked-in coordinates; None = every coordinate
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class OptimizerState:
    """Masked SGD / AdamW with a cosine learning-rate schedule.

    Moment buffers are allocated per masked-in coordinate only, so frozen
    coordinates can never accumulate state.
    """

    lr: float
    total_steps: int
    rule: str = "adamw"  # "adamw" | "sgd"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict[str, _Slot] = field(default_factory=dict)

    @classmethod
    def create(cls, params: ParameterStore, mask: UpdateMask, lr: float, total_steps: int,
               rule: str = "adamw", weight_decay: float = 0.01) -> "OptimizerState":
        if rule not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer rule {rule!r}")
        opt = cls(lr=lr, total_steps=max(1, total_steps), rule=rule, weight_decay=weight_decay)
        for name in mask.trainable_names():
            m = mask.masks[name]
            idx = None if m.all() else np.flatnonzero(m.reshape(-1))
            slot = _Slot(idx=idx)
            if rule == "adamw":
                n_sel = params[name].data.size if idx is None else idx.size
                slot.m = np.zeros(n_sel, dtype=params.dtype)
                slot.v = np.zeros(n_sel, dtype=params.dtype)
            opt.slots[name] = slot
        return opt

    def lr_at(self, step: int) -> float:
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))


def masked_step(params: ParameterStore, mask: UpdateMask, opt: OptimizerState) -> None:
    """Apply one optimizer step at masked-in coordinates; everything else is
    left bit-identical. Advances the schedule by one step."""
    lr_t = opt.lr_at(opt.step)
    t = opt.step + 1
    for name in mask.trainable_names():
        tensor = params[name]
        if tensor.grad is None:
            raise MissingGradientError(f"no gradient for trainable tensor {name!r}")
        slot = opt.slots[name]
        flat = tensor.data.reshape(-1)
        gflat = tensor.grad.reshape(-1)
        if slot.idx is None:
            g = gflat
            theta = flat
        else:
            g = gflat[slot.idx]
            theta = flat[slot.idx]
        if opt.rule == "sgd":
            upd = theta - lr_t * g
        else:
            slot.m[:] = opt.beta1 * slot.m + (1.0 - opt.beta1) * g
            slot.v[:] = opt.beta2 * slot.v + (1.0 - opt.beta2) * (g * g)
            m_hat = slot.m / (1.0 - opt.beta1**t)
            v_hat = slot.v / (1.0 - opt.beta2**t)
            upd = theta - lr_t * (m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * theta)
        if slot.idx is None:
            flat[:] = upd
        else:
            flat[slot.idx] = upd
    opt.step += 1


def dense_sgd_step(params: ParameterStore, names, lr_t: float) -> None:
    """Plain full-array SGD over the named tensors (oracle for mask-equivalence
    checks; no mask machinery involved)."""
    for name in names:
        tensor = params[name]
        if tensor.grad is None:
            raise MissingGradientError(f"no gradient for trainable tensor {name!r}")
        tensor.data -= lr_t * tensor.grad


def selection_report(params: ParameterStore, scores: ScoreTable, mask: UpdateMask,
                     histogram_bins: int = 10) -> dict:
    """Summary of what was selected: per-tensor fractions, score histograms,
    and per-layer selection density. JSON-serializable."""
    per_tensor = {}
    layer_sel: dict[str, list[int]] = {}
    for name, m in mask.masks.items():
        s = scores.scores[name]
        row_axis = params.meta(name).row_axis
        width = s.shape[1 - row_axis] if row_axis is not None else s.size
        hist, edges = np.histogram(s, bins=histogram_bins)
        per_tensor[name] = {
            "shape": list(s.shape),
            "row_width": int(width),
            "selected": int(m.sum()),
            "selected_fraction": float(m.mean()),
            "score_histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
        }
        layer = name.split(".")[0]
        layer_sel.setdefault(layer, [0, 0])
        layer_sel[layer][0] += int(m.sum())
        layer_sel[layer][1] += int(m.size)
    return {
        "policy": mask.policy,
        "k": mask.k,
        "example_count": scores.example_count,
        "tensors": per_tensor,
        "layer_density": {
            layer: sel / total for layer, (sel, total) in sorted(layer_sel.items())
        },
        "total_selected": int(sum(m.sum() for m in mask.masks.values())),
    }


def save_scores(path, scores: ScoreTable, extra_meta: dict | None = None) -> None:
    meta = {"kind": "scores", "example_count": scores.example_count, **(extra_meta or {})}
    container.write_container(
        path, meta, {n: s.astype(np.float32) for n, s in scores.scores.items()}
    )


def load_scores(path) -> ScoreTable:
    meta, tensors = container.read_container(path)
    if meta.get("kind") != "scores":
        raise container.ContainerError(f"not a score table: kind={meta.get('kind')!r}")
    return ScoreTable(scores=tensors, example_count=int(meta["example_count"]))


def save_mask(path, mask: UpdateMask, extra_meta: dict | None = None) -> None:
    meta = {"kind": "mask", "policy": mask.policy, "k": mask.k, **(extra_meta or {})}
    container.write_container(
        path, meta, {n: m.astype(np.float32) for n, m in mask.masks.items()}
    )


def load_mask(path) -> UpdateMask:
    meta, tensors = container.read_container(path)
    if meta.get("kind") != "mask":
        raise container.ContainerError(f"not a mask artifact: kind={meta.get('kind')!r}")
    masks = {n: arr.astype(bool) for n, arr in tensors.items()}
    return UpdateMask(masks=masks, policy=meta["policy"], k=meta.get("k"))
