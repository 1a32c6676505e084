"""Compact decoder-only transformer conditioned on a visual-feature prefix.

The same architecture serves as pretrained base, pseudo-QA generator, and VQA
model. Visual features are projected to ``visual_prefix_len`` prefix
embeddings prepended before the token embeddings; causal attention then lets
every text position see the whole prefix plus earlier text. Logits are
returned for text positions only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import container
from .tensor import (
    ShapeError,
    Tensor,
    add,
    causal_attention,
    concat_rows,
    gather_rows,
    gelu,
    layernorm,
    matmul,
)

CheckpointError = container.ContainerError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 64
    visual_dim: int = 32
    visual_prefix_len: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.visual_prefix_len >= self.max_seq_len:
            raise ValueError("max_seq_len must leave room for text after the visual prefix")

    @property
    def max_text_len(self) -> int:
        return self.max_seq_len - self.visual_prefix_len

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


class VisualInput:
    """Fixed-size visual feature matrix: one row per prefix position."""

    __slots__ = ("features",)

    def __init__(self, features):
        arr = np.asarray(features, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"visual features must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("visual features must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        self.features = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.features.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, VisualInput) and np.array_equal(self.features, other.features)

    def __hash__(self):
        return hash(self.features.tobytes())


@dataclass(frozen=True)
class TensorMeta:
    selectable: bool
    row_axis: int | None  # output-neuron axis of a linear weight, None otherwise


def _layout(cfg: ModelConfig) -> Iterable[tuple[str, tuple[int, ...], str, TensorMeta]]:
    """Yield (name, shape, init kind, meta) in the canonical parameter order.

    Linear weights are stored input-major (x @ W), so the output-neuron axis
    is axis 1 throughout.
    """
    lin = TensorMeta(selectable=True, row_axis=1)
    aux = TensorMeta(selectable=False, row_axis=None)
    yield "tok_emb", (cfg.vocab_size, cfg.d_model), "embed", aux
    yield "pos_emb", (cfg.max_seq_len, cfg.d_model), "embed", aux
    yield "vis_proj.w", (cfg.visual_dim, cfg.d_model), "xavier", lin
    yield "vis_proj.b", (cfg.d_model,), "zeros", aux
    for i in range(cfg.n_layers):
        yield f"layer{i}.ln1.g", (cfg.d_model,), "ones", aux
        yield f"layer{i}.ln1.b", (cfg.d_model,), "zeros", aux
        for w in ("wq", "wk", "wv", "wo"):
            yield f"layer{i}.attn.{w}", (cfg.d_model, cfg.d_model), "xavier", lin
        yield f"layer{i}.ln2.g", (cfg.d_model,), "ones", aux
        yield f"layer{i}.ln2.b", (cfg.d_model,), "zeros", aux
        yield f"layer{i}.ffn.w1", (cfg.d_model, cfg.d_ff), "xavier", lin
        yield f"layer{i}.ffn.b1", (cfg.d_ff,), "zeros", aux
        yield f"layer{i}.ffn.w2", (cfg.d_ff, cfg.d_model), "xavier", lin
        yield f"layer{i}.ffn.b2", (cfg.d_model,), "zeros", aux
    yield "final_ln.g", (cfg.d_model,), "ones", aux
    yield "final_ln.b", (cfg.d_model,), "zeros", aux
    # smaller head init keeps the untrained next-token distribution near uniform
    yield "head.w", (cfg.d_model, cfg.vocab_size), "xavier_half", lin


class ParameterStore:
    """Named parameter tensors plus per-tensor selection metadata."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._tensors: dict[str, Tensor] = {}
        self._meta: dict[str, TensorMeta] = {}

    def add(self, name: str, tensor: Tensor, meta: TensorMeta) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        self._meta[name] = meta

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def meta(self, name: str) -> TensorMeta:
        return self._meta[name]

    def selectable_names(self) -> list[str]:
        return [n for n, m in self._meta.items() if m.selectable]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    @property
    def dtype(self):
        return self._tensors["tok_emb"].dtype

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.config)
        for name, t in self._tensors.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=t.requires_grad), self._meta[name])
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.config)
        for name, t in self._tensors.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad), self._meta[name])
        return out

    def equal(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self.names())


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ParameterStore:
    """Deterministic scaled-uniform initialization; identical seeds give
    bit-identical stores."""
    rng = np.random.default_rng(seed)
    store = ParameterStore(config)
    for name, shape, kind, meta in _layout(config):
        if kind in ("xavier", "xavier_half"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            if kind == "xavier_half":
                limit *= 0.5
            data = rng.uniform(-limit, limit, size=shape)
        elif kind == "embed":
            data = rng.uniform(-0.1, 0.1, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store.add(name, Tensor(data.astype(dtype), requires_grad=True), meta)
    return store


def _prefix_embeddings(params: ParameterStore, visuals: Sequence[VisualInput]) -> Tensor:
    cfg = params.config
    dtype = params.dtype
    feats = []
    for v in visuals:
        if v.features.shape != (cfg.visual_prefix_len, cfg.visual_dim):
            raise ShapeError(
                f"visual features shape {v.features.shape} does not match "
                f"({cfg.visual_prefix_len}, {cfg.visual_dim})"
            )
        feats.append(v.features)
    stacked = Tensor(np.concatenate(feats, axis=0).astype(dtype))
    return add(matmul(stacked, params["vis_proj.w"]), params["vis_proj.b"])


def forward_batch(params: ParameterStore, visuals: Sequence[VisualInput], ids: np.ndarray) -> Tensor:
    """Run the transformer over a batch of equal-length token rows.

    ids is (B, T) of token ids; the result is a (B*T, vocab) logit tensor with
    block b occupying rows b*T .. b*T+T-1. Only text positions are returned.
    """
    cfg = params.config
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 2:
        raise ShapeError(f"ids must be (batch, time), got shape {ids.shape}")
    b, t = ids.shape
    if len(visuals) != b:
        raise ShapeError(f"{len(visuals)} visuals for batch of {b}")
    p = cfg.visual_prefix_len
    block = p + t
    if block > cfg.max_seq_len:
        raise ShapeError(f"sequence length {block} exceeds max_seq_len {cfg.max_seq_len}")

    prefix = _prefix_embeddings(params, visuals)      # (B*p, d)
    tokens = gather_rows(params["tok_emb"], ids.reshape(-1))  # (B*T, d)
    stacked = concat_rows(prefix, tokens)
    # interleave [prefix_b ; tokens_b] per example
    perm = np.empty(b * block, dtype=np.intp)
    for i in range(b):
        perm[i * block : i * block + p] = np.arange(i * p, (i + 1) * p)
        perm[i * block + p : (i + 1) * block] = b * p + np.arange(i * t, (i + 1) * t)
    x = gather_rows(stacked, perm)
    pos = gather_rows(params["pos_emb"], np.tile(np.arange(block), b))
    x = add(x, pos)

    for i in range(cfg.n_layers):
        h = layernorm(x, params[f"layer{i}.ln1.g"], params[f"layer{i}.ln1.b"])
        q = matmul(h, params[f"layer{i}.attn.wq"])
        k = matmul(h, params[f"layer{i}.attn.wk"])
        v = matmul(h, params[f"layer{i}.attn.wv"])
        attn = causal_attention(q, k, v, cfg.n_heads, block)
        x = add(x, matmul(attn, params[f"layer{i}.attn.wo"]))
        h = layernorm(x, params[f"layer{i}.ln2.g"], params[f"layer{i}.ln2.b"])
        h = add(matmul(gelu(add(matmul(h, params[f"layer{i}.ffn.w1"]), params[f"layer{i}.ffn.b1"])),
                       params[f"layer{i}.ffn.w2"]), params[f"layer{i}.ffn.b2"])
        x = add(x, h)

    x = layernorm(x, params["final_ln.g"], params["final_ln.b"])
    text_rows = np.concatenate([i * block + p + np.arange(t) for i in range(b)])
    return matmul(gather_rows(x, text_rows), params["head.w"])


def forward(params: ParameterStore, visual: VisualInput, ids: Sequence[int]) -> Tensor:
    """Single-sequence forward pass: logits for each of the len(ids) text positions."""
    arr = np.asarray(list(ids), dtype=np.intp).reshape(1, -1)
    return forward_batch(params, [visual], arr)


def save_checkpoint(path, params: ParameterStore, extra_meta: dict | None = None) -> None:
    if params.dtype != np.float32:
        raise TypeError(f"checkpoints are float32; store is {params.dtype} (use astype first)")
    meta = {"kind": "model", "config": params.config.to_json(), **(extra_meta or {})}
    container.write_container(path, meta, {n: t.data for n, t in params.items()})


def load_checkpoint(path) -> ParameterStore:
    meta, tensors = container.read_container(path)
    if meta.get("kind") != "model":
        raise container.ContainerError(f"not a model checkpoint: kind={meta.get('kind')!r}")
    config = ModelConfig.from_json(meta["config"])
    store = ParameterStore(config)
    expected = list(_layout(config))
    names = {name for name, _, _, _ in expected}
    if set(tensors) != names:
        missing = sorted(names - set(tensors))
        extra = sorted(set(tensors) - names)
        raise container.ContainerError(f"checkpoint tensor set mismatch: missing={missing} extra={extra}")
    for name, shape, _, meta_t in expected:
        arr = tensors[name]
        if arr.shape != shape:
            raise container.ContainerError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        store.add(name, Tensor(arr, requires_grad=True), meta_t)
    return store
