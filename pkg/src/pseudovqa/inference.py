"""Batched incremental (KV-cached) decoding.

The training path recomputes the full sequence every step; this inference
path advances one position at a time with per-layer key/value caches, which
makes dataset synthesis and evaluation tractable. Numerically it computes the
same architecture (identical parameters, layernorm epsilon, gelu), but BLAS
rounding can differ from the packed training forward at the last ulps, so the
two paths agree to float tolerance rather than bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .model import ModelConfig, ParameterStore, VisualInput
from .tensor import LAYERNORM_EPS, _GELU_C0, _GELU_C1


def _layernorm_rows(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=1, keepdims=True)
    return (c / np.sqrt(var + LAYERNORM_EPS)) * g + b


def _gelu_rows(x):
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C0 * (x + _GELU_C1 * (x2 * x))))


class IncrementalDecoder:
    """Advance a batch of sequences one position per call.

    Construction feeds the visual prefix; ``feed_tokens`` consumes one token
    id per sequence and returns next-token logits for each.
    """

    def __init__(self, params: ParameterStore, visuals: list[VisualInput]):
        self.params = params
        self.cfg: ModelConfig = params.config
        self.batch = len(visuals)
        cfg = self.cfg
        dtype = params.dtype
        hd = cfg.d_model // cfg.n_heads
        self._k = [np.zeros((self.batch, cfg.n_heads, cfg.max_seq_len, hd), dtype=dtype)
                   for _ in range(cfg.n_layers)]
        self._v = [np.zeros((self.batch, cfg.n_heads, cfg.max_seq_len, hd), dtype=dtype)
                   for _ in range(cfg.n_layers)]
        self.pos = 0
        feats = np.stack([v.features for v in visuals]).astype(dtype)  # (B, p, vd)
        prefix = feats @ params["vis_proj.w"].data + params["vis_proj.b"].data
        for i in range(cfg.visual_prefix_len):
            self._advance(prefix[:, i, :], want_logits=False)

    @property
    def positions_left(self) -> int:
        return self.cfg.max_seq_len - self.pos

    def feed_tokens(self, ids) -> np.ndarray:
        """ids: (batch,) token ids. Returns (batch, vocab) next-token logits."""
        ids = np.asarray(ids, dtype=np.intp)
        if ids.shape != (self.batch,):
            raise ValueError(f"expected {self.batch} token ids, got shape {ids.shape}")
        x = self.params["tok_emb"].data[ids]
        return self._advance(x, want_logits=True)

    def _advance(self, x: np.ndarray, want_logits: bool) -> np.ndarray | None:
        p = self.params
        cfg = self.cfg
        if self.pos >= cfg.max_seq_len:
            raise ValueError(f"sequence length {self.pos} exhausted max_seq_len {cfg.max_seq_len}")
        b = self.batch
        hd = cfg.d_model // cfg.n_heads
        scale = 1.0 / np.sqrt(hd)
        x = x + p["pos_emb"].data[self.pos]
        t = self.pos + 1
        for i in range(cfg.n_layers):
            h = _layernorm_rows(x, p[f"layer{i}.ln1.g"].data, p[f"layer{i}.ln1.b"].data)
            q = (h @ p[f"layer{i}.attn.wq"].data).reshape(b, cfg.n_heads, hd)
            k = (h @ p[f"layer{i}.attn.wk"].data).reshape(b, cfg.n_heads, hd)
            v = (h @ p[f"layer{i}.attn.wv"].data).reshape(b, cfg.n_heads, hd)
            self._k[i][:, :, self.pos, :] = k
            self._v[i][:, :, self.pos, :] = v
            keys = self._k[i][:, :, :t, :]     # (B, H, t, hd)
            vals = self._v[i][:, :, :t, :]
            scores = (keys @ q[:, :, :, None])[:, :, :, 0] * scale  # (B, H, t)
            scores -= scores.max(axis=2, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=2, keepdims=True)
            ctx = (scores[:, :, None, :] @ vals)[:, :, 0, :]        # (B, H, hd)
            x = x + ctx.reshape(b, cfg.d_model) @ p[f"layer{i}.attn.wo"].data
            h = _layernorm_rows(x, p[f"layer{i}.ln2.g"].data, p[f"layer{i}.ln2.b"].data)
            h = _gelu_rows(h @ p[f"layer{i}.ffn.w1"].data + p[f"layer{i}.ffn.b1"].data)
            x = x + (h @ p[f"layer{i}.ffn.w2"].data + p[f"layer{i}.ffn.b2"].data)
        self.pos += 1
        if not want_logits:
            return None
        h = _layernorm_rows(x, p["final_ln.g"].data, p["final_ln.b"].data)
        return h @ p["head.w"].data


def batch_greedy_continue(params: ParameterStore, visuals, prompts: list[list[int]],
                          max_new_tokens: int, eos_id: int) -> list[list[int]]:
    """Greedy-decode a batch of equal-length prompts; returns generated ids per
    sequence (EOS included where reached)."""
    if not prompts:
        return []
    lengths = {len(pr) for pr in prompts}
    if len(lengths) != 1:
        raise ValueError("batch_greedy_continue requires equal-length prompts")
    dec = IncrementalDecoder(params, list(visuals))
    prompt_len = lengths.pop()
    logits = None
    for j in range(prompt_len):
        logits = dec.feed_tokens([pr[j] for pr in prompts])
    outs: list[list[int]] = [[] for _ in prompts]
    done = np.zeros(len(prompts), dtype=bool)
    budget = min(max_new_tokens, dec.positions_left + 1)
    for _ in range(budget):
        nxt = logits.argmax(axis=1)
        for i in range(len(prompts)):
            if not done[i]:
                outs[i].append(int(nxt[i]))
                if nxt[i] == eos_id:
                    done[i] = True
        if done.all() or dec.positions_left == 0:
            break
        logits = dec.feed_tokens(nxt)
    return outs
