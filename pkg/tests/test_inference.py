"""The KV-cached incremental decoder must agree with the training forward."""

import numpy as np
import pytest

from pseudovqa.inference import IncrementalDecoder, batch_greedy_continue
from pseudovqa.generation import greedy_decode
from pseudovqa.model import ModelConfig, VisualInput, forward, init_model
from pseudovqa.vocab import BOS, EOS

CFG = ModelConfig(vocab_size=17, d_model=16, n_layers=2, n_heads=2, d_ff=32,
                  max_seq_len=20, visual_dim=5, visual_prefix_len=2)


@pytest.fixture
def params():
    return init_model(CFG, seed=9, dtype=np.float64)


def make_visual(rng):
    return VisualInput(rng.uniform(-1, 1, size=(CFG.visual_prefix_len, CFG.visual_dim)))


class TestIncrementalDecoder:
    def test_logits_match_full_forward(self, params, rng):
        v = make_visual(rng)
        ids = [BOS, 6, 7, 8, 9]
        full = forward(params, v, ids).data
        dec = IncrementalDecoder(params, [v])
        step_logits = [dec.feed_tokens([t])[0] for t in ids]
        for t, row in enumerate(step_logits):
            assert np.allclose(row, full[t], atol=1e-9), f"position {t}"

    def test_batched_rows_match_singletons(self, params, rng):
        v1, v2 = make_visual(rng), make_visual(rng)
        dec = IncrementalDecoder(params, [v1, v2])
        both = dec.feed_tokens([BOS, BOS])
        a = IncrementalDecoder(params, [v1]).feed_tokens([BOS])[0]
        b = IncrementalDecoder(params, [v2]).feed_tokens([BOS])[0]
        assert np.allclose(both[0], a, atol=1e-12)
        assert np.allclose(both[1], b, atol=1e-12)

    def test_length_exhaustion_raises(self, params, rng):
        dec = IncrementalDecoder(params, [make_visual(rng)])
        for _ in range(dec.positions_left):
            dec.feed_tokens([6])
        with pytest.raises(ValueError, match="max_seq_len"):
            dec.feed_tokens([6])


class TestBatchGreedy:
    def test_matches_serial_greedy(self, params, rng):
        visuals = [make_visual(rng) for _ in range(5)]
        prompt = [BOS, 6, 7]
        outs = batch_greedy_continue(params, visuals, [prompt] * 5, 8, EOS)
        for v, got in zip(visuals, outs):
            assert got == greedy_decode(params, v, prompt, 8)

    def test_unequal_prompts_rejected(self, params, rng):
        with pytest.raises(ValueError, match="equal-length"):
            batch_greedy_continue(params, [make_visual(rng)] * 2,
                                  [[BOS], [BOS, 6]], 4, EOS)

    def test_deterministic(self, params, rng):
        visuals = [make_visual(rng) for _ in range(3)]
        a = batch_greedy_continue(params, visuals, [[BOS]] * 3, 6, EOS)
        b = batch_greedy_continue(params, visuals, [[BOS]] * 3, 6, EOS)
        assert a == b
