"""Objective values against independent per-position NLL oracles, plus
finite-difference gradient checks on a 2-layer config."""

import numpy as np
import pytest

from pseudovqa.losses import (
    Batch,
    CaptionExample,
    caption_batch,
    caption_loss,
    generator_loss,
    qa_batch,
    qa_loss,
    vqa_batch,
    vqa_loss,
)
from pseudovqa.data import LabeledExample
from pseudovqa.model import ModelConfig, VisualInput, forward, init_model
from pseudovqa.tensor import Tape
from pseudovqa.vocab import EOS, TokenSequence, Vocabulary
from conftest import max_rel_err

CFG = ModelConfig(vocab_size=21, d_model=16, n_layers=2, n_heads=2, d_ff=32,
                  max_seq_len=20, visual_dim=5, visual_prefix_len=2)
WORDS = ["what", "color", "is", "the", "region", "red", "blue", "green",
         "one", "two", "dim", "bright", "small", "big", "round"]


@pytest.fixture
def vocab():
    return Vocabulary(WORDS)


@pytest.fixture
def params():
    return init_model(CFG, seed=11, dtype=np.float64)


def make_visual(rng):
    return VisualInput(rng.uniform(-1, 1, size=(CFG.visual_prefix_len, CFG.visual_dim)))


def labeled(rng, vocab, q="what color is", a="red"):
    return LabeledExample(make_visual(rng), q, a, (a,))


def decomposition_oracle(params, visual, seq) -> tuple[float, int]:
    """Independent per-position NLL: raw forward logits, explicit exp/normalize
    per predicted position. Returns (total nll, positions counted)."""
    logits = forward(params, visual, list(seq.ids)).data
    total, count = 0.0, 0
    for t in range(len(seq.ids) - 1):
        if not seq.loss_mask[t + 1]:
            continue
        row = logits[t]
        e = np.exp(row - row.max())
        p = e / e.sum()
        total += -np.log(p[seq.ids[t + 1]])
        count += 1
    return total, count


class TestQALoss:
    def test_matches_decomposition_oracle(self, params, vocab, rng):
        examples = [labeled(rng, vocab, "what color is the region", "red"),
                    labeled(rng, vocab, "is the region dim", "blue"),
                    labeled(rng, vocab, "what color", "green")]
        batch = qa_batch(examples, vocab)
        got = qa_loss(params, batch).item()
        total, count = 0.0, 0
        for ex in examples:
            from pseudovqa.vocab import assemble_qa_sequence

            seq = assemble_qa_sequence(ex.question, ex.answer, vocab)
            t, c = decomposition_oracle(params, ex.visual, seq)
            total += t
            count += c
        assert abs(got - total / count) < 1e-10

    def test_uniform_head_gives_log_vocab(self, vocab, rng):
        params = init_model(CFG, seed=2, dtype=np.float64)
        params["head.w"].data[:] = 0.0
        batch = qa_batch([labeled(rng, vocab)], vocab)
        assert abs(qa_loss(params, batch).item() - np.log(CFG.vocab_size)) < 1e-12

    def test_single_masked_position_is_direct_nll(self, params, rng):
        ids = [2, 6, 7]
        seq = TokenSequence(ids, [False, True, False])
        visual = make_visual(rng)
        batch = Batch([visual], [seq])
        got = qa_loss(params, batch).item()
        logits = forward(params, visual, ids).data[0]
        e = np.exp(logits - logits.max())
        assert abs(got - (-np.log(e[ids[1]] / e.sum()))) < 1e-12

    def test_empty_batch_rejected(self, vocab):
        with pytest.raises(ValueError, match="empty batch"):
            Batch([], [])


class TestCaptionLoss:
    def test_single_token_caption_two_masked_positions(self, vocab, rng):
        batch = caption_batch([CaptionExample(make_visual(rng), "red")], vocab)
        assert batch.mask.sum() == 2  # token + EOS

    def test_invariant_to_batch_order(self, params, vocab, rng):
        exs = [CaptionExample(make_visual(rng), "the region is red"),
               CaptionExample(make_visual(rng), "blue and dim region")]
        a = caption_loss(params, caption_batch(exs, vocab)).item()
        b = caption_loss(params, caption_batch(exs[::-1], vocab)).item()
        assert abs(a - b) < 1e-12

    def test_matches_decomposition_oracle(self, params, vocab, rng):
        from pseudovqa.vocab import assemble_caption_sequence

        exs = [CaptionExample(make_visual(rng), "the region is red"),
               CaptionExample(make_visual(rng), "big bright region")]
        got = caption_loss(params, caption_batch(exs, vocab)).item()
        total, count = 0.0, 0
        for ex in exs:
            seq = assemble_caption_sequence(ex.caption, vocab)
            t, c = decomposition_oracle(params, ex.visual, seq)
            total += t
            count += c
        assert abs(got - total / count) < 1e-10


class TestVQALoss:
    def test_question_position_targets_never_scored(self, params, vocab, rng):
        # perturbing the *target labels* at masked-out (question) rows, with
        # inputs held fixed, leaves the loss bit-identical.
        from pseudovqa.losses import next_token_frame
        from pseudovqa.tensor import softmax_cross_entropy

        ex = labeled(rng, vocab, "what color is the region", "red")
        batch = vqa_batch([ex], vocab)
        logits, targets, mask = next_token_frame(params, batch)
        base = softmax_cross_entropy(logits, targets, mask).item()
        perturbed = targets.copy()
        for row in np.flatnonzero(~mask):
            perturbed[row] = (perturbed[row] + 3) % CFG.vocab_size
        again = softmax_cross_entropy(logits, perturbed, mask).item()
        assert base == again
        assert vqa_loss(params, batch).item() == base

    def test_single_token_answer_is_direct_nll(self, params, vocab, rng):
        ex = labeled(rng, vocab, "what color", "red")
        batch = vqa_batch([ex], vocab)
        got = vqa_loss(params, batch).item()
        from pseudovqa.vocab import assemble_vqa_sequence

        seq = assemble_vqa_sequence(ex.question, ex.answer, vocab)
        total, count = decomposition_oracle(params, ex.visual, seq)
        assert count == 2
        assert abs(got - total / count) < 1e-12

    def test_matches_decomposition_oracle(self, params, vocab, rng):
        from pseudovqa.vocab import assemble_vqa_sequence

        exs = [labeled(rng, vocab, "what color is", "red"),
               labeled(rng, vocab, "is the region big", "two")]
        got = vqa_loss(params, vqa_batch(exs, vocab)).item()
        total, count = 0.0, 0
        for ex in exs:
            seq = assemble_vqa_sequence(ex.question, ex.answer, vocab)
            t, c = decomposition_oracle(params, ex.visual, seq)
            total += t
            count += c
        assert abs(got - total / count) < 1e-10


class TestGeneratorLoss:
    def test_additivity_exact(self, params, vocab, rng):
        lb = qa_batch([labeled(rng, vocab)], vocab)
        cb = caption_batch([CaptionExample(make_visual(rng), "red region")], vocab)
        joint = generator_loss(params, lb, cb).item()
        separate = qa_loss(params, lb).item() + caption_loss(params, cb).item()
        assert abs(joint - separate) < 1e-12

    def test_gradient_is_sum_of_component_gradients_bit_exact(self, params, vocab, rng):
        lb = qa_batch([labeled(rng, vocab)], vocab)
        cb = caption_batch([CaptionExample(make_visual(rng), "red region")], vocab)

        params.zero_grad()
        with Tape() as tape:
            tape.backward(generator_loss(params, lb, cb))
        joint = {n: t.grad.copy() for n, t in params.items() if t.grad is not None}

        params.zero_grad()
        with Tape() as tape:
            tape.backward(qa_loss(params, lb))
        g_qa = {n: (t.grad.copy() if t.grad is not None else 0.0) for n, t in params.items()}
        params.zero_grad()
        with Tape() as tape:
            tape.backward(caption_loss(params, cb))
        g_cap = {n: (t.grad.copy() if t.grad is not None else 0.0) for n, t in params.items()}

        for name, g in joint.items():
            assert np.array_equal(g, g_qa[name] + g_cap[name]), name

    def test_caption_weight_scales(self, params, vocab, rng):
        lb = qa_batch([labeled(rng, vocab)], vocab)
        cb = caption_batch([CaptionExample(make_visual(rng), "red region")], vocab)
        half = generator_loss(params, lb, cb, caption_weight=0.5).item()
        expect = qa_loss(params, lb).item() + 0.5 * caption_loss(params, cb).item()
        assert abs(half - expect) < 1e-12


class TestLossRange:
    def test_all_losses_finite_and_non_negative(self, vocab, rng):
        for seed in range(5):
            params = init_model(CFG, seed=seed, dtype=np.float64)
            lb = qa_batch([labeled(rng, "what color is", "red")], vocab)
            cb = caption_batch([CaptionExample(make_visual(rng), "red dim region")], vocab)
            vb = vqa_batch([labeled(rng, "is the region big", "two")], vocab)
            for value in (qa_loss(params, lb).item(), caption_loss(params, cb).item(),
                          vqa_loss(params, vb).item(),
                          generator_loss(params, lb, cb).item()):
                assert np.isfinite(value)
                assert value >= 0.0


class TestFiniteDifferences:
    """Criterion-level FD checks: all four losses vs central differences on a
    sample of parameter coordinates of the 2-layer config."""

    N_COORDS = 30

    def _check(self, build_batch, loss_fn, vocab, rng):
        params = init_model(CFG, seed=17, dtype=np.float64)
        batch = build_batch()
        params.zero_grad()
        with Tape() as tape:
            tape.backward(loss_fn(params, batch))
        names = [n for n, t in params.items() if t.grad is not None]
        worst = 0.0
        for _ in range(self.N_COORDS):
            name = names[int(rng.integers(len(names)))]
            t = params[name]
            flat = t.data.reshape(-1)
            i = int(rng.integers(flat.size))
            h = 1e-5
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params, batch).item()
            flat[i] = orig - h
            fm = loss_fn(params, batch).item()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            analytic = t.grad.reshape(-1)[i]
            worst = max(worst, max_rel_err(np.array([analytic]), np.array([fd])))
        assert worst < 1e-4, f"worst relative error {worst:.3e}"

    def test_qa_loss_fd(self, vocab, rng):
        self._check(lambda: qa_batch([labeled(rng, vocab, "what color is", "red"),
                                      labeled(rng, vocab, "is the region dim", "two")], vocab),
                    qa_loss, vocab, rng)

    def test_caption_loss_fd(self, vocab, rng):
        self._check(lambda: caption_batch([CaptionExample(make_visual(rng), "red dim region"),
                                           CaptionExample(make_visual(rng), "one big region")], vocab),
                    caption_loss, vocab, rng)

    def test_vqa_loss_fd(self, vocab, rng):
        self._check(lambda: vqa_batch([labeled(rng, vocab, "what color is", "blue")], vocab),
                    vqa_loss, vocab, rng)

    def test_generator_loss_fd(self, vocab, rng):
        lb = qa_batch([labeled(rng, vocab)], vocab)
        cb = caption_batch([CaptionExample(make_visual(rng), "red region")], vocab)
        self._check(lambda: (lb, cb), lambda p, pair: generator_loss(p, pair[0], pair[1]),
                    vocab, rng)
