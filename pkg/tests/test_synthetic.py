"""Benchmark generation, captioner oracles, vocabulary coverage, and the
remote captioner client."""

import json

import numpy as np
import pytest

from pseudovqa.data import UnlabeledExample
from pseudovqa.synthetic import (
    OOD_COUNTS,
    QA_TEMPLATES,
    TEMPLATE_BY_QUESTION,
    Benchmark,
    BenchmarkSpec,
    ProtocolError,
    Scene,
    SceneEncoder,
    TransportError,
    base_caption,
    build_vocabulary,
    content_words,
    extract_attributes,
    generate_benchmark,
    generate_pretrain_corpus,
    make_encoder,
    oracle_caption,
    random_scene,
    remote_caption,
    teacher_captions,
)
from pseudovqa.vocab import UNK

SPEC = BenchmarkSpec(n_train_visuals=120, label_fraction=0.05, n_test=40,
                     questions_per_visual=2, n_pretrain_captions=60,
                     visual_prefix_len=2, visual_dim=8)


@pytest.fixture(scope="module")
def bench():
    return generate_benchmark(SPEC)


class TestDomainSeparation:
    def test_content_vocabularies_disjoint(self):
        assert content_words("ood") & content_words("base") == set()

    def test_vocabulary_covers_all_template_words(self, bench):
        vocab = build_vocabulary()
        for ex in bench.full_labeled + bench.test:
            assert UNK not in vocab.encode(ex.question), ex.question
            assert UNK not in vocab.encode(ex.answer), ex.answer
        corpus = generate_pretrain_corpus(SPEC)
        for ex in corpus:
            assert UNK not in vocab.encode(ex.caption), ex.caption
        for cap in teacher_captions(SPEC, bench.unlabeled_scenes):
            assert UNK not in vocab.encode(cap.caption), cap.caption


class TestSceneEncoder:
    def test_deterministic(self):
        enc = SceneEncoder(2, 8, seed=17)
        s = Scene("nodulex", "amber", 2, "distal", True, "ood", 5)
        assert enc.encode(s) == enc.encode(s)

    def test_encoder_seed_changes_features(self):
        s = Scene("nodulex", "amber", 2, "distal", True, "ood", 5)
        a = SceneEncoder(2, 8, seed=17).encode(s)
        b = SceneEncoder(2, 8, seed=18).encode(s)
        assert a != b

    def test_distinct_instances_distinct_visuals(self):
        enc = SceneEncoder(2, 8, seed=17)
        a = Scene("nodulex", "amber", 2, "distal", True, "ood", 1)
        b = Scene("nodulex", "amber", 2, "distal", True, "ood", 2)
        assert enc.encode(a) != enc.encode(b)

    def test_shape(self):
        enc = SceneEncoder(3, 5, seed=1)
        v = enc.encode(Scene("cube", "red", 1, "north", False, "base", 0))
        assert v.features.shape == (3, 5)


class TestBenchmark:
    def test_labeled_pair_arithmetic(self):
        spec = BenchmarkSpec(n_train_visuals=1000, label_fraction=0.01, n_test=10,
                             questions_per_visual=2, n_pretrain_captions=10,
                             visual_prefix_len=2, visual_dim=8)
        b = generate_benchmark(spec)
        assert len(b.labeled) == 20
        assert len(b.full_labeled) == 2000

    def test_deterministic_regeneration(self, bench):
        again = generate_benchmark(SPEC)
        assert again.labeled == bench.labeled
        assert again.unlabeled == bench.unlabeled
        assert again.test == bench.test
        assert again.option_catalog == bench.option_catalog

    def test_counting_options_exactly_four_words(self, bench):
        assert bench.option_catalog["count"] == sorted(OOD_COUNTS)

    def test_answer_options_attached_per_template(self, bench):
        for ex in bench.labeled + bench.test:
            key = TEMPLATE_BY_QUESTION[ex.question].key
            assert list(ex.answer_options) == bench.option_catalog[key]
            assert ex.answer in ex.answer_options

    def test_visual_disjointness(self, bench):
        labeled = {ex.visual for ex in bench.labeled}
        unlabeled = {ex.visual for ex in bench.unlabeled}
        test = {ex.visual for ex in bench.test}
        assert labeled & unlabeled == set()
        assert labeled & test == set()
        assert unlabeled & test == set()

    def test_unlabeled_carry_no_text(self, bench):
        assert all(isinstance(ex, UnlabeledExample) for ex in bench.unlabeled)

    def test_zero_labeled_rejected(self):
        spec = BenchmarkSpec(n_train_visuals=10, label_fraction=0.001, n_test=5,
                             questions_per_visual=2, visual_prefix_len=2, visual_dim=8)
        with pytest.raises(ValueError, match="zero labeled"):
            generate_benchmark(spec)

    def test_full_supervision_variant(self):
        spec = BenchmarkSpec(n_train_visuals=50, label_fraction=1.0, n_test=10,
                             questions_per_visual=2, visual_prefix_len=2, visual_dim=8)
        b = generate_benchmark(spec)
        assert len(b.labeled) == 100
        assert b.unlabeled == []

    def test_scene_json_round_trip(self):
        s = Scene("nodulex", "amber", 2, "distal", True, "ood", 5)
        assert Scene.from_json(json.loads(json.dumps(s.to_json()))) == s


class TestOracleCaption:
    def test_mentions_true_attributes_without_corruption(self):
        rng = np.random.default_rng(3)
        for i in range(50):
            scene = random_scene(rng, "ood", i)
            caption = oracle_caption(scene, style_seed=19, corruption_rate=0.0)
            words = set(caption.split())
            assert scene.color in words
            assert scene.object_class in words
            assert scene.zone in words
            assert OOD_COUNTS[scene.count - 1] in words

    def test_deterministic(self):
        s = Scene("varitex", "onyx", 3, "medial", False, "ood", 9)
        assert oracle_caption(s, 19) == oracle_caption(s, 19)

    def test_base_scene_rejected(self):
        s = Scene("cube", "red", 1, "north", False, "base", 0)
        with pytest.raises(ValueError, match="ood"):
            oracle_caption(s, 19)

    def test_extraction_oracle_recovers_all_attributes(self, bench):
        for scene, cap in zip(bench.unlabeled_scenes, teacher_captions(SPEC, bench.unlabeled_scenes)):
            attrs = extract_attributes(cap.caption)
            assert attrs["object_class"] == scene.object_class
            assert attrs["color"] == scene.color
            assert attrs["zone"] == scene.zone
            assert attrs["count"] == scene.count
            assert attrs["anomaly"] == scene.anomaly

    def test_corruption_changes_some_captions(self):
        rng = np.random.default_rng(5)
        scenes = [random_scene(rng, "ood", i) for i in range(80)]
        clean = [oracle_caption(s, 19, 0.0) for s in scenes]
        noisy = [oracle_caption(s, 19, 1.0) for s in scenes]
        assert any(c != n for c, n in zip(clean, noisy))

    def test_answerable_from_caption_matches_qa(self, bench):
        # every template question about a captioned scene is answerable from
        # the caption text alone
        for scene, cap in zip(bench.unlabeled_scenes[:50],
                              teacher_captions(SPEC, bench.unlabeled_scenes[:50])):
            attrs = extract_attributes(cap.caption)
            for t in QA_TEMPLATES:
                want = scene.answer_for(t.key)
                if t.key == "anomaly":
                    got = "yes" if attrs["anomaly"] else "no"
                elif t.key == "count":
                    got = OOD_COUNTS[attrs["count"] - 1]
                elif t.key == "color":
                    got = attrs["color"]
                elif t.key == "structure":
                    got = attrs["object_class"]
                else:
                    got = attrs["zone"]
                assert got == want

    def test_base_caption_uses_base_words_only(self):
        rng = np.random.default_rng(4)
        ood_words = content_words("ood")
        for i in range(50):
            scene = random_scene(rng, "base", i)
            for w in base_caption(scene, 19).split():
                assert w not in ood_words


class FakeTransport:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def __call__(self, url, payload, headers, timeout):
        self.calls += 1
        status, body = self.responses[min(self.calls - 1, len(self.responses) - 1)]
        return status, body


def chat_body(caption: str) -> str:
    return json.dumps({"choices": [{"message": {"content": caption}}]})


class TestRemoteCaption:
    ENDPOINT = "http://captioner.invalid/v1/chat"

    def test_fixture_replay_byte_exact(self, tmp_path):
        transport = FakeTransport([(200, chat_body("a crimson nodulex in the distal field"))])
        got = remote_caption(self.ENDPOINT, [[0.0, 1.0]], "describe", cache_dir=tmp_path,
                             transport=transport, sleep=lambda s: None)
        assert got == "a crimson nodulex in the distal field"
        assert transport.calls == 1

    def test_cache_hit_issues_no_network_call(self, tmp_path):
        transport = FakeTransport([(200, chat_body("cached caption"))])
        first = remote_caption(self.ENDPOINT, [[0.5]], "describe", cache_dir=tmp_path,
                               transport=transport, sleep=lambda s: None)
        recorder = FakeTransport([(200, chat_body("never served"))])
        second = remote_caption(self.ENDPOINT, [[0.5]], "describe", cache_dir=tmp_path,
                                transport=recorder, sleep=lambda s: None)
        assert first == second == "cached caption"
        assert recorder.calls == 0

    def test_500_gives_transport_error_after_exactly_three_attempts(self, tmp_path):
        transport = FakeTransport([(500, "boom")])
        with pytest.raises(TransportError, match="3 attempts"):
            remote_caption(self.ENDPOINT, [[1.0]], "describe", cache_dir=tmp_path,
                           transport=transport, sleep=lambda s: None)
        assert transport.calls == 3

    def test_malformed_body_is_protocol_error(self, tmp_path):
        transport = FakeTransport([(200, json.dumps({"nope": 1}))])
        with pytest.raises(ProtocolError):
            remote_caption(self.ENDPOINT, [[1.0]], "describe", cache_dir=tmp_path,
                           transport=transport, sleep=lambda s: None)

    def test_recovers_after_transient_failure(self, tmp_path):
        transport = FakeTransport([(500, "boom"), (200, chat_body("late caption"))])
        got = remote_caption(self.ENDPOINT, [[2.0]], "describe", cache_dir=tmp_path,
                             transport=transport, sleep=lambda s: None)
        assert got == "late caption"
        assert transport.calls == 2
