"""Procedural out-of-distribution visual-QA benchmark, oracle teacher
captioner, and a cached remote-captioner client.

Visuals are latent-attribute scenes pushed through a fixed seeded projection
(plus noise), not pixels. Two domains exist: "base" feeds the generic
pretraining caption corpus, "ood" is the target QA domain; their content
vocabularies are fully disjoint so the base model starts with no usable
knowledge of the target answers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledExample, UnlabeledExample
from .losses import CaptionExample
from .model import VisualInput

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# domain inventories
# --------------------------------------------------------------------------

OOD_OBJECTS = ("nodulex", "striccate", "varitex", "septurn",
               "fistulon", "papulex", "erosium", "polypode")
OOD_COLORS = ("crimson", "cobalt", "viridian", "amber", "ivory", "onyx")
OOD_ZONES = ("proximal", "distal", "lateral", "medial")
OOD_COUNTS = ("one", "two", "three", "four")
OOD_ANOMALY = ("unremarkable", "anomalous")  # index by bool(anomaly)

BASE_OBJECTS = ("cube", "sphere", "cone", "torus", "prism", "cylinder", "wedge", "disk")
BASE_COLORS = ("red", "blue", "green", "yellow", "black", "white")
BASE_ZONES = ("north", "south", "east", "west")
BASE_COUNTS = ("1", "2", "3", "4")
BASE_ANOMALY = ("regular", "irregular")

COUNT_VALUES = (1, 2, 3, 4)

OOD_CAPTION_FRAMES = (
    "the {zone} field shows {count} {color} {object} formations clearly visible and the region is {anom}",
    "{count} {color} {object} structures occupy the {zone} field with an {anom} appearance",
    "imaging of the {zone} field reveals {count} {object} forms of {color} tone overall {anom}",
)

BASE_CAPTION_FRAMES = (
    "the {zone} area holds {count} {color} {object} shapes and the layout is {anom}",
    "{count} {color} {object} items sit in the {zone} area with a {anom} layout",
    "a view of the {zone} area presents {count} {object} pieces in {color} paint {anom}",
)


@dataclass(frozen=True)
class QATemplate:
    key: str
    question: str
    category: str
    difficulty: str


QA_TEMPLATES = (
    QATemplate("color", "what color is the region", "color", "medium"),
    QATemplate("structure", "what structure is visible", "structure", "medium"),
    QATemplate("location", "where is the structure located", "location", "medium"),
    QATemplate("anomaly", "is the region anomalous", "anomaly", "easy"),
    QATemplate("count", "how many structures are visible", "count", "hard"),
)

TEMPLATE_BY_KEY = {t.key: t for t in QA_TEMPLATES}
TEMPLATE_BY_QUESTION = {t.question: t for t in QA_TEMPLATES}


def content_words(domain: str) -> set[str]:
    """Domain-specific content vocabulary (attribute values, state words, and
    domain nouns); the two domains must share none of these."""
    if domain == "ood":
        words = set(OOD_OBJECTS + OOD_COLORS + OOD_ZONES + OOD_COUNTS + OOD_ANOMALY)
        for frame in OOD_CAPTION_FRAMES:
            words.update(w for w in frame.split() if not w.startswith("{"))
        for t in QA_TEMPLATES:
            words.update(t.question.split())
        words.update(("yes", "no"))
    elif domain == "base":
        words = set(BASE_OBJECTS + BASE_COLORS + BASE_ZONES + BASE_COUNTS + BASE_ANOMALY)
        for frame in BASE_CAPTION_FRAMES:
            words.update(w for w in frame.split() if not w.startswith("{"))
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return words - FUNCTION_WORDS


FUNCTION_WORDS = {"the", "and", "is", "with", "a", "an", "of", "in"}


def build_vocabulary():
    """Deterministic word list covering every token the templates can emit."""
    from .vocab import Vocabulary

    words = set(FUNCTION_WORDS)
    words |= content_words("ood") | content_words("base")
    return Vocabulary(sorted(words))


# --------------------------------------------------------------------------
# scenes and their encoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scene:
    """Latent attributes behind one visual; ``instance`` separates otherwise
    identical scenes so every generated visual is unique."""

    object_class: str
    color: str
    count: int
    zone: str
    anomaly: bool
    domain: str  # "base" | "ood"
    instance: int

    def answer_for(self, template_key: str) -> str:
        if self.domain != "ood":
            raise ValueError("QA is defined on the ood domain only")
        if template_key == "color":
            return self.color
        if template_key == "structure":
            return self.object_class
        if template_key == "location":
            return self.zone
        if template_key == "anomaly":
            return "yes" if self.anomaly else "no"
        if template_key == "count":
            return OOD_COUNTS[self.count - 1]
        raise KeyError(template_key)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        return cls(**obj)


def _inventories(domain: str):
    if domain == "ood":
        return OOD_OBJECTS, OOD_COLORS, OOD_ZONES
    return BASE_OBJECTS, BASE_COLORS, BASE_ZONES


def random_scene(rng: np.random.Generator, domain: str, instance: int) -> Scene:
    objects, colors, zones = _inventories(domain)
    return Scene(
        object_class=objects[int(rng.integers(len(objects)))],
        color=colors[int(rng.integers(len(colors)))],
        count=int(rng.integers(1, 5)),
        zone=zones[int(rng.integers(len(zones)))],
        anomaly=bool(rng.integers(2)),
        domain=domain,
        instance=instance,
    )


_ONEHOT_DIM = len(OOD_OBJECTS) + len(OOD_COLORS) + len(COUNT_VALUES) + len(OOD_ZONES) + 2 + 2


class SceneEncoder:
    """Fixed random projection from one-hot scene attributes to visual
    features, plus per-instance additive noise of scale sigma."""

    def __init__(self, visual_prefix_len: int, visual_dim: int, seed: int, noise_sigma: float = 0.05):
        self.visual_prefix_len = visual_prefix_len
        self.visual_dim = visual_dim
        self.seed = seed
        self.noise_sigma = noise_sigma
        rng = np.random.default_rng([seed, 0xE27C0DE])
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(_ONEHOT_DIM),
                                size=(_ONEHOT_DIM, visual_prefix_len * visual_dim))

    def _onehot(self, scene: Scene) -> np.ndarray:
        objects, colors, zones = _inventories(scene.domain)
        vec = np.zeros(_ONEHOT_DIM)
        off = 0
        vec[off + objects.index(scene.object_class)] = 1.0
        off += len(objects)
        vec[off + colors.index(scene.color)] = 1.0
        off += len(colors)
        vec[off + scene.count - 1] = 1.0
        off += len(COUNT_VALUES)
        vec[off + zones.index(scene.zone)] = 1.0
        off += len(zones)
        vec[off + int(scene.anomaly)] = 1.0
        off += 2
        vec[off + (0 if scene.domain == "base" else 1)] = 1.0
        return vec

    def encode(self, scene: Scene) -> VisualInput:
        flat = self._onehot(scene) @ self._proj
        objects, colors, zones = _inventories(scene.domain)
        noise_rng = np.random.default_rng([
            self.seed, 1 if scene.domain == "ood" else 0, scene.instance,
            objects.index(scene.object_class), colors.index(scene.color),
            scene.count, zones.index(scene.zone), int(scene.anomaly),
        ])
        flat = flat + self.noise_sigma * noise_rng.normal(size=flat.shape)
        return VisualInput(flat.reshape(self.visual_prefix_len, self.visual_dim))


# --------------------------------------------------------------------------
# captions
# --------------------------------------------------------------------------


def _fill(frame: str, scene: Scene, counts, anomaly_words) -> str:
    return frame.format(
        zone=scene.zone,
        count=counts[scene.count - 1],
        color=scene.color,
        object=scene.object_class,
        anom=anomaly_words[int(scene.anomaly)],
    )


def oracle_caption(scene: Scene, style_seed: int, corruption_rate: float = 0.0) -> str:
    """Teacher caption for an OOD scene: enumerates every latent attribute in
    one of a few templated frames. ``corruption_rate`` flips one attribute word
    to a wrong value of the same kind, modeling teacher noise."""
    if scene.domain != "ood":
        raise ValueError("oracle captions are defined on the ood domain only")
    rng = np.random.default_rng([style_seed, scene.instance, 0x0CA7])
    scene_out = scene
    if corruption_rate > 0.0 and rng.random() < corruption_rate:
        slot = int(rng.integers(5))
        if slot == 0:
            wrong = [o for o in OOD_OBJECTS if o != scene.object_class]
            scene_out = Scene(wrong[int(rng.integers(len(wrong)))], scene.color, scene.count,
                              scene.zone, scene.anomaly, scene.domain, scene.instance)
        elif slot == 1:
            wrong = [c for c in OOD_COLORS if c != scene.color]
            scene_out = Scene(scene.object_class, wrong[int(rng.integers(len(wrong)))],
                              scene.count, scene.zone, scene.anomaly, scene.domain, scene.instance)
        elif slot == 2:
            wrong = [c for c in COUNT_VALUES if c != scene.count]
            scene_out = Scene(scene.object_class, scene.color, wrong[int(rng.integers(len(wrong)))],
                              scene.zone, scene.anomaly, scene.domain, scene.instance)
        elif slot == 3:
            wrong = [z for z in OOD_ZONES if z != scene.zone]
            scene_out = Scene(scene.object_class, scene.color, scene.count,
                              wrong[int(rng.integers(len(wrong)))], scene.anomaly,
                              scene.domain, scene.instance)
        else:
            scene_out = Scene(scene.object_class, scene.color, scene.count, scene.zone,
                              not scene.anomaly, scene.domain, scene.instance)
    frame = OOD_CAPTION_FRAMES[int(rng.integers(len(OOD_CAPTION_FRAMES)))]
    return _fill(frame, scene_out, OOD_COUNTS, OOD_ANOMALY)


def base_caption(scene: Scene, style_seed: int) -> str:
    if scene.domain != "base":
        raise ValueError("base captions are defined on the base domain only")
    rng = np.random.default_rng([style_seed, scene.instance, 0xBA5E])
    frame = BASE_CAPTION_FRAMES[int(rng.integers(len(BASE_CAPTION_FRAMES)))]
    return _fill(frame, scene, BASE_COUNTS, BASE_ANOMALY)


def extract_attributes(caption: str) -> dict:
    """Recover latent attributes from an OOD caption (the caption-sufficiency
    oracle): every attribute word class appears at most once per caption."""
    words = set(caption.split())
    out = {}
    for name, inventory in (("object_class", OOD_OBJECTS), ("color", OOD_COLORS),
                            ("zone", OOD_ZONES)):
        hit = words & set(inventory)
        out[name] = hit.pop() if len(hit) == 1 else None
    counts = words & set(OOD_COUNTS)
    out["count"] = COUNT_VALUES[OOD_COUNTS.index(counts.pop())] if len(counts) == 1 else None
    if "anomalous" in words and "unremarkable" not in words:
        out["anomaly"] = True
    elif "unremarkable" in words and "anomalous" not in words:
        out["anomaly"] = False
    else:
        out["anomaly"] = None
    return out


# --------------------------------------------------------------------------
# benchmark generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSpec:
    n_train_visuals: int = 2000
    label_fraction: float = 0.01
    n_test: int = 500
    questions_per_visual: int = 2
    n_pretrain_captions: int = 5000
    visual_prefix_len: int = 4
    visual_dim: int = 32
    noise_sigma: float = 0.05
    corruption_rate: float = 0.0
    content_seed: int = 11
    split_seed: int = 13
    encoder_seed: int = 17
    style_seed: int = 19

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "BenchmarkSpec":
        return cls(**obj)


@dataclass
class Benchmark:
    labeled: list[LabeledExample]
    unlabeled: list[UnlabeledExample]
    unlabeled_scenes: list[Scene]
    test: list[LabeledExample]
    option_catalog: dict[str, list[str]]
    full_labeled: list[LabeledExample]  # every training QA pair (fully supervised)


def make_encoder(spec: BenchmarkSpec) -> SceneEncoder:
    return SceneEncoder(spec.visual_prefix_len, spec.visual_dim, spec.encoder_seed,
                        spec.noise_sigma)


def generate_benchmark(spec: BenchmarkSpec) -> Benchmark:
    """Deterministic benchmark: OOD train/test scenes, QA for every visual,
    a label split over QA pairs, and per-template option catalogs."""
    if spec.n_train_visuals <= 0 or spec.n_test <= 0 or spec.questions_per_visual <= 0:
        raise ValueError("benchmark sizes must be positive")
    if not (0.0 < spec.label_fraction <= 1.0):
        raise ValueError(f"label_fraction must be in (0, 1], got {spec.label_fraction}")
    enc = make_encoder(spec)
    content = np.random.default_rng([spec.content_seed, 0xC0])
    train_scenes = [random_scene(content, "ood", i) for i in range(spec.n_train_visuals)]
    test_scenes = [random_scene(content, "ood", spec.n_train_visuals + j)
                   for j in range(spec.n_test)]

    keys = [t.key for t in QA_TEMPLATES]
    train_qa: list[tuple[int, str]] = []  # (scene index, template key)
    for i in range(spec.n_train_visuals):
        picked = content.choice(len(keys), size=spec.questions_per_visual, replace=False)
        train_qa.extend((i, keys[int(k)]) for k in picked)

    test_qa = [(j, keys[j % len(keys)]) for j in range(spec.n_test)]

    catalog: dict[str, set[str]] = {k: set() for k in keys}
    for i, key in train_qa:
        catalog[key].add(train_scenes[i].answer_for(key))
    for j, key in test_qa:
        catalog[key].add(test_scenes[j].answer_for(key))
    option_catalog = {k: sorted(v) for k, v in catalog.items()}

    n_pairs = len(train_qa)
    n_labeled = int(round(spec.label_fraction * n_pairs))
    if n_labeled < 1:
        raise ValueError(
            f"label_fraction {spec.label_fraction} yields zero labeled pairs out of {n_pairs}"
        )
    split = np.random.default_rng([spec.split_seed, 0x51])
    n_label_visuals = -(-n_labeled // spec.questions_per_visual)  # ceil
    labeled_visuals = sorted(
        int(i) for i in split.choice(spec.n_train_visuals, size=n_label_visuals, replace=False)
    )
    labeled_visual_set = set(labeled_visuals)

    train_visual_inputs = [enc.encode(s) for s in train_scenes]

    def example_of(scene, visual, key, split_name):
        t = TEMPLATE_BY_KEY[key]
        return LabeledExample(visual, t.question, scene.answer_for(key),
                              tuple(option_catalog[key]), split=split_name)

    labeled_pool = [(i, key) for i, key in train_qa if i in labeled_visual_set]
    labeled = [example_of(train_scenes[i], train_visual_inputs[i], key, "labeled")
               for i, key in labeled_pool[:n_labeled]]
    full_labeled = [example_of(train_scenes[i], train_visual_inputs[i], key, "labeled")
                    for i, key in train_qa]
    unlabeled_idx = [i for i in range(spec.n_train_visuals) if i not in labeled_visual_set]
    unlabeled = [UnlabeledExample(train_visual_inputs[i]) for i in unlabeled_idx]
    unlabeled_scenes = [train_scenes[i] for i in unlabeled_idx]
    test = [example_of(test_scenes[j], enc.encode(test_scenes[j]), key, "test")
            for j, key in test_qa]
    return Benchmark(labeled, unlabeled, unlabeled_scenes, test, option_catalog, full_labeled)


def generate_pretrain_corpus(spec: BenchmarkSpec) -> list[CaptionExample]:
    """Generic-domain caption corpus standing in for MLLM pretraining data."""
    enc = make_encoder(spec)
    content = np.random.default_rng([spec.content_seed, 0xBA])
    out = []
    for i in range(spec.n_pretrain_captions):
        scene = random_scene(content, "base", i)
        out.append(CaptionExample(enc.encode(scene), base_caption(scene, spec.style_seed)))
    return out


def teacher_captions(spec: BenchmarkSpec, scenes: list[Scene]) -> list[CaptionExample]:
    """Oracle-teacher captions for the unlabeled OOD scenes."""
    enc = make_encoder(spec)
    return [CaptionExample(enc.encode(s), oracle_caption(s, spec.style_seed, spec.corruption_rate))
            for s in scenes]


# --------------------------------------------------------------------------
# remote captioner (chat-completion style endpoint, disk-cached)
# --------------------------------------------------------------------------


class TransportError(RuntimeError):
    """The endpoint could not be reached (after retries) or returned non-200."""


class ProtocolError(RuntimeError):
    """The endpoint answered with a body we cannot interpret."""


def _default_transport(url: str, payload: dict, headers: dict, timeout: float):
    import requests

    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    return resp.status_code, resp.text


def _cache_key(endpoint: str, request: dict) -> str:
    canonical = json.dumps({"endpoint": endpoint, "request": request}, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def remote_caption(endpoint: str, image_payload, prompt: str, *, cache_dir,
                   auth_env: str = "CAPTION_API_TOKEN", transport=None,
                   max_attempts: int = 3, backoff_s: float = 0.5,
                   timeout_s: float = 30.0, sleep=time.sleep) -> str:
    """Fetch a caption from a chat-completion-style HTTP endpoint.

    Responses are cached on disk keyed by content hash, so repeated runs are
    offline-reproducible; a cache hit issues no network call. Retries with
    exponential backoff, then raises TransportError.
    """
    request = {
        "messages": [{"role": "user", "content": prompt}],
        "image": image_payload,
    }
    os.makedirs(cache_dir, exist_ok=True)
    cache_path = os.path.join(cache_dir, _cache_key(endpoint, request) + ".json")
    if os.path.exists(cache_path):
        with open(cache_path, "r", encoding="utf-8") as fh:
            return json.load(fh)["caption"]

    if transport is None:
        transport = _default_transport
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(auth_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_error = None
    body = None
    for attempt in range(max_attempts):
        try:
            status, body = transport(endpoint, request, headers, timeout_s)
        except Exception as exc:  # connection-level failure
            last_error = f"transport exception: {exc}"
            status = None
        if status == 200:
            break
        if status is not None:
            last_error = f"HTTP {status}"
        if attempt < max_attempts - 1:
            sleep(backoff_s * (2**attempt))
    else:
        raise TransportError(f"captioner unreachable after {max_attempts} attempts ({last_error})")

    try:
        parsed = json.loads(body)
        caption = parsed["choices"][0]["message"]["content"]
        if not isinstance(caption, str):
            raise TypeError("caption is not a string")
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed captioner response: {exc}") from exc

    from filelock import FileLock

    with FileLock(cache_path + ".lock"):
        tmp = cache_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"request": request, "caption": caption}, fh, sort_keys=True)
        os.replace(tmp, cache_path)
    return caption
