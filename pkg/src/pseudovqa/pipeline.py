"""Stage orchestration: data generation, pretraining, importance scoring,
generator training, pseudo-QA synthesis, VQA fine-tuning, evaluation, and the
method/ablation matrix.

Stages communicate through files only, so any stage can be deleted and rerun
reproducibly. Deterministic records go to ``metrics.jsonl``; wall-clock
timings live in a separate ``timings.jsonl`` so the metrics stream is
bit-reproducible across identical runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import read_dataset, write_dataset
from .generation import DecodeConfig, greedy_decode, synthesize_pseudo_dataset
from .losses import (
    CaptionExample,
    caption_batch,
    caption_loss,
    generator_loss,
    qa_batch,
    qa_loss,
    vqa_batch,
    vqa_loss,
)
from .model import (
    ModelConfig,
    ParameterStore,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .selection import (
    OptimizerState,
    UpdateMask,
    accumulate_scores,
    build_mask,
    load_mask,
    load_scores,
    masked_step,
    save_mask,
    save_scores,
    selection_report,
)
from .synthetic import (
    TEMPLATE_BY_QUESTION,
    BenchmarkSpec,
    Scene,
    build_vocabulary,
    generate_benchmark,
    generate_pretrain_corpus,
    teacher_captions,
)
from .tensor import Tape
from .vocab import A_OPEN, BOS, EOS, Vocabulary

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """The run configuration is invalid."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and step."""

    def __init__(self, stage: str, message: str, step: int | None = None):
        where = f"{stage}" + (f" step {step}" if step is not None else "")
        super().__init__(f"[{where}] {message}")
        self.stage = stage
        self.step = step


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    out_dir: str = "runs/default"
    master_seed: int = 1

    pretrain_steps: int = 500
    pretrain_lr: float = 3e-3
    gen_steps: int = 400
    gen_lr: float = 1e-3
    finetune_steps: int = 600
    finetune_lr: float = 1e-3
    batch_size: int = 16
    optimizer_rule: str = "adamw"
    weight_decay: float = 0.01

    # 64 of 128 coordinates per neuron: masked generator training has to keep
    # enough capacity to learn the QA format while staying knowledge-focused
    k_select: int = 64
    # "mean-abs-gradient" is a non-published comparison knob; the method rule
    # is the magnitude of the mean gradient
    score_mode: str = "mean-gradient"
    use_distill: bool = True
    use_selection: bool = True
    caption_weight: float = 1.0

    synth: DecodeConfig = field(default_factory=lambda: DecodeConfig(mode="nucleus"))
    eval_max_new_tokens: int = 6
    matrix_seeds: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if self.model.visual_prefix_len != self.benchmark.visual_prefix_len \
                or self.model.visual_dim != self.benchmark.visual_dim:
            raise ConfigError(
                "model and benchmark disagree on visual feature geometry: "
                f"model ({self.model.visual_prefix_len}, {self.model.visual_dim}) vs "
                f"benchmark ({self.benchmark.visual_prefix_len}, {self.benchmark.visual_dim})"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["matrix_seeds"] = list(self.matrix_seeds)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        obj["model"] = ModelConfig.from_json(obj["model"])
        obj["benchmark"] = BenchmarkSpec.from_json(obj["benchmark"])
        obj["synth"] = DecodeConfig.from_json(obj["synth"])
        obj["matrix_seeds"] = tuple(obj.get("matrix_seeds", (1, 2, 3)))
        return cls(**obj)

    def config_hash(self) -> str:
        """Hash of the semantic configuration (output location excluded), used
        to stamp every artifact this run produces."""
        obj = self.to_json()
        obj.pop("out_dir")
        canon = json.dumps(obj, sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def default_run_config(out_dir: str = "runs/default", master_seed: int = 1, **overrides) -> RunConfig:
    """Desk-scale defaults; the vocabulary is closed, so vocab_size is known up front."""
    vocab_size = len(build_vocabulary())
    model = ModelConfig(vocab_size=vocab_size)
    return RunConfig(model=model, out_dir=out_dir, master_seed=master_seed, **overrides)


# --------------------------------------------------------------------------
# file layout and small IO helpers
# --------------------------------------------------------------------------


class RunPaths:
    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.benchmark = self.root / "benchmark"
        self.vocab = self.benchmark / "vocab.json"
        self.labeled = self.benchmark / "labeled.jsonl"
        self.unlabeled = self.benchmark / "unlabeled.jsonl"
        self.full_labeled = self.benchmark / "full_labeled.jsonl"
        self.test = self.benchmark / "test.jsonl"
        self.scenes = self.benchmark / "scenes_unlabeled.jsonl"
        self.options = self.benchmark / "options.json"
        self.pretrain_captions = self.benchmark / "pretrain_captions.jsonl"
        self.teacher_captions = self.root / "captions" / "teacher.jsonl"
        self.base_ckpt = self.root / "checkpoints" / "base.ckpt"
        self.scores = self.root / "generator" / "scores.tns"
        self.mask = self.root / "generator" / "mask.tns"
        self.generator_ckpt = self.root / "generator" / "generator.ckpt"
        self.selection_report = self.root / "generator" / "selection_report.json"
        self.pseudo = self.root / "pseudo" / "pseudo.jsonl"
        self.synthesis_report = self.root / "pseudo" / "synthesis_report.json"
        self.vqa_ckpt = self.root / "vqa" / "vqa.ckpt"
        self.eval_report = self.root / "eval" / "eval_report.json"
        self.metrics = self.root / "metrics.jsonl"
        self.timings = self.root / "timings.jsonl"


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_captions(path, captions: list[CaptionExample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in captions:
            fh.write(json.dumps({"visual": ex.visual.features.tolist(),
                                 "caption": ex.caption}, sort_keys=True))
            fh.write("\n")


def read_captions(path) -> list[CaptionExample]:
    from .model import VisualInput

    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append(CaptionExample(VisualInput(row["visual"]), row["caption"]))
    return out


def write_scenes(path, scenes: list[Scene]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_json(), sort_keys=True))
            fh.write("\n")


def read_scenes(path) -> list[Scene]:
    with open(path, "r", encoding="utf-8") as fh:
        return [Scene.from_json(json.loads(line)) for line in fh if line.strip()]


class MetricsWriter:
    """Append-only JSON Lines; deterministic stream plus a timing sidecar."""

    def __init__(self, metrics_path, timings_path, config_hash: str):
        self.metrics_path = Path(metrics_path)
        self.timings_path = Path(timings_path)
        self.config_hash = config_hash
        self.metrics_path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, stage: str, step: int, **fields) -> None:
        row = {"stage": stage, "step": step, "config_hash": self.config_hash, **fields}
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")

    def time(self, stage: str, seconds: float) -> None:
        with open(self.timings_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"stage": stage, "wall_s": seconds,
                                 "config_hash": self.config_hash}, sort_keys=True))
            fh.write("\n")


def _metrics(cfg: RunConfig) -> MetricsWriter:
    paths = RunPaths(cfg.out_dir)
    return MetricsWriter(paths.metrics, paths.timings, cfg.config_hash())


# --------------------------------------------------------------------------
# training loop core
# --------------------------------------------------------------------------

_STAGE_SALT = {"pretrain": 0xA1, "train-gen": 0xA2, "finetune": 0xA3}


def _stage_rng(cfg: RunConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng([cfg.master_seed, _STAGE_SALT[stage]])


def _train(cfg: RunConfig, stage: str, params: ParameterStore, mask: UpdateMask,
           steps: int, lr: float, loss_fn, metrics: MetricsWriter, log_every: int = 50):
    """Shared loop: loss_fn(step, rng) -> scalar loss tensor."""
    opt = OptimizerState.create(params, mask, lr=lr, total_steps=steps,
                                rule=cfg.optimizer_rule, weight_decay=cfg.weight_decay)
    rng = _stage_rng(cfg, stage)
    t0 = time.perf_counter()
    first = last = None
    for step in range(steps):
        with Tape() as tape:
            loss = loss_fn(step, rng)
            tape.backward(loss)
        value = loss.item()
        if not math.isfinite(value):
            raise StageError(stage, f"loss diverged to {value}", step=step)
        masked_step(params, mask, opt)
        params.zero_grad()
        if first is None:
            first = value
        last = value
        if step % log_every == 0 or step == steps - 1:
            metrics.log(stage=stage, step=step, loss=value)
    metrics.time(stage, time.perf_counter() - t0)
    return first, last


def _sample(rng: np.random.Generator, pool: list, size: int) -> list:
    idx = rng.integers(0, len(pool), size=min(size, len(pool)))
    return [pool[int(i)] for i in idx]


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def stage_gen_data(cfg: RunConfig) -> None:
    """Generate the benchmark: vocabulary, splits, options, scenes, pretrain corpus."""
    paths = RunPaths(cfg.out_dir)
    vocab = build_vocabulary()
    if cfg.model.vocab_size != len(vocab):
        raise ConfigError(
            f"model vocab_size {cfg.model.vocab_size} != template vocabulary {len(vocab)}"
        )
    bench = generate_benchmark(cfg.benchmark)
    paths.benchmark.mkdir(parents=True, exist_ok=True)
    write_json(paths.vocab, vocab.to_json())
    write_dataset(paths.labeled, bench.labeled)
    write_dataset(paths.unlabeled, bench.unlabeled)
    write_dataset(paths.full_labeled, bench.full_labeled)
    write_dataset(paths.test, bench.test)
    write_scenes(paths.scenes, bench.unlabeled_scenes)
    write_json(paths.options, {"catalog": bench.option_catalog,
                               "config_hash": cfg.config_hash()})
    write_captions(paths.pretrain_captions, generate_pretrain_corpus(cfg.benchmark))
    log.info("benchmark written to %s (%d labeled / %d unlabeled / %d test)",
             paths.benchmark, len(bench.labeled), len(bench.unlabeled), len(bench.test))


def load_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary.from_json(read_json(RunPaths(cfg.out_dir).vocab))


def stage_caption(cfg: RunConfig) -> None:
    """Produce teacher captions for the unlabeled scenes (oracle teacher)."""
    paths = RunPaths(cfg.out_dir)
    scenes = read_scenes(paths.scenes)
    write_captions(paths.teacher_captions, teacher_captions(cfg.benchmark, scenes))
    log.info("teacher captions written for %d unlabeled visuals", len(scenes))


def stage_pretrain(cfg: RunConfig) -> Path:
    """Train every parameter on the generic caption corpus; the resulting base
    checkpoint seeds both the generator and the VQA model."""
    paths = RunPaths(cfg.out_dir)
    vocab = load_vocab(cfg)
    corpus = read_captions(paths.pretrain_captions)
    params = init_model(cfg.model, seed=cfg.master_seed)
    metrics = _metrics(cfg)
    max_len = cfg.model.max_text_len

    def loss_fn(step, rng):
        batch = caption_batch(_sample(rng, corpus, cfg.batch_size), vocab, max_len)
        return caption_loss(params, batch)

    if cfg.pretrain_steps > 0:
        first, last = _train(cfg, "pretrain", params, UpdateMask.dense(params),
                             cfg.pretrain_steps, cfg.pretrain_lr, loss_fn, metrics)
        log.info("pretrain loss %.4f -> %.4f over %d steps", first, last, cfg.pretrain_steps)
    paths.base_ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(paths.base_ckpt, params, {"config_hash": cfg.config_hash()})
    return paths.base_ckpt


def stage_score(cfg: RunConfig) -> Path:
    """Importance scores of the QA loss at the generator's initialization."""
    paths = RunPaths(cfg.out_dir)
    vocab = load_vocab(cfg)
    params = load_checkpoint(paths.base_ckpt)
    labeled = read_dataset(paths.labeled)
    scores = accumulate_scores(params, labeled, vocab, mode=cfg.score_mode)
    paths.scores.parent.mkdir(parents=True, exist_ok=True)
    save_scores(paths.scores, scores, {"config_hash": cfg.config_hash()})
    return paths.scores


class RecordingSource:
    """Batch source wrapper that counts requests (test/audit hook)."""

    def __init__(self, pool):
        self.pool = pool
        self.requests = 0

    def sample(self, rng, size):
        self.requests += 1
        return _sample(rng, self.pool, size)


def stage_train_gen(cfg: RunConfig, caption_source: RecordingSource | None = None) -> Path:
    """Train the QA generator from the base checkpoint.

    With selection on, updates are restricted to the top-K scored coordinates
    per neuron (all other tensors frozen); with distillation on, the objective
    adds teacher-caption NLL over unlabeled visuals.
    """
    paths = RunPaths(cfg.out_dir)
    vocab = load_vocab(cfg)
    params = load_checkpoint(paths.base_ckpt)
    labeled = read_dataset(paths.labeled)
    if not labeled:
        raise StageError("train-gen", "labeled set is empty")
    metrics = _metrics(cfg)
    max_len = cfg.model.max_text_len

    if cfg.use_selection:
        scores = load_scores(paths.scores)
        mask = build_mask(params, scores, cfg.k_select)
        save_mask(paths.mask, mask, {"config_hash": cfg.config_hash()})
        write_json(paths.selection_report, selection_report(params, scores, mask))
    else:
        mask = UpdateMask.dense(params)

    labeled_source = RecordingSource(labeled)
    if cfg.use_distill:
        if caption_source is None:
            caption_source = RecordingSource(read_captions(paths.teacher_captions))

        def loss_fn(step, rng):
            lb = qa_batch(labeled_source.sample(rng, cfg.batch_size), vocab, max_len)
            cb = caption_batch(caption_source.sample(rng, cfg.batch_size), vocab, max_len)
            return generator_loss(params, lb, cb, cfg.caption_weight)
    else:

        def loss_fn(step, rng):
            lb = qa_batch(labeled_source.sample(rng, cfg.batch_size), vocab, max_len)
            return qa_loss(params, lb)

    first, last = _train(cfg, "train-gen", params, mask, cfg.gen_steps, cfg.gen_lr,
                         loss_fn, metrics)
    log.info("generator loss %.4f -> %.4f (distill=%s selection=%s)",
             first, last, cfg.use_distill, cfg.use_selection)
    paths.generator_ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(paths.generator_ckpt, params, {"config_hash": cfg.config_hash()})
    return paths.generator_ckpt


def stage_synth(cfg: RunConfig) -> Path:
    """Sample pseudo QA pairs for the unlabeled visuals from the generator."""
    paths = RunPaths(cfg.out_dir)
    vocab = load_vocab(cfg)
    params = load_checkpoint(paths.generator_ckpt)
    unlabeled = read_dataset(paths.unlabeled)
    run_id = f"gen-{cfg.config_hash()}-s{cfg.master_seed}"
    pseudo, report = synthesize_pseudo_dataset(params, unlabeled, cfg.synth, vocab, run_id)
    paths.pseudo.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(paths.pseudo, pseudo)
    report["config_hash"] = cfg.config_hash()
    write_json(paths.synthesis_report, report)
    log.info("synthesized %d pseudo pairs (failure rate %.2f, dedup rate %.2f)",
             report["emitted"], report["parse_failure_rate"], report["dedup_rate"])
    return paths.pseudo


def stage_finetune(cfg: RunConfig, labeled_path=None, use_pseudo: bool = True) -> Path:
    """Fine-tune ALL parameters of a fresh copy of the base checkpoint on
    labeled + pseudo data (the pseudo set may be empty or absent)."""
    paths = RunPaths(cfg.out_dir)
    vocab = load_vocab(cfg)
    params = load_checkpoint(paths.base_ckpt)
    pool = list(read_dataset(labeled_path or paths.labeled))
    n_labeled = len(pool)
    if use_pseudo and paths.pseudo.exists():
        pool += read_dataset(paths.pseudo)
    if not pool:
        raise StageError("finetune", "no training examples")
    metrics = _metrics(cfg)
    max_len = cfg.model.max_text_len

    def loss_fn(step, rng):
        return vqa_loss(params, vqa_batch(_sample(rng, pool, cfg.batch_size), vocab, max_len))

    first, last = _train(cfg, "finetune", params, UpdateMask.dense(params),
                         cfg.finetune_steps, cfg.finetune_lr, loss_fn, metrics)
    log.info("vqa fine-tune loss %.4f -> %.4f on %d examples (%d labeled, %d pseudo)",
             first, last, len(pool), n_labeled, len(pool) - n_labeled)
    paths.vqa_ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(paths.vqa_ckpt, params, {"config_hash": cfg.config_hash()})
    return paths.vqa_ckpt


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _normalize(text: str) -> str:
    return " ".join(text.split())


def decode_answer(params: ParameterStore, vocab: Vocabulary, ex, max_new_tokens: int) -> str:
    prompt = [BOS] + vocab.encode(ex.question) + [A_OPEN]
    out = greedy_decode(params, ex.visual, prompt, max_new_tokens)
    if out and out[-1] == EOS:
        out = out[:-1]
    return _normalize(vocab.decode(out))


EVAL_CHUNK = 64


def decode_answers_batched(params: ParameterStore, vocab: Vocabulary, examples,
                           max_new_tokens: int) -> list[str]:
    """Greedy answers for many test items via the incremental decoder,
    bucketed by prompt length."""
    from .inference import batch_greedy_continue

    prompts = [[BOS] + vocab.encode(ex.question) + [A_OPEN] for ex in examples]
    by_len: dict[int, list[int]] = {}
    for i, pr in enumerate(prompts):
        by_len.setdefault(len(pr), []).append(i)
    answers: list[str] = [""] * len(examples)
    for _, idxs in sorted(by_len.items()):
        for lo in range(0, len(idxs), EVAL_CHUNK):
            chunk = idxs[lo : lo + EVAL_CHUNK]
            outs = batch_greedy_continue(
                params,
                [examples[i].visual for i in chunk],
                [prompts[i] for i in chunk],
                max_new_tokens,
                EOS,
            )
            for i, out in zip(chunk, outs):
                if out and out[-1] == EOS:
                    out = out[:-1]
                answers[i] = _normalize(vocab.decode(out))
    return answers


def score_predictions(examples, predictions: list[str]) -> dict:
    """Exact-match scoring plus the option-constrained variant, with
    per-category and per-difficulty breakdowns."""
    if len(examples) != len(predictions):
        raise ValueError("one prediction per example required")
    total = len(examples)
    exact = 0
    constrained = 0
    by_cat: dict[str, list[int]] = {}
    by_diff: dict[str, list[int]] = {}
    for ex, pred in zip(examples, predictions):
        pred_n = _normalize(pred)
        gold = _normalize(ex.answer)
        hit = int(pred_n == gold)
        exact += hit
        mapped = pred_n if pred_n in ex.answer_options else None
        constrained += int(mapped == gold)
        template = TEMPLATE_BY_QUESTION.get(ex.question)
        cat = template.category if template else "other"
        diff = template.difficulty if template else "other"
        by_cat.setdefault(cat, []).append(hit)
        by_diff.setdefault(diff, []).append(hit)
    return {
        "items": total,
        "accuracy": exact / total if total else 0.0,
        "option_constrained_accuracy": constrained / total if total else 0.0,
        "by_category": {k: float(np.mean(v)) for k, v in sorted(by_cat.items())},
        "by_difficulty": {k: float(np.mean(v)) for k, v in sorted(by_diff.items())},
    }


def evaluate(params: ParameterStore, test_examples, vocab: Vocabulary,
             max_new_tokens: int = 6) -> dict:
    preds = decode_answers_batched(params, vocab, test_examples, max_new_tokens)
    return score_predictions(test_examples, preds)


def stage_eval(cfg: RunConfig, ckpt_path=None) -> dict:
    paths = RunPaths(cfg.out_dir)
    vocab = load_vocab(cfg)
    params = load_checkpoint(ckpt_path or paths.vqa_ckpt)
    test = read_dataset(paths.test)
    t0 = time.perf_counter()
    report = evaluate(params, test, vocab, cfg.eval_max_new_tokens)
    report["config_hash"] = cfg.config_hash()
    report["checkpoint"] = str(ckpt_path or paths.vqa_ckpt)
    write_json(paths.eval_report, report)
    _metrics(cfg).time("eval", time.perf_counter() - t0)
    return report


# --------------------------------------------------------------------------
# the method/ablation matrix
# --------------------------------------------------------------------------

GENERATOR_VARIANTS = (
    ("ablation_baseline", False, False),
    ("ablation_distill", True, False),
    ("ablation_distill_select", True, True),
)

MATRIX_ROWS = ("zero_shot", "labeled_only", "pseudo_qa", "fully_supervised",
               "ablation_baseline", "ablation_distill", "ablation_distill_select")


def _count_pseudo(path) -> tuple[int, list[str]]:
    if not Path(path).exists():
        return 0, []
    rows = read_dataset(path)
    runs = sorted({ex.source.run for ex in rows})
    return len(rows), runs


def run_matrix(cfg: RunConfig) -> dict:
    """Run {zero-shot, labeled-only, full method, fully-supervised} plus the
    three generator ablations for every matrix seed; the full method row and
    the final ablation row share one underlying run (identical configuration),
    which the report marks explicitly."""
    t_start = time.perf_counter()
    root = Path(cfg.out_dir)
    shared = replace(cfg, out_dir=str(root))
    stage_gen_data(shared)
    stage_caption(shared)
    paths = RunPaths(cfg.out_dir)

    per_seed: dict[str, dict] = {}
    for seed in cfg.matrix_seeds:
        seed_rows: dict[str, dict] = {}
        seed_dir = root / "matrix" / f"seed{seed}"

        def subcfg(name: str, **overrides) -> RunConfig:
            return replace(cfg, master_seed=seed, out_dir=str(seed_dir / name), **overrides)

        def link_benchmark(sub: RunConfig) -> None:
            sp = RunPaths(sub.out_dir)
            sp.benchmark.parent.mkdir(parents=True, exist_ok=True)
            if not sp.benchmark.exists():
                sp.benchmark.symlink_to(paths.benchmark.resolve(), target_is_directory=True)
            sp.teacher_captions.parent.mkdir(parents=True, exist_ok=True)
            if not sp.teacher_captions.exists():
                sp.teacher_captions.symlink_to(paths.teacher_captions.resolve())

        def seed_base(sub: RunConfig) -> None:
            sp = RunPaths(sub.out_dir)
            sp.base_ckpt.parent.mkdir(parents=True, exist_ok=True)
            if not sp.base_ckpt.exists():
                sp.base_ckpt.symlink_to(RunPaths(base_cfg.out_dir).base_ckpt.resolve())

        # one pretrained base per seed
        base_cfg = subcfg("base")
        link_benchmark(base_cfg)
        stage_pretrain(base_cfg)

        def eval_row(sub: RunConfig, ckpt, pseudo_path=None) -> dict:
            report = stage_eval(sub, ckpt)
            n_pseudo, runs = _count_pseudo(pseudo_path) if pseudo_path else (0, [])
            return {
                "accuracy": report["accuracy"],
                "option_constrained_accuracy": report["option_constrained_accuracy"],
                "by_category": report["by_category"],
                "by_difficulty": report["by_difficulty"],
                "pseudo_pairs_used": n_pseudo,
                "pseudo_source_runs": runs,
            }

        # zero-shot: the base checkpoint, no fine-tuning at all
        zs_cfg = subcfg("zero_shot")
        link_benchmark(zs_cfg)
        seed_rows["zero_shot"] = eval_row(zs_cfg, RunPaths(base_cfg.out_dir).base_ckpt)

        # labeled-only full fine-tuning
        lo_cfg = subcfg("labeled_only")
        link_benchmark(lo_cfg)
        seed_base(lo_cfg)
        stage_finetune(lo_cfg, use_pseudo=False)
        seed_rows["labeled_only"] = eval_row(lo_cfg, None)

        # fully supervised: every training QA pair, zero pseudo pairs
        fs_cfg = subcfg("fully_supervised")
        link_benchmark(fs_cfg)
        seed_base(fs_cfg)
        stage_finetune(fs_cfg, labeled_path=RunPaths(fs_cfg.out_dir).full_labeled,
                       use_pseudo=False)
        seed_rows["fully_supervised"] = eval_row(fs_cfg, None)

        # generator ablations (the last one IS the full method)
        for name, distill, select in GENERATOR_VARIANTS:
            v_cfg = subcfg(name, use_distill=distill, use_selection=select)
            link_benchmark(v_cfg)
            seed_base(v_cfg)
            if select:
                stage_score(v_cfg)
            stage_train_gen(v_cfg)
            stage_synth(v_cfg)
            stage_finetune(v_cfg, use_pseudo=True)
            seed_rows[name] = eval_row(v_cfg, None, RunPaths(v_cfg.out_dir).pseudo)

        seed_rows["pseudo_qa"] = dict(seed_rows["ablation_distill_select"],
                                      alias_of="ablation_distill_select")
        per_seed[str(seed)] = seed_rows

    rows = {}
    for name in MATRIX_ROWS:
        accs = [per_seed[str(s)][name]["accuracy"] for s in cfg.matrix_seeds]
        rows[name] = {
            "mean_accuracy": float(np.mean(accs)),
            "per_seed_accuracy": {str(s): a for s, a in zip(cfg.matrix_seeds, accs)},
        }
    report = {
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.matrix_seeds),
        "rows": rows,
        "per_seed": per_seed,
        "runtime_s": time.perf_counter() - t_start,
    }
    write_json(root / "matrix_report.json", report)
    return report


def format_matrix(report: dict) -> str:
    lines = [f"{'method':28s} {'mean acc':>9s}  " +
             "  ".join(f"seed{s:>2}" for s in report["seeds"])]
    for name in MATRIX_ROWS:
        row = report["rows"][name]
        per_seed = "  ".join(f"{row['per_seed_accuracy'][str(s)]:6.3f}" for s in report["seeds"])
        lines.append(f"{name:28s} {row['mean_accuracy']:9.3f}  {per_seed}")
    return "\n".join(lines)
