"""Example containers and JSON Lines dataset files.

One example per line with fields ``visual`` (nested float lists), ``question``,
``answer``, ``options`` (null where absent), and ``split``; pseudo-labeled rows
additionally carry ``source = {"run": str, "sample": int}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .model import VisualInput


class DatasetFormatError(ValueError):
    """A dataset file is malformed (bad JSON, missing fields, wrong types)."""


def _normalize(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class LabeledExample:
    visual: VisualInput
    question: str
    answer: str
    answer_options: tuple[str, ...]
    split: str = "labeled"

    def __post_init__(self):
        object.__setattr__(self, "answer_options", tuple(self.answer_options))
        if self.answer not in self.answer_options:
            raise ValueError(f"answer {self.answer!r} not among options {self.answer_options}")


@dataclass(frozen=True)
class UnlabeledExample:
    visual: VisualInput


@dataclass(frozen=True)
class PseudoSource:
    run: str
    sample: int


@dataclass(frozen=True)
class PseudoExample:
    visual: VisualInput
    question: str
    answer: str
    source: PseudoSource

    def __post_init__(self):
        if not _normalize(self.question):
            raise ValueError("pseudo question is empty")
        if not _normalize(self.answer):
            raise ValueError("pseudo answer is empty")


Example = LabeledExample | UnlabeledExample | PseudoExample


def _row_of(ex: Example) -> dict:
    if isinstance(ex, LabeledExample):
        return {
            "visual": ex.visual.features.tolist(),
            "question": ex.question,
            "answer": ex.answer,
            "options": list(ex.answer_options),
            "split": ex.split,
        }
    if isinstance(ex, UnlabeledExample):
        return {
            "visual": ex.visual.features.tolist(),
            "question": None,
            "answer": None,
            "options": None,
            "split": "unlabeled",
        }
    if isinstance(ex, PseudoExample):
        return {
            "visual": ex.visual.features.tolist(),
            "question": ex.question,
            "answer": ex.answer,
            "options": None,
            "split": "labeled",
            "source": {"run": ex.source.run, "sample": ex.source.sample},
        }
    raise TypeError(f"not a dataset example: {type(ex)!r}")


def _example_of(row: dict, lineno: int) -> Example:
    try:
        visual = VisualInput(row["visual"])
        split = row["split"]
        if "source" in row:
            src = row["source"]
            return PseudoExample(
                visual, row["question"], row["answer"], PseudoSource(src["run"], int(src["sample"]))
            )
        if row.get("question") is None:
            if split != "unlabeled":
                raise DatasetFormatError(f"line {lineno}: question-less row with split {split!r}")
            return UnlabeledExample(visual)
        if split not in ("labeled", "test"):
            raise DatasetFormatError(f"line {lineno}: unknown split {split!r}")
        return LabeledExample(visual, row["question"], row["answer"], tuple(row["options"]), split)
    except DatasetFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: malformed example row: {exc}") from exc


def write_dataset(path, examples) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(_row_of(ex), sort_keys=True))
            fh.write("\n")


def read_dataset(path) -> list[Example]:
    out: list[Example] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(row, dict):
                raise DatasetFormatError(f"line {lineno}: expected an object")
            out.append(_example_of(row, lineno))
    return out
