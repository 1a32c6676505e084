"""Word-level vocabulary, training-sequence assembly, and pseudo-QA parsing.

Sequences follow fixed delimiter layouts:

* QA-generator targets:  ``<bos> <q> Q <q> <a> A <a> <eos>`` with every
  position after ``<bos>`` contributing to the loss.
* VQA targets:           ``<bos> Q <a> A <eos>`` with only the answer tokens
  and ``<eos>`` contributing (the question is conditioning context).
* Caption targets:       ``<bos> C <eos>`` with everything after ``<bos>``
  contributing.
"""

from __future__ import annotations

from dataclasses import dataclass

Q_OPEN, A_OPEN, BOS, EOS, PAD, UNK = 0, 1, 2, 3, 4, 5

Q_OPEN_TOK = "<q>"
A_OPEN_TOK = "<a>"
BOS_TOK = "<bos>"
EOS_TOK = "<eos>"
PAD_TOK = "<pad>"
UNK_TOK = "<unk>"

SPECIAL_TOKENS = (Q_OPEN_TOK, A_OPEN_TOK, BOS_TOK, EOS_TOK, PAD_TOK, UNK_TOK)
N_SPECIAL = len(SPECIAL_TOKENS)


class SequenceLengthError(ValueError):
    """A text does not fit the allowed sequence length (never truncated silently)."""


class QAParseError(ValueError):
    """Generated text is not a well-formed question/answer pair."""

    def __init__(self, reason: str, text: str = ""):
        super().__init__(f"{reason}: {text!r}" if text else reason)
        self.reason = reason


class Vocabulary:
    """Bijective word <-> id mapping with six reserved special tokens at ids 0-5."""

    def __init__(self, words: list[str]):
        seen = set()
        for w in words:
            if not w or " " in w or "\t" in w or "\n" in w:
                raise ValueError(f"invalid vocabulary word: {w!r}")
            if w in SPECIAL_TOKENS:
                raise ValueError(f"word collides with a special token: {w!r}")
            if w in seen:
                raise ValueError(f"duplicate vocabulary word: {w!r}")
            seen.add(w)
        self.words = tuple(words)
        self._id_of = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for i, w in enumerate(self.words):
            self._id_of[w] = N_SPECIAL + i
        self._tok_of = list(SPECIAL_TOKENS) + list(self.words)

    def __len__(self) -> int:
        return len(self._tok_of)

    def __contains__(self, word: str) -> bool:
        return word in self._id_of

    def id_of(self, token: str) -> int:
        return self._id_of.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        return self._tok_of[token_id]

    def encode(self, text: str) -> list[int]:
        return [self._id_of.get(w, UNK) for w in text.split()]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self._tok_of[i] for i in ids if i not in (BOS, PAD))

    def to_json(self) -> dict:
        return {"words": list(self.words)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["words"]))


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus a per-position flag marking loss-bearing positions."""

    ids: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "loss_mask", tuple(bool(b) for b in self.loss_mask))
        if len(self.ids) != len(self.loss_mask):
            raise ValueError(
                f"ids and loss_mask lengths differ: {len(self.ids)} vs {len(self.loss_mask)}"
            )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def masked_in_count(self) -> int:
        return sum(self.loss_mask)


def _encode_nonempty(text: str, vocab: Vocabulary, what: str) -> list[int]:
    toks = vocab.encode(text)
    if not toks:
        raise ValueError(f"empty {what} rejected")
    return toks


def _check_len(ids: list[int], max_len: int | None) -> None:
    if max_len is not None and len(ids) > max_len:
        raise SequenceLengthError(f"sequence length {len(ids)} exceeds limit {max_len}")


def assemble_qa_sequence(q: str, a: str, vocab: Vocabulary, max_len: int | None = None) -> TokenSequence:
    """Build a generator target: both question and answer (with delimiters and
    the end marker) are predicted."""
    q_ids = _encode_nonempty(q, vocab, "question")
    a_ids = _encode_nonempty(a, vocab, "answer")
    ids = [BOS, Q_OPEN, *q_ids, Q_OPEN, A_OPEN, *a_ids, A_OPEN, EOS]
    _check_len(ids, max_len)
    mask = [False] + [True] * (len(ids) - 1)
    return TokenSequence(ids, mask)


def assemble_vqa_sequence(q: str, a: str, vocab: Vocabulary, max_len: int | None = None) -> TokenSequence:
    """Build a VQA target: only answer tokens and the end marker carry loss."""
    q_ids = _encode_nonempty(q, vocab, "question")
    a_ids = _encode_nonempty(a, vocab, "answer")
    ids = [BOS, *q_ids, A_OPEN, *a_ids, EOS]
    _check_len(ids, max_len)
    mask = [False] * (len(q_ids) + 2) + [True] * (len(a_ids) + 1)
    return TokenSequence(ids, mask)


def assemble_caption_sequence(caption: str, vocab: Vocabulary, max_len: int | None = None) -> TokenSequence:
    c_ids = _encode_nonempty(caption, vocab, "caption")
    ids = [BOS, *c_ids, EOS]
    _check_len(ids, max_len)
    return TokenSequence(ids, [False] + [True] * (len(ids) - 1))


_TRAILING_OK = {EOS_TOK, PAD_TOK}
_FORBIDDEN_INTERIOR = {BOS_TOK, EOS_TOK, PAD_TOK, UNK_TOK}


def parse_qa_output(text: str) -> tuple[str, str]:
    """Strictly parse generated text of the form ``<q> Q <q> <a> A <a>``.

    Raises QAParseError (with a machine-readable ``reason``) on any deviation;
    malformed generations are rejected, never repaired. Trailing ``<eos>`` or
    ``<pad>`` tokens after the final ``<a>`` are tolerated.
    """
    toks = text.split()
    nq = toks.count(Q_OPEN_TOK)
    na = toks.count(A_OPEN_TOK)
    if nq < 2:
        raise QAParseError("missing-question-delimiter", text)
    if nq > 2:
        raise QAParseError("duplicate-question-delimiter", text)
    if na < 2:
        raise QAParseError("missing-answer-delimiter", text)
    if na > 2:
        raise QAParseError("duplicate-answer-delimiter", text)
    q_open = toks.index(Q_OPEN_TOK)
    q_close = toks.index(Q_OPEN_TOK, q_open + 1)
    a_open = toks.index(A_OPEN_TOK)
    a_close = toks.index(A_OPEN_TOK, a_open + 1)
    if q_open != 0:
        raise QAParseError("leading-junk", text)
    if not q_close < a_open:
        raise QAParseError("misordered-delimiters", text)
    if a_open != q_close + 1:
        raise QAParseError("interior-junk", text)
    q_words = toks[q_open + 1 : q_close]
    a_words = toks[a_open + 1 : a_close]
    if not q_words:
        raise QAParseError("empty-question", text)
    if not a_words:
        raise QAParseError("empty-answer", text)
    for w in q_words + a_words:
        if w in _FORBIDDEN_INTERIOR:
            raise QAParseError("special-token-interior", text)
    for w in toks[a_close + 1 :]:
        if w not in _TRAILING_OK:
            raise QAParseError("trailing-junk", text)
    return " ".join(q_words), " ".join(a_words)
