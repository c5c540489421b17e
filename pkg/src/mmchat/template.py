"""Instruction template for interleaved image-text conversations.

A Conversation renders to two coordinated forms:

* a text form: system line, then per round a blank line, one
  ``### Image k: <image:ID>`` line per image (k counts images globally
  across rounds, 1-based), a ``### Question: ...`` line and an
  ``### Answer: ...`` line. ``parse`` inverts this form exactly.
* a token form (RenderedSample): the same content tokenized, with each
  image slot expanded to ``image_token_count`` consecutive image tokens
  sharing one block id, plus a per-token loss mask that is true exactly on
  answer bodies and the end-of-turn token that closes each answer. Header
  strings are tokenized as ordinary text; there are no special tokens.

Field texts are single-line; ids contain no whitespace or angle brackets.
That restriction is what makes the text form a bijection (see
docs/template-grammar.md for the grammar).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from .modseq import LayoutConfig, ModalitySequence, ModalityTag, TokenKind, image_blocks

_IMAGE_LINE = re.compile(r"### Image (\d+): <image:([^\s<>]+)>")
_ID_PATTERN = re.compile(r"[^\s<>]+")
_QUESTION_PREFIX = "### Question: "
_ANSWER_PREFIX = "### Answer: "
_IMAGE_PLACEHOLDER = "<image>"
END_OF_TURN = "\n"


class OverLengthError(ValueError):
    """Rendered sample exceeds the configured maximum sequence length."""


class ParseError(ValueError):
    """Rendered text does not follow the template grammar."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


def _check_field(name: str, value: str, allow_empty: bool = False) -> None:
    if not isinstance(value, str):
        raise ValueError(f"{name} must be a string")
    if not allow_empty and not value:
        raise ValueError(f"{name} must be non-empty")
    if "\n" in value:
        raise ValueError(f"{name} must be a single line")


@dataclass(frozen=True)
class Round:
    """One dialogue turn: the images it introduces (possibly none), a
    question, and an answer."""

    images: tuple[str, ...]
    question: str
    answer: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        for image_id in self.images:
            if not isinstance(image_id, str) or not _ID_PATTERN.fullmatch(image_id):
                raise ValueError(
                    f"image id {image_id!r} must be a non-empty string without "
                    "whitespace or angle brackets"
                )
        _check_field("question", self.question)
        _check_field("answer", self.answer)


@dataclass(frozen=True)
class Conversation:
    """Multi-round, multi-image dialogue record."""

    system: str
    rounds: tuple[Round, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rounds", tuple(self.rounds))
        _check_field("system", self.system, allow_empty=True)
        if not self.rounds:
            raise ValueError("conversation needs at least one round")
        seen: set[str] = set()
        for rnd in self.rounds:
            for image_id in rnd.images:
                if image_id in seen:
                    raise ValueError(f"image id {image_id!r} introduced twice")
                seen.add(image_id)

    def image_ids(self) -> tuple[str, ...]:
        """All image ids in order of introduction."""
        return tuple(i for rnd in self.rounds for i in rnd.images)


@dataclass(frozen=True)
class RenderedSample:
    """Token form of a conversation: ids, modality tags, loss mask, and the
    image ids backing each block (in block order)."""

    token_ids: tuple[int, ...]
    tags: ModalitySequence
    loss_mask: tuple[bool, ...]
    image_count: int
    image_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_ids", tuple(self.token_ids))
        object.__setattr__(self, "loss_mask", tuple(self.loss_mask))
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        d = len(self.token_ids)
        if len(self.tags.tags) != d or len(self.loss_mask) != d:
            raise ValueError("token_ids, tags, and loss_mask must have equal length")
        for flag, tag in zip(self.loss_mask, self.tags.tags):
            if flag and tag.kind is not TokenKind.TEXT:
                raise ValueError("loss mask may only cover text positions")
        blocks = image_blocks(self.tags)
        if len(blocks) != self.image_count or len(self.image_ids) != self.image_count:
            raise ValueError("image_count must match the number of blocks and ids")

    @property
    def d(self) -> int:
        return len(self.token_ids)


class HashTokenizer:
    """Deterministic whitespace tokenizer with a stable string-to-id hash.

    Splits on whitespace and maps each word to blake2b(word) mod
    vocab_size. Collisions are fine for desk-scale runs; any external
    tokenizer with a deterministic text-to-ids mapping can be substituted.
    """

    def __init__(self, vocab_size: int = 32) -> None:
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size

    def word_id(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.vocab_size

    def encode(self, text: str) -> list[int]:
        return [self.word_id(word) for word in text.split()]


def render_text(conv: Conversation) -> str:
    """Text form of the template; ``parse`` inverts it."""
    lines = [conv.system]
    image_number = 0
    for rnd in conv.rounds:
        lines.append("")
        for image_id in rnd.images:
            image_number += 1
            lines.append(f"### Image {image_number}: <image:{image_id}>")
        lines.append(_QUESTION_PREFIX + rnd.question)
        lines.append(_ANSWER_PREFIX + rnd.answer)
    return "\n".join(lines)


def render(
    conv: Conversation, tokenizer: HashTokenizer, layout: LayoutConfig
) -> RenderedSample:
    """Tokenize a conversation into a RenderedSample.

    Image headers are numbered globally; each image slot becomes
    ``layout.image_token_count`` image tokens with a fresh block id. The
    loss mask covers each answer's tokens plus one end-of-turn token, and
    nothing else; headers and questions never contribute to the loss.

    Raises OverLengthError when the result exceeds
    ``layout.max_sequence_length``.
    """
    token_ids: list[int] = []
    tags: list[ModalityTag] = []
    loss_mask: list[bool] = []
    image_ids: list[str] = []

    def emit_text(text: str, in_loss: bool = False) -> None:
        for tid in tokenizer.encode(text):
            token_ids.append(tid)
            tags.append(ModalityTag(TokenKind.TEXT))
            loss_mask.append(in_loss)

    placeholder_id = tokenizer.word_id(_IMAGE_PLACEHOLDER)
    end_of_turn_id = tokenizer.word_id(END_OF_TURN)

    emit_text(conv.system)
    image_number = 0
    for rnd in conv.rounds:
        for image_id in rnd.images:
            image_number += 1
            emit_text(f"### Image {image_number}:")
            for _ in range(layout.image_token_count):
                token_ids.append(placeholder_id)
                tags.append(ModalityTag(TokenKind.IMAGE, image_number))
                loss_mask.append(False)
            image_ids.append(image_id)
        emit_text(_QUESTION_PREFIX + rnd.question)
        emit_text(_ANSWER_PREFIX)
        emit_text(rnd.answer, in_loss=True)
        token_ids.append(end_of_turn_id)
        tags.append(ModalityTag(TokenKind.TEXT))
        loss_mask.append(True)

    if len(token_ids) > layout.max_sequence_length:
        raise OverLengthError(
            f"over_length: {len(token_ids)} tokens exceed the "
            f"{layout.max_sequence_length} cap"
        )
    return RenderedSample(
        token_ids=tuple(token_ids),
        tags=ModalitySequence(tuple(tags)),
        loss_mask=tuple(loss_mask),
        image_count=image_number,
        image_ids=tuple(image_ids),
    )


def loss_positions(sample: RenderedSample) -> list[tuple[int, int]]:
    """Half-open index spans of the maximal true runs of the loss mask,
    one per answer, in document order."""
    spans: list[tuple[int, int]] = []
    start: int | None = None
    for pos, flag in enumerate(sample.loss_mask):
        if flag and start is None:
            start = pos
        elif not flag and start is not None:
            spans.append((start, pos))
            start = None
    if start is not None:
        spans.append((start, sample.d))
    return spans


def parse(text: str) -> Conversation:
    """Invert render_text. Raises ParseError with a 1-based line number on
    grammar violations."""
    lines = text.split("\n")
    system = lines[0]
    rounds: list[Round] = []
    image_number = 0
    pos = 1
    if pos >= len(lines):
        raise ParseError(pos + 1, "expected a blank line and at least one round")
    while pos < len(lines):
        if lines[pos] != "":
            raise ParseError(pos + 1, f"expected blank line before round, got {lines[pos]!r}")
        pos += 1
        images: list[str] = []
        while pos < len(lines) and lines[pos].startswith("### Image "):
            match = _IMAGE_LINE.fullmatch(lines[pos])
            if not match:
                raise ParseError(pos + 1, f"malformed image line {lines[pos]!r}")
            image_number += 1
            if int(match.group(1)) != image_number:
                raise ParseError(
                    pos + 1,
                    f"image numbered {match.group(1)}, expected {image_number}",
                )
            images.append(match.group(2))
            pos += 1
        if pos >= len(lines) or not lines[pos].startswith(_QUESTION_PREFIX):
            raise ParseError(pos + 1, "expected a question header")
        question = lines[pos][len(_QUESTION_PREFIX) :]
        pos += 1
        if pos >= len(lines) or not lines[pos].startswith(_ANSWER_PREFIX):
            raise ParseError(pos + 1, "expected an answer header")
        answer = lines[pos][len(_ANSWER_PREFIX) :]
        pos += 1
        try:
            rounds.append(Round(tuple(images), question, answer))
        except ValueError as exc:
            raise ParseError(pos, str(exc)) from exc
    try:
        return Conversation(system, tuple(rounds))
    except ValueError as exc:
        raise ParseError(len(lines), str(exc)) from exc
