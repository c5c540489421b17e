"""Synthesis of multi-round multi-image conversations from single-image
and image-pair corpora.

Two procedures are provided:

* concat_blend: shuffle the records with a seeded generator, then greedily
  group them with group sizes drawn uniformly from [min_group, max_group]
  and concatenate each group round-by-round into one record. Every input
  record lands in exactly one output record; a trailing group smaller than
  min_group is kept rather than dropped.
* llava_otter_blend: join single-image records onto image-pair records
  that share an image id: for each pair (a, b), all single-image rounds for
  a, then for b, then the pair's own round. Matching is by image id, not
  consumption, so a single-image record may contribute to several outputs;
  pairs with no match pass through unchanged.

Records travel as JSON lines: one object per line with fields
{dataset, image_ids, system, rounds: [{images, question, answer}]}.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .modseq import LayoutConfig
from .template import Conversation, HashTokenizer, OverLengthError, Round, render


class Dataset(str, Enum):
    LLAVA = "llava"
    LLAVA_DIAL = "llava_dial"
    OTTER_CGD = "otter_cgd"
    OTHER = "other"


@dataclass(frozen=True)
class SourceRecord:
    """One corpus record: a conversation plus the image ids it uses.

    Single-image corpora (llava, llava_dial) carry exactly one image id;
    the image-pair corpus (otter_cgd) carries exactly two. The ids
    referenced by the conversation's rounds must be exactly the record's
    image ids.
    """

    dataset: Dataset
    image_ids: tuple[str, ...]
    conversation: Conversation

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        if self.dataset in (Dataset.LLAVA, Dataset.LLAVA_DIAL):
            if len(self.image_ids) != 1:
                raise ValueError(f"{self.dataset.value} records carry exactly 1 image id")
        elif self.dataset is Dataset.OTTER_CGD:
            if len(self.image_ids) != 2:
                raise ValueError("otter_cgd records carry exactly 2 image ids")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("record image ids must be distinct")
        introduced = set(self.conversation.image_ids())
        if introduced != set(self.image_ids):
            raise ValueError("conversation rounds must introduce exactly the record's image ids")


@dataclass(frozen=True)
class BlendSpec:
    """Grouping range, seed, and the filter limits."""

    min_group: int
    max_group: int
    seed: int
    max_images: int = 8
    layout: LayoutConfig = field(default_factory=LayoutConfig)

    def __post_init__(self) -> None:
        if not (1 <= self.min_group <= self.max_group):
            raise ValueError("need 1 <= min_group <= max_group")
        if self.max_images < 1:
            raise ValueError("max_images must be >= 1")


def _merge_group(group: list[SourceRecord]) -> SourceRecord:
    """Concatenate a group's conversations; image ids are renumbered
    globally ("1", "2", ...) so merged records never alias each other's
    images. Size-1 groups pass through untouched."""
    if len(group) == 1:
        return group[0]
    counter = 0
    new_ids: list[str] = []
    rounds: list[Round] = []
    for record in group:
        remap: dict[str, str] = {}
        for old in record.image_ids:
            counter += 1
            remap[old] = str(counter)
            new_ids.append(str(counter))
        for rnd in record.conversation.rounds:
            rounds.append(
                Round(
                    images=tuple(remap[i] for i in rnd.images),
                    question=rnd.question,
                    answer=rnd.answer,
                )
            )
    conv = Conversation(system=group[0].conversation.system, rounds=tuple(rounds))
    return SourceRecord(Dataset.OTHER, tuple(new_ids), conv)


def concat_blend(records: list[SourceRecord], spec: BlendSpec) -> list[SourceRecord]:
    """Seeded shuffle, then greedy grouping with uniform group sizes.

    Deterministic for a fixed (records, seed); every input record appears
    in exactly one output record.
    """
    if not records:
        raise ValueError("concat_blend needs a non-empty record list")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    out: list[SourceRecord] = []
    pos = 0
    while pos < len(shuffled):
        size = int(rng.integers(spec.min_group, spec.max_group + 1))
        out.append(_merge_group(shuffled[pos : pos + size]))
        pos += size
    return out


def llava_otter_blend(
    llava: list[SourceRecord],
    llava_dial: list[SourceRecord],
    otter: list[SourceRecord],
) -> list[SourceRecord]:
    """Join single-image records onto image-pair records sharing an id.

    For each pair record (a, b): emit the matched single-image rounds for
    a, then for b (llava before llava_dial, each in input order), then the
    pair's own round, with images introduced once each and the record's
    image list kept as [a, b]. Pairs with no match pass through unchanged.
    """
    by_image: dict[str, list[SourceRecord]] = {}
    for record in list(llava) + list(llava_dial):
        by_image.setdefault(record.image_ids[0], []).append(record)

    out: list[SourceRecord] = []
    for pair in otter:
        if pair.dataset is not Dataset.OTTER_CGD:
            raise ValueError("third argument must contain image-pair records")
        matches = [rec for image in pair.image_ids for rec in by_image.get(image, [])]
        if not matches:
            out.append(pair)
            continue
        introduced: set[str] = set()
        rounds: list[Round] = []

        def append_round(rnd: Round) -> None:
            fresh = tuple(i for i in rnd.images if i not in introduced)
            introduced.update(fresh)
            rounds.append(Round(fresh, rnd.question, rnd.answer))

        for rec in matches:
            for rnd in rec.conversation.rounds:
                append_round(rnd)
        for rnd in pair.conversation.rounds:
            append_round(rnd)
        conv = Conversation(system=matches[0].conversation.system, rounds=tuple(rounds))
        out.append(SourceRecord(Dataset.OTHER, pair.image_ids, conv))
    return out


def filter_limits(
    records: list[SourceRecord], spec: BlendSpec, tokenizer: HashTokenizer
) -> tuple[list[SourceRecord], dict[str, int]]:
    """Drop records with too many images or an over-long rendering.

    Returns the kept records and per-reason drop counts. Idempotent: the
    kept list passes the same filter untouched.
    """
    kept: list[SourceRecord] = []
    dropped = {"too_many_images": 0, "over_length": 0}
    for record in records:
        if len(record.image_ids) > spec.max_images:
            dropped["too_many_images"] += 1
            continue
        try:
            render(record.conversation, tokenizer, spec.layout)
        except OverLengthError:
            dropped["over_length"] += 1
            continue
        kept.append(record)
    return kept, dropped


def dataset_stats(records: list[SourceRecord]) -> dict:
    """Per-dataset sample counts plus image- and round-count histograms."""
    per_dataset = Counter(r.dataset.value for r in records)
    image_hist = Counter(len(r.image_ids) for r in records)
    round_hist = Counter(len(r.conversation.rounds) for r in records)
    return {
        "total": len(records),
        "per_dataset": dict(sorted(per_dataset.items())),
        "image_count_hist": dict(sorted(image_hist.items())),
        "round_count_hist": dict(sorted(round_hist.items())),
    }


# ---------------------------------------------------------------------------
# JSON-lines serialization


def record_to_dict(record: SourceRecord) -> dict:
    return {
        "dataset": record.dataset.value,
        "image_ids": list(record.image_ids),
        "system": record.conversation.system,
        "rounds": [
            {"images": list(r.images), "question": r.question, "answer": r.answer}
            for r in record.conversation.rounds
        ],
    }


def record_from_dict(data: dict) -> SourceRecord:
    rounds = tuple(
        Round(
            images=tuple(str(i) for i in r["images"]),
            question=r["question"],
            answer=r["answer"],
        )
        for r in data["rounds"]
    )
    return SourceRecord(
        dataset=Dataset(data["dataset"]),
        image_ids=tuple(str(i) for i in data["image_ids"]),
        conversation=Conversation(system=data["system"], rounds=rounds),
    )


def read_records(path: str | Path) -> list[SourceRecord]:
    """Read a JSON-lines record file. Malformed lines raise a ValueError
    carrying the 1-based line number."""
    records: list[SourceRecord] = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed record on line {number}: {exc}") from exc
    return records


def write_records(records: Iterable[SourceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_dict(record), sort_keys=True))
            handle.write("\n")
