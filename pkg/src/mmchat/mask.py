"""Modality-aware attention masks.

The integer mask M over {0, 1, 2} encodes, per (query, key) edge, whether
attention is forbidden (0), allowed with a text key (1), or allowed with an
image key (2). The boolean partitions M1 = [M == 1] and M2 = [M == 2] drive
the dual-softmax attention computation.

The entry value encodes the KEY token's modality; the query's modality
determines which rows can carry which values. Three builders cover the
three attention variants:

* causal      - plain lower-triangular mask, modality ignored (all 1s).
* multi-modal - image queries attend only within their own image block;
                text queries attend causally, with text keys labeled 1 and
                image keys labeled 2.
* cross       - same mask geometry as multi-modal; the variants differ in
                how attention consumes the mask, not in the mask itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .modseq import ModalitySequence

FORBIDDEN = 0
TEXT_KEY = 1
IMAGE_KEY = 2

_GRID_CHARS = {0: "·", 1: "1", 2: "2"}


class AttentionVariant(str, Enum):
    CAUSAL_ONLY = "causal"
    CAUSAL_PLUS_CROSS = "cross"
    MMCA = "mmca"


@dataclass(frozen=True)
class MmcaMask:
    """d x d integer mask with values in {0, 1, 2}; row i is query i."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.int8)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError("mask entries must be a square matrix")
        if entries.shape[0] < 1:
            raise ValueError("mask dimension must be >= 1")
        if not np.isin(entries, (FORBIDDEN, TEXT_KEY, IMAGE_KEY)).all():
            raise ValueError("mask entries must lie in {0, 1, 2}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    def allowed(self) -> np.ndarray:
        """Boolean support M1 | M2."""
        return self.entries != FORBIDDEN


def _modality_mask(seq: ModalitySequence, image_self: str) -> MmcaMask:
    if image_self not in ("block", "diagonal"):
        raise ValueError(f"image_self must be 'block' or 'diagonal', got {image_self!r}")
    d = seq.d
    is_img = seq.is_image()
    bid = seq.block_ids()
    lower = np.tril(np.ones((d, d), dtype=bool))
    img_q = is_img[:, None]
    img_k = is_img[None, :]

    text_to_text = ~img_q & lower & ~img_k
    text_to_image = ~img_q & lower & img_k
    if image_self == "block":
        image_rows = img_q & (bid[:, None] == bid[None, :])
    else:
        image_rows = img_q & np.eye(d, dtype=bool)

    entries = np.zeros((d, d), dtype=np.int8)
    entries[text_to_text] = TEXT_KEY
    entries[text_to_image | image_rows] = IMAGE_KEY
    return MmcaMask(entries)


def build_mmca_mask(seq: ModalitySequence, image_self: str = "block") -> MmcaMask:
    """Multi-modal causal mask.

    Image query in block b: key allowed iff it lies in block b (value 2);
    with ``image_self="diagonal"`` only the query token itself. Text query
    i: keys j <= i allowed, labeled 1 for text keys and 2 for image keys.
    Image tokens never attend to text, and text never sees a later image.
    """
    return _modality_mask(seq, image_self)


def build_causal_mask(seq: ModalitySequence) -> MmcaMask:
    """Standard lower-triangular causal mask; modality ignored, every
    allowed key labeled as text."""
    entries = np.tril(np.ones((seq.d, seq.d), dtype=np.int8))
    return MmcaMask(entries)


def build_cross_mask(seq: ModalitySequence, image_self: str = "block") -> MmcaMask:
    """Mask for the causal-plus-cross variant: identical geometry to the
    multi-modal mask; the attention computation, not the mask, differs."""
    return _modality_mask(seq, image_self)


def build_mask(
    seq: ModalitySequence, variant: AttentionVariant, image_self: str = "block"
) -> MmcaMask:
    """Build the mask for the given attention variant."""
    if variant is AttentionVariant.CAUSAL_ONLY:
        return build_causal_mask(seq)
    if variant is AttentionVariant.MMCA:
        return build_mmca_mask(seq, image_self)
    if variant is AttentionVariant.CAUSAL_PLUS_CROSS:
        return build_cross_mask(seq, image_self)
    raise ValueError(f"unknown attention variant {variant!r}")


def partition(mask: MmcaMask) -> tuple[np.ndarray, np.ndarray]:
    """Split the mask into its boolean parts (M1, M2).

    M1 marks allowed edges with text keys, M2 allowed edges with image
    keys; the two never overlap, and together they reconstruct the mask.
    """
    m1 = mask.entries == TEXT_KEY
    m2 = mask.entries == IMAGE_KEY
    return m1, m2


def render_mask(mask: MmcaMask) -> str:
    """Text grid, one row per query: '·' forbidden, '1' text key,
    '2' image key."""
    return "\n".join(
        "".join(_GRID_CHARS[int(v)] for v in row) for row in mask.entries
    )
