"""Attention masks for block-diffusion training, MDLM training and decoding.

All masks are explicit boolean matrices; ``True`` means the query row may
attend to the key column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class PackedLayout:
    total_length: int
    doc_spans: tuple[tuple[int, int], ...]
    block_size: int

    def __post_init__(self):
        object.__setattr__(self, "doc_spans", tuple((int(a), int(b)) for a, b in self.doc_spans))
        validate_layout(self)

    @property
    def num_blocks(self) -> int:
        return self.total_length // self.block_size

    def doc_ids(self) -> np.ndarray:
        ids = np.empty(self.total_length, dtype=np.int64)
        for d, (a, b) in enumerate(self.doc_spans):
            ids[a:b] = d
        return ids


def validate_layout(layout: PackedLayout) -> None:
    L, lb = layout.total_length, layout.block_size
    if lb < 1:
        raise ValueError(f"block size must be >= 1, got {lb}")
    if L % lb:
        raise ValueError(f"sequence length {L} is not divisible by block size {lb}")
    pos = 0
    for a, b in layout.doc_spans:
        if a != pos or b <= a:
            raise ValueError(f"doc spans must partition [0, {L}) in order; bad span ({a}, {b})")
        pos = b
    if pos != L:
        raise ValueError(f"doc spans cover [0, {pos}) but length is {L}")


@dataclass(frozen=True)
class AttentionMask:
    bits: np.ndarray
    kind: str
    block_size: int
    doc_spans: tuple[tuple[int, int], ...] = field(default=())

    @property
    def dim(self) -> int:
        return self.bits.shape[0]

    def to_text(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.bits) + "\n"

    @classmethod
    def from_text(cls, text: str, kind: str = "decode", block_size: int = 1) -> "AttentionMask":
        rows = [r for r in text.splitlines() if r]
        bits = np.array([[c == "1" for c in r] for r in rows], dtype=bool)
        return cls(bits, kind, block_size)


def block_index(k: int, block_size: int) -> int:
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    if k < 0:
        raise ValueError("token position must be >= 0")
    return k // block_size


@lru_cache(maxsize=256)
def _bdlm_bits(L: int, spans: tuple, lb: int) -> np.ndarray:
    doc = PackedLayout(L, spans, lb).doc_ids()
    blk = np.arange(L) // lb
    same_doc = doc[:, None] == doc[None, :]
    bits = np.zeros((2 * L, 2 * L), dtype=bool)
    bits[:L, :L] = (blk[:, None] == blk[None, :]) & same_doc
    bits[:L, L:] = (blk[:, None] > blk[None, :]) & same_doc
    bits[L:, L:] = (blk[:, None] >= blk[None, :]) & same_doc
    bits.setflags(write=False)
    return bits


def build_bdlm_mask(layout: PackedLayout) -> AttentionMask:
    """2L x 2L mask over the concatenation [x_t; x_0].

    Noisy queries see their own noisy block and strictly earlier clean blocks;
    clean queries see clean blocks up to and including their own. Nothing
    crosses a document boundary, and clean queries never see the noisy half.
    """
    bits = _bdlm_bits(layout.total_length, layout.doc_spans, layout.block_size)
    return AttentionMask(bits, "bdlm_train", layout.block_size, layout.doc_spans)


@lru_cache(maxsize=256)
def _mdlm_bits(L: int, spans: tuple) -> np.ndarray:
    doc = PackedLayout(L, spans, 1).doc_ids()
    bits = doc[:, None] == doc[None, :]
    bits.setflags(write=False)
    return bits


def build_mdlm_mask(layout: PackedLayout) -> AttentionMask:
    bits = _mdlm_bits(layout.total_length, layout.doc_spans)
    return AttentionMask(bits, "mdlm_train", layout.total_length, layout.doc_spans)


def decode_segments(prompt_len: int, finalized_blocks: int, block_size: int, current: int | None = None) -> np.ndarray:
    """Segment id per position of [prompt; finalized blocks; current block].

    The prompt is cut into block-size pieces from position 0; generated blocks
    start right after the prompt.
    """
    if prompt_len < 0 or finalized_blocks < 0:
        raise ValueError("prompt_len and finalized_blocks must be >= 0")
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    current = block_size if current is None else current
    n_prompt_seg = -(-prompt_len // block_size)
    seg = [np.arange(prompt_len) // block_size]
    seg.append(n_prompt_seg + np.repeat(np.arange(finalized_blocks), block_size))
    seg.append(np.full(current, n_prompt_seg + finalized_blocks))
    return np.concatenate(seg).astype(np.int64)


def build_decode_mask(prompt_len: int, finalized_blocks: int, block_size: int, current: int | None = None) -> AttentionMask:
    """Mask for a cacheless decode forward.

    Rows for prompt and finalized positions are segment-causal (a segment sees
    itself and everything before it); the current block is bidirectional and
    sees the entire prefix.
    """
    seg = decode_segments(prompt_len, finalized_blocks, block_size, current)
    bits = seg[:, None] >= seg[None, :]
    return AttentionMask(bits, "decode", block_size)

