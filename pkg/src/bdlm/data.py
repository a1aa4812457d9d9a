"""Byte-level vocabulary, corpus ingestion and document packing."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masks import PackedLayout

log = logging.getLogger(__name__)

MASK = 256
PAD = 257
BOS = 258
EOS = 259
VOCAB_SIZE = 260
SPECIALS = frozenset({MASK, PAD, BOS, EOS})


def encode(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def decode_bytes(tokens) -> bytes:
    return bytes(int(t) for t in tokens if int(t) < 256)


def decode(tokens) -> str:
    return decode_bytes(tokens).decode("utf-8", errors="replace")


def quantize_length(n: int, block_size: int) -> int:
    """Smallest multiple of ``block_size`` that is >= n."""
    if n < 1 or block_size < 1:
        raise ValueError(f"quantize_length needs n >= 1 and block_size >= 1, got ({n}, {block_size})")
    return -(-n // block_size) * block_size


def pad_to_block(tokens: list[int], block_size: int, fill: int = PAD) -> list[int]:
    if not tokens:
        return []
    return tokens + [fill] * (quantize_length(len(tokens), block_size) - len(tokens))


@dataclass
class PackedBatch:
    tokens: np.ndarray      # (B, L) int64
    layouts: list[PackedLayout]
    loss_mask: np.ndarray   # (B, L) bool, False on PAD and on prompt tokens
    prompt_mask: np.ndarray | None = None  # (B, L) bool, True on prompt tokens

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    def row(self, i: int) -> "PackedBatch":
        pm = None if self.prompt_mask is None else self.prompt_mask[i:i + 1]
        return PackedBatch(self.tokens[i:i + 1], [self.layouts[i]], self.loss_mask[i:i + 1], pm)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def stack_rows(rows: list[PackedBatch]) -> PackedBatch:
    pm = None
    if any(r.prompt_mask is not None for r in rows):
        pm = np.concatenate([
            r.prompt_mask if r.prompt_mask is not None else np.zeros_like(r.loss_mask) for r in rows
        ])
    return PackedBatch(
        np.concatenate([r.tokens for r in rows]),
        [lay for r in rows for lay in r.layouts],
        np.concatenate([r.loss_mask for r in rows]),
        pm,
    )


def pack_documents(docs: list[list[int]], seq_len: int, block_size: int) -> PackedBatch:
    """Greedy first-fit packing of block-quantized documents into rows.

    Documents longer than ``seq_len`` are cut into ``seq_len`` chunks, each
    treated as its own document. Leftover room in a row becomes a trailing
    PAD-only span.
    """
    if seq_len % block_size:
        raise ValueError(f"sequence length {seq_len} is not divisible by block size {block_size}")
    pieces: list[list[int]] = []
    for doc in docs:
        if not doc:
            raise ValueError("empty document")
        for s in range(0, len(doc), seq_len):
            pieces.append(list(doc[s:s + seq_len]))

    rows: list[list[list[int]]] = []
    room: list[int] = []
    for piece in pieces:
        need = quantize_length(len(piece), block_size)
        for r, free in enumerate(room):
            if need <= free:
                rows[r].append(piece)
                room[r] -= need
                break
        else:
            rows.append([piece])
            room.append(seq_len - need)

    toks = np.full((len(rows), seq_len), PAD, dtype=np.int64)
    keep = np.zeros((len(rows), seq_len), dtype=bool)
    layouts = []
    for r, row in enumerate(rows):
        spans, pos = [], 0
        for piece in row:
            toks[r, pos:pos + len(piece)] = piece
            keep[r, pos:pos + len(piece)] = True
            end = pos + quantize_length(len(piece), block_size)
            spans.append((pos, end))
            pos = end
        if pos < seq_len:
            spans.append((pos, seq_len))
        layouts.append(PackedLayout(seq_len, tuple(spans), block_size))
    return PackedBatch(toks, layouts, keep)


def load_corpus(path: str | Path) -> list[list[int]]:
    """Blank-line separated UTF-8 documents, each terminated with EOS."""
    text = Path(path).read_text(encoding="utf-8")
    docs = [d.strip("\n") for d in text.split("\n\n")]
    return [encode(d) + [EOS] for d in docs if d.strip()]


@dataclass
class PairExample:
    prompt: list[int]
    response: list[int]
    chosen: list[int] | None = None
    rejected: list[int] | None = None


def load_jsonl_pairs(path: str | Path, mode: str = "sft") -> list[PairExample]:
    """Parse SFT (prompt/response) or DPO (prompt/chosen/rejected) records.

    Malformed lines are skipped with a warning naming the line number.
    """
    fields = {"sft": ("prompt", "response"), "dpo": ("prompt", "chosen", "rejected")}[mode]
    out: list[PairExample] = []
    skipped = 0
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            log.warning("line %d: invalid JSON (%s); skipped", lineno, exc.msg)
            skipped += 1
            continue
        missing = [f for f in fields if not isinstance(rec, dict) or not isinstance(rec.get(f), str) or not rec.get(f)]
        if missing:
            log.warning("line %d: missing field(s) %s; skipped", lineno, ", ".join(missing))
            skipped += 1
            continue
        prompt = encode(rec["prompt"])
        if mode == "sft":
            out.append(PairExample(prompt, encode(rec["response"]) + [EOS]))
        else:
            chosen = encode(rec["chosen"]) + [EOS]
            out.append(PairExample(prompt, chosen, chosen, encode(rec["rejected"]) + [EOS]))
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", path, skipped)
    if not out:
        log.warning("%s: no usable records", path)
    return out


def sft_row(prompt: list[int], response: list[int], block_size: int) -> tuple[list[int], list[bool], list[bool]]:
    """Lay out one conditional example as [prompt + PAD | response + EOS fill].

    The prompt is PAD-filled to a block boundary so the response starts a
    fresh block, matching how the decoder opens its first block. The response
    is EOS-filled to a block multiple and the fill is supervised, so the model
    learns to close out a block after the answer ends.
    """
    p = pad_to_block(prompt, block_size, PAD)
    r = pad_to_block(response, block_size, EOS)
    tokens = p + r
    prompt_flags = [True] * len(p) + [False] * len(r)
    loss_flags = [False] * len(p) + [True] * len(r)
    return tokens, loss_flags, prompt_flags


def pack_pairs(pairs: list[tuple[list[int], list[int]]], seq_len: int, block_size: int) -> PackedBatch:
    """Pack conditional examples, one document per example, first-fit."""
    if seq_len % block_size:
        raise ValueError(f"sequence length {seq_len} is not divisible by block size {block_size}")
    items = [sft_row(p, r, block_size) for p, r in pairs]
    for toks, _, _ in items:
        if len(toks) > seq_len:
            raise ValueError(f"example of length {len(toks)} exceeds sequence length {seq_len}")
    rows: list[list[int]] = []
    room: list[int] = []
    for idx, (toks, _, _) in enumerate(items):
        for r, free in enumerate(room):
            if len(toks) <= free:
                rows[r].append(idx)
                room[r] -= len(toks)
                break
        else:
            rows.append([idx])
            room.append(seq_len - len(toks))
    B = len(rows)
    tokens = np.full((B, seq_len), PAD, dtype=np.int64)
    loss = np.zeros((B, seq_len), dtype=bool)
    prompt = np.zeros((B, seq_len), dtype=bool)
    layouts = []
    for r, members in enumerate(rows):
        pos, spans = 0, []
        for idx in members:
            toks, lf, pf = items[idx]
            n = len(toks)
            tokens[r, pos:pos + n] = toks
            loss[r, pos:pos + n] = lf
            prompt[r, pos:pos + n] = pf
            spans.append((pos, pos + n))
            pos += n
        if pos < seq_len:
            spans.append((pos, seq_len))
        layouts.append(PackedLayout(seq_len, tuple(spans), block_size))
    return PackedBatch(tokens, layouts, loss, prompt)
