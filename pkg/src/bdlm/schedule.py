"""Warmup-stable-decay block-size plans and top-k checkpoint merging."""

from __future__ import annotations

from dataclasses import dataclass

import torch

WARMUP_SHARES = (0.05, 0.05, 0.05, 0.05, 0.10)
STABLE_SHARE = 0.50
DECAY_SHARES = (0.10, 0.10)


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class Phase:
    name: str
    block_size: int
    token_budget: int


@dataclass(frozen=True)
class BlockSchedule:
    seq_len: int
    phases: tuple[Phase, ...]

    def __post_init__(self):
        validate_schedule(self)

    @property
    def warmup(self) -> list[int]:
        return [p.block_size for p in self.phases if p.name.startswith("warmup")]

    @property
    def stable(self) -> list[int]:
        return [p.block_size for p in self.phases if p.name == "stable"]

    @property
    def decay(self) -> list[int]:
        return [p.block_size for p in self.phases if p.name.startswith("decay")]

    @property
    def final_block_size(self) -> int:
        return self.phases[-1].block_size


def validate_schedule(s: BlockSchedule) -> None:
    L = s.seq_len
    for p in s.phases:
        if p.block_size < 1 or L % p.block_size:
            raise ValueError(f"phase {p.name}: block size {p.block_size} does not divide {L}")
        if p.token_budget < 0:
            raise ValueError(f"phase {p.name}: negative token budget")
    w, d = s.warmup, s.decay
    if w and (any(a >= b for a, b in zip(w, w[1:])) or w[-1] != L):
        raise ValueError(f"warmup block sizes must strictly increase to {L}: {w}")
    if d and any(a <= b for a, b in zip(d, d[1:])):
        raise ValueError(f"decay block sizes must strictly decrease: {d}")


def _warmup_ladder(L: int) -> list[int]:
    # Reference ladder 1 -> 4 -> 32 -> 64 -> L at L = 4096; the two middle
    # rungs shrink with L (capped at L/16 and L/4) and are dropped once they
    # fall below 4 or stop dividing L.
    rungs = [1]
    for r in (4, min(32, L // 16), min(64, L // 4)):
        if r >= 4 and r <= L // 4 and L % r == 0 and r > rungs[-1]:
            rungs.append(r)
    if L > rungs[-1]:
        rungs.append(L)
    return rungs


def default_wsd(seq_len: int, final_block_size: int, total_tokens: int = 0) -> BlockSchedule:
    """Block-size plan: grow to the full sequence, hold, then shrink.

    Decay passes through the largest warmup rung above the final size before
    landing on ``final_block_size``. Token budgets split the total as
    5/5/5/5/10 % warmup, 50 % stable and 10/10 % decay, renormalized when the
    ladder is shorter.
    """
    L, fb = seq_len, final_block_size
    if fb < 1 or L % fb:
        raise ValueError(f"final block size {fb} must divide sequence length {L}")
    warm = _warmup_ladder(L)
    mid = [r for r in warm[1:-1] if fb < r < L]
    decay = ([mid[-1]] if mid else []) + [fb]

    shares = list(WARMUP_SHARES[: len(warm) - 1]) + [WARMUP_SHARES[-1]]
    shares += [STABLE_SHARE] + list(DECAY_SHARES[: len(decay)])
    total_share = sum(shares)
    names = [f"warmup_{i}" for i in range(len(warm))] + ["stable"] + [f"decay_{i}" for i in range(len(decay))]
    sizes = warm + [L] + decay
    budgets = [int(total_tokens * s / total_share) for s in shares]
    return BlockSchedule(L, tuple(Phase(n, b, t) for n, b, t in zip(names, sizes, budgets)))


def schedule_from_lists(seq_len: int, warmup: list[int], stable: int, decay: list[int],
                        total_tokens: int = 0) -> BlockSchedule:
    sizes = list(warmup) + [stable] + list(decay)
    names = [f"warmup_{i}" for i in range(len(warmup))] + ["stable"] + [f"decay_{i}" for i in range(len(decay))]
    shares = [1.0 / len(sizes)] * len(sizes)
    if len(warmup) == 5 and len(decay) == 2:
        shares = list(WARMUP_SHARES) + [STABLE_SHARE] + list(DECAY_SHARES)
    return BlockSchedule(seq_len, tuple(Phase(n, b, int(total_tokens * s)) for n, b, s in zip(names, sizes, shares)))


@dataclass(frozen=True)
class CheckpointMeta:
    path: str
    step: int
    validation_elbo: float

    def __post_init__(self):
        if self.validation_elbo != self.validation_elbo or abs(self.validation_elbo) == float("inf"):
            raise ValueError(f"{self.path}: validation metric must be finite")


def select_top_k(candidates: list[CheckpointMeta], k: int) -> list[CheckpointMeta]:
    """The k lowest validation scores; ties go to the later step."""
    if k < 1 or k > len(candidates):
        raise ValueError(f"cannot select top {k} of {len(candidates)} checkpoints")
    return sorted(candidates, key=lambda m: (m.validation_elbo, -m.step))[:k]


def merge_checkpoints(params_list: list[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Elementwise arithmetic mean of every tensor, accumulated in double precision."""
    if not params_list:
        raise MergeError("nothing to merge")
    ref = params_list[0]
    for i, p in enumerate(params_list[1:], 1):
        if set(p) != set(ref):
            diff = sorted(set(p) ^ set(ref))
            raise MergeError(f"checkpoint {i} tensor names differ: {diff[0]}")
        for name in ref:
            if p[name].shape != ref[name].shape:
                raise MergeError(f"tensor {name}: shape {tuple(p[name].shape)} != {tuple(ref[name].shape)}")
    out = {}
    n = len(params_list)
    for name in ref:
        # sort elementwise so the result does not depend on list order, then
        # average offsets from the minimum: identical inputs give offsets of
        # exactly zero and so come back bitwise unchanged
        stacked = torch.stack([p[name].to(torch.float64) for p in params_list]).sort(dim=0).values
        low = stacked[0]
        acc = torch.zeros(ref[name].shape, dtype=torch.float64)
        for v in stacked[1:]:
            acc += v - low
        out[name] = (low + acc / n).to(ref[name].dtype)
    return out
