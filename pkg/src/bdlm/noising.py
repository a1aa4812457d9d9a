"""Forward masking process: timestep draws, per-token masking, complementary pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MASK, PackedBatch
from .masks import PackedLayout


class NoiseConfigError(ValueError):
    pass


class DegenerateMaskError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear schedule: alpha_t = 1 - t, mask probability t, time weight 1/t.

    ``bandwidth`` bounds the realized mask rate of each sequence.
    """

    t_min: float = 0.02
    t_max: float = 1.0
    bandwidth: tuple[float, float] | None = None
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise NoiseConfigError(f"unsupported schedule {self.kind!r}")
        if not 0.0 < self.t_min <= self.t_max <= 1.0:
            raise NoiseConfigError(f"need 0 < t_min <= t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if self.bandwidth is not None:
            lo, hi = self.bandwidth
            if not 0.0 <= lo <= hi <= 1.0:
                raise NoiseConfigError(f"bad bandwidth {self.bandwidth}")
            if hi < self.t_min or lo > self.t_max:
                raise NoiseConfigError(
                    f"bandwidth {self.bandwidth} does not intersect [t_min, t_max] = [{self.t_min}, {self.t_max}]"
                )

    def alpha(self, t):
        return 1.0 - t

    def alpha_prime(self, t):
        return -1.0 + 0.0 * t

    def weight(self, t):
        return 1.0 / t

    def t_range(self) -> tuple[float, float]:
        lo, hi = self.t_min, self.t_max
        if self.bandwidth is not None:
            lo, hi = max(lo, self.bandwidth[0]), min(hi, self.bandwidth[1])
            lo = max(lo, 1e-6)
        return lo, hi


@dataclass
class NoisedBatch:
    clean: np.ndarray        # (B, L) int64
    noisy: np.ndarray        # (B, L) int64
    is_masked: np.ndarray    # (B, L) bool
    t: np.ndarray            # (B,) float64
    weight: np.ndarray       # (B,) float64
    layouts: list[PackedLayout]
    loss_mask: np.ndarray    # (B, L) bool: supervised positions (non-PAD, non-prompt)
    prompt_mask: np.ndarray | None = None

    @property
    def masked_count(self) -> int:
        return int(self.is_masked.sum())

    @property
    def normalizer(self) -> int:
        return int(self.loss_mask.sum())


def _maskable(batch: PackedBatch) -> np.ndarray:
    return batch.loss_mask.astype(bool)


def _build(batch: PackedBatch, is_masked: np.ndarray, t: np.ndarray) -> NoisedBatch:
    noisy = np.where(is_masked, MASK, batch.tokens)
    return NoisedBatch(
        clean=batch.tokens,
        noisy=noisy,
        is_masked=is_masked,
        t=t,
        weight=1.0 / t,
        layouts=list(batch.layouts),
        loss_mask=_maskable(batch),
        prompt_mask=batch.prompt_mask,
    )


def _bandwidth_counts(n: int, band: tuple[float, float]) -> tuple[int, int]:
    lo = int(np.ceil(band[0] * n - 1e-12))
    hi = int(np.floor(band[1] * n + 1e-12))
    if lo > hi:
        raise NoiseConfigError(f"no mask count of {n} tokens lies in bandwidth {band}")
    return lo, hi


def sample_noised(
    batch: PackedBatch,
    schedule: NoiseSchedule,
    seed: int | np.random.Generator,
    t: float | np.ndarray | None = None,
    max_tries: int = 64,
) -> NoisedBatch:
    """Draw t per sequence and mask each supervised token independently with prob. t.

    With a bandwidth, the Bernoulli draw is repeated until the realized mask
    rate of the row falls inside the band; if that keeps failing the nearest
    admissible count is enforced by flipping random positions.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    B = len(batch)
    maskable = _maskable(batch)
    if t is None:
        lo, hi = schedule.t_range()
        ts = rng.uniform(lo, hi, size=B)
    else:
        ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
        if np.any(ts <= 0) or np.any(ts > 1):
            raise NoiseConfigError("t must lie in (0, 1]")
    is_masked = np.zeros(batch.tokens.shape, dtype=bool)
    for b in range(B):
        idx = np.flatnonzero(maskable[b])
        n = idx.size
        if n == 0:
            continue
        draw = rng.random(n) < ts[b]
        if schedule.bandwidth is not None:
            lo_c, hi_c = _bandwidth_counts(n, schedule.bandwidth)
            tries = 0
            while not lo_c <= draw.sum() <= hi_c and tries < max_tries:
                draw = rng.random(n) < ts[b]
                tries += 1
            k = int(draw.sum())
            if k < lo_c:
                off = np.flatnonzero(~draw)
                draw[rng.choice(off, lo_c - k, replace=False)] = True
            elif k > hi_c:
                on = np.flatnonzero(draw)
                draw[rng.choice(on, k - hi_c, replace=False)] = False
        is_masked[b, idx] = draw
    return _build(batch, is_masked, ts)


def complementary_pair(
    batch: PackedBatch,
    t: float | np.ndarray,
    seed: int | np.random.Generator,
    schedule: NoiseSchedule | None = None,
) -> tuple[NoisedBatch, NoisedBatch]:
    """A masked batch and its exact complement over the supervised positions.

    Each row whose first or second mask comes out empty is redrawn once; if it
    is still degenerate the batch is rejected with DegenerateMaskError.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    schedule = schedule or NoiseSchedule()
    ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(batch),)).copy()
    if np.any(ts <= 0) or np.any(ts >= 1):
        raise NoiseConfigError("complementary masking needs t in (0, 1)")
    first = sample_noised(batch, schedule, rng, t=ts)
    maskable = _maskable(batch)
    m = first.is_masked.copy()
    for b in range(len(batch)):
        if not maskable[b].any():
            continue
        for attempt in range(2):
            k = int(m[b].sum())
            if 0 < k < int(maskable[b].sum()):
                break
            if attempt == 1:
                raise DegenerateMaskError(f"row {b}: complementary pair has an empty mask after resampling")
            redraw = sample_noised(batch.row(b), schedule, rng, t=ts[b : b + 1])
            m[b] = redraw.is_masked[0]
    second = maskable & ~m
    return _build(batch, m, ts), _build(batch, second, ts)
