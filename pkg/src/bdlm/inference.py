"""Block-wise threshold decoder with a KV cache over finalized content."""

from __future__ import annotations

import copy
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from . import tensorcore as tc
from .data import EOS, MASK, PAD, decode, pad_to_block
from .model import Denoiser, KVCache


@dataclass
class DecodeConfig:
    block_size: int = 32
    threshold: float = 0.95
    fallback_count: int = 1
    temperature: float = 0.0
    max_new_tokens: int = 32
    seed: int = 0
    use_cache: bool = True
    align_prompt: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.fallback_count < 1:
            raise ValueError("fallback_count must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")


@dataclass
class DecodeState:
    prompt: list[int]
    block_size: int
    finalized: list[int] = field(default_factory=list)
    block: list[int] = field(default_factory=list)
    filled: list[bool] = field(default_factory=list)
    forward_passes: int = 0
    cache_fills: int = 0
    accepted_history: list[int] = field(default_factory=list)
    steps_in_block: int = 0
    steps_per_block: list[int] = field(default_factory=list)

    def open_block(self, size: int) -> None:
        self.block = [MASK] * size
        self.filled = [False] * size
        self.steps_in_block = 0

    @property
    def unfilled(self) -> list[int]:
        return [i for i, f in enumerate(self.filled) if not f]


@dataclass
class DecodeMetrics:
    generated: int
    forward_passes: int
    seconds: float
    steps_per_block: dict[int, int]
    cache_fills: int = 0

    @property
    def tpf(self) -> float:
        return self.generated / self.forward_passes if self.forward_passes else 0.0

    @property
    def tps(self) -> float:
        return self.generated / self.seconds if self.seconds > 0 else 0.0

    def as_dict(self) -> dict:
        return {
            "generated": self.generated,
            "forward_passes": self.forward_passes,
            "tpf": self.tpf,
            "tps": self.tps,
            "steps_per_block": {str(k): v for k, v in sorted(self.steps_per_block.items())},
        }


def select_accepted(confidence: torch.Tensor, threshold: float, fallback_count: int) -> list[int]:
    """Indices (into ``confidence``) accepted in one refinement step.

    Everything strictly above ``threshold`` is taken; if that is fewer than
    ``fallback_count``, the most confident remaining candidates top it up.
    The result is always a prefix of the confidence-descending order.
    """
    n = confidence.numel()
    if n == 0:
        return []
    order = torch.sort(confidence, descending=True, stable=True).indices.tolist()
    above = int((confidence > threshold).sum())
    take = min(n, max(above, fallback_count))
    return sorted(order[:take])


def propose(logits: torch.Tensor, cfg: DecodeConfig, gen: torch.Generator | None = None):
    """Candidate token and its confidence at every row of ``logits``."""
    logits = logits.to(torch.float64)
    if cfg.temperature == 0.0:
        probs = torch.softmax(logits, dim=-1)
        conf, tok = probs.max(dim=-1)
        return tok, conf
    probs = torch.softmax(logits / cfg.temperature, dim=-1)
    tok = torch.multinomial(probs, 1, generator=gen).squeeze(-1)
    return tok, probs.gather(-1, tok[:, None]).squeeze(-1)


@torch.no_grad()
def refine_step(model: Denoiser, state: DecodeState, cfg: DecodeConfig, cache: KVCache | None = None,
                gen: torch.Generator | None = None, trace: list | None = None,
                states: list | None = None) -> DecodeState:
    """One forward over the active block; fills the accepted positions in place.

    ``trace`` collects the logits of every forward and ``states`` a copy of
    the state each forward saw.
    """
    todo = state.unfilled
    if not todo:
        raise ValueError("active block has no unfilled position")
    if states is not None:
        states.append(copy.deepcopy(state))
    logits = model.forward_decode(state, cache)
    state.forward_passes += 1
    state.steps_in_block += 1
    if trace is not None:
        trace.append(logits.detach().clone())
    tok, conf = propose(logits, cfg, gen)
    picked = select_accepted(conf, cfg.threshold, cfg.fallback_count)
    for j in picked:
        pos = todo[j]
        if state.filled[pos]:
            raise RuntimeError("attempted to rewrite a filled position")
        state.block[pos] = int(tok[j])
        state.filled[pos] = True
    state.accepted_history.append(len(picked))
    return state


def prepare_prompt(prompt: list[int], cfg: DecodeConfig) -> list[int]:
    """PAD the prompt to a block boundary so generation starts a fresh block."""
    if cfg.align_prompt and prompt:
        return pad_to_block(list(prompt), cfg.block_size, PAD)
    return list(prompt)


@torch.no_grad()
def generate(model: Denoiser, prompt: list[int], cfg: DecodeConfig, trace: list | None = None,
             states: list | None = None):
    """Decode up to ``max_new_tokens`` after ``prompt``.

    Returns (tokens, metrics). ``tokens`` are truncated after the first EOS
    (EOS included). Every block, including the one holding EOS, is refined to
    completion before it is finalized.
    """
    ctx = prepare_prompt(prompt, cfg)
    if len(ctx) + cfg.max_new_tokens > model.cfg.max_len:
        raise ValueError(f"prompt ({len(ctx)}) + max_new_tokens ({cfg.max_new_tokens}) exceeds max_len {model.cfg.max_len}")
    state = DecodeState(ctx, cfg.block_size)
    cache = KVCache() if cfg.use_cache else None
    gen = tc.seeded_generator(cfg.seed) if cfg.temperature > 0 else None
    t0 = time.perf_counter()
    remaining = cfg.max_new_tokens
    while remaining > 0:
        size = min(cfg.block_size, remaining)
        state.open_block(size)
        while state.unfilled:
            refine_step(model, state, cfg, cache, gen, trace, states)
        state.steps_per_block.append(state.steps_in_block)
        block = list(state.block)
        remaining -= size
        done = EOS in block
        if cache is not None and not done and remaining > 0:
            cache.append(model, block)
            state.cache_fills += 1
        state.finalized.extend(block)
        if done:
            break
    out = list(state.finalized)
    if EOS in out:
        out = out[: out.index(EOS) + 1]
    metrics = DecodeMetrics(len(state.finalized), state.forward_passes, time.perf_counter() - t0,
                            dict(Counter(state.steps_per_block)), state.cache_fills)
    return out, metrics


def generate_text(model: Denoiser, prompt: str, cfg: DecodeConfig) -> tuple[str, DecodeMetrics]:
    from .data import encode

    toks, m = generate(model, encode(prompt), cfg)
    return decode(toks), m


@torch.no_grad()
def decode_with_and_without_cache(model: Denoiser, prompt: list[int], cfg: DecodeConfig) -> dict:
    """Run the decoder with and without the KV cache and compare.

    Token equality and forward counts come from two independent runs. Logit
    divergence is measured on identical inputs: every state the cached run
    passed through is re-evaluated without the cache. Comparing the two runs
    step by step instead would pair up different states whenever a near tie
    in confidence makes them accept positions in a different order.
    """
    if cfg.temperature != 0.0:
        raise ValueError("cache comparison needs temperature 0")
    from dataclasses import replace

    trace, seen = [], []
    tok_on, m_on = generate(model, prompt, replace(cfg, use_cache=True), trace, seen)
    tok_off, m_off = generate(model, prompt, replace(cfg, use_cache=False))
    div = 0.0
    for logits, st in zip(trace, seen):
        if logits.numel():
            ref = model.forward_decode(st, None)
            div = max(div, float((logits.to(torch.float64) - ref.to(torch.float64)).abs().max()))
    return {
        "tokens_equal": tok_on == tok_off,
        "max_logit_divergence": div,
        "forward_passes_cache": m_on.forward_passes,
        "forward_passes_nocache": m_off.forward_passes,
        "steps_compared": len(trace),
    }
