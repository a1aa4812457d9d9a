"""Training objectives: block-diffusion / MDLM / SFT cross-entropy, confidence
(entropy) loss, ELBO estimates and the preference loss built on them.

Losses are normalized by the number of supervised (non-PAD, non-prompt)
tokens, not by the masked count, so at full masking they equal mean
cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import tensorcore as tc
from .data import MASK, quantize_length, sft_row
from .masks import PackedLayout
from .noising import NoisedBatch, NoiseSchedule


class SkipBatch(Exception):
    """Raised when a batch has no masked supervised tokens."""


@dataclass
class LossReport:
    value: torch.Tensor
    per_token_ce: float
    masked_count: int
    extras: dict[str, float] = field(default_factory=dict)


@dataclass
class CapConfig:
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("confidence-loss weight must be >= 0")


@dataclass
class DpoConfig:
    beta: float = 0.1
    mc_samples: int = 1
    shared_noise: bool = True

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


def _masked_logits(logits: torch.Tensor, batch: NoisedBatch) -> torch.Tensor:
    if logits.dim() == 3:
        return logits[torch.from_numpy(batch.is_masked)]
    if logits.shape[0] != batch.masked_count:
        raise ValueError(f"expected logits for {batch.masked_count} masked positions, got {logits.shape[0]}")
    return logits


def _weighted_ce(logits: torch.Tensor, batch: NoisedBatch) -> LossReport:
    n_masked = batch.masked_count
    if n_masked == 0:
        raise SkipBatch("no masked tokens in batch")
    logits = _masked_logits(logits, batch)
    rows, _ = np.nonzero(batch.is_masked)
    targets = torch.from_numpy(batch.clean[batch.is_masked])
    w = torch.from_numpy(batch.weight[rows]).to(logits.dtype)
    ce = tc.cross_entropy(logits, targets)
    value = (w * ce).sum() / batch.normalizer
    with torch.no_grad():
        acc = (logits.argmax(-1) == targets).to(torch.float64).mean().item()
        ce_mean = ce.mean().item()
    return LossReport(value, ce_mean, n_masked, {"accuracy": acc})


def bdlm_loss(logits: torch.Tensor, batch: NoisedBatch, layout: PackedLayout | None = None) -> LossReport:
    """Time-weighted masked cross-entropy of clean tokens given the noisy block and earlier clean blocks."""
    if not batch.loss_mask[batch.is_masked].all():
        raise ValueError("masked positions must be supervised (non-PAD) positions")
    return _weighted_ce(logits, batch)


def mdlm_loss(logits: torch.Tensor, batch: NoisedBatch) -> LossReport:
    return bdlm_loss(logits, batch)


def sft_loss(logits: torch.Tensor, batch: NoisedBatch, prompt_lens=None) -> LossReport:
    """Block-diffusion loss restricted to response tokens."""
    prompt = batch.prompt_mask
    if prompt_lens is not None:
        L = batch.clean.shape[1]
        prompt = np.arange(L)[None, :] < np.asarray(prompt_lens)[:, None]
    if prompt is not None:
        if (batch.is_masked & prompt).any():
            raise ValueError("prompt tokens must never be masked")
        if (batch.loss_mask & prompt).any():
            raise ValueError("prompt tokens must not count toward the loss")
    if batch.normalizer == 0:
        raise ValueError("batch has no response tokens outside the prompt")
    return bdlm_loss(logits, batch)


def confidence_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean entropy (nats) over positions whose unique argmax equals the target.

    Ties for the maximum count as wrong. Returns 0 (still attached to the
    graph) when no position qualifies.
    """
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    with torch.no_grad():
        top = logits.max(dim=-1, keepdim=True).values
        unique = (logits == top).sum(-1) == 1
        correct = (logits.argmax(-1) == targets) & unique
    if not bool(correct.any()):
        return logits.sum() * 0.0
    return tc.entropy(logits[correct]).mean()


def cap_loss(sft: LossReport, conf: torch.Tensor, cfg: CapConfig) -> torch.Tensor:
    return sft.value + cfg.lam * conf


# -- ELBO and preference loss ---------------------------------------------


@dataclass
class ElboDraw:
    t: float
    u: np.ndarray  # uniform per response position; masked where u < t


def draw_elbo_noise(n_positions: int, n_samples: int, rng: np.random.Generator,
                    schedule: NoiseSchedule | None = None) -> list[ElboDraw]:
    lo, hi = (schedule or NoiseSchedule()).t_range()
    return [ElboDraw(float(rng.uniform(lo, hi)), rng.random(n_positions)) for _ in range(n_samples)]


def elbo_batch(prompt: list[int], response: list[int], draws: list[ElboDraw], block_size: int) -> NoisedBatch:
    tokens, loss_flags, prompt_flags = sft_row(prompt, response, block_size)
    L = len(tokens)
    clean = np.tile(np.asarray(tokens, dtype=np.int64), (len(draws), 1))
    loss = np.tile(np.asarray(loss_flags), (len(draws), 1))
    pmask = np.tile(np.asarray(prompt_flags), (len(draws), 1))
    resp_idx = np.flatnonzero(loss_flags)
    is_masked = np.zeros_like(loss)
    t = np.empty(len(draws))
    for i, d in enumerate(draws):
        if d.u.size < resp_idx.size:
            raise ValueError("noise draw shorter than the response")
        is_masked[i, resp_idx] = d.u[: resp_idx.size] < d.t
        t[i] = d.t
    lay = PackedLayout(L, ((0, L),), block_size)
    return NoisedBatch(clean, np.where(is_masked, MASK, clean), is_masked, t, 1.0 / t,
                       [lay] * len(draws), loss, pmask)


def elbo_from_draws(model, prompt, response, draws: list[ElboDraw], block_size: int) -> torch.Tensor:
    """Mean over draws of the time-weighted masked log-likelihood (<= 0)."""
    batch = elbo_batch(prompt, response, draws, block_size)
    if batch.masked_count == 0:
        return model.embed.sum() * 0.0
    logits = model.forward_train(batch)
    rows, _ = np.nonzero(batch.is_masked)
    targets = torch.from_numpy(batch.clean[batch.is_masked])
    w = torch.from_numpy(batch.weight[rows]).to(logits.dtype)
    ll = -(w * tc.cross_entropy(logits, targets)).sum()
    return ll / len(draws)


def bdlm_elbo(model, prompt, response, cfg: DpoConfig, rng: np.random.Generator,
              block_size: int, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    n = quantize_length(len(response), block_size)
    draws = draw_elbo_noise(n, cfg.mc_samples, rng, schedule)
    return elbo_from_draws(model, prompt, response, draws, block_size)


def dpo_loss(policy, reference, pair, cfg: DpoConfig, rng: np.random.Generator, block_size: int,
             schedule: NoiseSchedule | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """-log sigmoid(beta * (dB(chosen) - dB(rejected))), dB = policy ELBO - reference ELBO."""
    prompt, chosen, rejected = pair.prompt, pair.chosen, pair.rejected
    n = quantize_length(max(len(chosen), len(rejected)), block_size)
    if cfg.shared_noise:
        shared = draw_elbo_noise(n, cfg.mc_samples, rng, schedule)
        dw = dl = rw = rl = shared
    else:
        dw, dl, rw, rl = (draw_elbo_noise(n, cfg.mc_samples, rng, schedule) for _ in range(4))
    b_w = elbo_from_draws(policy, prompt, chosen, dw, block_size)
    b_l = elbo_from_draws(policy, prompt, rejected, dl, block_size)
    with torch.no_grad():
        r_w = elbo_from_draws(reference, prompt, chosen, rw, block_size)
        r_l = elbo_from_draws(reference, prompt, rejected, rl, block_size)
    margin = (b_w - r_w) - (b_l - r_l)
    loss = -F.logsigmoid(cfg.beta * margin)
    return loss, {"margin": float(margin.detach()), "chosen_elbo": float(b_w.detach()),
                  "rejected_elbo": float(b_l.detach())}
