"""Phase training loops: AR pretraining, block-size conversion, SFT/CAP and DPO."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PackedBatch, PairExample, pack_documents, pack_pairs, stack_rows
from .losses import (
    CapConfig,
    DpoConfig,
    SkipBatch,
    bdlm_loss,
    cap_loss,
    confidence_loss,
    dpo_loss,
    mdlm_loss,
    sft_loss,
)
from .model import Denoiser, StabilizerConfig
from .noising import DegenerateMaskError, NoisedBatch, NoiseSchedule, complementary_pair, sample_noised

log = logging.getLogger(__name__)

OBJECTIVES = ("ar", "bdlm", "mdlm", "sft", "dpo")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 3e-4
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    sft_noise: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(bandwidth=(0.1, 0.9)))
    stabilizer: StabilizerConfig = field(default_factory=StabilizerConfig)
    cap: CapConfig = field(default_factory=CapConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    complementary: bool = True

    def __post_init__(self):
        for name in ("lr", "batch_size", "seq_len", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainPhase:
    name: str
    objective: str
    block_size: int
    steps: int
    lr: float | None = None
    constant_lr: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")


def steps_for_budget(tokens: int, cfg: TrainConfig) -> int:
    return -(-int(tokens) // (cfg.batch_size * cfg.seq_len)) if tokens > 0 else 0


def wsd_phases(plan, cfg: TrainConfig) -> list[TrainPhase]:
    """Training phases for a block-size schedule; full-sequence blocks use the cheaper MDLM path."""
    return [
        TrainPhase(p.name, "mdlm" if p.block_size == plan.seq_len else "bdlm", p.block_size,
                   steps_for_budget(p.token_budget, cfg))
        for p in plan.phases
    ]


def lr_at(step: int, total: int, base: float, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio * base`` within one phase.

    The warmup is capped at a tenth of the phase so short phases still decay.
    """
    warm = min(cfg.warmup_steps, max(1, total // 10))
    if step < warm:
        return base * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm - 1)
    floor = base * cfg.min_lr_ratio
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * min(1.0, frac)))


class MetricsLog:
    """JSON-lines sink; ``records`` keeps everything in memory as well."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _phase_seed(cfg: TrainConfig, phase: TrainPhase, index: int) -> int:
    return (cfg.seed * 7919 + index * 104_729 + sum(map(ord, phase.name))) % (2**31)


def _row_batches(batch: PackedBatch, size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(len(batch))
        for s in range(0, len(order) - size + 1 if len(order) >= size else 1, size):
            yield stack_rows([batch.row(int(i)) for i in order[s:s + size]])


def _global_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().to(torch.float64).pow(2).sum())
    return math.sqrt(sq)


def _loss_for(model: Denoiser, phase: TrainPhase, rows: PackedBatch, cfg: TrainConfig,
              rng: np.random.Generator, step: int, seed: int):
    """Returns (loss tensor, masked count, extras)."""
    if phase.objective == "ar":
        nb = sample_noised(rows, cfg.noise, rng, t=1.0)
        rep = bdlm_loss(model.forward_train(nb), nb)
        return rep.value, rep.masked_count, rep.extras
    if phase.objective == "bdlm":
        nb = sample_noised(rows, cfg.noise, rng)
        rep = bdlm_loss(model.forward_train(nb, cfg.stabilizer, step, seed), nb)
        return rep.value, rep.masked_count, rep.extras
    if phase.objective == "mdlm":
        nb = sample_noised(rows, cfg.noise, rng)
        rep = mdlm_loss(model.forward_mdlm(nb, cfg.stabilizer, step, seed), nb)
        return rep.value, rep.masked_count, rep.extras
    if phase.objective == "sft":
        nb = sft_noised(rows, cfg, rng)
        logits = model.forward_train(nb)
        rep = sft_loss(logits, nb)
        targets = torch.from_numpy(nb.clean[nb.is_masked])
        conf = confidence_loss(logits, targets)
        total = cap_loss(rep, conf, cfg.cap)
        return total, rep.masked_count, {**rep.extras, "sft": float(rep.value.detach()), "conf": float(conf.detach())}
    raise ValueError(phase.objective)


def sft_noised(rows: PackedBatch, cfg: TrainConfig, rng: np.random.Generator) -> NoisedBatch:
    """Noised SFT batch; with complementary masking each row appears twice (mask and its inverse)."""
    if not cfg.complementary:
        return sample_noised(rows, cfg.sft_noise, rng)
    lo, hi = cfg.sft_noise.t_range()
    for _ in range(4):
        ts = rng.uniform(lo, min(hi, 1 - 1e-6), size=len(rows))
        try:
            a, b = complementary_pair(rows, ts, rng, cfg.sft_noise)
            break
        except DegenerateMaskError:
            continue
    else:
        raise SkipBatch("could not draw a non-degenerate complementary pair")
    pm = None if a.prompt_mask is None else np.concatenate([a.prompt_mask, b.prompt_mask])
    return NoisedBatch(
        np.concatenate([a.clean, b.clean]), np.concatenate([a.noisy, b.noisy]),
        np.concatenate([a.is_masked, b.is_masked]), np.concatenate([a.t, b.t]),
        np.concatenate([a.weight, b.weight]), a.layouts + b.layouts,
        np.concatenate([a.loss_mask, b.loss_mask]), pm,
    )


def make_optimizer(model: Denoiser, cfg: TrainConfig, lr: float) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
    )


def train_phase(model: Denoiser, phase: TrainPhase, data, cfg: TrainConfig, metrics: MetricsLog | None = None,
                index: int = 0, reference: Denoiser | None = None, global_step: int = 0,
                stabilizer_origin: int = 0) -> dict:
    """Train ``model`` in place for one phase. Returns a summary dict.

    ``data`` is a list of token documents (ar/bdlm/mdlm), of (prompt, response)
    pairs (sft) or of PairExample with chosen/rejected (dpo). A non-finite loss
    restores the parameters from before the failing step and raises
    TrainingDiverged.

    The MASK-embedding noise of the conversion objectives (bdlm, mdlm) is
    active for ``cfg.stabilizer.active_steps`` global steps counted from
    ``stabilizer_origin``.
    """
    metrics = metrics or MetricsLog()
    summary = {"phase": phase.name, "steps": 0, "losses": [], "final_lr": None}
    if phase.steps <= 0:
        return summary
    seed = _phase_seed(cfg, phase, index)
    rng = np.random.default_rng(seed)
    base_lr = phase.lr if phase.lr is not None else cfg.lr
    opt = make_optimizer(model, cfg, base_lr)
    params = [p for p in model.parameters() if p.requires_grad]

    if phase.objective == "dpo":
        if reference is None:
            raise ValueError("dpo phase needs a frozen reference model")
        reference.requires_grad_(False)
        batches = None
    elif phase.objective == "sft":
        packed = pack_pairs(data, cfg.seq_len, phase.block_size)
        batches = _row_batches(packed, min(cfg.batch_size, len(packed)), rng)
    else:
        packed = pack_documents(data, cfg.seq_len, phase.block_size)
        batches = _row_batches(packed, min(cfg.batch_size, len(packed)), rng)

    model.train()
    lr = base_lr
    for step in range(phase.steps):
        lr = base_lr if phase.constant_lr else lr_at(step, phase.steps, base_lr, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        t0 = time.perf_counter()
        opt.zero_grad(set_to_none=True)
        try:
            if phase.objective == "dpo":
                picks = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
                losses, margins = [], []
                for i in picks:
                    l_i, info = dpo_loss(model, reference, data[int(i)], cfg.dpo, rng, phase.block_size, cfg.sft_noise)
                    losses.append(l_i)
                    margins.append(info["margin"])
                loss = torch.stack(losses).mean()
                n_masked, extras, n_tok = len(picks), {"margin": float(np.mean(margins))}, 0
            else:
                rows = next(batches)
                loss, n_masked, extras = _loss_for(model, phase, rows, cfg, rng,
                                                   global_step + step - stabilizer_origin, seed)
                n_tok = int(rows.loss_mask.sum())
        except SkipBatch:
            log.debug("%s step %d: skipped batch with nothing masked", phase.name, step)
            continue
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{phase.name} step {step}: non-finite loss {float(loss.detach())}")
        snapshot = [p.detach().clone() for p in params]
        loss.backward()
        raw = _global_norm(params)
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        clipped = _global_norm(params)
        opt.step()
        if not all(bool(torch.isfinite(p).all()) for p in params):
            with torch.no_grad():
                for p, s in zip(params, snapshot):
                    p.copy_(s)
            raise TrainingDiverged(f"{phase.name} step {step}: parameters became non-finite")
        dt = time.perf_counter() - t0
        val = float(loss.detach())
        summary["losses"].append(val)
        summary["steps"] += 1
        metrics.write({
            "step": global_step + step,
            "phase": phase.name,
            "block_size": phase.block_size,
            "loss": val,
            "grad_norm": clipped,
            "grad_norm_raw": raw,
            "masked": n_masked,
            "lr": lr,
            "tokens_per_sec": n_tok / dt if dt > 0 else 0.0,
            **{k: v for k, v in extras.items()},
        })
    summary["final_lr"] = lr
    return summary


# -- evaluation ------------------------------------------------------------


@torch.no_grad()
def evaluate_elbo(model: Denoiser, data, n_samples: int, block_size: int, seq_len: int,
                  seed: int = 0, schedule: NoiseSchedule | None = None) -> float:
    """Monte Carlo estimate of the masked-diffusion objective in nats per supervised token.

    ``data`` is a list of token documents or of (prompt, response) pairs.
    Uses the MDLM path when ``block_size == seq_len`` and the data are documents.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not data:
        raise ValueError("evaluation data is empty")
    schedule = schedule or NoiseSchedule()
    model.eval()
    paired = isinstance(data[0], tuple)
    packed = pack_pairs(data, seq_len, block_size) if paired else pack_documents(data, seq_len, block_size)
    rng = np.random.default_rng(seed)
    num, den = 0.0, 0
    for _ in range(n_samples):
        for s in range(0, len(packed), 64):
            rows = stack_rows([packed.row(i) for i in range(s, min(s + 64, len(packed)))])
            nb = sample_noised(rows, schedule, rng)
            den += nb.normalizer
            if nb.masked_count == 0:
                continue
            if block_size == seq_len and not paired:
                rep = mdlm_loss(model.forward_mdlm(nb), nb)
            else:
                rep = bdlm_loss(model.forward_train(nb), nb)
            num += float(rep.value) * nb.normalizer
    return num / den


def run_phases(model: Denoiser, phases: list[TrainPhase], data, cfg: TrainConfig,
               metrics: MetricsLog | None = None, on_phase_end=None, start_index: int = 0,
               global_step: int = 0) -> list[dict]:
    """Train the phases in order; the stabilizer window opens at the first of them."""
    metrics = metrics or MetricsLog()
    out, gstep = [], global_step
    for i, ph in enumerate(phases):
        summ = train_phase(model, ph, data, cfg, metrics, index=start_index + i, global_step=gstep,
                           stabilizer_origin=global_step)
        gstep += summ["steps"]
        out.append(summ)
        if on_phase_end:
            on_phase_end(ph, summ)
    return out
