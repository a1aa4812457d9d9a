"""End-to-end conversion experiment on the toy grammar.

AR pretraining, then the warmup-stable-decay block-size conversion, then SFT.

The confidence-term comparison retrains SFT twice from the same converted
weights, once with lambda = 0 and once with lambda > 0, so the two runs differ
only in lambda. It uses its own, shorter SFT budget: after the full budget the
model decodes each 32-token block in a single forward, tpf sits at its ceiling
and no change in lambda could raise it.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..data import EOS, decode, encode, pack_pairs
from ..inference import DecodeConfig, generate
from ..losses import CapConfig
from ..model import ModelConfig, build_model
from ..noising import sample_noised
from ..schedule import default_wsd
from ..trainer import MetricsLog, TrainConfig, TrainPhase, train_phase, wsd_phases
from .grammar import split

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 6000
    n_test: int = 150
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    lr: float = 1e-3
    batch_size: int = 16
    seq_len: int = 64
    warmup_steps: int = 50
    pretrain_steps: int = 400
    convert_steps: int = 1200
    sft_steps: int = 800
    cap_sft_steps: int = 400
    final_block_size: int = 32
    threshold: float = 0.95
    cap_lambda: float = 1.0
    run_cap: bool = True
    ablation_steps: int = 50
    spike_factor: float = 3.0
    smooth: int = 10


@dataclass
class PhaseCurve:
    name: str
    objective: str
    block_size: int
    losses: list[float]
    start: float
    peak: float
    diverged: bool


@dataclass
class EvalResult:
    exact_match: float
    tpf: float
    mean_correct_confidence: float
    samples: list[dict] = field(default_factory=list)


@dataclass
class ExperimentReport:
    config: dict
    phases: list[PhaseCurve]
    baseline: EvalResult
    cap_reference: EvalResult | None
    cap: EvalResult | None
    ablation: dict | None
    seconds: float

    @property
    def no_divergence(self) -> bool:
        return not any(p.diverged for p in self.phases)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def phase_curve(name: str, objective: str, block_size: int, losses: list[float], factor: float,
                smooth: int) -> PhaseCurve:
    """Phase-start value is the mean of the first ``smooth`` losses; the peak is
    the largest trailing mean over the same window, so one noisy minibatch does
    not count as a spike."""
    if not losses:
        return PhaseCurve(name, objective, block_size, [], 0.0, 0.0, False)
    w = max(1, min(smooth, len(losses)))
    arr = np.asarray(losses, dtype=np.float64)
    start = float(arr[:w].mean())
    peak = float(np.convolve(arr, np.ones(w) / w, mode="valid").max())
    return PhaseCurve(name, objective, block_size, list(map(float, losses)), start, peak, peak > factor * start)


def conversion_phases(cfg: ExperimentConfig) -> list[TrainPhase]:
    plan = default_wsd(cfg.seq_len, cfg.final_block_size, cfg.convert_steps * cfg.batch_size * cfg.seq_len)
    return wsd_phases(plan, TrainConfig(batch_size=cfg.batch_size, seq_len=cfg.seq_len))


@torch.no_grad()
def mean_correct_confidence(model, pairs, block_size: int, seq_len: int, tc: TrainConfig, seed: int) -> float:
    """Mean top probability over masked response tokens whose argmax is right.

    Noise draws depend only on ``seed``, so two models see identical inputs.
    """
    model.eval()
    packed = pack_pairs(pairs, seq_len, block_size)
    rng = np.random.default_rng(seed)
    nb = sample_noised(packed, tc.sft_noise, rng)
    probs = torch.softmax(model.forward_train(nb).to(torch.float64), dim=-1)
    conf, pred = probs.max(dim=-1)
    ok = pred == torch.from_numpy(nb.clean[nb.is_masked])
    return float(conf[ok].mean()) if bool(ok.any()) else 0.0


def evaluate(model, test, cfg: ExperimentConfig, tc: TrainConfig, n_samples: int = 5) -> EvalResult:
    dc = DecodeConfig(block_size=cfg.final_block_size, threshold=cfg.threshold,
                      max_new_tokens=cfg.final_block_size)
    hits, gen, fwd, samples = 0, 0, 0, []
    for prompt, ref in test:
        toks, m = generate(model, encode(prompt), dc)
        out = decode(toks)
        hits += out == ref
        gen += m.generated
        fwd += m.forward_passes
        if len(samples) < n_samples:
            samples.append({"prompt": prompt, "reference": ref, "output": out})
    pairs = [(encode(p), encode(r) + [EOS]) for p, r in test]
    conf = mean_correct_confidence(model, pairs, cfg.final_block_size, cfg.seq_len, tc, cfg.seed + 99)
    return EvalResult(hits / len(test), gen / fwd, conf, samples)


def conversion_experiment(cfg: ExperimentConfig | None = None, out_dir: str | Path | None = None) -> ExperimentReport:
    cfg = cfg or ExperimentConfig()
    t0 = time.perf_counter()
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    train, test = split(cfg.n_train, cfg.n_test, cfg.seed)
    docs = [encode(p + r) + [EOS] for p, r in train]
    pairs = [(encode(p), encode(r) + [EOS]) for p, r in train]

    mcfg = ModelConfig(d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                       d_ff=3 * cfg.d_model, max_len=2 * cfg.seq_len)
    model = build_model(mcfg, cfg.seed)
    tc = TrainConfig(seed=cfg.seed, batch_size=cfg.batch_size, seq_len=cfg.seq_len, lr=cfg.lr,
                     warmup_steps=cfg.warmup_steps)
    metrics = MetricsLog(Path(out_dir) / "metrics.jsonl" if out_dir else None)
    curves: list[PhaseCurve] = []
    gstep = 0

    def run(ph: TrainPhase, m, data, index: int, tcfg: TrainConfig = tc, record: bool = True,
            at: int | None = None, origin: int = 0):
        # side runs (ablation, CAP retrain) pass ``at`` and leave the step counter alone
        nonlocal gstep
        s = train_phase(m, ph, data, tcfg, metrics, index=index, global_step=gstep if at is None else at,
                        stabilizer_origin=origin)
        if at is None:
            gstep += s["steps"]
        c = phase_curve(ph.name, ph.objective, ph.block_size, s["losses"], cfg.spike_factor, cfg.smooth)
        if record:
            curves.append(c)
        log.info("%s: %d steps, start %.3f peak %.3f end %.3f (%.0fs)", ph.name, s["steps"], c.start, c.peak,
                 float(np.mean(c.losses[-cfg.smooth:])) if c.losses else 0.0, time.perf_counter() - t0)
        return c

    run(TrainPhase("pretrain", "ar", 1, cfg.pretrain_steps), model, docs, 0)
    ablation = None
    if cfg.ablation_steps > 0:
        # jump straight from block size 1 to the full sequence; report only
        probe = copy.deepcopy(model)
        c = run(TrainPhase("ablation_direct", "mdlm", cfg.seq_len, cfg.ablation_steps), probe, docs, 50,
                record=False, at=gstep, origin=gstep)
        ablation = {"start": c.start, "peak": c.peak, "losses": c.losses}
        del probe
    origin = gstep
    for i, ph in enumerate(conversion_phases(cfg), 1):
        run(ph, model, docs, i, origin=origin)
    converted = copy.deepcopy(model.state_dict())

    sft = TrainPhase("sft", "sft", cfg.final_block_size, cfg.sft_steps)
    sft_start = gstep
    run(sft, model, pairs, 20)
    baseline = evaluate(model, test, cfg, tc)
    log.info("baseline: EM %.3f tpf %.2f conf %.4f", baseline.exact_match, baseline.tpf, baseline.mean_correct_confidence)

    cap_reference = cap = None
    if cfg.run_cap:
        results = []
        for lam in (0.0, cfg.cap_lambda):
            model.load_state_dict(converted)
            # same phase name and index for both, so batches and noise draws match
            c = run(replace(sft, steps=cfg.cap_sft_steps), model, pairs, 20, replace(tc, cap=CapConfig(lam=lam)),
                    at=sft_start)
            c.name = f"sft_lambda_{lam:g}"
            results.append(evaluate(model, test, cfg, tc))
            log.info("lambda %g: EM %.3f tpf %.2f conf %.5f", lam, results[-1].exact_match, results[-1].tpf,
                     results[-1].mean_correct_confidence)
        cap_reference, cap = results

    metrics.close()
    report = ExperimentReport(asdict(cfg), curves, baseline, cap_reference, cap, ablation, time.perf_counter() - t0)
    if out_dir:
        Path(out_dir, "experiment.json").write_text(report.to_json())
        if not report.no_divergence:
            for c in curves:
                if c.diverged:
                    Path(out_dir, f"curve_{c.name}.json").write_text(json.dumps(asdict(c)))
    return report
