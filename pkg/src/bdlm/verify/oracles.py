"""Independent oracles.

Nothing here reuses the code path it checks: the mask oracle evaluates the
four-case rule entry by entry, the loss oracles are pure-Python loops over
nested lists, and gradients are checked against central differences.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..masks import PackedLayout, build_bdlm_mask


@dataclass
class OracleReport:
    name: str
    cases: int = 0
    max_deviation: float = 0.0
    tolerance: float = 0.0
    counterexamples: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance and not self.counterexamples

    def record(self, deviation: float, case: dict) -> None:
        self.cases += 1
        if deviation > self.max_deviation or deviation != deviation:
            self.max_deviation = deviation if deviation == deviation else math.inf
        if not deviation <= self.tolerance and len(self.counterexamples) < 10:
            self.counterexamples.append({**case, "deviation": deviation})

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, sort_keys=True, default=float)

    def dump(self, path: str | Path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


# -- masks -----------------------------------------------------------------


def bdlm_mask_by_cases(L: int, spans, lb: int) -> np.ndarray:
    doc = {}
    for d, (a, b) in enumerate(spans):
        for k in range(a, b):
            doc[k] = d
    out = np.zeros((2 * L, 2 * L), dtype=bool)
    for i in range(2 * L):
        for j in range(2 * L):
            if doc[i % L] != doc[j % L]:
                continue
            if i < L and j < L:
                out[i, j] = i // lb == j // lb
            elif i < L <= j:
                out[i, j] = i // lb > (j - L) // lb
            elif i >= L and j >= L:
                out[i, j] = (i - L) // lb >= (j - L) // lb
    return out


def compositions(n: int):
    """All ordered partitions of n into positive parts."""
    for cuts in itertools.product((0, 1), repeat=n - 1):
        parts, run = [], 1
        for c in cuts:
            if c:
                parts.append(run)
                run = 1
            else:
                run += 1
        parts.append(run)
        yield parts


def mask_oracle(max_len: int = 12) -> OracleReport:
    """Every L <= max_len, every block size dividing L, every document partition
    whose boundaries fall on block boundaries."""
    rep = OracleReport("bdlm_mask", tolerance=0.0)
    for L in range(1, max_len + 1):
        for lb in (d for d in range(1, L + 1) if L % d == 0):
            for parts in compositions(L // lb):
                spans, pos = [], 0
                for p in parts:
                    spans.append((pos, pos + p * lb))
                    pos += p * lb
                got = build_bdlm_mask(PackedLayout(L, tuple(spans), lb)).bits
                want = bdlm_mask_by_cases(L, spans, lb)
                dev = float((got != want).sum())
                rep.record(dev, {"L": L, "block_size": lb, "spans": spans})
    return rep


def mask_oracle_unaligned(max_len: int = 12) -> OracleReport:
    """Same comparison over every partition, including ones not aligned to blocks."""
    rep = OracleReport("bdlm_mask_any_partition", tolerance=0.0)
    for L in range(1, max_len + 1):
        for lb in (d for d in range(1, L + 1) if L % d == 0):
            for parts in compositions(L):
                spans, pos = [], 0
                for p in parts:
                    spans.append((pos, pos + p))
                    pos += p
                got = build_bdlm_mask(PackedLayout(L, tuple(spans), lb)).bits
                want = bdlm_mask_by_cases(L, spans, lb)
                rep.record(float((got != want).sum()), {"L": L, "block_size": lb, "spans": spans})
    return rep


# -- losses ----------------------------------------------------------------


def _log_softmax_row(row: list[float]) -> list[float]:
    m = max(row)
    s = 0.0
    for v in row:
        s += math.exp(v - m)
    lse = m + math.log(s)
    return [v - lse for v in row]


def scalar_weighted_ce(logits_rows: list[list[float]], targets: list[int], weights: list[float],
                       normalizer: int) -> float:
    """sum_i w_i * (-log softmax(logits_i)[target_i]) / normalizer, in plain Python."""
    total = 0.0
    for row, tgt, w in zip(logits_rows, targets, weights):
        total += w * -_log_softmax_row(row)[tgt]
    return total / normalizer


def scalar_loss_from_batch(logits: torch.Tensor, batch) -> float:
    """Loop over every position of the batch; ``logits`` are per masked position in row-major order."""
    rows = logits.detach().to(torch.float64).tolist()
    B, L = batch.clean.shape
    k = 0
    lr, tg, wt = [], [], []
    for b in range(B):
        for i in range(L):
            if batch.is_masked[b][i]:
                lr.append(rows[k])
                tg.append(int(batch.clean[b][i]))
                wt.append(1.0 / float(batch.t[b]))
                k += 1
    n = sum(int(v) for row in batch.loss_mask for v in row)
    return scalar_weighted_ce(lr, tg, wt, n)


def per_token_ar_oracle(model, clean: list[int]) -> float:
    """Mean of -log p(x_k | x_<k, MASK at k) with one causal forward per position.

    Each position gets its own sequence [x_0 .. x_{k-1}, MASK] run through the
    decoder path with block size 1, i.e. an independent route from the
    concatenated training forward.
    """
    from ..data import MASK
    from ..inference import DecodeState

    total = 0.0
    for k in range(len(clean)):
        st = DecodeState(prompt=list(clean[:k]), block_size=1)
        st.open_block(1)
        row = model.forward_decode(st, None)[0].detach().to(torch.float64).tolist()
        total += -_log_softmax_row(row)[clean[k]]
    return total / len(clean)


def loss_oracle(n_instances: int = 100, seed: int = 0, tolerance: float = 1e-6) -> OracleReport:
    """bdlm, mdlm and sft losses of a d=16 double-precision model against the
    scalar loop over the same logits, on random packed instances."""
    from ..data import EOS, pack_documents, pack_pairs
    from ..losses import bdlm_loss, mdlm_loss, sft_loss
    from ..model import ModelConfig, build_model
    from ..noising import NoiseSchedule, sample_noised

    rep = OracleReport("losses_vs_scalar_loop", tolerance=tolerance)
    model = build_model(ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=64), seed, "double")
    rng = np.random.default_rng(seed)
    noise, band = NoiseSchedule(), NoiseSchedule(bandwidth=(0.1, 0.9))
    for i in range(n_instances):
        kind = ("bdlm", "mdlm", "sft")[i % 3]
        if kind == "sft":
            pairs = [(rng.integers(0, 256, rng.integers(0, 5)).tolist(),
                      rng.integers(0, 256, rng.integers(1, 6)).tolist() + [EOS]) for _ in range(2)]
            nb = sample_noised(pack_pairs(pairs, 16, 4), band, rng)
        else:
            docs = [rng.integers(0, 256, rng.integers(1, 9)).tolist() for _ in range(3)]
            nb = sample_noised(pack_documents(docs, 16, 16 if kind == "mdlm" else 4), noise, rng)
        if nb.masked_count == 0:
            continue
        with torch.no_grad():
            if kind == "mdlm":
                logits = model.forward_mdlm(nb)
                got = float(mdlm_loss(logits, nb).value)
            else:
                logits = model.forward_train(nb)
                got = float((sft_loss if kind == "sft" else bdlm_loss)(logits, nb).value)
        rep.record(abs(got - scalar_loss_from_batch(logits, nb)), {"instance": i, "objective": kind, "seed": seed})
    return rep


def scalar_entropy(probs: list[float]) -> float:
    return -sum(p * math.log(p) for p in probs if p > 0)


# -- gradients -------------------------------------------------------------


def directional_gradcheck(loss_fn, params: dict[str, torch.Tensor], rng: np.random.Generator,
                          h: float = 1e-5) -> dict[str, float]:
    """Relative error between <grad, v> and a central difference along v,
    separately for every parameter tensor.

    v is a random unit vector plus the unit analytic gradient, renormalized.
    A purely random direction can land almost orthogonal to the gradient; the
    directional derivative then sinks below the resolution of a difference
    quotient at h = 1e-5 (about eps * |loss| / h) and the comparison measures
    roundoff instead of the gradient. Anchoring v on the gradient keeps the
    derivative near |grad| / sqrt(2), and the random part still exposes any
    error orthogonal to the gradient.

    ``loss_fn`` must be a deterministic closure returning a scalar tensor.
    Parameters must be double precision.
    """
    for p in params.values():
        if p.dtype != torch.float64:
            raise TypeError("gradient checks need double precision")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    # a parameter outside the graph has no .grad; its gradient is zero, which
    # the central difference then has to confirm
    grads = {n: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for n, p in params.items()}
    errs = {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            v = torch.from_numpy(rng.standard_normal(tuple(p.shape)))
            v /= v.norm()
            if g.norm() > 0:
                v += g / g.norm()
                v /= v.norm()
            analytic = float((g * v).sum())
            p.add_(h * v)
            up = float(loss_fn())
            p.sub_(2 * h * v)
            down = float(loss_fn())
            p.add_(h * v)
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            errs[name] = abs(analytic - numeric) / scale
    return errs


def elementwise_gradcheck(loss_fn, x: torch.Tensor, h: float = 1e-5) -> float:
    """Max relative error over every element of one small double tensor."""
    x.grad = None
    loss_fn().backward()
    g = x.grad.detach().clone().flatten()
    worst = 0.0
    flat = x.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            up = float(loss_fn())
            flat[i] = old - h
            down = float(loss_fn())
            flat[i] = old
            num = (up - down) / (2 * h)
            scale = max(abs(num), abs(float(g[i])), 1e-6)
            worst = max(worst, abs(num - float(g[i])) / scale)
    return worst
