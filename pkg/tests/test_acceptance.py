"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The end-to-end run behind criteria 7 and 8 takes several minutes; it is marked
``slow`` and can be skipped with ``-m "not slow"``.
"""

import copy
import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from bdlm.cli import main as cli_main
from bdlm.data import EOS, PairExample, encode, pack_documents, pack_pairs
from bdlm.inference import DecodeConfig, decode_with_and_without_cache, generate, propose, select_accepted
from bdlm.losses import CapConfig, DpoConfig, bdlm_loss, cap_loss, confidence_loss, dpo_loss, mdlm_loss, sft_loss
from bdlm.model import build_model
from bdlm.noising import NoiseSchedule, sample_noised
from bdlm.schedule import merge_checkpoints
from bdlm.trainer import TrainConfig, sft_noised
from bdlm.verify.oracles import (
    directional_gradcheck,
    elementwise_gradcheck,
    mask_oracle,
    mask_oracle_unaligned,
    per_token_ar_oracle,
)
from conftest import ACCEPTANCE, tiny_config


def verdict(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def random_docs(rng, n, lo=2, hi=9):
    return [rng.integers(0, 256, rng.integers(lo, hi)).tolist() for _ in range(n)]


def test_criterion_01_mask_oracle():
    t0 = time.perf_counter()
    aligned = mask_oracle(12)
    anyway = mask_oracle_unaligned(12)
    dt = time.perf_counter() - t0
    dev = aligned.max_deviation + anyway.max_deviation
    verdict(1, dev == 0 and dt < 60,
            f"{aligned.cases + anyway.cases} layouts, {dev:.0f} mismatched entries, {dt:.1f}s")


def test_criterion_02_loss_reductions():
    model = build_model(tiny_config(), 0, "double")
    rng = np.random.default_rng(2)
    exact, draws = 0, 0
    for s in range(200):
        nb = sample_noised(pack_documents(random_docs(rng, 3), 16, 16), NoiseSchedule(), s)
        if nb.masked_count == 0:
            continue
        draws += 1
        with torch.no_grad():
            a = float(bdlm_loss(model.forward_train(nb), nb).value)
            b = float(mdlm_loss(model.forward_mdlm(nb), nb).value)
        exact += a == b
    worst = 0.0
    for doc in random_docs(rng, 30, 2, 17):
        nb = sample_noised(pack_documents([doc], 16, 1), NoiseSchedule(), 0, t=1.0)
        with torch.no_grad():
            got = float(bdlm_loss(model.forward_train(nb), nb).value)
        worst = max(worst, abs(got - per_token_ar_oracle(model, doc)))
    verdict(2, exact == draws and worst <= 1e-6,
            f"one block: {exact}/{draws} draws bitwise equal; block size 1 vs per-token loop: max |diff| {worst:.2e}")


def _gradcheck_instances(objective: str, n: int):
    worst = 0.0
    for i in range(n):
        rng = np.random.default_rng(1000 * i + len(objective))
        model = build_model(tiny_config(n_layers=1), i, "double")
        params = dict(model.named_parameters())
        if objective in ("ar", "bdlm", "mdlm"):
            lb = {"ar": 1, "bdlm": 4, "mdlm": 8}[objective]
            nb = sample_noised(pack_documents(random_docs(rng, 2), 8, lb), NoiseSchedule(), rng,
                               t=1.0 if objective == "ar" else None)
            if nb.masked_count == 0:
                continue
            if objective == "mdlm":
                fn = lambda: mdlm_loss(model.forward_mdlm(nb), nb).value
            else:
                fn = lambda: bdlm_loss(model.forward_train(nb), nb).value
        elif objective in ("sft", "cap"):
            pairs = [(random_docs(rng, 1, 1, 4)[0], random_docs(rng, 1, 1, 5)[0] + [EOS])]
            cfg = TrainConfig(batch_size=1, seq_len=16)
            try:
                nb = sft_noised(pack_pairs(pairs, 16, 4), cfg, rng)
            except Exception:
                continue
            lam = 0.0 if objective == "sft" else 0.7

            def fn():
                logits = model.forward_train(nb)
                tg = torch.from_numpy(nb.clean[nb.is_masked])
                return cap_loss(sft_loss(logits, nb), confidence_loss(logits, tg), CapConfig(lam))
        else:
            ref = build_model(tiny_config(n_layers=1), i + 10_000, "double")
            ref.requires_grad_(False)
            pr, ch, rj = (random_docs(rng, 1, 1, 5)[0] for _ in range(3))
            pair = PairExample(pr, ch + [EOS], ch + [EOS], rj + [EOS])
            fn = lambda: dpo_loss(model, ref, pair, DpoConfig(mc_samples=1), np.random.default_rng(i), 4)[0]
        errs = directional_gradcheck(fn, params, rng)
        worst = max(worst, max(errs.values()))
        if objective == "cap":
            # the confidence term only acts where the argmax is right, so also
            # check it on logits with planted correct argmaxes
            x = torch.from_numpy(rng.standard_normal((6, 12))).requires_grad_(True)
            tg = torch.from_numpy(rng.integers(0, 12, 6))
            with torch.no_grad():
                x[torch.arange(6), tg] += 3.0
            worst = max(worst, elementwise_gradcheck(lambda: confidence_loss(x, tg), x))
    return worst


OBJECTIVES = ("ar", "bdlm", "mdlm", "sft", "cap", "dpo")


def test_criterion_03_gradients():
    worst = {obj: _gradcheck_instances(obj, 100) for obj in OBJECTIVES}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(3, all(v <= 1e-4 for v in worst.values()), f"max relative error over 100 instances each: {detail}")


def test_criterion_04_dpo_identity():
    rng = np.random.default_rng(4)
    policy = build_model(tiny_config(), 4, "double")
    ref = copy.deepcopy(policy)
    bitwise = 0
    for s in range(50):
        pr, ch, rj = (random_docs(rng, 1, 1, 7)[0] for _ in range(3))
        loss, _ = dpo_loss(policy, ref, PairExample(pr, ch + [EOS], ch + [EOS], rj + [EOS]), DpoConfig(),
                           np.random.default_rng(s), 4)
        bitwise += float(loss.detach()) == math.log(2)
    pair = PairExample([1, 2, 3], [4, 5, EOS], [4, 5, EOS], [6, 7, EOS])
    cfg = DpoConfig(mc_samples=4)
    loss, before = dpo_loss(policy, ref, pair, cfg, np.random.default_rng(0), 4)
    loss.backward()
    with torch.no_grad():
        for p in policy.parameters():
            p -= 0.5 * p.grad
    _, after = dpo_loss(policy, ref, pair, cfg, np.random.default_rng(0), 4)
    verdict(4, bitwise == 50 and after["margin"] > before["margin"],
            f"ln2 bitwise on {bitwise}/50 pairs; margin {before['margin']:.3g} -> {after['margin']:.4g} after one step")


def test_criterion_05_complementary_masks():
    rng = np.random.default_rng(5)
    cfg = TrainConfig(batch_size=8, seq_len=32)
    checked = bad = 0
    while checked < 10_000:
        n = int(rng.integers(1, 5))
        pairs = [(random_docs(rng, 1, 0, 6)[0], random_docs(rng, 1, 1, 12)[0] + [EOS]) for _ in range(n)]
        packed = pack_pairs(pairs, cfg.seq_len, int(rng.choice([1, 2, 4, 8])))
        try:
            nb = sft_noised(packed, cfg, rng)
        except Exception:
            continue
        k = len(packed)
        a, b = nb.is_masked[:k], nb.is_masked[k:]
        response = nb.loss_mask[:k] & ~nb.prompt_mask[:k]
        bad += bool((a & b).any() or ((a | b) != response).any())
        checked += 1
    verdict(5, bad == 0, f"{checked} batches, {bad} where the two masks do not partition the response")


def test_criterion_06_decoder_contracts():
    model = build_model(tiny_config(max_len=128), 6).eval()
    prompts = [encode(s) for s in ("2+2=", "hello", "a", "xyz=zyx")]
    # threshold 1 + fallback 1 -> one token per forward
    one_each = all(
        generate(model, p, DecodeConfig(block_size=b, threshold=1.0, max_new_tokens=16))[1].forward_passes
        == generate(model, p, DecodeConfig(block_size=b, threshold=1.0, max_new_tokens=16))[1].generated
        for p in prompts for b in (1, 4, 16))
    # per-step monotonicity on real logits
    trace = []
    generate(model, prompts[0], DecodeConfig(block_size=16, threshold=0.5, max_new_tokens=32), trace)
    grid = [0.05, 0.1, 0.3, 0.5, 0.9, 0.95, 1.0]
    mono = True
    for logits in trace:
        _, c = propose(logits, DecodeConfig())
        sets = [set(select_accepted(c, t, 1)) for t in grid]
        mono &= all(hi <= lo for lo, hi in zip(sets, sets[1:]))
    # cache vs recompute
    div, same = 0.0, True
    for p, b, t in itertools.product(prompts, (2, 8, 32), (0.3, 0.95)):
        rep = decode_with_and_without_cache(model, p, DecodeConfig(block_size=b, threshold=t, max_new_tokens=32))
        same &= rep["tokens_equal"] and rep["forward_passes_cache"] == rep["forward_passes_nocache"]
        div = max(div, rep["max_logit_divergence"])
    # tpf accounting against an independent call counter
    calls = []
    orig = model.forward_decode
    model.forward_decode = lambda *a, **k: calls.append(1) or orig(*a, **k)
    try:
        _, m = generate(model, prompts[1], DecodeConfig(block_size=8, threshold=0.2, max_new_tokens=24))
    finally:
        del model.forward_decode
    tpf_ok = m.forward_passes == len(calls) and m.tpf == m.generated / len(calls)
    ok = one_each and mono and same and div <= 1e-5 and tpf_ok
    verdict(6, ok, f"one-per-forward {one_each}, monotone over {len(trace)} steps {mono}, cache tokens equal {same} "
                   f"(max logit divergence {div:.1e}), tpf exact {tpf_ok} ({m.generated}/{len(calls)})")


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    from bdlm.verify.experiment import conversion_experiment

    return conversion_experiment(out_dir=tmp_path_factory.mktemp("experiment"))


@pytest.mark.slow
def test_criterion_07_end_to_end(experiment):
    r = experiment
    worst = max(r.phases, key=lambda p: p.peak / p.start if p.start else 0.0)
    ok = r.no_divergence and r.baseline.exact_match >= 0.95 and r.baseline.tpf > 1.2 and r.seconds < 1800
    verdict(7, ok, f"exact match {r.baseline.exact_match:.3f}, tpf {r.baseline.tpf:.2f}, worst phase "
                   f"{worst.name} peak/start {worst.peak / worst.start:.2f}, {r.seconds / 60:.1f} min")


@pytest.mark.slow
def test_criterion_08_cap(experiment):
    # lambda = 0 and lambda > 0 retrained from the same converted weights on the shorter budget
    b, c = experiment.cap_reference, experiment.cap
    # compare in whole test items: 148/150 - 145/150 is 0.020000000000000018 in floats
    n = experiment.config["n_test"]
    drop = round((b.exact_match - c.exact_match) * n)
    ok = (c.mean_correct_confidence > b.mean_correct_confidence and c.tpf > b.tpf and drop <= 0.02 * n)
    verdict(8, ok, f"confidence {b.mean_correct_confidence:.5f} -> {c.mean_correct_confidence:.5f}, "
                   f"tpf {b.tpf:.2f} -> {c.tpf:.2f}, exact match {b.exact_match:.3f} -> {c.exact_match:.3f} "
                   f"(lambda {experiment.config['cap_lambda']:g})")


def test_criterion_09_merge(tmp_path):
    g = torch.Generator().manual_seed(9)
    p = {"w": torch.randn(4, 5, generator=g, dtype=torch.float64), "b": torch.randn(7, generator=g, dtype=torch.float64)}
    idem = all(all(torch.equal(merge_checkpoints([p] * k)[n], p[n]) for n in p) for k in (1, 2, 3, 5))
    # constructed inputs: dyadic values whose mean is exactly representable
    cons = [{"w": torch.tensor([0.0, 1.5, -2.0], dtype=torch.float64)},
            {"w": torch.tensor([2.0, 2.5, 6.0], dtype=torch.float64)}]
    exact = merge_checkpoints(cons)["w"].tolist() == [1.0, 2.0, 2.0]
    many = [{"w": torch.randn(3, 3, generator=g, dtype=torch.float64)} for _ in range(4)]
    ref = merge_checkpoints(many)
    perm = all(torch.equal(merge_checkpoints(list(q))["w"], ref["w"]) for q in itertools.permutations(many))
    close = all(abs(Fraction(float(v)) - sum(Fraction(float(m["w"].flatten()[i])) for m in many) / 4) < 1e-15
                for i, v in enumerate(ref["w"].flatten()))
    verdict(9, idem and exact and perm and close,
            f"idempotent {idem}, exact mean {exact and close}, permutation invariant over 24 orders {perm}")


def _pipeline(d):
    d.mkdir()
    (d / "tiny.cfg").write_text("d_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\nmax_len = 64\nseq_len = 16\n"
                                "block_size = 4\nbatch_size = 4\nsteps = 4\nconvert_steps = 10\nwarmup_steps = 1\n")
    (d / "c.txt").write_text("abc=abc\n\nxy=yx\n\nhello=world\n")
    (d / "s.jsonl").write_text("".join(json.dumps({"prompt": p, "response": r}) + "\n"
                                       for p, r in [("ab=", "ab"), ("q=", "q")]))
    (d / "p.jsonl").write_text(json.dumps({"prompt": "ab=", "chosen": "ab", "rejected": "ba"}) + "\n")
    c = ["--config", str(d / "tiny.cfg")]
    steps = [
        ["pretrain", *c, "--data", str(d / "c.txt"), "--out", str(d / "ar.bdlm")],
        ["convert", *c, "--checkpoint", str(d / "ar.bdlm"), "--data", str(d / "c.txt"), "--out", str(d / "cv.bdlm")],
        ["sft", *c, "--checkpoint", str(d / "cv.bdlm"), "--data", str(d / "s.jsonl"), "--out", str(d / "sft.bdlm")],
        ["dpo", *c, "--checkpoint", str(d / "sft.bdlm"), "--data", str(d / "p.jsonl"), "--out", str(d / "dpo.bdlm")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0
    names = ["ar", "cv", "sft", "dpo"]
    logs = []
    for n in names:
        recs = [json.loads(l) for l in (d / f"{n}.bdlm.metrics.jsonl").read_text().splitlines()]
        for r in recs:
            r.pop("tokens_per_sec")  # wall-clock throughput
        logs.append(recs)
    return logs, [(d / f"{n}.bdlm").read_bytes() for n in names]


def test_criterion_10_determinism(tmp_path):
    logs_a, ckpt_a = _pipeline(tmp_path / "a")
    logs_b, ckpt_b = _pipeline(tmp_path / "b")
    n_rec = sum(map(len, logs_a))
    verdict(10, logs_a == logs_b and ckpt_a == ckpt_b and n_rec > 0,
            f"{n_rec} metric records identical {logs_a == logs_b} (throughput field excluded), "
            f"{len(ckpt_a)} checkpoints byte-identical {ckpt_a == ckpt_b}")
