"""``bdlm`` command line: pretrain, convert, sft, dpo, eval, generate, merge, bench.

Settings come from defaults, then ``--config FILE``, then per-key flags
(``--lr 3e-4``, ``--decode-block-size 16``...). Exit status is 0 on success,
1 on a runtime failure and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint
from .config import KEYS, ConfigError, RunConfig, doc_of, parse_config, parse_value, serialize
from .data import decode, encode, load_corpus, load_jsonl_pairs
from .inference import generate
from .model import build_model, params_of
from .schedule import CheckpointMeta, MergeError, default_wsd, merge_checkpoints, select_top_k
from .trainer import MetricsLog, TrainingDiverged, TrainPhase, evaluate_elbo, run_phases, train_phase, wsd_phases

log = logging.getLogger("bdlm")

COMMANDS = ("pretrain", "convert", "sft", "dpo", "eval", "generate", "merge", "bench")
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("config keys (override --config)")
    for key in KEYS:
        if key not in skip:
            g.add_argument(_flag(key), dest=f"cfg_{key}", metavar="V", default=argparse.SUPPRESS, help=doc_of(key))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bdlm", description="Block diffusion language model toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def cmd(name: str, help: str, skip=()) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="key = value file; flags take precedence")
        _add_config_flags(p, skip)
        return p

    p = cmd("pretrain", "autoregressive pretraining (block size 1, everything masked)")
    p.add_argument("--data", required=True, help="corpus: UTF-8 text, documents separated by blank lines")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--metrics", help="JSON-lines log (default: <out>.metrics.jsonl)")

    p = cmd("convert", "block-size warmup, stable and decay schedule from an AR checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus text file")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")

    for name, what in (("sft", "prompt/response"), ("dpo", "prompt/chosen/rejected")):
        p = cmd(name, f"post-training on {what} JSON lines")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help=f"JSON lines with {what} fields")
        p.add_argument("--out", required=True)
        p.add_argument("--metrics")

    p = cmd("eval", "Monte Carlo ELBO in nats per supervised token")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus text file or prompt/response JSON lines")

    p = cmd("generate", "decode a completion for one prompt", skip=("block_size",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--block-size", dest="cfg_decode_block_size", metavar="V", default=argparse.SUPPRESS,
                   help="alias of --decode-block-size")

    p = cmd("merge", "average the k best checkpoints")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data", help="score inputs on this data instead of their stored validation_elbo")

    p = cmd("bench", "tokens-per-forward and exact match over a threshold x block-size grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prompt/response JSON lines")
    p.add_argument("--thresholds", required=True, help="comma separated, e.g. 0.85,0.9,0.95")
    p.add_argument("--block-sizes", required=True, help="comma separated, e.g. 16,32,64")
    p.add_argument("--limit", type=int, default=0, help="use only the first N records")
    p.add_argument("--out", help="also write the table here as JSON lines")
    return ap


def effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = {k[4:]: parse_value(k[4:], v) for k, v in vars(args).items() if k.startswith("cfg_")}
    try:
        return replace(cfg, **overrides).validate()
    except ConfigError as exc:
        raise ConfigError(f"{exc} (after command-line overrides)") from None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _start(path: str | None, default: str) -> MetricsLog:
    p = Path(path or default)
    p.unlink(missing_ok=True)
    return MetricsLog(p)


def _save(model, cfg: RunConfig, out: str, step: int, meta: dict) -> None:
    save_checkpoint(params_of(model), model.cfg, out, step, meta)
    Path(out + ".config").write_text(serialize(cfg), encoding="utf-8")


def _summaries(summ: list[dict]) -> list[dict]:
    return [{"phase": s["phase"], "steps": s["steps"], "final_loss": s["losses"][-1] if s["losses"] else None}
            for s in summ]


def _load(path: str, cfg: RunConfig):
    model, header = load_model(path, cfg.precision)
    return model, int(header.get("step", 0))


def cmd_pretrain(args, cfg: RunConfig) -> int:
    docs = load_corpus(args.data)
    if not docs:
        raise ValueError(f"{args.data}: no documents")
    if args.checkpoint:
        model, step0 = _load(args.checkpoint, cfg)
    else:
        model, step0 = build_model(cfg.model_config(), cfg.seed, cfg.precision), 0
    ml = _start(args.metrics, args.out + ".metrics.jsonl")
    summ = run_phases(model, [TrainPhase("pretrain", "ar", 1, cfg.steps)], docs, cfg.train_config(), ml,
                      global_step=step0)
    ml.close()
    step = step0 + summ[0]["steps"]
    _save(model, cfg, args.out, step, {"command": "pretrain"})
    _emit({"command": "pretrain", "step": step, "phases": _summaries(summ)})
    return EXIT_OK


def cmd_convert(args, cfg: RunConfig) -> int:
    docs = load_corpus(args.data)
    if not docs:
        raise ValueError(f"{args.data}: no documents")
    model, step0 = _load(args.checkpoint, cfg)
    tc = cfg.train_config()
    plan = default_wsd(cfg.seq_len, cfg.block_size, cfg.convert_steps * cfg.batch_size * cfg.seq_len)
    ml = _start(args.metrics, args.out + ".metrics.jsonl")
    summ = run_phases(model, wsd_phases(plan, tc), docs, tc, ml, start_index=1, global_step=step0)
    ml.close()
    step = step0 + sum(s["steps"] for s in summ)
    _save(model, cfg, args.out, step, {"command": "convert", "block_size": cfg.block_size,
                                        "schedule": [p.block_size for p in plan.phases]})
    _emit({"command": "convert", "step": step, "phases": _summaries(summ)})
    return EXIT_OK


def _require(records, path):
    if not records:
        raise ValueError(f"{path}: no usable records")
    return records


def cmd_sft(args, cfg: RunConfig) -> int:
    pairs = [(e.prompt, e.response) for e in _require(load_jsonl_pairs(args.data, "sft"), args.data)]
    model, step0 = _load(args.checkpoint, cfg)
    ml = _start(args.metrics, args.out + ".metrics.jsonl")
    s = train_phase(model, TrainPhase("sft", "sft", cfg.block_size, cfg.steps), pairs, cfg.train_config(), ml,
                    index=20, global_step=step0)
    ml.close()
    _save(model, cfg, args.out, step0 + s["steps"],
          {"command": "sft", "cap_lambda": cfg.cap_lambda, "final_lr": s["final_lr"]})
    _emit({"command": "sft", "step": step0 + s["steps"], "phases": _summaries([s])})
    return EXIT_OK


def cmd_dpo(args, cfg: RunConfig) -> int:
    pairs = _require(load_jsonl_pairs(args.data, "dpo"), args.data)
    model, header = load_model(args.checkpoint, cfg.precision)
    step0 = int(header.get("step", 0))
    reference = copy.deepcopy(model).eval()
    # continue at the learning rate SFT ended on, held constant
    lr = header.get("meta", {}).get("final_lr")
    if lr is None or "cfg_lr" in vars(args):
        lr = cfg.lr
    phase = TrainPhase("dpo", "dpo", cfg.block_size, cfg.steps, lr=float(lr), constant_lr=True)
    ml = _start(args.metrics, args.out + ".metrics.jsonl")
    s = train_phase(model, phase, pairs, cfg.train_config(), ml, index=30, reference=reference, global_step=step0)
    ml.close()
    _save(model, cfg, args.out, step0 + s["steps"], {"command": "dpo", "beta": cfg.dpo_beta, "lr": float(lr)})
    _emit({"command": "dpo", "step": step0 + s["steps"], "phases": _summaries([s])})
    return EXIT_OK


def _eval_data(path: str):
    if path.endswith(".jsonl"):
        return [(e.prompt, e.response) for e in _require(load_jsonl_pairs(path, "sft"), path)]
    return _require(load_corpus(path), path)


def _score(model, data, cfg: RunConfig) -> float:
    return evaluate_elbo(model, data, cfg.eval_samples, cfg.block_size, cfg.seq_len, cfg.seed,
                         cfg.train_config().noise)


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _ = _load(args.checkpoint, cfg)
    loss = _score(model, _eval_data(args.data), cfg)
    _emit({"elbo_nats_per_token": -loss, "loss_nats_per_token": loss, "block_size": cfg.block_size})
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    model, _ = _load(args.checkpoint, cfg)
    toks, m = generate(model, encode(args.prompt), cfg.decode_config())
    print(decode(toks))
    _emit(m.as_dict())
    return EXIT_OK


def cmd_merge(args, cfg: RunConfig) -> int:
    loaded = [load_checkpoint(p) for p in args.inputs]
    if any(c != loaded[0][1] for _, c, _ in loaded):
        raise MergeError("inputs have different model configurations")
    data = _eval_data(args.eval_data) if args.eval_data else None
    metas = []
    for path, (params, mcfg, header) in zip(args.inputs, loaded):
        if data is not None:
            model, _ = load_model(path, cfg.precision)
            score = _score(model, data, cfg)
        else:
            score = header.get("meta", {}).get("validation_elbo")
            if score is None:
                log.warning("%s has no stored validation_elbo; ranking by step only", path)
                score = 0.0
        metas.append(CheckpointMeta(path, int(header.get("step", 0)), float(score)))
    chosen = select_top_k(metas, args.k)
    by_path = {p: rec for p, rec in zip(args.inputs, loaded)}
    merged = merge_checkpoints([by_path[m.path][0] for m in chosen])
    best_header = by_path[chosen[0].path][2]
    step = max(m.step for m in chosen)
    save_checkpoint(merged, loaded[0][1], args.out, step, best_header.get("meta", {}))
    _emit({"command": "merge", "selected": [m.path for m in chosen], "scores": [m.validation_elbo for m in chosen]})
    return EXIT_OK


def _csv(text: str, kind, flag: str):
    try:
        vals = [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma separated {kind.__name__} values, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{flag}: empty list")
    return vals


def cmd_bench(args, cfg: RunConfig) -> int:
    thresholds = _csv(args.thresholds, float, "--thresholds")
    sizes = _csv(args.block_sizes, int, "--block-sizes")
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise ConfigError(f"--thresholds: {t} outside (0, 1]")
    model, _ = _load(args.checkpoint, cfg)
    recs = _require(load_jsonl_pairs(args.data, "sft"), args.data)
    if args.limit > 0:
        recs = recs[: args.limit]
    rows = []
    for t in thresholds:
        for b in sizes:
            dc = replace(cfg.decode_config(), threshold=t, block_size=b)
            gen = fwd = hits = 0
            for e in recs:
                toks, m = generate(model, e.prompt, dc)
                gen += m.generated
                fwd += m.forward_passes
                hits += toks == e.response
            rows.append({"threshold": t, "block_size": b, "tpf": gen / fwd if fwd else 0.0,
                         "exact_match": hits / len(recs), "generated": gen, "forward_passes": fwd})
            _emit(rows[-1])
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    return EXIT_OK


HANDLERS = {
    "pretrain": cmd_pretrain, "convert": cmd_convert, "sft": cmd_sft, "dpo": cmd_dpo, "eval": cmd_eval,
    "generate": cmd_generate, "merge": cmd_merge, "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"bdlm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    try:
        return HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"bdlm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, MergeError, TrainingDiverged, ValueError, RuntimeError) as exc:
        print(f"bdlm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
