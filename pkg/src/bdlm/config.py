"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path

from .inference import DecodeConfig
from .losses import CapConfig, DpoConfig
from .model import ModelConfig, StabilizerConfig
from .noising import NoiseConfigError, NoiseSchedule
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value or inconsistent combination; the CLI maps it to exit code 2."""


def _opt(default, doc: str):
    return field(default=default, metadata={"doc": doc})


@dataclass
class RunConfig:
    # model
    d_model: int = _opt(64, "hidden width")
    n_layers: int = _opt(2, "transformer layers")
    n_heads: int = _opt(4, "attention heads")
    d_ff: int = _opt(192, "feed-forward width")
    max_len: int = _opt(256, "longest sequence the model will see (prompt + generation)")
    rope_base: float = _opt(10000.0, "rotary embedding base")
    norm_eps: float = _opt(1e-6, "RMSNorm epsilon")
    precision: str = _opt("single", "single or double")
    # optimisation
    seed: int = _opt(0, "seed for init, batching, noise and sampling")
    batch_size: int = _opt(16, "rows per optimizer step")
    seq_len: int = _opt(64, "packed row length")
    lr: float = _opt(1e-3, "peak learning rate")
    warmup_steps: int = _opt(50, "linear warmup steps per phase (capped at a tenth of the phase)")
    min_lr_ratio: float = _opt(0.1, "cosine floor as a fraction of lr")
    beta1: float = _opt(0.9, "AdamW beta1")
    beta2: float = _opt(0.95, "AdamW beta2")
    eps: float = _opt(1e-8, "AdamW epsilon")
    weight_decay: float = _opt(0.01, "AdamW weight decay on matrices")
    grad_clip: float = _opt(1.0, "global gradient-norm clip")
    steps: int = _opt(400, "optimizer steps for pretrain, sft and dpo")
    convert_steps: int = _opt(600, "total optimizer steps spread over the block-size schedule")
    block_size: int = _opt(32, "training block size (final block size for convert)")
    complementary: bool = _opt(True, "train SFT on each mask and its inverse")
    # noise
    t_min: float = _opt(0.02, "smallest masking level")
    t_max: float = _opt(1.0, "largest masking level")
    bandwidth: tuple[float, float] | None = _opt(None, "pretraining mask-rate band as lo,hi or none")
    sft_bandwidth: tuple[float, float] | None = _opt((0.1, 0.9), "SFT/DPO mask-rate band as lo,hi or none")
    noise_kind: str = _opt("linear", "noise schedule family")
    stabilizer_sigma: float = _opt(0.02, "std of noise added to MASK embeddings early in a run")
    stabilizer_steps: int = _opt(200, "global steps during which the MASK-embedding noise is active")
    # post-training
    cap_lambda: float = _opt(0.0, "weight of the confidence term in SFT")
    dpo_beta: float = _opt(0.1, "DPO inverse temperature")
    dpo_mc_samples: int = _opt(1, "noise draws per ELBO estimate")
    # decoding
    threshold: float = _opt(0.95, "accept every candidate whose confidence exceeds this")
    fallback_count: int = _opt(1, "minimum accepted per refinement step")
    temperature: float = _opt(0.0, "0 = greedy")
    max_new_tokens: int = _opt(32, "generation budget")
    decode_block_size: int = _opt(32, "tokens denoised together at decode time")
    use_cache: bool = _opt(True, "reuse keys/values of the prompt and finished blocks")
    align_prompt: bool = _opt(True, "PAD the prompt to a block boundary before decoding")
    # evaluation
    eval_samples: int = _opt(4, "Monte Carlo draws for ELBO evaluation")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff,
                           max_len=self.max_len, rope_base=self.rope_base, norm_eps=self.norm_eps)

    def noise(self) -> NoiseSchedule:
        return NoiseSchedule(self.t_min, self.t_max, self.bandwidth, self.noise_kind)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed, batch_size=self.batch_size, seq_len=self.seq_len, lr=self.lr,
            warmup_steps=self.warmup_steps, min_lr_ratio=self.min_lr_ratio, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, weight_decay=self.weight_decay, grad_clip=self.grad_clip, noise=self.noise(),
            sft_noise=NoiseSchedule(self.t_min, self.t_max, self.sft_bandwidth, self.noise_kind),
            stabilizer=StabilizerConfig(self.stabilizer_sigma, self.stabilizer_steps),
            cap=CapConfig(self.cap_lambda), dpo=DpoConfig(self.dpo_beta, self.dpo_mc_samples),
            complementary=self.complementary,
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(block_size=self.decode_block_size, threshold=self.threshold,
                            fallback_count=self.fallback_count, temperature=self.temperature,
                            max_new_tokens=self.max_new_tokens, seed=self.seed, use_cache=self.use_cache,
                            align_prompt=self.align_prompt)

    def validate(self) -> "RunConfig":
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision: expected single or double, got {self.precision!r}")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError(f"threshold: must lie in (0, 1], got {self.threshold}")
        for name in ("steps", "convert_steps", "eval_samples", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.seq_len % self.block_size:
            raise ConfigError(f"block_size: {self.block_size} does not divide seq_len {self.seq_len}")
        try:
            self.model_config()
            self.train_config()
            self.decode_config()
        except (ValueError, NoiseConfigError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


KEYS = {f.name: f for f in fields(RunConfig)}


def default_of(name: str):
    f = KEYS[name]
    return f.default if f.default is not MISSING else f.default_factory()


def doc_of(name: str) -> str:
    return KEYS[name].metadata["doc"]


BAND = "tuple[float, float] | None"


def _kind(name: str) -> str:
    return KEYS[name].type


def parse_value(name: str, raw: str):
    """Convert the text of one value to the type of ``name``."""
    kind, raw = _kind(name), raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == BAND:
            if raw.lower() == "none":
                return None
            lo, hi = (float(x) for x in raw.split(","))
            return (lo, hi)
        return raw
    except ValueError:
        expected = {"int": "an integer", "float": "a number", "bool": "true or false",
                    BAND: "lo,hi or none"}.get(kind, kind)
        raise ConfigError(f"{name}: expected {expected}, got {raw!r}") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {s!r}")
        key, raw = (x.strip() for x in s.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return replace(base or RunConfig(), **values).validate()


def parse_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_text(text, source=str(p))


def serialize(cfg: RunConfig, with_docs: bool = False) -> str:
    out = []
    for name in KEYS:
        if with_docs:
            out.append(f"# {doc_of(name)} (default {format_value(default_of(name))})")
        out.append(f"{name} = {format_value(getattr(cfg, name))}")
    return "\n".join(out) + "\n"
