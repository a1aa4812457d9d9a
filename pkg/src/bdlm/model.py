"""Toy transformer denoiser.

One set of weights serves every regime: block-diffusion training over the
concatenated [x_t; x_0] row, MDLM training over x_t alone, and block-wise
decoding with a KV cache. Position ids are absolute within the packed row and
shared between the noisy and clean copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import tensorcore as tc
from .data import MASK, VOCAB_SIZE
from .masks import build_bdlm_mask, build_decode_mask, build_mdlm_mask, decode_segments
from .noising import NoisedBatch


class LayoutMismatchError(ValueError):
    pass


class CacheDesyncError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 512
    vocab_size: int = VOCAB_SIZE
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class StabilizerConfig:
    """Gaussian noise on MASK-token embeddings for the first ``active_steps`` steps."""

    sigma: float = 0.02
    active_steps: int = 200

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("stabilizer sigma must be >= 0")


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        self.attn_norm = nn.Parameter(torch.ones(d))
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        self.ffn_norm = nn.Parameter(torch.ones(d))
        self.w_gate = nn.Parameter(torch.empty(d, f))
        self.w_up = nn.Parameter(torch.empty(d, f))
        self.w_down = nn.Parameter(torch.empty(f, d))


def _rope_tables(pos: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = pos.to(torch.float64)[..., None] * inv
    return ang.cos().to(dtype), ang.sin().to(dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, dh); cos/sin: (B, T, dh/2) or (T, dh/2)
    if cos.dim() == 3:
        cos, sin = cos[:, None], sin[:, None]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class Denoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.Parameter(torch.ones(cfg.d_model))

    # -- parameters -------------------------------------------------------

    def reset_parameters(self, seed: int) -> "Denoiser":
        g = tc.seeded_generator(seed)
        std = 0.02
        out_std = std / math.sqrt(2 * self.cfg.n_layers)
        with torch.no_grad():
            self.embed.normal_(0.0, std, generator=g)
            for blk in self.layers:
                for name in ("wq", "wk", "wv", "w_gate", "w_up"):
                    getattr(blk, name).normal_(0.0, std, generator=g)
                blk.wo.normal_(0.0, out_std, generator=g)
                blk.w_down.normal_(0.0, out_std, generator=g)
                blk.attn_norm.fill_(1.0)
                blk.ffn_norm.fill_(1.0)
            self.final_norm.fill_(1.0)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.dtype

    # -- core stack -------------------------------------------------------

    def embed_tokens(self, tokens: torch.Tensor, stabilizer: StabilizerConfig | None = None,
                     step: int = 0, seed: int = 0) -> torch.Tensor:
        h = tc.embedding(self.embed, tokens)
        if stabilizer is not None and stabilizer.sigma > 0 and step < stabilizer.active_steps:
            g = tc.seeded_generator(seed * 1_000_003 + step)
            noise = torch.randn(h.shape, generator=g, dtype=h.dtype) * stabilizer.sigma
            h = h + noise * (tokens == MASK).unsqueeze(-1).to(h.dtype)
        return h

    def run_layers(self, h: torch.Tensor, pos: torch.Tensor, allow: torch.Tensor | None,
                   prefix_kv: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
                   collect_kv: bool = False):
        """Apply all blocks. ``allow`` is (B, T, S) / (T, S) over keys [prefix; self].

        Returns the final hidden states and, with ``collect_kv``, the per-layer
        (K, V) of the new positions.
        """
        cfg = self.cfg
        B, T, _ = h.shape
        H, dh = cfg.n_heads, cfg.head_dim
        cos, sin = _rope_tables(pos, dh, cfg.rope_base, h.dtype)
        new_kv = []
        for li, blk in enumerate(self.layers):
            x = tc.rms_norm(h, blk.attn_norm, cfg.norm_eps)
            q = tc.matmul(x, blk.wq).view(B, T, H, dh).transpose(1, 2)
            k = tc.matmul(x, blk.wk).view(B, T, H, dh).transpose(1, 2)
            v = tc.matmul(x, blk.wv).view(B, T, H, dh).transpose(1, 2)
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
            if collect_kv:
                new_kv.append((k, v))
            if prefix_kv is not None:
                pk, pv = prefix_kv[li]
                k = torch.cat([pk.expand(B, -1, -1, -1), k], dim=2)
                v = torch.cat([pv.expand(B, -1, -1, -1), v], dim=2)
            scores = tc.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
            if allow is None:
                probs = torch.softmax(scores, dim=-1)
            else:
                probs = tc.masked_softmax(scores, allow.unsqueeze(-3) if allow.dim() == 3 else allow)
            att = tc.matmul(probs, v).transpose(1, 2).reshape(B, T, cfg.d_model)
            h = h + tc.matmul(att, blk.wo)
            x = tc.rms_norm(h, blk.ffn_norm, cfg.norm_eps)
            gate = torch.nn.functional.silu(tc.matmul(x, blk.w_gate))
            h = h + tc.matmul(gate * tc.matmul(x, blk.w_up), blk.w_down)
        h = tc.rms_norm(h, self.final_norm, cfg.norm_eps)
        return (h, new_kv) if collect_kv else h

    def head(self, h: torch.Tensor) -> torch.Tensor:
        return tc.matmul(h, self.embed.t())

    # -- training forwards ------------------------------------------------

    def _masks(self, layouts, builder) -> torch.Tensor:
        return torch.from_numpy(np.stack([builder(lay).bits for lay in layouts]))

    def hidden_train(self, batch: NoisedBatch, stabilizer: StabilizerConfig | None = None,
                     step: int = 0, seed: int = 0) -> torch.Tensor:
        """Hidden states of the noisy half of [x_t; x_0] under the block-diffusion mask."""
        B, L = batch.noisy.shape
        for lay in batch.layouts:
            if lay.total_length != L:
                raise LayoutMismatchError(f"layout length {lay.total_length} != batch length {L}")
        if 2 * L > 2 * self.cfg.max_len:
            raise LayoutMismatchError(f"row length {L} exceeds max_len {self.cfg.max_len}")
        tokens = torch.from_numpy(np.concatenate([batch.noisy, batch.clean], axis=1))
        pos = torch.arange(L).repeat(2)
        allow = self._masks(batch.layouts, build_bdlm_mask)
        h = self.embed_tokens(tokens, stabilizer, step, seed)
        return self.run_layers(h, pos, allow)[:, :L]

    def forward_train(self, batch: NoisedBatch, stabilizer: StabilizerConfig | None = None,
                      step: int = 0, seed: int = 0) -> torch.Tensor:
        """Logits (n_masked, V) at masked noisy positions, row-major order."""
        h = self.hidden_train(batch, stabilizer, step, seed)
        sel = torch.from_numpy(batch.is_masked)
        return self.head(h[sel])

    def hidden_mdlm(self, batch: NoisedBatch, stabilizer: StabilizerConfig | None = None,
                    step: int = 0, seed: int = 0) -> torch.Tensor:
        B, L = batch.noisy.shape
        for lay in batch.layouts:
            if lay.total_length != L:
                raise LayoutMismatchError(f"layout length {lay.total_length} != batch length {L}")
        tokens = torch.from_numpy(batch.noisy)
        allow = self._masks(batch.layouts, build_mdlm_mask)
        h = self.embed_tokens(tokens, stabilizer, step, seed)
        return self.run_layers(h, torch.arange(L), allow)

    def forward_mdlm(self, batch: NoisedBatch, stabilizer: StabilizerConfig | None = None,
                     step: int = 0, seed: int = 0) -> torch.Tensor:
        h = self.hidden_mdlm(batch, stabilizer, step, seed)
        return self.head(h[torch.from_numpy(batch.is_masked)])

    # -- decoding ---------------------------------------------------------

    def forward_decode(self, state, cache: "KVCache | None" = None) -> torch.Tensor:
        """Logits (n_unfilled, V) for the MASK positions of the active block.

        ``state`` supplies ``prompt``, ``finalized``, ``block``, ``filled`` and
        ``block_size``. With a cache, only the active block is run; without one,
        the whole [prompt; finalized; block] sequence is recomputed.
        """
        prefix = list(state.prompt) + list(state.finalized)
        block = torch.tensor(state.block, dtype=torch.long)
        unfilled = ~torch.tensor(state.filled, dtype=torch.bool)
        n = block.numel()
        if cache is None:
            tokens = torch.tensor(prefix + list(state.block), dtype=torch.long)[None]
            nfin = len(state.finalized) // state.block_size
            allow = torch.from_numpy(build_decode_mask(len(state.prompt), nfin, state.block_size, n).bits)
            h = self.run_layers(self.embed_tokens(tokens), torch.arange(tokens.shape[1]), allow)
            h = h[0, len(prefix):]
        else:
            if cache.length == 0 and prefix:
                cache.prefill(self, state.prompt, state.block_size)
                for s in range(0, len(state.finalized), state.block_size):
                    cache.append(self, state.finalized[s:s + state.block_size])
            if cache.length != len(prefix):
                raise CacheDesyncError(f"cache holds {cache.length} positions but prefix has {len(prefix)}")
            pos = torch.arange(cache.length, cache.length + n)
            h = self.run_layers(self.embed_tokens(block[None]), pos, None,
                                prefix_kv=cache.layers if cache.length else None)[0]
        return self.head(h[unfilled])


@dataclass
class KVCache:
    """Per-layer keys/values of finalized content (prompt plus finished blocks)."""

    layers: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    length: int = 0

    @torch.no_grad()
    def prefill(self, model: Denoiser, prompt: list[int], block_size: int) -> None:
        if self.length:
            raise CacheDesyncError("prefill on a non-empty cache")
        if not prompt:
            return
        seg = decode_segments(len(prompt), 0, block_size, 0)
        allow = torch.from_numpy(seg[:, None] >= seg[None, :])
        tokens = torch.tensor(prompt, dtype=torch.long)[None]
        _, kv = model.run_layers(model.embed_tokens(tokens), torch.arange(len(prompt)), allow, collect_kv=True)
        self.layers = kv
        self.length = len(prompt)

    @torch.no_grad()
    def append(self, model: Denoiser, block: list[int]) -> None:
        """Run a finished block (bidirectional within itself, full view of the cache) and store its K/V."""
        tokens = torch.tensor(block, dtype=torch.long)[None]
        pos = torch.arange(self.length, self.length + len(block))
        _, kv = model.run_layers(model.embed_tokens(tokens), pos, None,
                                 prefix_kv=self.layers if self.length else None, collect_kv=True)
        if self.length:
            self.layers = [(torch.cat([pk, k], 2), torch.cat([pv, v], 2)) for (pk, pv), (k, v) in zip(self.layers, kv)]
        else:
            self.layers = kv
        self.length += len(block)


def build_model(cfg: ModelConfig, seed: int = 0, precision: str = "single") -> Denoiser:
    m = Denoiser(cfg).to(tc.dtype_of(precision))
    return m.reset_parameters(seed)


def params_of(model: Denoiser) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}
