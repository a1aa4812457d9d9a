"""Dense tensor primitives with reverse-mode gradients.

Backed by torch autograd on CPU. This module pins down the handful of ops the
denoiser needs, with explicit shape/precision contracts and the error types the
rest of the package relies on.
"""

from __future__ import annotations

import torch

PRECISIONS = {"single": torch.float32, "double": torch.float64}


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class GraphLifecycleError(RuntimeError):
    pass


def dtype_of(precision: str) -> torch.dtype:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def tensor(data, precision: str = "single", requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=dtype_of(precision), requires_grad=requires_grad)


def _check_precision(*ts: torch.Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise TypeError(f"mixed precision in one graph: {sorted(map(str, dtypes))}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product over the last two dimensions."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    _check_precision(a, b)
    return a @ b


def masked_softmax(scores: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``allow``.

    ``allow`` broadcasts against ``scores``; disallowed entries get the most
    negative finite value before the row-max subtraction, so they come out as
    exact zeros. Raises DegenerateRowError if a row has no allowed entry.
    """
    if allow.shape[-2:] != scores.shape[-2:]:
        raise DimensionError(
            f"mask {tuple(allow.shape[-2:])} does not match scores {tuple(scores.shape[-2:])}"
        )
    row_ok = allow.any(dim=-1)
    if not bool(row_ok.all()):
        bad = (~row_ok).nonzero()[0].tolist()
        raise DegenerateRowError(f"attention row {bad[-1]} has no allowed positions (index {bad})")
    neg = torch.finfo(scores.dtype).min
    filled = scores.masked_fill(~allow, neg)
    shifted = filled - filled.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted) * allow
    return e / e.sum(dim=-1, keepdim=True)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.dtype not in (torch.int64, torch.int32):
        raise TypeError("embedding ids must be integer")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return table[ids]


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits, dim=-1)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-row negative log-likelihood of ``targets`` (no reduction)."""
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return -log_softmax(logits).gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = log_softmax(logits)
    return -(logp.exp() * logp).sum(dim=-1)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise GraphLifecycleError("loss is not attached to a graph")
    try:
        loss.backward()
    except RuntimeError as exc:
        if "backward through the graph a second time" in str(exc):
            raise GraphLifecycleError("graph already freed by a previous backward") from exc
        raise


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF)
    return g
