"""Dense tensor ops used by the model, backed by torch autograd.

Every op here validates shapes up front so a mismatch surfaces as a
``ShapeError`` naming the op, instead of a broadcasting surprise three
layers later. ``grad_check`` is an independent central-difference checker
for any scalar function of one or more float64 tensors.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "matmul",
    "add",
    "mul",
    "concat_tokens",
    "split_tokens",
    "softmax",
    "silu",
    "embedding_lookup",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "causal_attention",
    "causal_attention_reference",
    "rms_norm",
    "per_token_cross_entropy",
    "check_finite",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are not conformable for ``op``."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where values must stay finite."""


def check_finite(x: Tensor, where: str) -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return a * b


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the token axis (second to last)."""
    ref = parts[0]
    for p in parts[1:]:
        if p.dim() != ref.dim() or p.shape[:-2] != ref.shape[:-2] or p.shape[-1] != ref.shape[-1]:
            raise ShapeError("concat_tokens", ref.shape, p.shape)
    return torch.cat(list(parts), dim=-2)


def split_tokens(x: Tensor, boundary: int) -> tuple[Tensor, Tensor]:
    """Split ``x`` into tokens ``[:boundary]`` and ``[boundary:]``."""
    n = x.shape[-2]
    if not 0 <= boundary <= n:
        raise ShapeError("split_tokens", x.shape, detail=f"boundary {boundary} outside [0, {n}]")
    return x[..., :boundary, :], x[..., boundary:, :]


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: token id out of range [0, {table.shape[0]}): "
            f"min={int(ids.min())} max={int(ids.max())}"
        )
    return F.embedding(ids, table)


def transpose(x: Tensor) -> Tensor:
    return x.transpose(-2, -1)


def reduce_sum(x: Tensor, dim=None) -> Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def reduce_mean(x: Tensor, dim=None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a lower-triangular mask.

    Shapes are ``(..., n, head_dim)``.
    """
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("causal_attention", q.shape, k.shape, v.shape)
    return F.scaled_dot_product_attention(q, k, v, is_causal=True)


def causal_attention_reference(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Unfused ``softmax(mask(q k^T / sqrt(d))) v``, kept as a cross-check."""
    n = q.shape[-2]
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    mask = torch.ones(n, n, dtype=torch.bool, device=q.device).tril()
    scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    if gain.shape != x.shape[-1:]:
        raise ShapeError("rms_norm", x.shape, gain.shape)
    return F.rms_norm(x, gain.shape, gain, eps)


def per_token_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Unreduced ``-log softmax(logits)[target]``; logits ``(..., vocab)``."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("per_token_cross_entropy", logits.shape, targets.shape)
    vocab = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= vocab):
        raise IndexError(f"per_token_cross_entropy: target id out of range [0, {vocab})")
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def grad_check(
    f: Callable[..., Tensor],
    params: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare autograd against central differences.

    Returns ``max |a - fd| / max(|a|, |fd|, 1e-12)`` over checked
    coordinates. ``f`` is called with the parameter tensors as positional
    arguments and must return a scalar. With ``max_coords`` set, a seeded
    random subset of coordinates per tensor is perturbed instead of all.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps={eps} outside [1e-7, 1e-4]")
    tensors = [params] if isinstance(params, Tensor) else list(params)
    if any(t.dtype != torch.float64 for t in tensors):
        raise TypeError("grad_check requires float64 tensors")

    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = f(*leaves)
    if out.numel() != 1:
        raise ShapeError("grad_check", out.shape, detail="f must return a scalar")
    check_finite(out, "grad_check objective")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, analytic)]

    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        base = [t.detach().clone(memory_format=torch.contiguous_format) for t in tensors]
        for i, x in enumerate(base):
            flat = x.view(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=gen)[:max_coords].tolist()
            for j in coords:
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = f(*base)
                flat[j] = orig - eps
                f_minus = f(*base)
                flat[j] = orig
                check_finite(f_plus, "grad_check objective")
                check_finite(f_minus, "grad_check objective")
                fd = (f_plus.item() - f_minus.item()) / (2 * eps)
                a = analytic[i].reshape(-1)[j].item()
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
                worst = max(worst, err)
    return worst
