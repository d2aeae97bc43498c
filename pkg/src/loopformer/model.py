"""Decoder-only multimodal transformer with shared-weight recursion."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .connector import ConnectorBank, RecursionConfig, build_next_input
from .numerics import (
    NonFiniteError,
    ShapeError,
    causal_attention,
    concat_tokens,
    embedding_lookup,
    per_token_cross_entropy,
    rms_norm,
    silu,
)


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    mlp_ratio: int = 4
    patch_dim: int = 16
    norm_eps: float = 1e-6
    init_std: float = 0.02
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")


@dataclass
class MultimodalBatch:
    """A batch of ``[vision, text]`` sequences with teacher-forcing targets.

    Shapes: ``raw_patches (B, N_v, p)``, ``text_ids``/``targets``/``loss_mask``
    ``(B, N_t)``. All rows in a batch share ``N_v`` and ``N_t``.
    """

    raw_patches: Tensor
    text_ids: Tensor
    targets: Tensor
    loss_mask: Tensor

    @property
    def n_vision(self) -> int:
        return self.raw_patches.shape[-2]

    @property
    def n_text(self) -> int:
        return self.text_ids.shape[-1]

    def __len__(self) -> int:
        return self.text_ids.shape[0]


@dataclass
class StepOutputs:
    """Everything one recursion step produced.

    ``hidden[0]`` is this step's input embedding; ``hidden[l]`` the output
    of block ``l``. ``logits`` and ``token_losses`` cover text positions only.
    """

    hidden: list[Tensor]
    logits: Tensor
    token_losses: Tensor

    @property
    def inputs(self) -> Tensor:
        return self.hidden[0]


@functools.lru_cache(maxsize=64)
def _rope_tables(n: int, head_dim: int, base: float, dtype, device) -> tuple[Tensor, Tensor]:
    inv = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    ang = torch.arange(n, dtype=torch.float64)[:, None] * inv[None, :]
    ang = torch.cat((ang, ang), dim=-1)
    return ang.cos().to(dtype=dtype, device=device), ang.sin().to(dtype=dtype, device=device)


def apply_rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotary position embedding, rotate-half layout, on ``(..., n, head_dim)``."""
    x1, x2 = x.chunk(2, dim=-1)
    return x * cos + torch.cat((-x2, x1), dim=-1) * sin


class DecoderBlock(nn.Module):
    """Pre-norm block: ``h + attn(norm(h))`` then ``h + mlp(norm(h))``.

    ``w_qkv`` packs the query, key and value projections column-wise.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
        self.n_heads = cfg.n_heads
        self.eps = cfg.norm_eps
        self.rope_base = cfg.rope_base
        self.attn_norm = nn.Parameter(torch.ones(d))
        self.w_qkv = nn.Parameter(torch.empty(d, 3 * d))
        self.wo = nn.Parameter(torch.empty(d, d))
        self.mlp_norm = nn.Parameter(torch.ones(d))
        self.w_up = nn.Parameter(torch.empty(d, hid))
        self.w_down = nn.Parameter(torch.empty(hid, d))

    @torch.no_grad()
    def reset_parameters(self, std: float, generator: torch.Generator):
        self.attn_norm.fill_(1.0)
        self.mlp_norm.fill_(1.0)
        for w in (self.w_qkv, self.wo, self.w_up, self.w_down):
            w.normal_(0.0, std, generator=generator)

    def attention(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        hd = d // self.n_heads
        # (..., n, 3, H, hd) -> (3, ..., H, n, hd)
        qkv = (x @ self.w_qkv).reshape(*lead, n, 3, self.n_heads, hd).movedim(-3, 0).transpose(-3, -2)
        cos, sin = _rope_tables(n, hd, self.rope_base, x.dtype, x.device)
        qk = apply_rope(qkv[:2], cos, sin)
        out = causal_attention(qk[0], qk[1], qkv[2])
        return out.transpose(-3, -2).reshape(*lead, n, d) @ self.wo

    def forward(self, h: Tensor) -> Tensor:
        h = h + self.attention(rms_norm(h, self.attn_norm, self.eps))
        x = rms_norm(h, self.mlp_norm, self.eps)
        return h + silu(x @ self.w_up) @ self.w_down


class RecursiveVLM(nn.Module):
    """Text embedding, fixed patch projector, L blocks, LM head, connectors.

    The same ``blocks`` are run at every recursion step. Connectors are only
    allocated when ``recursion.steps > 1`` and the connector mode is not
    ``none``, so a one-step model is exactly the plain transformer.
    """

    def __init__(self, cfg: ModelConfig, recursion: RecursionConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.recursion = recursion or RecursionConfig()
        d = cfg.d_model
        self.text_embedding = nn.Parameter(torch.empty(cfg.vocab_size, d))
        self.register_buffer("patch_projector", torch.empty(cfg.patch_dim, d))
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Parameter(torch.empty(d, cfg.vocab_size))

        rec = self.recursion
        self.selected_layers: list[int] = []
        self.connectors = None
        if rec.steps > 1 and rec.connector_mode != "none":
            self.selected_layers = rec.resolve_layers(cfg.n_layers)
            n_banks = 1 if rec.share_across_steps else rec.steps - 1

            def bank():
                return ConnectorBank(
                    d, self.selected_layers, rec.connector_mode, rec.shared_modality, rec.connector_hidden, cfg.norm_eps
                )

            self.connectors = nn.ModuleList(bank() for _ in range(n_banks))
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        std = self.cfg.init_std
        self.text_embedding.normal_(0.0, std, generator=gen)
        self.patch_projector.normal_(0.0, std, generator=gen)
        for block in self.blocks:
            block.reset_parameters(std, gen)
        self.head.normal_(0.0, std, generator=gen)
        if self.connectors is not None:
            for bank in self.connectors:
                for conn in bank.connectors.values():
                    conn.reset_parameters(std, gen)

    # -- parameter bookkeeping -------------------------------------------
    def num_trainable(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def num_connector_params(self) -> int:
        if self.connectors is None:
            return 0
        return sum(p.numel() for p in self.connectors.parameters())

    def num_baseline_params(self) -> int:
        return self.num_trainable() - self.num_connector_params()

    def bank_for_step(self, r: int) -> ConnectorBank | None:
        """Bank used to build the input of step ``r + 1`` (``r`` is 1-based)."""
        if self.connectors is None:
            return None
        return self.connectors[min(r, len(self.connectors)) - 1]

    # -- forward pieces ---------------------------------------------------
    def embed(self, batch: MultimodalBatch) -> Tensor:
        vision = batch.raw_patches.to(self.patch_projector.dtype) @ self.patch_projector
        text = embedding_lookup(self.text_embedding, batch.text_ids)
        if vision.shape[:-2] != text.shape[:-2]:
            raise ShapeError("embed", vision.shape, text.shape)
        return concat_tokens([vision, text])

    def decoder_forward(self, e: Tensor, check: bool = True) -> list[Tensor]:
        hidden = [e]
        for block in self.blocks:
            hidden.append(block(hidden[-1]))
        # non-finite values propagate forward, so one check covers the stack
        if check and not torch.isfinite(hidden[-1]).all():
            bad = next(i for i, h in enumerate(hidden) if not torch.isfinite(h).all())
            raise NonFiniteError(f"non-finite activation at layer {bad}")
        return hidden

    def lm_head(self, h_last: Tensor, n_vision: int) -> Tensor:
        return h_last[..., n_vision:, :] @ self.head

    def next_input(self, e1: Tensor, hidden: list[Tensor], n_vision: int, r: int) -> Tensor:
        mode = self.recursion.connector_mode
        if mode == "none":
            return hidden[-1]
        bank = self.bank_for_step(r)
        if bank is None:
            raise ValueError("model was built without connectors; it cannot recurse past one step")
        return build_next_input(e1, hidden, bank, n_vision)

    def recursive_forward(self, batch: MultimodalBatch, steps: int | None = None) -> list[StepOutputs]:
        """Run ``steps`` recursion steps (default: the configured count)."""
        steps = self.recursion.steps if steps is None else steps
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        n_v = batch.n_vision
        e1 = self.embed(batch)
        e = e1
        outputs = []
        for r in range(1, steps + 1):
            hidden = self.decoder_forward(e)
            logits = self.lm_head(hidden[-1], n_v)
            losses = per_token_cross_entropy(logits, batch.targets)
            outputs.append(StepOutputs(hidden, logits, losses))
            if r < steps:
                e = self.next_input(e1, hidden, n_v, r)
        return outputs

    def forward(self, batch: MultimodalBatch, steps: int | None = None) -> list[StepOutputs]:
        return self.recursive_forward(batch, steps)


def baseline_forward(model: RecursiveVLM, batch: MultimodalBatch) -> StepOutputs:
    """Single non-recursive pass: embed, blocks, head."""
    hidden = model.decoder_forward(model.embed(batch))
    logits = model.lm_head(hidden[-1], batch.n_vision)
    return StepOutputs(hidden, logits, per_token_cross_entropy(logits, batch.targets))


__all__ = [
    "ModelConfig",
    "MultimodalBatch",
    "StepOutputs",
    "DecoderBlock",
    "RecursiveVLM",
    "baseline_forward",
]
