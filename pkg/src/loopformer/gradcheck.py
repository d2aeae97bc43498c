"""Float64 finite-difference checks over the model's differentiable pieces."""

from __future__ import annotations

import torch

from .connector import Connector, RecursionConfig
from .loss import LossConfig, total_loss
from .model import DecoderBlock, ModelConfig, MultimodalBatch, RecursiveVLM
from .numerics import grad_check


def _randomize(module: torch.nn.Module, seed: int, std: float = 0.3) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std + (1.0 if p.dim() == 1 else 0.0))


def check_block(seed: int = 0, eps: float = 1e-5) -> float:
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, mlp_ratio=2)
    block = DecoderBlock(cfg).double()
    _randomize(block, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(2, 5, 8, generator=gen, dtype=torch.float64)
    w = torch.randn(2, 5, 8, generator=gen, dtype=torch.float64)
    names = [n for n, _ in block.named_parameters()]

    def f(x_in, *values):
        out = torch.func.functional_call(block, dict(zip(names, values)), (x_in,))
        return (out * w).sum()

    return grad_check(f, [x] + [p.detach() for p in block.parameters()], eps)


def check_connector(seed: int = 0, eps: float = 1e-5) -> float:
    conn = Connector(6, hidden=5).double()
    _randomize(conn, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    h = torch.randn(4, 6, generator=gen, dtype=torch.float64) * 2
    w = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    names = [n for n, _ in conn.named_parameters()]

    def f(h_in, *values):
        out = torch.func.functional_call(conn, dict(zip(names, values)), (h_in,))
        return (out * w).sum()

    return grad_check(f, [h] + [p.detach() for p in conn.parameters()], eps)


def tiny_recursive_model(seed: int = 0, steps: int = 2) -> tuple[RecursiveVLM, MultimodalBatch]:
    """Two-layer, d=8 model with randomised (non-zero) connectors and a 6-token batch."""
    cfg = ModelConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, mlp_ratio=2, patch_dim=5)
    model = RecursiveVLM(cfg, RecursionConfig(steps=steps, num_layers_selected=2), seed=seed).double()
    _randomize(model, seed)
    gen = torch.Generator().manual_seed(seed + 7)
    batch = MultimodalBatch(
        raw_patches=torch.randn(1, 2, 5, generator=gen, dtype=torch.float64),
        text_ids=torch.randint(0, 12, (1, 4), generator=gen),
        targets=torch.randint(0, 12, (1, 4), generator=gen),
        loss_mask=torch.tensor([[False, True, True, True]]),
    )
    return model, batch


def check_recursive_loss(seed: int = 0, eps: float = 1e-5, max_coords: int | None = None) -> float:
    """Whole two-step forward through the monotonic loss, all parameters."""
    model, batch = tiny_recursive_model(seed)
    names = [n for n, _ in model.named_parameters()]
    loss_cfg = LossConfig("monotonic", 1.5)

    def f(*values):
        outs = torch.func.functional_call(model, dict(zip(names, values)), (batch,))
        return total_loss([o.token_losses for o in outs], batch.loss_mask, loss_cfg)[0]

    return grad_check(f, [p.detach() for p in model.parameters()], eps, max_coords=max_coords, seed=seed)


def gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    return {
        "decoder_block": check_block(seed, eps),
        "connector": check_connector(seed, eps),
        "recursive_monotonic_loss": check_recursive_loss(seed, eps),
    }
