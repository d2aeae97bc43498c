"""Recursive connector: maps intermediate hidden states back to input space.

For each selected layer and each modality, a connector computes::

    x = rms_norm(h, gain)
    a = x * scale + silu(x @ w_up) @ w_down

and the next recursion step's input is the original embedding plus the sum
of connector outputs over the selected layers, separately for the vision
slice and the text slice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .numerics import concat_tokens, rms_norm, silu, split_tokens

CONNECTOR_MODES = ("none", "rmsnorm", "rmsnorm_mlp", "rmsnorm_mlp_residual", "full")
LAYER_STRATEGIES = ("uniform", "last", "first", "final_block")
MODALITIES = ("v", "t")


@dataclass
class RecursionConfig:
    """How the decoder stack is reused across recursion steps.

    ``connector_mode`` selects the connector ablation:

    * ``none``: vanilla recursion, the next input is the last hidden state.
    * ``rmsnorm``: ``a = rms_norm(h)``.
    * ``rmsnorm_mlp``: ``a = mlp(rms_norm(h))``.
    * ``rmsnorm_mlp_residual``: ``a = x + mlp(x)`` with the scale pinned to 1.
    * ``full``: ``a = x * scale + mlp(x)`` with a learnable, zero-initialised scale.
    """

    steps: int = 2
    num_layers_selected: int = 4
    layer_strategy: str = "uniform"
    selected_layers: list[int] | None = None
    shared_modality: bool = False
    connector_mode: str = "full"
    connector_hidden: int | None = None
    share_across_steps: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"recursion steps must be >= 1, got {self.steps}")
        if self.connector_mode not in CONNECTOR_MODES:
            raise ValueError(f"unknown connector_mode {self.connector_mode!r}; expected one of {CONNECTOR_MODES}")
        if self.layer_strategy not in LAYER_STRATEGIES:
            raise ValueError(f"unknown layer_strategy {self.layer_strategy!r}; expected one of {LAYER_STRATEGIES}")

    def resolve_layers(self, n_layers: int) -> list[int]:
        if self.selected_layers is not None:
            layers = list(self.selected_layers)
            if not layers or any(b <= a for a, b in zip(layers, layers[1:])):
                raise ValueError(f"selected_layers must be non-empty and strictly increasing: {layers}")
            if layers[0] < 1 or layers[-1] > n_layers:
                raise ValueError(f"selected_layers {layers} outside [1, {n_layers}]")
            return layers
        k = self.num_layers_selected
        if self.layer_strategy == "uniform":
            return select_layers(n_layers, k)
        if k > n_layers:
            raise ValueError(f"cannot select {k} layers out of {n_layers}")
        if self.layer_strategy == "first":
            return list(range(1, k + 1))
        if self.layer_strategy == "last":
            return list(range(n_layers - k + 1, n_layers + 1))
        return [n_layers]


def select_layers(n_layers: int, k: int) -> list[int]:
    """Uniformly spaced layer indices ``ceil(i * L / k)`` for ``i = 1..k``.

    >>> select_layers(28, 4)
    [7, 14, 21, 28]
    >>> select_layers(6, 4)
    [2, 3, 5, 6]
    """
    if not 1 <= k <= n_layers:
        raise ValueError(f"need 1 <= k <= L, got k={k}, L={n_layers}")
    # integer ceil avoids float rounding at exact multiples
    out: list[int] = []
    for i in range(1, k + 1):
        idx = -(-i * n_layers // k)
        if not out or idx != out[-1]:
            out.append(idx)
    return out


class Connector(nn.Module):
    """One connector, for one (layer, modality) pair."""

    def __init__(self, d_model: int, hidden: int | None = None, mode: str = "full", eps: float = 1e-6):
        super().__init__()
        if mode not in CONNECTOR_MODES or mode == "none":
            raise ValueError(f"Connector cannot be built in mode {mode!r}")
        hidden = hidden or d_model
        self.mode = mode
        self.eps = eps
        self.rms_gain = nn.Parameter(torch.ones(d_model))
        if mode == "full":
            self.scale = nn.Parameter(torch.zeros(d_model))
        if mode != "rmsnorm":
            self.w_up = nn.Parameter(torch.empty(d_model, hidden))
            self.w_down = nn.Parameter(torch.empty(hidden, d_model))
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self, std: float = 0.02, generator: torch.Generator | None = None):
        self.rms_gain.fill_(1.0)
        if self.mode == "full":
            self.scale.zero_()
        if self.mode != "rmsnorm":
            self.w_up.normal_(0.0, std, generator=generator)
            self.w_down.zero_()

    def forward(self, h: Tensor) -> Tensor:
        x = rms_norm(h, self.rms_gain, self.eps)
        if self.mode == "rmsnorm":
            return x
        out = silu(x @ self.w_up) @ self.w_down
        if self.mode == "rmsnorm_mlp_residual":
            out = x + out
        elif self.mode == "full":
            out = x * self.scale + out
        return out


def connector_apply(h: Tensor, connector: Connector) -> Tensor:
    return connector(h)


class ConnectorBank(nn.Module):
    """Connectors for every selected layer and modality.

    With ``shared_modality`` a single connector per layer serves both the
    vision and the text slice.
    """

    def __init__(
        self,
        d_model: int,
        selected_layers: Sequence[int],
        mode: str = "full",
        shared_modality: bool = False,
        hidden: int | None = None,
        eps: float = 1e-6,
    ):
        super().__init__()
        self.selected_layers = list(selected_layers)
        self.shared_modality = shared_modality
        self.mode = mode
        mods = ("vt",) if shared_modality else MODALITIES
        self.connectors = nn.ModuleDict(
            {f"{layer}_{m}": Connector(d_model, hidden, mode, eps) for layer in self.selected_layers for m in mods}
        )

    def get(self, layer: int, modality: str) -> Connector:
        key = f"{layer}_vt" if self.shared_modality else f"{layer}_{modality}"
        return self.connectors[key]

    def forward(self, e1: Tensor, hidden: Sequence[Tensor], n_vision: int) -> Tensor:
        return build_next_input(e1, hidden, self, n_vision)


def init_connectors(bank: ConnectorBank, std: float = 0.02, generator: torch.Generator | None = None) -> ConnectorBank:
    """Zero the scale vectors and down projections; w_up ~ N(0, std)."""
    for conn in bank.connectors.values():
        conn.reset_parameters(std, generator)
    return bank


def build_next_input(e1: Tensor, hidden: Sequence[Tensor], bank: ConnectorBank, n_vision: int) -> Tensor:
    """Next-step input anchored on the first-step embeddings ``e1``.

    ``hidden[l]`` is the output of block ``l`` (``hidden[0]`` is the step
    input). Vision and text slices are updated independently.
    """
    n_layers = len(hidden) - 1
    missing = [layer for layer in bank.selected_layers if not 1 <= layer <= n_layers]
    if missing:
        raise KeyError(f"hidden states for layers {missing} not available (have 1..{n_layers})")
    e1_v, e1_t = split_tokens(e1, n_vision)
    v_next, t_next = e1_v, e1_t
    for layer in bank.selected_layers:
        h_v, h_t = split_tokens(hidden[layer], n_vision)
        if n_vision:
            v_next = v_next + bank.get(layer, "v")(h_v)
        t_next = t_next + bank.get(layer, "t")(h_t)
    return concat_tokens([v_next, t_next])


def connector_param_count(bank: ConnectorBank | None) -> int:
    if bank is None:
        return 0
    return sum(p.numel() for p in bank.parameters() if p.requires_grad)


__all__ = [
    "RecursionConfig",
    "Connector",
    "ConnectorBank",
    "select_layers",
    "connector_apply",
    "init_connectors",
    "build_next_input",
    "connector_param_count",
    "CONNECTOR_MODES",
    "LAYER_STRATEGIES",
]
