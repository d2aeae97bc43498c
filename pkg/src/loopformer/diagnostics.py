"""Layer-wise scale and similarity diagnostics.

For each recursion step: mean token L2 norm of every hidden state, and the
linear CKA between every hidden state and that step's input embeddings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import RecursiveVLM

MAX_CKA_ROWS = 4096


@dataclass
class DiagnosticsReport:
    step: int
    per_layer_norm: list[float]
    per_layer_cka: list[float]
    sample_count: int
    token_count: int
    fingerprint: str = ""
    slice: dict = field(default_factory=dict)


def layer_l2_norms(hidden: Sequence) -> list[float]:
    """Mean over tokens of each state's L2 norm; states are ``(..., N, d)``."""
    if not hidden:
        raise ValueError("layer_l2_norms needs at least one hidden state")
    out = []
    for h in hidden:
        h = torch.as_tensor(h)
        out.append(float(torch.linalg.vector_norm(h.double(), dim=-1).mean()))
    return out


def linear_cka(x, y) -> float:
    """Linear CKA with column centering.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)``, rows are examples.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"linear_cka needs 2-D inputs with equal row counts, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("linear_cka needs at least two rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0.0:
        raise ValueError("linear_cka undefined: an input has zero variance")
    return float(cross / denom)


def _pool(h: torch.Tensor) -> np.ndarray:
    return h.detach().double().reshape(-1, h.shape[-1]).cpu().numpy()


@torch.no_grad()
def collect_step_reports(
    model: RecursiveVLM,
    batches: Iterable,
    steps: int,
    seed: int = 0,
    max_rows: int = MAX_CKA_ROWS,
) -> list[DiagnosticsReport]:
    """Aggregate norms and CKA over ``batches`` for recursion steps ``1..steps``.

    Norms average over every token seen. CKA pools all token positions and
    subsamples at most ``max_rows`` of them with a seeded RNG.
    """
    norm_sums = None
    pooled: list[list[list[np.ndarray]]] = [[] for _ in range(steps)]
    n_tokens = n_samples = 0
    model.eval()
    for batch in batches:
        outs = model.recursive_forward(batch, steps)
        n_samples += len(batch)
        tokens = outs[0].hidden[0].shape[:-1].numel()
        n_tokens += tokens
        sums = np.array([[n * tokens for n in layer_l2_norms(o.hidden)] for o in outs])
        norm_sums = sums if norm_sums is None else norm_sums + sums
        for r, o in enumerate(outs):
            pooled[r].append([_pool(h) for h in o.hidden])
    if n_tokens == 0:
        raise ValueError("no data to diagnose")

    rng = np.random.default_rng(seed)
    rows = rng.permutation(n_tokens)[:max_rows] if n_tokens > max_rows else np.arange(n_tokens)
    rows.sort()
    reports = []
    for r in range(steps):
        n_layers = len(pooled[r][0])
        stacked = [np.concatenate([b[i] for b in pooled[r]])[rows] for i in range(n_layers)]
        reports.append(
            DiagnosticsReport(
                step=r + 1,
                per_layer_norm=[float(v) for v in norm_sums[r] / n_tokens],
                per_layer_cka=[linear_cka(h, stacked[0]) for h in stacked],
                sample_count=n_samples,
                token_count=n_tokens,
            )
        )
    return reports


def write_reports(reports: Sequence[DiagnosticsReport], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``diagnostics.json`` and the long-form ``diagnostics.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "diagnostics.json"
    csv_path = out_dir / "diagnostics.csv"
    json_path.write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer_index", "step", "norm", "cka"])
        for rep in reports:
            for i, (n, c) in enumerate(zip(rep.per_layer_norm, rep.per_layer_cka)):
                w.writerow([i, rep.step, repr(n), repr(c)])
    return json_path, csv_path


def run_diagnostics(
    checkpoint,
    steps: int | None = None,
    n_samples: int = 256,
    batch_size: int = 64,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[DiagnosticsReport]:
    """Diagnose a checkpoint (path or ``Checkpoint``) on the head of its eval split."""
    from .data import make_batch, make_split
    from .train import Checkpoint, load_checkpoint

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    config = ckpt.config
    steps = steps or config.recursion.steps
    model = ckpt.to_model()
    _, eval_idx = make_split(config.task.seed, config.n_train, config.n_eval)
    idx = [int(i) for i in eval_idx[:n_samples]]
    batches = (make_batch(config.task, idx[i : i + batch_size]) for i in range(0, len(idx), batch_size))
    reports = collect_step_reports(model, batches, steps, seed=seed)
    slice_def = {"split": "eval", "first_n": len(idx), "task_seed": config.task.seed, "cka_seed": seed}
    for rep in reports:
        rep.fingerprint = config.fingerprint()
        rep.slice = slice_def
    if out_dir is not None:
        write_reports(reports, out_dir)
    return reports
