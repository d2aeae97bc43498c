"""Training loop, AdamW, evaluation, checkpoints and the ablation runner."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from . import __version__
from .connector import RecursionConfig
from .data import TaskConfig, make_batch, make_split
from .loss import LossConfig, total_loss
from .model import ModelConfig, MultimodalBatch, RecursiveVLM
from .numerics import NonFiniteError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "loopformer-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A configuration file or override is invalid."""


class CheckpointError(ValueError):
    """A checkpoint on disk is corrupt or does not match the expected model."""


# -- configuration --------------------------------------------------------


@dataclass
class OptimConfig:
    lr: float = 3e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0


@dataclass
class TrainConfig:
    """Everything that determines a run.

    ``model.patch_dim`` is derived from the task and overwritten on init.
    """

    steps: int = 5000
    batch_size: int = 32
    eval_every: int = 500
    eval_batch_size: int = 256
    n_train: int = 200_000
    n_eval: int = 512
    seed: int = 0
    threads: int = 1
    optim: OptimConfig = field(default_factory=OptimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    recursion: RecursionConfig = field(default_factory=RecursionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self):
        self.model.patch_dim = self.task.patch_dim
        if self.model.vocab_size < self.task.min_vocab:
            raise ConfigError(
                f"vocab_size={self.model.vocab_size} too small for task {self.task.task!r} "
                f"(needs {self.task.min_vocab})"
            )
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0, batch_size and eval_every >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d)

    def fingerprint(self) -> str:
        blob = json.dumps({"version": __version__, "config": self.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        """Copy with dotted-key overrides, e.g. ``{"loss.variant": "each_step"}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *path, leaf = key.split(".")
            for part in path:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config section {part!r} in {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config field {key!r}")
            node[leaf] = value
        return TrainConfig.from_dict(d)


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown fields for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get(name) if cls is TrainConfig else None
        kwargs[name] = _build(sub, value) if sub is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


_NESTED = {
    "optim": OptimConfig,
    "model": ModelConfig,
    "recursion": RecursionConfig,
    "loss": LossConfig,
    "task": TaskConfig,
}


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return TrainConfig.from_dict(raw)


def build_model(config: TrainConfig) -> RecursiveVLM:
    return RecursiveVLM(config.model, config.recursion, seed=config.seed)


# -- optimiser --------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[Tensor] = field(default_factory=list)
    exp_avg_sq: list[Tensor] = field(default_factory=list)


def global_grad_norm(grads: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))


@torch.no_grad()
def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    state: AdamWState,
    hyper: OptimConfig,
    lr: float | None = None,
    decay: Sequence[bool] | None = None,
) -> float:
    """One in-place AdamW update with global-norm clipping.

    Weight decay is decoupled (``p -= lr * wd * p``) and applied only where
    ``decay`` is true (default: everywhere). Returns the pre-clip gradient
    norm.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
    lr = hyper.lr if lr is None else lr
    decay = [True] * len(params) if decay is None else list(decay)
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1

    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError(f"non-finite gradient at optimizer step {state.step}")
    clip = 1.0
    if hyper.clip_norm and norm > hyper.clip_norm:
        clip = hyper.clip_norm / (norm + 1e-6)

    bc1 = 1 - hyper.beta1**state.step
    bc2 = 1 - hyper.beta2**state.step
    for p, g, m, v, dec in zip(params, grads, state.exp_avg, state.exp_avg_sq, decay):
        g = g * clip if clip != 1.0 else g
        if dec and hyper.weight_decay:
            p.mul_(1 - lr * hyper.weight_decay)
        m.mul_(hyper.beta1).add_(g, alpha=1 - hyper.beta1)
        v.mul_(hyper.beta2).addcmul_(g, g, value=1 - hyper.beta2)
        denom = (v / bc2).sqrt_().add_(hyper.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return norm


def lr_at(step: int, total: int, hyper: OptimConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
    if hyper.warmup_steps and step < hyper.warmup_steps:
        return hyper.lr * (step + 1) / hyper.warmup_steps
    span = max(total - hyper.warmup_steps, 1)
    progress = min(max(step - hyper.warmup_steps, 0) / span, 1.0)
    floor = hyper.lr * hyper.min_lr_ratio
    return floor + 0.5 * (hyper.lr - floor) * (1 + math.cos(math.pi * progress))


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    tensors: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, model: RecursiveVLM, config: TrainConfig, step: int) -> "Checkpoint":
        tensors = {
            name: t.detach().cpu().to(torch.float32).numpy().copy() for name, t in model.state_dict().items()
        }
        return cls(copy.deepcopy(config), step, tensors)

    def to_model(self, dtype: torch.dtype = torch.float32) -> RecursiveVLM:
        model = build_model(self.config)
        _check_shapes(model, self.tensors)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        model.load_state_dict(state, strict=True)
        return model.to(dtype)


def _check_shapes(model: RecursiveVLM, tensors: dict[str, np.ndarray]) -> None:
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(
                f"shape mismatch for tensor {name!r}: checkpoint {tuple(tensors[name].shape)}, model {shape}"
            )
    extra = set(tensors) - set(expected)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensors {sorted(extra)}")


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write ``manifest.json``, ``tensors.bin`` and ``config.json`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "step": ckpt.step,
        "total_bytes": offset,
        "tensors": entries,
    }
    (path / "tensors.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(_dump_json(manifest))
    (path / "config.json").write_text(
        _dump_json({"fingerprint": ckpt.config.fingerprint(), "config": ckpt.config.to_dict()})
    )
    return path


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint directory, verifying it against ``config``.

    Without ``config`` the snapshot stored alongside the tensors is used.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        stored = json.loads((path / "config.json").read_text())
        blob = (path / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest or config in {path}: {exc}") from None

    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    if manifest.get("byte_order") != "little":
        raise CheckpointError("only little-endian checkpoints are supported")
    if len(blob) != manifest.get("total_bytes"):
        raise CheckpointError(f"tensor blob is {len(blob)} bytes, manifest expects {manifest.get('total_bytes')}")

    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        if e.get("dtype") != "float32":
            raise CheckpointError(f"dtype mismatch for tensor {e['name']!r}: {e.get('dtype')}, expected float32")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"manifest entry for {e['name']!r} is inconsistent with its shape or the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)

    if config is None:
        try:
            config = TrainConfig.from_dict(stored["config"])
        except (KeyError, ConfigError) as exc:
            raise CheckpointError(f"bad config snapshot in {path}: {exc}") from None
    _check_shapes(build_model(config), tensors)
    return Checkpoint(config, int(manifest["step"]), tensors)


# -- evaluation -------------------------------------------------------------


@torch.no_grad()
def evaluate(
    model: RecursiveVLM,
    config: TrainConfig,
    indices: Iterable[int],
    steps: int | None = None,
    batch_size: int | None = None,
) -> list[dict]:
    """Per-recursion-step CE, adjusted CE, accuracy and degraded fraction.

    Token-level metrics over answer tokens, pooled across the whole set.
    """
    steps = config.recursion.steps if steps is None else steps
    batch_size = batch_size or config.eval_batch_size
    beta = config.loss.beta
    indices = [int(i) for i in indices]
    ce = np.zeros(steps)
    adj = np.zeros(steps)
    correct = np.zeros(steps)
    degraded = np.zeros(steps)
    count = 0
    was_training = model.training
    model.eval()
    for start in range(0, len(indices), batch_size):
        batch = make_batch(config.task, indices[start : start + batch_size])
        outs = model.recursive_forward(batch, steps)
        mask = batch.loss_mask
        count += int(mask.sum())
        prev = None
        for r, out in enumerate(outs):
            cur = out.token_losses.double()
            ce[r] += float(cur[mask].sum())
            pred = out.logits.argmax(dim=-1)
            correct[r] += float((pred == batch.targets)[mask].sum())
            if prev is None:
                adj[r] += float(cur[mask].sum())
            else:
                fired = (cur > prev) & mask
                adj[r] += float(torch.where(fired, beta * cur, cur)[mask].sum())
                degraded[r] += float(fired.sum())
            prev = cur
    model.train(was_training)
    return [
        {
            "r": r + 1,
            "ce_raw": ce[r] / count,
            "ce_adjusted": adj[r] / count,
            "accuracy": correct[r] / count,
            "degraded_fraction": degraded[r] / count,
        }
        for r in range(steps)
    ]


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: RecursiveVLM
    checkpoint: Checkpoint
    metrics: list[dict]


def train_batch_indices(config: TrainConfig, train_idx: np.ndarray, step: int) -> np.ndarray:
    rng = np.random.default_rng([config.seed, step, 0x7A11])
    return train_idx[rng.integers(0, len(train_idx), size=config.batch_size)]


def train(
    config: TrainConfig,
    out_dir: str | Path | None = None,
    on_metric: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimise the summed recursion objective; evaluate every ``eval_every`` steps.

    With ``out_dir`` set, writes ``metrics.jsonl`` as it goes and the final
    checkpoint under ``out_dir/checkpoint``.
    """
    if config.threads:
        torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    model = build_model(config)
    train_idx, eval_idx = make_split(config.task.seed, config.n_train, config.n_eval)

    params = [p for p in model.parameters() if p.requires_grad]
    decay = [p.dim() >= 2 for p in params]
    state = AdamWState()
    metrics: list[dict] = []
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "fingerprint.txt").write_text(config.fingerprint() + "\n")
        fh = open(out_dir / "metrics.jsonl", "w")

    def record(step: int):
        for row in evaluate(model, config, eval_idx):
            event = {"step": step, "split": "eval", **row}
            metrics.append(event)
            if fh is not None:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
                fh.flush()
            if on_metric is not None:
                on_metric(event)

    try:
        record(0)
        model.train()
        for step in range(config.steps):
            batch = _to_dtype(make_batch(config.task, train_batch_indices(config, train_idx, step)), model)
            outs = model.recursive_forward(batch)
            loss, breakdown = total_loss([o.token_losses for o in outs], batch.loss_mask, config.loss)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at training step {step + 1}")
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            lr = lr_at(step, config.steps, config.optim)
            adamw_step(params, grads, state, config.optim, lr=lr, decay=decay)
            done = step + 1
            if done % config.eval_every == 0 or done == config.steps:
                log.info("step %d loss %.4f raw %s", done, breakdown.total, breakdown.per_step_raw)
                record(done)
    finally:
        if fh is not None:
            fh.close()

    ckpt = Checkpoint.from_model(model, config, config.steps)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint")
    return TrainResult(model, ckpt, metrics)


def _to_dtype(batch: MultimodalBatch, model: RecursiveVLM) -> MultimodalBatch:
    dtype = model.head.dtype
    if batch.raw_patches.dtype == dtype:
        return batch
    return dataclasses.replace(batch, raw_patches=batch.raw_patches.to(dtype))


# -- ablation matrix -------------------------------------------------------


def expand_grid(grid: dict[str, Sequence[Any]]) -> list[dict[str, Any]]:
    """Cartesian product of dotted-key overrides, in key order."""
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def arm_name(overrides: dict[str, Any]) -> str:
    if not overrides:
        return "base"
    return ",".join(f"{k}={v}" for k, v in overrides.items())


def _run_arm(args) -> dict:
    base_dict, overrides, out_dir = args
    config = TrainConfig.from_dict(base_dict).with_overrides(overrides)
    arm_dir = None if out_dir is None else Path(out_dir) / _slug(arm_name(overrides))
    result = train(config, arm_dir)
    final = [m for m in result.metrics if m["step"] == config.steps]
    return {"arm": arm_name(overrides), "overrides": overrides, "fingerprint": config.fingerprint(), "final": final}


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_=." else "_" for c in name)


def run_ablation(
    base: TrainConfig,
    grid: dict[str, Sequence[Any]] | list[dict[str, Any]],
    out_dir: str | Path | None = None,
    parallel: int = 1,
) -> list[dict]:
    """Train one run per arm and collect each arm's final eval rows."""
    arms = expand_grid(grid) if isinstance(grid, dict) else list(grid)
    # validate every arm before spending compute on any of them
    for ov in arms:
        base.with_overrides(ov)
    jobs = [(base.to_dict(), ov, out_dir) for ov in arms]
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(parallel) as pool:
            rows = list(pool.map(_run_arm, jobs))
    else:
        rows = [_run_arm(j) for j in jobs]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.json").write_text(_dump_json(rows))
    return rows


def format_summary(rows: list[dict]) -> str:
    """Plain-text table: one line per arm, accuracy and CE per recursion step."""
    max_r = max((len(r["final"]) for r in rows), default=0)
    header = ["arm"] + [f"{m}@r{r}" for r in range(1, max_r + 1) for m in ("acc", "ce")]
    lines = [header]
    for row in rows:
        cells = [row["arm"]]
        for r in range(max_r):
            if r < len(row["final"]):
                cells += [f"{row['final'][r]['accuracy']:.4f}", f"{row['final'][r]['ce_raw']:.4f}"]
            else:
                cells += ["-", "-"]
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)) for line in lines)
