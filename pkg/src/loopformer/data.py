"""Deterministic synthetic tasks.

Every sample is a pure function of ``(seed, index, config)``: the sample's
RNG is seeded with the pair, so generation order and worker layout never
change the data.

Vocabulary layout: ``PAD=0, BOS=1, SEP=2, ANSWER=3``, then task content
tokens from ``4`` upwards. For ``grid_color`` the content block holds the
``C`` color tokens followed by the ``G*G`` cell-position tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import MultimodalBatch

PAD, BOS, SEP, ANSWER = 0, 1, 2, 3
N_SPECIAL = 4
TASKS = ("grid_color", "copy", "modadd")


@dataclass
class TaskConfig:
    task: str = "grid_color"
    grid_size: int = 4
    color_count: int = 8
    copy_length: int = 4
    copy_alphabet: int = 16
    modulus: int = 7
    drop_vision: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.grid_size < 1 or self.color_count < 1:
            raise ValueError("grid_size and color_count must be >= 1")

    @property
    def patch_dim(self) -> int:
        return self.color_count + 2 * self.grid_size

    @property
    def n_vision(self) -> int:
        if self.task != "grid_color" or self.drop_vision:
            return 0
        return self.grid_size**2

    @property
    def n_content(self) -> int:
        if self.task == "grid_color":
            return self.color_count + self.grid_size**2
        if self.task == "copy":
            return self.copy_alphabet
        return self.modulus

    @property
    def min_vocab(self) -> int:
        return N_SPECIAL + self.n_content

    def color_token(self, color: int) -> int:
        return N_SPECIAL + color

    def position_token(self, cell: int) -> int:
        return N_SPECIAL + self.color_count + cell

    def symbol_token(self, value: int) -> int:
        return N_SPECIAL + value


@dataclass
class Sample:
    """One example: patches, prompt tokens, answer tokens.

    The model sees ``prompt + answer[:-1]`` and is trained to predict the
    next token; only positions whose next token lies in the answer count.
    """

    raw_patches: np.ndarray
    prompt: np.ndarray
    answer: np.ndarray

    @property
    def text_ids(self) -> np.ndarray:
        return np.concatenate([self.prompt, self.answer])[:-1]

    @property
    def targets(self) -> np.ndarray:
        return np.concatenate([self.prompt, self.answer])[1:]

    @property
    def loss_mask(self) -> np.ndarray:
        n = len(self.prompt) + len(self.answer) - 1
        mask = np.zeros(n, dtype=bool)
        mask[len(self.prompt) - 1 :] = True
        return mask

    def to_record(self) -> dict:
        return {
            "patch_dim": int(self.raw_patches.shape[1]),
            "raw_patches": self.raw_patches.tolist(),
            "prompt": self.prompt.tolist(),
            "answer": self.answer.tolist(),
            "text_ids": self.text_ids.tolist(),
            "targets": self.targets.tolist(),
            "loss_mask": self.loss_mask.tolist(),
        }

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            np.array_equal(self.raw_patches, other.raw_patches)
            and np.array_equal(self.prompt, other.prompt)
            and np.array_equal(self.answer, other.answer)
        )


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def gen_grid_color(seed: int, index: int, config: TaskConfig) -> Sample:
    """A G x G grid of colors; the prompt names one cell, the answer is its color.

    Patch ``i`` is ``one_hot(color_i) ++ one_hot(row_i) ++ one_hot(col_i)``.
    The colors are only visible through the patches.
    """
    g, c = config.grid_size, config.color_count
    rng = _rng(seed, index)
    colors = rng.integers(0, c, size=g * g)
    cell = int(rng.integers(0, g * g))
    patches = np.zeros((g * g, config.patch_dim), dtype=np.float32)
    cells = np.arange(g * g)
    patches[cells, colors] = 1.0
    patches[cells, c + cells // g] = 1.0
    patches[cells, c + g + cells % g] = 1.0
    if config.drop_vision:
        patches = patches[:0]
    prompt = np.array([BOS, config.position_token(cell), ANSWER], dtype=np.int64)
    answer = np.array([config.color_token(int(colors[cell]))], dtype=np.int64)
    return Sample(patches, prompt, answer)


def gen_copy(seed: int, index: int, config: TaskConfig) -> Sample:
    rng = _rng(seed, index)
    span = rng.integers(0, config.copy_alphabet, size=config.copy_length)
    tokens = np.array([config.symbol_token(int(v)) for v in span], dtype=np.int64)
    prompt = np.concatenate([[BOS], tokens, [SEP]]).astype(np.int64)
    return Sample(np.zeros((0, config.patch_dim), dtype=np.float32), prompt, tokens.copy())


def modadd_sample(a: int, b: int, config: TaskConfig) -> Sample:
    m = config.modulus
    prompt = np.array([BOS, config.symbol_token(a), config.symbol_token(b), ANSWER], dtype=np.int64)
    answer = np.array([config.symbol_token((a + b) % m)], dtype=np.int64)
    return Sample(np.zeros((0, config.patch_dim), dtype=np.float32), prompt, answer)


def gen_modadd(seed: int, index: int, config: TaskConfig) -> Sample:
    rng = _rng(seed, index)
    a, b = (int(v) for v in rng.integers(0, config.modulus, size=2))
    return modadd_sample(a, b, config)


GENERATORS = {"grid_color": gen_grid_color, "copy": gen_copy, "modadd": gen_modadd}


def generate(seed: int, index: int, config: TaskConfig) -> Sample:
    return GENERATORS[config.task](seed, index, config)


def make_split(seed: int, n_train: int, n_eval: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/eval index sets drawn from ``range(n_train + n_eval)``."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n_train + n_eval)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def collate(samples: Sequence[Sample]) -> MultimodalBatch:
    """Stack samples that share ``N_v`` and ``N_t`` into a batch."""
    shapes = {(s.raw_patches.shape, len(s.prompt) + len(s.answer)) for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"cannot collate samples of differing shapes: {sorted(shapes)}")
    return MultimodalBatch(
        raw_patches=torch.from_numpy(np.stack([s.raw_patches for s in samples])),
        text_ids=torch.from_numpy(np.stack([s.text_ids for s in samples])),
        targets=torch.from_numpy(np.stack([s.targets for s in samples])),
        loss_mask=torch.from_numpy(np.stack([s.loss_mask for s in samples])),
    )


def make_batch(config: TaskConfig, indices: Iterable[int]) -> MultimodalBatch:
    return collate([generate(config.seed, int(i), config) for i in indices])


def export_jsonl(path: str | Path, config: TaskConfig, indices: Iterable[int]) -> int:
    """Write one JSON record per sample; returns the number written."""
    n = 0
    with open(path, "w") as fh:
        for i in indices:
            rec = {"index": int(i), **generate(config.seed, int(i), config).to_record()}
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n


def load_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            patches = np.asarray(rec["raw_patches"], dtype=np.float32).reshape(-1, rec["patch_dim"])
            out.append(Sample(patches, np.asarray(rec["prompt"], np.int64), np.asarray(rec["answer"], np.int64)))
    return out
