"""scikit-learn style wrapper around training and recursive inference."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .connector import RecursionConfig
from .data import Sample, TaskConfig, collate
from .loss import LossConfig, total_loss
from .model import ModelConfig
from .train import (
    AdamWState,
    OptimConfig,
    TrainConfig,
    adamw_step,
    build_model,
    lr_at,
    train,
)


def check_samples(X) -> list[Sample]:
    """Validate that ``X`` is a non-empty sequence of same-shaped ``Sample``s."""
    if isinstance(X, Sample):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one sample")
    bad = [type(x).__name__ for x in X if not isinstance(x, Sample)]
    if bad:
        raise TypeError(f"expected Sample objects, got {sorted(set(bad))}")
    shapes = {(x.raw_patches.shape, len(x.prompt), len(x.answer)) for x in X}
    if len(shapes) != 1:
        raise ValueError(f"all samples must share patch/prompt/answer shapes, got {sorted(shapes)}")
    return X


class RecursiveVLMClassifier(ClassifierMixin, BaseEstimator):
    """Recursive transformer that predicts answer tokens for task samples.

    ``fit(None)`` trains on the task's own generator stream; ``fit(X)`` with a
    list of :class:`~loopformer.data.Sample` trains on minibatches drawn from
    ``X``. ``predict`` returns answer token ids, shape ``(n_samples,
    answer_len)``; ``staged_predict`` yields them once per recursion step.
    """

    def __init__(
        self,
        task: str = "grid_color",
        recursion_steps: int = 2,
        connector_mode: str = "full",
        loss_variant: str = "monotonic",
        beta: float = 1.5,
        n_layers: int = 8,
        d_model: int = 64,
        n_heads: int = 4,
        steps: int = 5000,
        batch_size: int = 32,
        learning_rate: float = 3e-4,
        weight_decay: float = 0.1,
        eval_step: int | None = None,
        seed: int = 0,
    ):
        self.task = task
        self.recursion_steps = recursion_steps
        self.connector_mode = connector_mode
        self.loss_variant = loss_variant
        self.beta = beta
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.eval_step = eval_step
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            eval_every=max(self.steps, 1),
            seed=self.seed,
            optim=OptimConfig(lr=self.learning_rate, weight_decay=self.weight_decay),
            model=ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads),
            recursion=RecursionConfig(
                steps=self.recursion_steps,
                num_layers_selected=min(4, max(self.n_layers, 1)),
                connector_mode=self.connector_mode,
            ),
            loss=LossConfig(self.loss_variant, self.beta),
            task=TaskConfig(task=self.task, seed=self.seed),
        )

    def fit(self, X=None, y=None):
        """Train the model. ``y`` is ignored: targets live in the samples."""
        config = self._train_config()
        if X is None:
            self.model_ = train(config).model
        else:
            self.model_ = self._fit_samples(config, check_samples(X))
        self.config_ = config
        self.classes_ = np.arange(config.model.vocab_size)
        self.n_recursion_steps_ = config.recursion.steps
        return self

    def _fit_samples(self, config: TrainConfig, X: list[Sample]):
        torch.set_num_threads(config.threads)
        model = build_model(config)
        params = [p for p in model.parameters() if p.requires_grad]
        decay = [p.dim() >= 2 for p in params]
        state = AdamWState()
        rng = np.random.default_rng(config.seed)
        model.train()
        for step in range(config.steps):
            pick = rng.integers(0, len(X), size=config.batch_size)
            batch = collate([X[i] for i in pick])
            outs = model.recursive_forward(batch)
            loss, _ = total_loss([o.token_losses for o in outs], batch.loss_mask, config.loss)
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            adamw_step(params, grads, state, config.optim, lr=lr_at(step, config.steps, config.optim), decay=decay)
        return model

    @torch.no_grad()
    def _step_logits(self, X: Sequence[Sample], steps: int) -> list[np.ndarray]:
        batch = collate(X)
        self.model_.eval()
        outs = self.model_.recursive_forward(batch, steps)
        mask = batch.loss_mask.numpy()
        n_ans = int(mask[0].sum())
        return [o.logits.numpy()[:, -n_ans:, :] for o in outs]

    def _depth(self, eval_step):
        depth = eval_step or self.eval_step or self.n_recursion_steps_
        if depth < 1:
            raise ValueError(f"eval_step must be >= 1, got {depth}")
        return depth

    def predict_proba(self, X, eval_step: int | None = None) -> np.ndarray:
        """Softmax over the vocabulary at each answer position."""
        check_is_fitted(self, "model_")
        logits = self._step_logits(check_samples(X), self._depth(eval_step))[-1]
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)

    def predict(self, X, eval_step: int | None = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._step_logits(check_samples(X), self._depth(eval_step))[-1].argmax(axis=-1)

    def staged_predict(self, X, eval_step: int | None = None):
        """Yield answer predictions after each recursion step ``1..eval_step``."""
        check_is_fitted(self, "model_")
        for logits in self._step_logits(check_samples(X), self._depth(eval_step)):
            yield logits.argmax(axis=-1)

    def score(self, X, y=None, eval_step: int | None = None) -> float:
        """Token accuracy on the answer spans of ``X``."""
        X = check_samples(X)
        pred = self.predict(X, eval_step)
        truth = np.stack([x.answer for x in X])
        return float((pred == truth).mean())
