"""Minimal training loop: SGD with momentum and linear warmup.

Exists to manufacture a non-degenerate target model at desk scale; nothing
here is tuned beyond "the loss goes down reliably on the bundled corpus".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, sample_batch
from .errors import NumericError, TrainingError, UsageError
from .model import Model, loss_on_batch
from .tensor import Tensor, backward, trace


@dataclass
class TrainResult:
    model: Model
    curve: list[tuple[int, float]] = field(default_factory=list)  # (step, per-token loss)

    @property
    def initial_loss(self) -> float:
        return self.curve[0][1] if self.curve else math.nan

    @property
    def final_loss(self) -> float:
        return self.curve[-1][1] if self.curve else math.nan

    def smoothed(self, window: int = 100) -> list[float]:
        losses = [v for _, v in self.curve]
        return [
            float(np.mean(losses[max(0, i - window + 1) : i + 1]))
            for i in range(len(losses))
        ]


def train(
    model: Model,
    corpus: Corpus,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    *,
    batch_size: int = 8,
    seq_len: int = 48,
    momentum: float = 0.9,
    warmup_steps: int = 100,
) -> TrainResult:
    """Return a trained copy of ``model``; the input model is untouched.

    Batches are drawn from the corpus's training window only, so the held-out
    tail stays clean for evaluation.  Gradients of the summed cross-entropy
    are scaled to per-token before the update.  Fully deterministic given
    (model, corpus, seed).
    """
    if steps < 0:
        raise UsageError(f"steps must be >= 0, got {steps}")
    work = {k: t.data.copy() for k, t in model.params.items()}
    work_model = Model(model.config, {k: Tensor._wrap(a) for k, a in work.items()}, model.active_mask)
    if steps == 0:
        return TrainResult(model=work_model)

    velocity = {k: np.zeros_like(a) for k, a in work.items()}
    window = corpus.train_window()
    curve: list[tuple[int, float]] = []
    for step in range(steps):
        batch = sample_batch(corpus, batch_size, seq_len, rng, window=window)
        try:
            with trace(), np.errstate(over="ignore", invalid="ignore"):
                loss = loss_on_batch(work_model, batch)
        except NumericError as exc:
            raise TrainingError(f"loss diverged at step {step}: {exc}") from exc
        per_token = loss.item() / batch.inputs.size
        if not math.isfinite(per_token):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        grads = backward(loss)
        lr_t = lr * min(1.0, (step + 1) / max(1, warmup_steps))
        scale = lr_t / batch.inputs.size
        for key, arr in work.items():
            v = velocity[key]
            np.multiply(v, momentum, out=v)
            v -= scale * grads[key]
            arr += v
        curve.append((step, per_token))
    return TrainResult(model=work_model, curve=curve)
