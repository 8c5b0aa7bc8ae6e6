"""Seeded training loop: Adam, per-epoch learning-rate decay, loss history."""

from dataclasses import asdict, dataclass, field
import logging

import numpy as np

from ..errors import NonFiniteError, TrainingDiverged, ValidationError
from .msun import as_trainable, init_params, msun_forward
from .optim import AdamState, adam_step, epoch_end

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-4
    lr_decay: float = 0.3
    batch_size: int = 1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0 or not self.lr_decay > 0:
            raise ValidationError("lr and lr_decay must be > 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)  # loss per optimisation step
    lr_history: list = field(default_factory=list)  # lr used in each epoch
    state: AdamState = None


def train(model_cfg, dataset, loss_fn, cfg=TrainConfig(), params=None, dtype=np.float32):
    """Fit an MSUN on ``dataset``.

    ``dataset`` is a sequence of ``(input, targets)`` with ``input`` shaped
    (C, H, W) and ``targets`` a tuple passed to ``loss_fn(pred, *targets)``.
    Sample order is reshuffled each epoch from ``cfg.seed``.
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    if params is None:
        params = init_params(model_cfg, cfg.seed, dtype)
    else:
        params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    state = AdamState(lr=cfg.lr, decay=cfg.lr_decay)
    rng = np.random.default_rng([int(cfg.seed), 0x5452])
    history, lrs = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset)) if cfg.shuffle else np.arange(len(dataset))
        lrs.append(state.lr)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            tracked = as_trainable(params)
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            total = 0.0
            try:
                for i in batch:
                    x, targets = dataset[int(i)]
                    pred = msun_forward(model_cfg, tracked, np.asarray(x, dtype=dtype))
                    loss = loss_fn(pred, *targets)
                    loss.backward()
                    total += float(loss.data)
                    for k, t in tracked.items():
                        grads[k] += t.grad
                        t.grad = None
                if len(batch) > 1:
                    for g in grads.values():
                        g /= len(batch)
                adam_step(params, grads, state)
            except NonFiniteError as err:
                history.append(float("nan"))
                raise TrainingDiverged(f"training diverged at epoch {epoch}, "
                                       f"step {len(history)}: {err}", history) from err
            history.append(total / len(batch))
        log.info("epoch %d/%d lr=%.3g loss=%.5g", epoch + 1, cfg.epochs, lrs[-1],
                 np.mean(history[-len(order):]))
        epoch_end(state)
    return TrainResult(params=params, history=history, lr_history=lrs, state=state)


def predict(model_cfg, params, x, dtype=np.float32):
    """Forward pass returning a plain (H, W) array for single-output nets."""
    out = msun_forward(model_cfg, {k: np.asarray(v, dtype=dtype) for k, v in params.items()},
                       np.asarray(x, dtype=dtype)).data
    return out[0] if out.shape[0] == 1 else out
