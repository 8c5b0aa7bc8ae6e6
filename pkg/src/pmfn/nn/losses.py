"""Training losses.

The fusion loss is

    alpha * sum |pred - y| + (beta / N) * sum (pred - s)^2

with ``N`` the pixel count: the L1 term is a plain sum and only the squared
term is averaged. ``LossConfig.normalize_l1`` divides the L1 term by ``N``
as well, which keeps the two terms comparable on small images.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from .autograd import Tensor, _result, as_tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.2
    normalize_l1: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")
        if self.alpha == 0 and self.beta == 0:
            raise ValidationError("alpha and beta cannot both be zero")


def _targets(pred, *targets):
    pred = as_tensor(pred)
    out = []
    for t in targets:
        t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=pred.dtype)
        if t.shape != pred.shape:
            raise ValidationError(f"loss shape mismatch: prediction {pred.shape} vs target {t.shape}")
        out.append(t)
    return pred, out


def l1_loss(pred, y, normalize=False):
    """``sum |pred - y|`` (divided by the pixel count when ``normalize``); subgradient 0 at ties."""
    pred, (y,) = _targets(pred, y)
    d = pred.data - y
    k = 1.0 / d.size if normalize else 1.0
    sign = np.sign(d)
    return _result(np.asarray(k * np.abs(d).sum()), "l1_loss", (pred,), lambda g: (g * k * sign,))


def mse_loss(pred, s):
    pred, (s,) = _targets(pred, s)
    d = pred.data - s
    n = d.size
    return _result(np.asarray((d * d).sum() / n), "mse_loss", (pred,), lambda g: (g * 2.0 * d / n,))


def pmfn_loss(pred, y, s, cfg=LossConfig()):
    pred, (y, s) = _targets(pred, y, s)
    n = pred.data.size
    dy = pred.data - y
    ds = pred.data - s
    k = cfg.alpha / n if cfg.normalize_l1 else cfg.alpha
    value = k * np.abs(dy).sum() + cfg.beta / n * (ds * ds).sum()
    sign = np.sign(dy)

    def backward(g):
        return (g * (k * sign + (2.0 * cfg.beta / n) * ds),)

    return _result(np.asarray(value), "pmfn_loss", (pred,), backward)
