"""Multi-scale U-Net.

Encoder level ``k`` (``k = 0 .. depth-1``) has ``base * 2**k`` channels and
two 3x3 conv + ReLU layers. Levels below the top take the max-pooled output
of the level above; with ``multiscale_inputs`` a ``2**k`` average-pooled
copy of the network input is concatenated to that. The decoder mirrors the
encoder: nearest upsampling, concatenation with the encoder skip, two 3x3
conv + ReLU. A 1x1 conv maps the top decoder level to ``out_channels``.
"""

from dataclasses import asdict, dataclass
import math

import numpy as np

from ..errors import ValidationError
from .autograd import (Tensor, as_tensor, avgpool2, concat_channels, conv2d, instance_norm,
                       maxpool2, relu, upsample_nearest)


@dataclass(frozen=True)
class MSUNConfig:
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 8
    multiscale_inputs: bool = True
    out_channels: int = 1
    instance_norm: bool = False
    zero_head: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("in_channels and out_channels must be >= 1")
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValidationError(f"base_channels must be >= 1, got {self.base_channels}")

    def to_dict(self):
        return asdict(self)

    @property
    def multiple(self):
        return 2 ** (self.depth - 1)


def layer_shapes(cfg):
    """Ordered ``{param name: shape}`` for every weight and bias."""
    shapes = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    b = cfg.base_channels
    for k in range(cfg.depth):
        cout = b * 2 ** k
        if k == 0:
            cin = cfg.in_channels
        else:
            cin = b * 2 ** (k - 1) + (cfg.in_channels if cfg.multiscale_inputs else 0)
        conv(f"enc{k}.conv1", cin, cout)
        conv(f"enc{k}.conv2", cout, cout)
    for k in range(cfg.depth - 2, -1, -1):
        c = b * 2 ** k
        conv(f"dec{k}.conv1", 2 * c + c, c)
        conv(f"dec{k}.conv2", c, c)
    conv("head", b, cfg.out_channels, k=1)
    return shapes


def param_count(cfg):
    return sum(math.prod(s) for s in layer_shapes(cfg).values())


def init_params(cfg, seed=0, dtype=np.float32):
    """He-normal (fan-in) weights, zero biases; the 1x1 head is zero when ``zero_head``."""
    rng = np.random.default_rng([int(seed), 0x4D53554E])
    params = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".b") or (cfg.zero_head and name.startswith("head.")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def _block(x, params, name, norm):
    for conv in ("conv1", "conv2"):
        x = conv2d(x, params[f"{name}.{conv}.w"], params[f"{name}.{conv}.b"])
        if norm:
            x = instance_norm(x)
        x = relu(x)
    return x


def msun_forward(cfg, params, x):
    """Run the network on a (C, H, W) input; returns a Tensor of shape (out, H, W).

    ``params`` values may be arrays or Tensors (pass Tensors with
    ``requires_grad`` to get parameter gradients).
    """
    x = as_tensor(x)
    if x.data.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ValidationError(
            f"MSUN expects input of shape ({cfg.in_channels}, H, W), got {x.shape}")
    m = cfg.multiple
    if x.shape[1] % m or x.shape[2] % m:
        raise ValidationError(
            f"spatial size {x.shape[1:]} must be divisible by {m} for depth {cfg.depth}")
    missing = set(layer_shapes(cfg)) - set(params)
    if missing:
        raise ValidationError(f"missing parameters: {sorted(missing)}")
    p = {k: as_tensor(v) for k, v in params.items()}

    skips = []
    scaled = x
    h = x
    for k in range(cfg.depth):
        if k > 0:
            h = maxpool2(h)
            if cfg.multiscale_inputs:
                scaled = avgpool2(scaled)
                h = concat_channels(h, scaled)
        h = _block(h, p, f"enc{k}", cfg.instance_norm)
        skips.append(h)
    for k in range(cfg.depth - 2, -1, -1):
        h = concat_channels(upsample_nearest(h), skips[k])
        h = _block(h, p, f"dec{k}", cfg.instance_norm)
    return conv2d(h, p["head.w"], p["head.b"], padding=0)


def as_trainable(params):
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
