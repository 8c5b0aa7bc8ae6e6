"""Checkpoint files: one JSON header line, then little-endian float32 payload.

The header holds ``{"format", "config", "step", "params": [[name, shape], ...],
"extra"}``; parameter arrays follow in header order with no padding.
"""

import json
import math

import numpy as np

from ..errors import ValidationError

FORMAT = "pmfn-checkpoint-1"


def save_checkpoint(path, config, params, step=0, extra=None):
    header = {
        "format": FORMAT,
        "config": config,
        "step": int(step),
        "params": [[name, list(np.shape(a))] for name, a in params.items()],
        "extra": extra or {},
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as f:
        f.write(line)
        for a in params.values():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(header, params)`` with params as float32 arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValidationError(f"{path}: missing checkpoint header")
    header = json.loads(blob[:nl])
    if header.get("format") != FORMAT:
        raise ValidationError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    params, off = {}, nl + 1
    for name, shape in header["params"]:
        n = math.prod(shape)
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(
            np.float32)
        off += 4 * n
    if off != len(blob):
        raise ValidationError(f"{path}: payload size does not match header")
    return header, params
