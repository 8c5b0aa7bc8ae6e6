"""Central finite-difference gradient checking."""

import numpy as np

from .autograd import Tensor


def numeric_grad(f, arrays, index, eps, entries=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``.

    ``entries`` restricts the evaluation to those multi-indices; the other
    entries of the result stay zero.
    """
    x = arrays[index]
    g = np.zeros_like(x)
    if entries is None:
        entries = np.ndindex(x.shape)
    for i in entries:
        orig = x[i]
        x[i] = orig + eps
        fp = f(*arrays)
        x[i] = orig - eps
        fm = f(*arrays)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(analytic, numeric, floor=1e-6):
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_gradients(build, arrays, eps=1e-6, floor=1e-6, max_entries=None, seed=0):
    """Compare autodiff and finite-difference gradients of ``build``.

    ``build(*tensors)`` must return a scalar Tensor. Returns the max relative
    error over all inputs. Inputs are copied; the originals are untouched.
    With ``max_entries`` only that many randomly chosen entries of each
    input are differenced (for large networks).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()

    def f(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for k, t in enumerate(tensors):
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[k])
        size = arrays[k].size
        if max_entries is None or size <= max_entries:
            num = numeric_grad(f, arrays, k, eps)
            worst = max(worst, relative_error(ana, num, floor))
        else:
            flat = rng.choice(size, max_entries, replace=False)
            idx = [np.unravel_index(j, arrays[k].shape) for j in flat]
            num = numeric_grad(f, arrays, k, eps, idx)
            sel = tuple(np.array(idx).T)
            worst = max(worst, relative_error(ana[sel], num[sel], floor))
    return worst
