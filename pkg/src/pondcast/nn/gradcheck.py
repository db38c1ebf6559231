from __future__ import annotations

import numpy as np

from .tensor import Tape, backward


def grad_check(forward_fn, params, h: float = 1e-5, max_entries: int | None = None,
               seed: int = 0) -> float:
    """Largest relative gap between taped and central-difference gradients.

    ``forward_fn(params)`` must return a scalar tensor and be deterministic.
    With ``max_entries`` a seeded random subset of entries is checked per
    parameter; otherwise every entry is.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    with Tape() as tape:
        loss = forward_fn(params)
    if not np.isfinite(loss.item()):
        raise ValueError("forward output is not finite")
    grads = backward(tape, loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = grads[name].data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = forward_fn(params).item()
            flat[i] = orig - h
            f_minus = forward_fn(params).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"forward output not finite while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(g[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(g[i] - numeric) / denom)
    return worst
