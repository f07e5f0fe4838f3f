"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .. import numerics as nx


class NondeterministicLoss(RuntimeError):
    pass


def gradient_check(
    model,
    loss_fn: Callable[[], nx.Tensor],
    eps: float = 1e-5,
    samples: int = 200,
    rng: np.random.Generator | None = None,
    return_details: bool = False,
):
    """Max relative error between tape gradients and central differences.

    ``model`` is a :class:`~dimreid.models.DimModel` or a list of parameter
    tensors. ``loss_fn`` must rebuild the loss from scratch and be
    deterministic (freeze dropout by reseeding inside it). ``samples``
    parameter entries are drawn without replacement; the relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = model.parameters() if hasattr(model, "parameters") else list(model)
    saved = [(name, arr.copy()) for name, arr in model.state_arrays()] if hasattr(model, "state_arrays") else None
    rng = rng or np.random.default_rng(0)

    with nx.Tape() as tape:
        loss = loss_fn()
    base = float(loss.data)
    grads = nx.backward(loss, tape)
    with nx.no_tape():
        again = float(loss_fn().data)
    if again != base:
        raise NondeterministicLoss(f"loss changed between identical calls: {base!r} vs {again!r}")

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(samples, total), replace=False) if total else []
    offsets = np.cumsum(sizes) - sizes
    details = []
    worst = 0.0
    with nx.no_tape():
        for flat in np.sort(picks):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p = params[k]
            idx = np.unravel_index(int(flat - offsets[k]), p.shape)
            old = p.data[idx]
            p.data[idx] = old + eps
            f_plus = float(loss_fn().data)
            p.data[idx] = old - eps
            f_minus = float(loss_fn().data)
            p.data[idx] = old
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = float(grads[p][idx]) if p in grads else 0.0
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
            details.append((k, idx, analytic, numeric, err))

    if saved is not None:
        model.load_state_arrays(dict(saved))
    return (worst, details) if return_details else worst
