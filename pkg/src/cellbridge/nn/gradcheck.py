"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Relative error uses an absolute floor so coordinates with near-zero
# gradients are not dominated by finite-difference truncation noise.
REL_FLOOR = 1e-4


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int = 200,
    step: float = 1e-5,
    rng: "np.random.Generator | None" = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic (freeze any sampling before calling).
    ``n_coords`` coordinates are sampled across all parameters; each is
    perturbed by ±step and the two-sided difference quotient is compared to
    the analytic gradient from :func:`autodiff.backward`.
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)

    ad.zero_grad(params)
    loss = loss_fn()
    ad.backward(loss)
    analytic = [np.array(g, copy=True) for g in ad.grads_of(params)]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    n = min(n_coords, total)
    coords = rng.choice(total, size=n, replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat in np.sort(coords):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi > 0 else 0))
        p = params[pi]
        orig = p.data.flat[local]
        p.data.flat[local] = orig + step
        hi = loss_fn().item()
        p.data.flat[local] = orig - step
        lo = loss_fn().item()
        p.data.flat[local] = orig
        fd = (hi - lo) / (2.0 * step)
        an = analytic[pi].flat[local]
        err = abs(an - fd) / max(abs(an), abs(fd), REL_FLOOR)
        worst = max(worst, err)
    return worst
