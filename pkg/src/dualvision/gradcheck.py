"""Central finite-difference gradient checking.

The numerical side only ever calls the forward function with recording
suspended, so it shares nothing with the reverse pass it audits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_tape


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: tuple = ()
    rows: list = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int = 100,
    step: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn`` with central differences.

    ``params`` should hold float64 data; ``loss_fn`` must recompute the loss
    from their current values.  Coordinates are sampled uniformly over the
    union of all parameter entries (with replacement only when there are
    fewer entries than ``n_coords``).
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = loss_fn()
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=n_coords, replace=total < n_coords)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    rows = []
    with no_tape():
        for f in flat:
            which = int(np.searchsorted(offsets, f, side="right") - 1)
            local = int(f - offsets[which])
            p = params[which]
            view = p.data.reshape(-1)
            orig = view[local]
            view[local] = orig + step
            up = float(loss_fn().item())
            view[local] = orig - step
            down = float(loss_fn().item())
            view[local] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[which].reshape(-1)[local])
            rows.append((which, local, a, numeric, relative_error(a, numeric, floor)))
    worst = max(rows, key=lambda r: r[4])
    return GradCheckReport(max_rel_error=worst[4], n_coords=len(rows), worst=worst, rows=rows)
