"""Central-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, NumericalFailure
from .tensor import BranchLog, Tape, Tensor, backprop

MIN_EPS = 1e-7


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple | None  # (parameter name or index, flat coordinate)
    n_checked: int
    tol: float
    n_narrowed: int = 0  # coordinates whose step was shrunk to stay off a kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _value(fn) -> tuple:
    """(objective value, branch digest) of one evaluation."""
    with BranchLog() as branches:
        out = fn()
    v = float(out.values.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(v):
        raise NumericalFailure("objective returned a non-finite value")
    return v, branches.digest()


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn()`` with central differences.

    ``fn`` must rebuild its scalar output from the current values of
    ``params`` on every call. With ``max_coords`` set, that many coordinates
    per parameter are sampled instead of checking all of them.

    A central difference is only meaningful where ``fn`` is smooth on the
    whole stencil. When ``theta +- eps`` lands on a different ReLU or
    max-pool branch than ``theta``, the step for that coordinate is divided
    by 10 (down to 1e-7) until both ends share the branch of ``theta``.
    """
    if not MIN_EPS <= eps <= 1e-3:
        raise ConfigError(f"eps={eps} outside [{MIN_EPS:g}, 1e-3]")
    with Tape() as tape:
        loss = fn()
    if not np.all(np.isfinite(loss.values)):
        raise NumericalFailure("objective returned a non-finite value")
    grads = backprop(loss, tape, leaves=params)
    _, branch0 = _value(fn)
    rng = np.random.default_rng(seed)
    worst, worst_err, n, narrowed = None, 0.0, 0, 0
    for k, p in enumerate(params):
        flat = p.values.reshape(-1)
        g = grads[p].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            step = eps
            while True:
                flat[i] = orig + step
                fp, bp = _value(fn)
                flat[i] = orig - step
                fm, bm = _value(fn)
                flat[i] = orig
                if (bp == branch0 and bm == branch0) or step / 10 < MIN_EPS * (1 - 1e-9):
                    break
                step /= 10
            narrowed += step != eps
            num = (fp - fm) / (2.0 * step)
            err = float(relative_error(num, g[i]))
            n += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (p.name if p.name else k, int(i))
    return GradCheckReport(worst_err, worst, n, tol, narrowed)
