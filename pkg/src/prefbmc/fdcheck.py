"""Central finite-difference gradient oracle.

``fd_check`` compares reverse-mode gradients against central differences,
coordinate by coordinate. Two modes:

* ``freeze_sg`` — stop-gradient outputs are pinned to their base-point
  values while parameters are perturbed, so the numeric gradient has the
  same semantics as the analytic one (detached quantities carry no
  gradient). This is the mode that certifies an implementation.
* ``naive`` — plain finite differences of the function as written. When the
  function routes values through ``stop_gradient``, this measures the
  gradient of a *different* function; the gap between the two modes is
  itself evidence that detaching works.

Relative error for a coordinate is ``|ad - fd| / max(|ad|, |fd|, floor)``.
The floor keeps finite-difference truncation noise on near-zero
coordinates (absolute error around h^2) from registering as mismatch while
staying far below the size of any real adjoint bug.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

from .autodiff import SgSession, Tape, Tensor, grad, no_grad
from .errors import UsageError


@dataclass
class FdReport:
    mode: str
    h: float
    n_coordinates: int
    max_rel_err: float
    max_abs_err: float
    worst_param: str
    per_param: Dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def fd_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    mode: str = "freeze_sg",
    rel_floor: float = 1e-2,
) -> FdReport:
    """Check the autodiff gradient of ``f(params)`` against central differences.

    ``f`` must be deterministic given the parameter values and must return a
    scalar Tensor. Parameters are perturbed in place and restored bitwise.
    """
    if h <= 0:
        raise UsageError("fd_check requires h > 0")
    if mode not in ("freeze_sg", "naive"):
        raise UsageError(f"unknown fd_check mode: {mode}")

    session = SgSession() if mode == "freeze_sg" else None

    # Base evaluation: record stop-gradient values (if freezing) and get the
    # analytic gradient from the same tape.
    with Tape():
        if session is not None:
            with session.record():
                loss = f(params)
        else:
            loss = f(params)
        analytic = grad(loss, params)

    def evaluate() -> float:
        with no_grad():
            if session is not None:
                with session.replay():
                    return float(f(params).data)
            return float(f(params).data)

    max_rel = 0.0
    max_abs = 0.0
    worst = ""
    per_param: Dict[str, float] = {}
    n_coords = 0

    for name, p in params.items():
        flat = p.data.reshape(-1)
        ad = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(ad[i] - fd)
            rel = err / max(abs(ad[i]), abs(fd), rel_floor)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
            max_abs = max(max_abs, err)
            param_worst = max(param_worst, rel)
            n_coords += 1
        per_param[name] = param_worst

    return FdReport(
        mode=mode,
        h=h,
        n_coordinates=n_coords,
        max_rel_err=max_rel,
        max_abs_err=max_abs,
        worst_param=worst,
        per_param=per_param,
    )
