"""Small dense Levenberg-Marquardt least-squares solver.

Used by the arm calibration and available for optional hand-eye polishing.
Deterministic: no randomness, fixed damping schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class NonFiniteResidualError(RuntimeError):
    def __init__(self, x):
        super().__init__(f"residual function returned non-finite values at iterate {x!r}")
        self.iterate = np.asarray(x)


@dataclass
class LMOptions:
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_iterations: int = 200
    gradient_tol: float = 1e-12   # inf-norm of J^T r
    step_tol: float = 1e-14       # 2-norm of accepted step
    fd_step: float = 1e-7         # forward-difference step (relative, floored)


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool
    reason: str

    def __iter__(self):  # allow x, cost = lm_minimize(...)
        return iter((self.x, self.cost))


def forward_difference_jacobian(residual_fn, x, r0=None, step=1e-7):
    x = np.asarray(x, dtype=float)
    if r0 is None:
        r0 = np.asarray(residual_fn(x), dtype=float)
    jac = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = step * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += h
        jac[:, j] = (np.asarray(residual_fn(xp), dtype=float) - r0) / h
    return jac


def lm_minimize(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    init: np.ndarray,
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    options: Optional[LMOptions] = None,
) -> LMResult:
    """Minimize 0.5 * ||residual_fn(x)||^2.

    jacobian: analytic Jacobian callable, or None for forward differences.
    Damping starts at lambda0, x10 on a rejected step, /10 on an accepted one.
    Stops on gradient inf-norm < 1e-12, step norm < 1e-14, or 200 iterations.
    """
    opts = options or LMOptions()
    x = np.asarray(init, dtype=float).copy()

    def check(r, at):
        if not np.all(np.isfinite(r)):
            raise NonFiniteResidualError(at)
        return r

    r = check(np.asarray(residual_fn(x), dtype=float), x)
    if r.size < x.size:
        raise ValueError(f"underdetermined problem: {r.size} residuals < {x.size} parameters")
    cost = 0.5 * float(r @ r)
    lam = opts.lambda0
    reason = "max iterations reached"
    converged = False
    it = 0

    for it in range(1, opts.max_iterations + 1):
        if jacobian is not None:
            jac = np.asarray(jacobian(x), dtype=float)
        else:
            jac = forward_difference_jacobian(residual_fn, x, r0=r, step=opts.fd_step)
        g = jac.T @ r
        if np.max(np.abs(g)) < opts.gradient_tol:
            converged, reason = True, "gradient tolerance"
            break
        jtj = jac.T @ jac

        accepted = False
        while not accepted:
            try:
                step = np.linalg.solve(jtj + lam * np.eye(x.size), -g)
            except np.linalg.LinAlgError:
                lam *= opts.lambda_up
                continue
            x_new = x + step
            r_new = check(np.asarray(residual_fn(x_new), dtype=float), x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if cost_new < cost:
                accepted = True
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / opts.lambda_down, 1e-300)
                if np.linalg.norm(step) < opts.step_tol:
                    converged, reason = True, "step tolerance"
            else:
                lam *= opts.lambda_up
                if lam > 1e150:
                    # damping exhausted: current x is a (numerical) local minimum
                    converged, reason = True, "damping saturated"
                    accepted = True
        if converged:
            break

    return LMResult(x=x, cost=cost, iterations=it, converged=converged, reason=reason)
