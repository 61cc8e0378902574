"""Newton's method with backtracking line search over the three-field system.

The linear solver is a sparse direct LU (SuperLU). For pure-Dirichlet
velocity problems the pressure is defined up to constants; the Jacobian solve
borders the condensed system by the pressure-mean constraint and the mean is
additionally subtracted after every update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import LinearSolveError


@dataclass
class NewtonOptions:
    atol: float = 1e-10
    rtol: float = 1e-9
    max_iter: int = 30
    ls_factor: float = 0.5
    ls_max: int = 8
    nullspace: bool = False


@dataclass
class NewtonHistory:
    residuals: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.steps)


class NewtonError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def linear_solve(matrix, rhs):
    """Direct sparse solve with a residual sanity check."""
    rhs = np.asarray(rhs, dtype=float)
    if hasattr(matrix, "solve") and not sp.issparse(matrix):
        return matrix.solve(rhs)
    mat = sp.csc_matrix(matrix)
    try:
        x = spla.splu(mat).solve(rhs)
    except RuntimeError as exc:
        raise LinearSolveError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("non-finite solution")
    scale = spla.norm(mat) * np.linalg.norm(x) + np.linalg.norm(rhs)
    if np.linalg.norm(mat @ x - rhs) > 1e-9 * max(scale, 1e-300):
        raise LinearSolveError("direct solve failed the residual check")
    return x


def orthogonalize_pressure_nullspace(x, problem):
    """Shift the pressure block of x to zero mean (int p = 0)."""
    x = x.copy()
    w = problem.pressure_weights
    sl = slice(problem.nS + problem.nU, problem.dim)
    x[sl] -= (w @ x[sl]) / problem.domain_area
    return x


def newton_solve(problem, x0, options=None, u_prev=None):
    """Solve problem.residual(x, u_prev) = 0 by Newton with backtracking.

    `problem` provides residual(x, u_prev) and jacobian(x) (whose result has
    a .solve method). Returns (x, NewtonHistory). Raises NewtonError when the
    iteration budget is exhausted.
    """
    if options is None:
        options = NewtonOptions()
    x = problem.apply_bcs(np.asarray(x0, dtype=float))
    if options.nullspace:
        x = orthogonalize_pressure_nullspace(x, problem)
    history = NewtonHistory()

    res = problem.residual(x, u_prev)
    rnorm = float(np.linalg.norm(res))
    history.residuals.append(rnorm)
    r0 = rnorm

    for _ in range(options.max_iter):
        if rnorm <= options.atol or rnorm <= options.rtol * r0:
            return x, history
        jac = problem.jacobian(x)
        dx = jac.solve(-res)

        alpha = 1.0
        for _ in range(options.ls_max + 1):
            x_try = x + alpha * dx
            res_try = problem.residual(x_try, u_prev)
            rnorm_try = float(np.linalg.norm(res_try))
            if np.isfinite(rnorm_try) and rnorm_try < rnorm:
                break
            alpha *= options.ls_factor
        else:
            raise NewtonError("line search failed to reduce the residual",
                              history)
        x, res, rnorm = x_try, res_try, rnorm_try
        if options.nullspace:
            x = orthogonalize_pressure_nullspace(x, problem)
        history.residuals.append(rnorm)
        history.steps.append(alpha)

    if rnorm <= options.atol or rnorm <= options.rtol * r0:
        return x, history
    raise NewtonError(
        f"Newton did not converge in {options.max_iter} iterations "
        f"(|R| = {rnorm:.3e})", history)


@dataclass
class ContinuationSchedule:
    """Ordered (name, value) stages applied to a problem builder."""
    stages: list

    def __post_init__(self):
        if not self.stages:
            raise ValueError("continuation schedule must be non-empty")


def continuation_solve(schedule, builder, x0, options=None):
    """Solve a sequence of problems, warm-starting each from the previous.

    `builder(name, value)` returns the problem for one stage. Returns
    (x, histories). Nonconvergence is re-raised with the failing stage named.
    """
    x = np.asarray(x0, dtype=float)
    histories = []
    for name, value in schedule.stages:
        problem = builder(name, value)
        try:
            x, hist = newton_solve(problem, x, options)
        except NewtonError as exc:
            raise NewtonError(
                f"continuation failed at stage {name}={value}: {exc}",
                exc.history) from exc
        histories.append((name, value, hist))
    return x, histories
