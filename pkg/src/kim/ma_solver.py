"""
Elliptic engines: Poisson inversion of L0 and the per-step Monge-Ampere solve.

Every discrete step of the dynamics reduces to one scalar equation for an
increment ``eta`` relative to a previous density ``U``::

    log(U + L0 eta) - log U = g + a * eta - beta * X eta + c

where ``X = (1 - s^2) d/ds`` is the dilation field (sphere only) and ``c`` is
a normalizing constant.  ``a = 0`` is solved in closed form followed by one
Poisson solve; otherwise a damped Newton iteration is used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from kim.errors import BadInput, PositivityViolation, SolverFailure
from kim.spectral_grid import BackgroundGeometry, Potential

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    residual_tol: float = 1e-11
    max_newton: int = 50
    min_damping: float = 2.0**-30
    positivity_guard: float = 1e-8
    linear_tol: float = 1e-13

    def __post_init__(self) -> None:
        for name in ("residual_tol", "max_newton", "min_damping", "positivity_guard", "linear_tol"):
            if not getattr(self, name) > 0:
                raise BadInput(f"solver setting {name} must be positive")
        if self.residual_tol >= 1:
            raise BadInput("residual_tol must be < 1")


@dataclass(frozen=True, eq=False)
class StepSolution:
    """
    Result of one Monge-Ampere step.

    ``increment`` is mean-zero; ``normalization_constant`` is the ``c`` that
    makes the equation hold with that mean-zero increment.  For ``a != 0`` the
    un-normalized increment ``increment + c / a`` solves the equation with
    ``c = 0``; this is exposed as ``raw_increment``.
    """

    increment: Potential
    normalization_constant: float
    newton_iters: int
    final_residual: float
    a: float = 0.0
    residual_history: tuple[float, ...] = ()
    best_effort: bool = False
    density: np.ndarray = field(default=None, repr=False)

    @property
    def raw_increment(self) -> np.ndarray:
        if self.a == 0:
            return np.asarray(self.increment.values)
        return self.increment.values + self.normalization_constant / self.a


def poisson_solve(bg: BackgroundGeometry, g: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """
    Mean-zero ``u`` with ``L0 u = g - mean(g)``.

    Raises BadInput when ``g`` is visibly not mean-zero, i.e. when
    ``|int g| > tol * V * max(1, sup|g|)``.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise BadInput("poisson_solve: non-finite data")
    defect = bg.integrate(g)
    if abs(defect) > tol * bg.volume * max(1.0, float(np.max(np.abs(g)))):
        raise BadInput(f"poisson_solve: data has nonzero mean (integral {defect:.3e})")
    return bg.inverse_L0(g)


def step_residual(
    bg: BackgroundGeometry,
    prev_density: np.ndarray,
    eta: np.ndarray,
    a: float,
    g: np.ndarray,
    beta: float = 0.0,
    c: float = 0.0,
) -> np.ndarray:
    """Pointwise residual of the step equation; nan where the density is not positive."""
    U = prev_density + bg.apply_L0(eta)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(U) - np.log(prev_density) - g - a * eta - c
    if beta:
        out = out + beta * bg.drift(eta)
    return np.where(U > 0, out, np.nan)


def step_jacobian(
    bg: BackgroundGeometry, density: np.ndarray, a: float, beta: float = 0.0
) -> np.ndarray:
    """Dense linearization ``v -> L0 v / U - a v + beta X v`` (sphere)."""
    J = bg.l0_matrix / density[:, None] - a * np.eye(bg.resolution)
    if beta:
        J = J + beta * bg.drift_matrix
    return J


def _sup(r: np.ndarray) -> float:
    if np.any(np.isnan(r)):
        return np.inf
    return float(np.max(np.abs(r)))


def solve_step(prev, a: float, g: np.ndarray, cfg: SolverConfig | None = None) -> StepSolution:
    """
    Solve ``log(U_prev + L0 eta) - log U_prev = g + a eta + c``.

    ``prev`` is a MetricState.  ``a = 0`` is solved exactly: the new density is
    ``U_prev exp(g + c)`` and ``eta`` comes from one Poisson solve.  ``a > 0``
    uses damped Newton (dense direct solves on the sphere, preconditioned CG on
    the torus grids).  ``a < 0`` is best-effort: Newton warm-started from the
    ``a = 0`` solution with a continuation ladder in ``a``; the returned branch
    is the continuation branch.
    """
    return solve_step_twisted(prev, a, g, 0.0, cfg)


def solve_step_twisted(
    prev, a: float, g: np.ndarray, beta: float, cfg: SolverConfig | None = None
) -> StepSolution:
    """
    Solve ``log(U_prev + L0 eta) - log U_prev = g + a eta - beta X eta + c``.

    ``beta`` is the coefficient of the dilation field; ``beta = 0`` is the
    untwisted step.  The drift makes the linearization non-self-adjoint, so
    linear systems are solved by dense factorization.
    """
    cfg = cfg or SolverConfig()
    bg: BackgroundGeometry = prev.background
    g = np.asarray(g, dtype=float).reshape(bg.shape)
    U = np.asarray(prev.density)
    if beta and not bg.is_sphere:
        raise BadInput("twisted steps require the sphere background")
    if not np.all(np.isfinite(g)):
        raise BadInput("solve_step: non-finite data")
    scale = max(1.0, float(np.max(np.abs(g))))
    tol = cfg.residual_tol * scale

    if a == 0 and beta == 0:
        return _solve_exact(bg, U, g, cfg, tol)
    if not bg.is_sphere:
        if a < 0:
            raise BadInput("a < 0 is only supported on the sphere background")
        return _newton_torus(bg, U, g, a, cfg, tol)

    best_effort = a < 0
    if best_effort:
        log.debug("solve_step: a = %g < 0; returning the continuation branch", a)
    try:
        return _newton_sphere(bg, U, g, a, beta, cfg, tol, None, best_effort)
    except SolverFailure:
        if a >= 0 and beta == 0:
            raise
    # continuation ladder: a < 0 starts from the a = 0 solve, the drift from zero
    if a < 0:
        start = _solve_exact(bg, U, g, cfg, tol)
        warm = (np.array(start.increment.values), start.normalization_constant)
    else:
        warm = None
    rungs = 16
    for j in range(1, rungs + 1):
        frac = j / rungs
        sol = _newton_sphere(
            bg, U, g, a * frac if a < 0 else a, beta * frac, cfg, tol, warm, best_effort
        )
        warm = (np.array(sol.increment.values), sol.normalization_constant)
    return sol


def _solve_exact(bg, U, g, cfg: SolverConfig, tol: float) -> StepSolution:
    shift = float(np.max(g))
    c = -np.log(bg.integrate(np.exp(g - shift) * U) / bg.volume) - shift
    U_new = U * np.exp(g + c)
    eta = poisson_solve(bg, U_new - U)
    res = _sup(step_residual(bg, U, eta, 0.0, g, 0.0, c))
    if not res <= max(tol, 1e3 * cfg.residual_tol):
        raise SolverFailure(f"exact step residual {res:.3e} exceeds tolerance")
    return StepSolution(bg.potential(eta), float(c), 0, res, 0.0, (res,), density=U_new)


def _newton_sphere(bg, U, g, a, beta, cfg, tol, warm, best_effort) -> StepSolution:
    N = bg.resolution
    w = bg.weights
    eta = np.zeros(N) if warm is None or warm[0] is None else warm[0].copy()
    c = 0.0 if warm is None else warm[1]
    if warm is None and a == 0:
        # bordered system needs a reasonable constant; use the exact normalization
        shift = float(np.max(g))
        c = -np.log(bg.integrate(np.exp(g - shift) * U) / bg.volume) - shift
    res = step_residual(bg, U, eta, a, g, beta, c)
    history = [_sup(res)]
    bordered = np.zeros((N + 1, N + 1))
    bordered[:N, N] = -1.0
    bordered[N, :N] = w
    for it in range(1, cfg.max_newton + 1):
        if history[-1] <= tol:
            return _finish(bg, U, eta, c, a, it - 1, history, best_effort)
        dens = U + bg.apply_L0(eta)
        bordered[:N, :N] = step_jacobian(bg, dens, a, beta)
        rhs = np.concatenate([-res, [0.0]])
        try:
            delta = np.linalg.solve(bordered, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverFailure(f"singular Newton system: {exc}") from None
        d_eta, d_c = bg.project(delta[:N]), delta[N]
        eta, c, res = _damped_update(bg, U, eta, c, d_eta, d_c, a, g, beta, cfg, history)
    if history[-1] <= tol:
        return _finish(bg, U, eta, c, a, cfg.max_newton, history, best_effort)
    raise SolverFailure(
        f"Newton did not converge in {cfg.max_newton} iterations (residual {history[-1]:.3e})"
    )


def _damped_update(bg, U, eta, c, d_eta, d_c, a, g, beta, cfg, history):
    t = 1.0
    current = history[-1]
    while t >= cfg.min_damping:
        trial = eta + t * d_eta
        dens = U + bg.apply_L0(trial)
        if np.min(dens) >= cfg.positivity_guard:
            res = step_residual(bg, U, trial, a, g, beta, c + t * d_c)
            r = _sup(res)
            if r <= current or (t == 1.0 and r <= 1e-3 * cfg.residual_tol):
                history.append(r)
                return trial, c + t * d_c, res
        t *= 0.5
    if np.min(U + bg.apply_L0(eta + cfg.min_damping * d_eta)) < cfg.positivity_guard:
        raise PositivityViolation("Newton step crosses the positivity guard at minimal damping")
    raise SolverFailure(f"damping floor reached (residual {current:.3e})")


def _finish(bg, U, eta, c, a, iters, history, best_effort) -> StepSolution:
    mean = bg.average(eta)
    # moving the mean of eta into c keeps the equation exact
    c = c + a * mean
    eta = eta - mean
    return StepSolution(
        bg.potential(eta),
        float(c),
        iters,
        history[-1],
        a,
        tuple(history),
        best_effort,
        density=U + bg.apply_L0(eta),
    )


def _newton_torus(bg, U, g, a, cfg, tol) -> StepSolution:
    """Raw-increment Newton (c = 0) with CG in the density-weighted inner product."""
    eta = np.zeros(bg.shape)
    res = step_residual(bg, U, eta, a, g)
    history = [_sup(res)]
    eig = bg.eigenvalues
    n = eta.size
    for it in range(1, cfg.max_newton + 1):
        if history[-1] <= tol:
            return _finish_raw(bg, U, eta, a, it - 1, history)
        dens = U + bg.apply_L0(eta)
        # -(U J) v = -L0 v + a U v is symmetric positive definite
        def matvec(v, dens=dens):
            v = v.reshape(bg.shape)
            return (-bg.apply_L0(v) + a * dens * v).ravel()

        precond_symbol = -eig + a * float(np.mean(dens))

        def precond(v):
            return np.fft.ifft2(np.fft.fft2(v.reshape(bg.shape)) / precond_symbol).real.ravel()

        A = LinearOperator((n, n), matvec=matvec, dtype=float)
        M = LinearOperator((n, n), matvec=precond, dtype=float)
        d_eta, info = cg(A, (dens * res).ravel(), rtol=cfg.linear_tol, atol=0.0, maxiter=10 * n, M=M)
        if info != 0:
            raise SolverFailure(f"CG failed to converge (info={info})")
        eta, _, res = _damped_update(bg, U, eta, 0.0, d_eta.reshape(bg.shape), 0.0, a, g, 0.0, cfg, history)
    if history[-1] <= tol:
        return _finish_raw(bg, U, eta, a, cfg.max_newton, history)
    raise SolverFailure(
        f"Newton did not converge in {cfg.max_newton} iterations (residual {history[-1]:.3e})"
    )


def _finish_raw(bg, U, eta, a, iters, history) -> StepSolution:
    return _finish(bg, U, eta, 0.0, a, iters, history, False)
