"""
Discrete dynamics on the space of Kahler metrics.

The time-tau Ricci iteration solves, at each step, the backward Euler
equation of the normalized Kahler-Ricci flow::

    omega_k = omega_{k-1} + tau mu omega_k - tau Ric omega_k

which in potentials is the Monge-Ampere step
``log U_k - log U_{k-1} = f_{k-1} + (1/tau - mu) eta_k + c``.
Increments are reported in the absolute normalization
``omega_{psi_k} = omega exp(f_omega + phi_k / tau - mu psi_k)`` where
``psi_k`` is the running sum of the increments ``phi_k``; this is the
normalization under which the maximum-principle bounds are stated.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator, cg

from kim.errors import BadInput, KimError, PositivityViolation, SolverFailure
from kim.functionals import (
    aubin_J,
    chen_tian_E1,
    ding_functional,
    k_energy,
    twisted_k_energy,
)
from kim.kahler_core import (
    MetricState,
    TwistedFieldSpec,
    base_metric,
    make_metric,
    require_anticanonical_sphere,
    ricci_forward,
    ricci_inverse_fano,
    twisted_field_potential,
)
from kim.ma_solver import SolverConfig, solve_step, solve_step_twisted
from kim.spectral_grid import BackgroundGeometry, Potential, dilation_pullback_potential

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "k", "tau", "sup_eta", "inf_eta", "sup_psi", "inf_psi", "E0", "E1", "F_mu",
    "I", "J", "min_ricci_ratio", "newton_iters", "residual",
)

# Below this increment energy J(omega_{k-1}, omega_k) the per-step energy
# drop is itself smaller than the resolution we ask of it.
TERMINAL_INCREMENT_ENERGY = 1e-14


class Verdict(str, enum.Enum):
    CONVERGED = "converged"
    MAX_STEPS = "max-steps"
    SOLVER_FAILURE = "solver-failure"
    POSITIVITY_FAILURE = "positivity-failure"


class PathKind(str, enum.Enum):
    RICCI_BACKWARD = "ricci-backward"
    AUBIN = "aubin"
    CALABI = "calabi"
    DEMAILLY_KOLLAR = "demailly-kollar"
    TIAN_ZHU = "tian-zhu"


@dataclass(frozen=True)
class IterationConfig:
    tau: float = 1.0
    steps: int = 40
    solver: SolverConfig = field(default_factory=SolverConfig)
    twist: TwistedFieldSpec | None = None
    nonstandard_branch: bool = False
    record_states: bool = False
    stop_tol: float = 1e-10

    def __post_init__(self) -> None:
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise BadInput("tau must be a positive finite number")
        if self.steps < 1:
            raise BadInput("steps must be >= 1")
        if not self.stop_tol > 0:
            raise BadInput("stop_tol must be positive")

    def check_branch(self, mu: float) -> None:
        if mu > 0 and self.tau > 1.0 / mu and not self.nonstandard_branch:
            raise BadInput(
                f"tau = {self.tau:g} exceeds 1/mu = {1.0 / mu:g}; set nonstandard_branch to run it"
            )


@dataclass(frozen=True)
class TraceRecord:
    k: int
    tau: float
    sup_eta: float
    inf_eta: float
    sup_psi: float
    inf_psi: float
    E0: float
    E1: float
    F_mu: float
    I: float
    J: float
    min_ricci_ratio: float
    newton_iters: int
    residual: float
    step_E0: float = 0.0  # E0(omega_{k-1}, omega_k)
    step_E1: float = 0.0
    step_F_mu: float = 0.0
    step_J: float = 0.0  # J(omega_{k-1}, omega_k)
    increment_sup: float = 0.0  # sup of the mean-zero increment
    best_effort: bool = False
    E0_twisted: float | None = None
    step_E0_twisted: float | None = None

    def row(self, twisted: bool = False) -> tuple:
        vals = tuple(getattr(self, c) for c in TRACE_COLUMNS)
        return vals + ((self.E0_twisted,) if twisted else ())


@dataclass
class IterationTrace:
    records: list[TraceRecord]
    start: MetricState
    final_state: MetricState
    verdict: Verdict
    tau: float
    twisted: bool = False
    states: list[MetricState] = field(default_factory=list)
    branch_flags: dict = field(default_factory=dict)
    message: str = ""
    error: KimError | None = None

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.verdict is Verdict.CONVERGED

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def rate_estimate(self) -> float | None:
        """Geometric rate of the increment sup norms over the last few resolvable steps."""
        inc = self.column("increment_sup")
        inc = inc[inc > 1e-12]
        if inc.size < 3:
            return None
        tail = inc[-min(6, inc.size):]
        return float(np.exp(np.mean(np.diff(np.log(tail)))))

    def monotonicity_report(self, name: str = "step_E0", slack: float = 1e-14) -> list[int]:
        """
        Steps at which the energy fails to drop by at least ``slack``.

        Steps in the terminal regime (increment energy below
        TERMINAL_INCREMENT_ENERGY) are exempt from the strict requirement but
        must still not increase beyond ``slack``.
        """
        bad = []
        for r in self.records:
            drop = -getattr(r, name)
            if r.step_J < TERMINAL_INCREMENT_ENERGY:
                if drop < -slack:
                    bad.append(r.k)
            elif drop < slack:
                bad.append(r.k)
        return bad


def _energy_row(
    k: int,
    tau: float,
    start: MetricState,
    prev: MetricState,
    cur: MetricState,
    phi: np.ndarray,
    psi: np.ndarray,
    iters: int,
    residual: float,
    last: TraceRecord | None,
    best_effort: bool,
    X: TwistedFieldSpec | None,
) -> TraceRecord:
    bg = cur.background
    mu = bg.mu
    dE0 = k_energy(prev, cur)
    dE1 = chen_tian_E1(prev, cur) if mu != 0 else float("nan")
    dF = ding_functional(prev, cur)
    J_start = aubin_J(start, cur)
    E0 = (last.E0 if last else 0.0) + dE0
    E1 = (last.E1 if last else 0.0) + dE1
    F = (last.F_mu if last else 0.0) + dF
    dE0x = E0x = None
    if X is not None:
        dE0x = twisted_k_energy(prev, cur, X)
        E0x = (last.E0_twisted if last else 0.0) + dE0x
    inc = cur.values - prev.values
    return TraceRecord(
        k=k,
        tau=tau,
        sup_eta=float(np.max(phi)),
        inf_eta=float(np.min(phi)),
        sup_psi=float(np.max(psi)),
        inf_psi=float(np.min(psi)),
        E0=E0,
        E1=E1,
        F_mu=F,
        I=2.0 * J_start,
        J=J_start,
        min_ricci_ratio=cur.ricci.min_ricci_ratio,
        newton_iters=iters,
        residual=residual,
        step_E0=dE0,
        step_E1=dE1,
        step_F_mu=dF,
        step_J=aubin_J(prev, cur),
        increment_sup=float(np.max(np.abs(inc))),
        best_effort=best_effort,
        E0_twisted=E0x,
        step_E0_twisted=dE0x,
    )


def ricci_iteration_run(start: MetricState, cfg: IterationConfig) -> IterationTrace:
    """
    Run the time-tau Ricci iteration from ``start``.

    Terminates when the mean-zero increment has sup norm at most
    ``cfg.stop_tol`` or after ``cfg.steps`` steps.  Solver failures end the run
    with a partial trace and the matching verdict.
    """
    return _iterate(start, cfg, None)


def twisted_iteration_run(start: MetricState, cfg: IterationConfig) -> IterationTrace:
    """Ricci iteration twisted by the dilation field ``cfg.twist``; records E0_twisted."""
    if cfg.twist is None:
        raise BadInput("twisted_iteration_run needs cfg.twist")
    if not start.background.is_sphere:
        raise BadInput("the twisted iteration is defined on the sphere background")
    return _iterate(start, cfg, cfg.twist)


def _iterate(start: MetricState, cfg: IterationConfig, X: TwistedFieldSpec | None) -> IterationTrace:
    bg = start.background
    mu = bg.mu
    cfg.check_branch(mu)
    a = 1.0 / cfg.tau - mu
    f_start = start.ricci.ricci_potential
    psi = np.zeros(bg.shape)
    prev = start
    records: list[TraceRecord] = []
    states = [start] if cfg.record_states else []
    flags = {
        "nonstandard_branch": bool(mu > 0 and cfg.tau > 1.0 / mu),
        "equation_type": equation_type(a),
        "a": a,
    }
    verdict = Verdict.MAX_STEPS
    message = ""
    error: KimError | None = None
    for k in range(1, cfg.steps + 1):
        g = prev.ricci.ricci_potential
        try:
            if X is not None and X.beta != 0:
                g = g - twisted_field_potential(prev, X)
                sol = solve_step_twisted(prev, a, g, X.beta, cfg.solver)
            else:
                sol = solve_step(prev, a, g, cfg.solver)
            cur = make_metric(bg.potential(prev.values + sol.increment.values), cfg.solver.positivity_guard)
        except PositivityViolation as exc:
            verdict, message, error = Verdict.POSITIVITY_FAILURE, str(exc), exc
            break
        except SolverFailure as exc:
            verdict, message, error = Verdict.SOLVER_FAILURE, str(exc), exc
            break
        eta = np.asarray(sol.increment.values)
        if a != 0 and X is None:
            # absolute normalization: phi_k / tau = log U_k - f_start + mu psi_k
            target = (np.log(cur.density / start.density) - f_start + mu * psi) / a
            phi = eta + bg.average(target - eta)
        else:
            phi = eta
        psi = psi + phi
        records.append(
            _energy_row(
                k, cfg.tau, start, prev, cur, phi, psi, sol.newton_iters, sol.final_residual,
                records[-1] if records else None, sol.best_effort, X,
            )
        )
        if cfg.record_states:
            states.append(cur)
        flags["best_effort"] = flags.get("best_effort", False) or sol.best_effort
        prev = cur
        if float(np.max(np.abs(eta))) <= cfg.stop_tol:
            verdict = Verdict.CONVERGED
            break
    return IterationTrace(
        records, start, prev, verdict, cfg.tau, X is not None, states, flags, message, error
    )


def equation_type(a: float) -> str:
    """Class of the per-step Monge-Ampere equation for the coefficient ``a``."""
    if a > 0:
        return "negative-type"
    if a == 0:
        return "calabi-yau-type"
    return "positive-type"


def energy_drop_identity(m: MetricState, cfg: SolverConfig | None = None) -> tuple[float, float]:
    """
    Both sides of the one-step identity at ``tau = mu = 1``::

        E0(omega, omega_1) = -(I - J)(omega, omega_1) + (1/V) int f_omega U_omega dm0

    The left side is the closed-form K-energy; the right side is assembled
    from the Dirichlet energy of the increment and the Ricci potential.
    """
    bg = m.background
    if bg.mu != 1:
        raise BadInput("the one-step identity is stated for mu = 1")
    sol = solve_step(m, 0.0, m.ricci.ricci_potential, cfg)
    nxt = make_metric(bg.potential(m.values + sol.increment.values))
    lhs = k_energy(m, nxt)
    rhs = -aubin_J(m, nxt) + bg.integrate(m.ricci.ricci_potential * m.density) / bg.volume
    return lhs, rhs


def flow_run(
    start: MetricState,
    h: float,
    T: float,
    cfg: SolverConfig | None = None,
    record_every: int = 1,
    scheme: str = "linearly-implicit",
) -> IterationTrace:
    """
    Integrate the normalized Kahler-Ricci flow ``d phi / dt = -f_phi``.

    The default scheme is linearly-implicit Euler::

        (I - h L0 / U_n + h mu) delta = -h f_n,   phi_{n+1} = phi_n + delta

    which is first order like explicit Euler but free of its ``h ~ 1/N^2``
    stability limit.  ``scheme="explicit"`` gives plain explicit Euler.
    Potentials are mean-normalized after each step.
    """
    cfg = cfg or SolverConfig()
    if not (h > 0 and T > 0 and np.isfinite(h) and np.isfinite(T)):
        raise BadInput("flow_run needs positive h and T")
    if scheme not in ("linearly-implicit", "explicit"):
        raise BadInput(f"unknown flow scheme {scheme!r}")
    bg = start.background
    n_steps = int(round(T / h))
    if abs(n_steps * h - T) > 1e-9 * T:
        raise BadInput("T must be an integer multiple of h")
    records: list[TraceRecord] = []
    cur = start
    verdict = Verdict.CONVERGED
    message, error = "", None
    last_row: TraceRecord | None = None
    prev_rec = start
    for n in range(1, n_steps + 1):
        f = cur.ricci.ricci_potential
        if scheme == "explicit":
            delta = -h * f
        else:
            delta = _implicit_increment(bg, cur.density, h, f, cfg)
        try:
            nxt = make_metric(bg.potential(cur.values + delta), cfg.positivity_guard)
        except PositivityViolation as exc:
            verdict, error = Verdict.POSITIVITY_FAILURE, exc
            message = f"flow step {n} left the Kahler cone; try a smaller h"
            break
        cur = nxt
        if n % record_every == 0 or n == n_steps:
            phi = cur.values - prev_rec.values
            last_row = _energy_row(
                n, h, start, prev_rec, cur, phi, cur.values, 0, 0.0, last_row, False, None
            )
            records.append(last_row)
            prev_rec = cur
    return IterationTrace(records, start, cur, verdict, h, False, [], {"scheme": scheme}, message, error)


def _implicit_increment(bg: BackgroundGeometry, U: np.ndarray, h: float, f: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    mu = bg.mu
    if bg.is_sphere:
        A = (1.0 + h * mu) * np.eye(bg.resolution) - h * bg.l0_matrix / U[:, None]
        return np.linalg.solve(A, -h * f)
    # U A = (1 + h mu) U - h L0 is symmetric positive definite for h mu > -1
    n = U.size
    eig = bg.eigenvalues

    def matvec(v):
        v = v.reshape(bg.shape)
        return ((1.0 + h * mu) * U * v - h * bg.apply_L0(v)).ravel()

    symbol = (1.0 + h * mu) * float(np.mean(U)) - h * eig

    def precond(v):
        return np.fft.ifft2(np.fft.fft2(v.reshape(bg.shape)) / symbol).real.ravel()

    sol, info = cg(
        LinearOperator((n, n), matvec=matvec, dtype=float),
        (-h * U * f).ravel(),
        rtol=cfg.linear_tol,
        atol=0.0,
        maxiter=10 * n,
        M=LinearOperator((n, n), matvec=precond, dtype=float),
    )
    if info != 0:
        raise SolverFailure(f"flow: CG failed to converge (info={info})")
    return sol.reshape(bg.shape)


def observed_order(errors: list[float]) -> float:
    """Mean of ``log2(e_i / e_{i+1})`` for errors at successively halved steps."""
    e = np.asarray(errors, dtype=float)
    if e.size < 2 or np.any(e <= 0):
        raise BadInput("need at least two positive errors")
    return float(np.mean(np.log2(e[:-1] / e[1:])))


def flow_richardson_order(start: MetricState, h: float, T: float, levels: int = 3) -> float:
    """Order from endpoint differences at ``h, h/2, h/4, ...``."""
    ends = [flow_run(start, h / 2**j, T, record_every=10**9).final_state.values for j in range(levels)]
    diffs = [float(np.max(np.abs(ends[j] - ends[j + 1]))) for j in range(levels - 1)]
    if len(diffs) < 2:
        raise BadInput("levels must be >= 3")
    return observed_order(diffs)


def flow_iteration_distance(start: MetricState, tau: float, t_final: float, refine: int = 100) -> float:
    """Sup distance between the iteration at step ``t_final / tau`` and the flow at ``t_final``."""
    k = int(round(t_final / tau))
    if k < 1 or abs(k * tau - t_final) > 1e-9:
        raise BadInput("t_final must be a positive multiple of tau")
    cfg = IterationConfig(tau=tau, steps=k, stop_tol=1e-300, nonstandard_branch=True)
    it = ricci_iteration_run(start, cfg)
    if it.steps != k:
        raise SolverFailure(f"iteration stopped after {it.steps} of {k} steps")
    fl = flow_run(start, tau / refine, t_final, record_every=10**9)
    return it.final_state.sup_distance(fl.final_state)


def continuity_path_solve(
    bg: BackgroundGeometry,
    kind: PathKind | str,
    parameter: float,
    base: MetricState | None = None,
    twist: TwistedFieldSpec | None = None,
    cfg: SolverConfig | None = None,
) -> MetricState:
    """
    Solve one member of a continuity path from the reference metric ``base``.

    ``ricci-backward`` (tau > 0): ``U = exp(f + (1/tau - mu) phi)``;
    ``aubin`` (s in [0, 1]): ``U = exp(f - s phi)``;
    ``calabi`` (t in [0, 1]): ``U = exp(t f + c)``;
    ``demailly-kollar`` (t in [0, 1]): ``U = exp(t f - t phi)``;
    ``tian-zhu`` (s in [0, 1], needs ``twist``): ``U = exp(f - psi^X_phi - s phi)``.
    """
    kind = PathKind(kind)
    base = base or base_metric(bg)
    if base.background is not bg:
        raise BadInput("base metric lives on a different background")
    f = base.ricci.ricci_potential
    p = float(parameter)
    if not np.isfinite(p):
        raise BadInput("path parameter must be finite")
    beta = 0.0
    if kind is PathKind.RICCI_BACKWARD:
        if p <= 0:
            raise BadInput("ricci-backward needs tau > 0")
        a, g = 1.0 / p - bg.mu, f
    else:
        if not 0.0 <= p <= 1.0:
            raise BadInput(f"{kind.value} parameter must lie in [0, 1]")
        if kind in (PathKind.AUBIN, PathKind.DEMAILLY_KOLLAR, PathKind.TIAN_ZHU) and bg.mu <= 0:
            raise BadInput(f"the {kind.value} path is defined for positive classes")
        if kind is PathKind.AUBIN:
            a, g = -p, f
        elif kind is PathKind.CALABI:
            a, g = 0.0, p * f
        elif kind is PathKind.DEMAILLY_KOLLAR:
            a, g = -p, p * f
        else:
            if twist is None:
                raise BadInput("the tian-zhu path needs a twist")
            if not bg.is_sphere:
                raise BadInput("the tian-zhu path is defined on the sphere background")
            beta = twist.beta
            a, g = -p, f - twisted_field_potential(base, twist)
    if beta:
        sol = solve_step_twisted(base, a, g, beta, cfg)
    else:
        sol = solve_step(base, a, g, cfg)
    return make_metric(bg.potential(base.values + sol.increment.values))


@dataclass
class ForwardOrbit:
    states: list[MetricState]
    index: int
    capped: bool
    E0: list[float]  # E0(start, state_j)
    e0_increasing: bool

    @property
    def index_label(self) -> str:
        return f">={self.index}" if self.capped else str(self.index)


def nadel_forward_run(start: MetricState, cap: int) -> ForwardOrbit:
    """
    Forward orbit ``omega, Ric omega, Ric Ric omega, ...`` while positivity holds.

    The Ricci index is the orbit length, capped at ``cap``.  For a non-round
    start E0 must increase strictly along the orbit; ``e0_increasing`` records
    whether it did (up to steps whose increment energy is below resolution).
    """
    require_anticanonical_sphere(start.background, "nadel_forward_run")
    if cap < 1:
        raise BadInput("cap must be >= 1")
    states = [start]
    E0 = [0.0]
    ok = True
    while len(states) < cap:
        psi, kahler = ricci_forward(states[-1])
        if not kahler:
            return ForwardOrbit(states, len(states), False, E0, ok)
        try:
            nxt = make_metric(psi)
        except PositivityViolation:
            return ForwardOrbit(states, len(states), False, E0, ok)
        step = k_energy(states[-1], nxt)
        if aubin_J(states[-1], nxt) >= TERMINAL_INCREMENT_ENERGY and not step > 0:
            ok = False
        E0.append(E0[-1] + step)
        states.append(nxt)
    return ForwardOrbit(states, cap, True, E0, ok)


def inverse_ricci_orbit(start: Potential, length: int) -> list[MetricState]:
    """``[Ric^-1 start, Ric^-2 start, ...]`` of the given length; ``start`` may be non-Kahler."""
    require_anticanonical_sphere(start.background, "inverse_ricci_orbit")
    if length < 1:
        raise BadInput("length must be >= 1")
    orbit = [ricci_inverse_fano(start)]
    while len(orbit) < length:
        orbit.append(ricci_inverse_fano(orbit[-1].potential))
    return orbit


def mobius_orbit_distance(m: MetricState, lam_bounds: tuple[float, float] = (1e-3, 1e3)) -> tuple[float, float]:
    """
    ``min_lambda sup |phi - phi_lambda|`` over the dilation family, and the minimizer.

    The round metric is ``lambda = 1``.  Used as the convergence verdict on
    the sphere without even symmetry, where the limit is only determined up
    to a Mobius transformation.
    """
    bg = m.background
    if not bg.is_sphere:
        raise BadInput("mobius_orbit_distance requires the sphere background")

    def dist(t: float) -> float:
        return m.potential.sup_distance(dilation_pullback_potential(bg, float(np.exp(t))))

    lo, hi = np.log(lam_bounds[0]), np.log(lam_bounds[1])
    grid = np.linspace(lo, hi, 61)
    vals = [dist(t) for t in grid]
    j = int(np.argmin(vals))
    res = minimize_scalar(
        dist, bounds=(grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]), method="bounded",
        options={"xatol": 1e-12},
    )
    best_t = res.x if res.fun < vals[j] else grid[j]
    return float(min(res.fun, vals[j])), float(np.exp(best_t))


def density_defect(m: MetricState) -> float:
    """``sup |U - 1|``: distance of the density from the background's."""
    return float(np.max(np.abs(m.density - 1.0)))


__all__ = [
    "IterationConfig",
    "IterationTrace",
    "TraceRecord",
    "Verdict",
    "PathKind",
    "ForwardOrbit",
    "TRACE_COLUMNS",
    "ricci_iteration_run",
    "twisted_iteration_run",
    "flow_run",
    "flow_richardson_order",
    "flow_iteration_distance",
    "continuity_path_solve",
    "nadel_forward_run",
    "inverse_ricci_orbit",
    "mobius_orbit_distance",
    "energy_drop_identity",
    "equation_type",
    "observed_order",
    "density_defect",
]
