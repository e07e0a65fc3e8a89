"""
Kahler metrics in a fixed class, their Ricci data, and the Ricci operators.

A metric is ``omega_phi = omega_0 + i ddbar phi`` for a potential ``phi`` on a
fixed background; in complex dimension one its density against the
background is ``U = 1 + L0 phi`` and it is Kahler iff ``U > 0``.  Operators at
an evolving metric are expressed through the background, e.g. the Laplacian
of ``omega_phi`` is ``L0 / U``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from kim.errors import BadInput, PositivityViolation
from kim.ma_solver import SolverConfig, poisson_solve, solve_step_twisted
from kim.spectral_grid import BackgroundGeometry, Potential

POSITIVITY_THRESHOLD = 1e-8


@dataclass(frozen=True, eq=False)
class MetricState:
    """A potential whose density ``1 + L0 phi`` is strictly positive."""

    potential: Potential
    density: np.ndarray
    min_density: float

    @property
    def background(self) -> BackgroundGeometry:
        return self.potential.background

    @property
    def values(self) -> np.ndarray:
        return self.potential.values

    @functools.cached_property
    def ricci(self) -> RicciData:
        return ricci_data(self)

    def sup_distance(self, other: MetricState) -> float:
        return self.potential.sup_distance(other.potential)


@dataclass(frozen=True, eq=False)
class RicciData:
    """
    Ricci form and Ricci potential of a metric, as ratios against omega_0.

    ``ricci_potential`` is normalized by ``(1/V) int e^f U dm0 = 1``.
    """

    ricci_ratio_vs_base: np.ndarray
    scalar_ratio: np.ndarray
    ricci_potential: np.ndarray
    min_ricci_ratio: float


@dataclass(frozen=True)
class TwistedFieldSpec:
    """Dilation field ``X = beta (1 - s^2) d/ds`` on the sphere."""

    beta: float = 0.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.beta):
            raise BadInput("twisting coefficient must be finite")


@dataclass(frozen=True)
class RicciIndex:
    value: int
    capped: bool

    def __str__(self) -> str:
        return f">={self.value}" if self.capped else str(self.value)


def make_metric(phi: Potential, guard: float = POSITIVITY_THRESHOLD) -> MetricState:
    bg = phi.background
    density = 1.0 + bg.apply_L0(phi.values)
    lo = float(np.min(density))
    if not lo > guard:
        raise PositivityViolation(f"density minimum {lo:.3e} is not above {guard:g}")
    density.setflags(write=False)
    return MetricState(phi, density, lo)


def is_kahler(phi: Potential, guard: float = POSITIVITY_THRESHOLD) -> bool:
    return float(np.min(1.0 + phi.background.apply_L0(phi.values))) > guard


def base_metric(bg: BackgroundGeometry) -> MetricState:
    return make_metric(bg.zero_potential())


def ricci_potential_unnormalized(bg: BackgroundGeometry, phi: np.ndarray, density: np.ndarray) -> np.ndarray:
    return bg.base_ricci_potential - np.log(density) - bg.mu * phi


def normalize_exponential(bg: BackgroundGeometry, f: np.ndarray, density: np.ndarray) -> np.ndarray:
    """Shift ``f`` so that ``(1/V) int e^f U dm0 = 1``."""
    shift = float(np.max(f))
    return f - shift - np.log(bg.integrate(np.exp(f - shift) * density) / bg.volume)


def ricci_data(m: MetricState) -> RicciData:
    bg = m.background
    U = m.density
    ratio = bg.mu + bg.apply_L0(bg.base_ricci_potential) - bg.apply_L0(np.log(U))
    f = normalize_exponential(bg, ricci_potential_unnormalized(bg, m.values, U), U)
    return RicciData(ratio, ratio / U, f, float(np.min(ratio)))


def harmonic_project(m: MetricState) -> np.ndarray:
    """
    Harmonic part of ``Ric omega_phi`` as a ratio against ``omega_phi``.

    On a surface the harmonic representative of a class is a constant
    multiple of the area form; for ``c_1`` the constant is ``mu``.
    """
    return np.full(m.background.shape, m.background.mu)


def is_ricci_harmonic(m: MetricState, tol: float = 1e-9) -> bool:
    """Whether ``Ric omega`` equals its harmonic projection, i.e. constant curvature."""
    return bool(np.max(np.abs(m.ricci.scalar_ratio - harmonic_project(m))) <= tol)


def require_anticanonical_sphere(bg: BackgroundGeometry, what: str) -> None:
    if not bg.is_sphere or abs(bg.volume - 2.0) > 1e-12:
        raise BadInput(f"{what} requires the sphere background with V = 2")


def ricci_forward(m: MetricState) -> tuple[Potential, bool]:
    """
    Potential of ``Ric omega_phi`` in ``c_1`` and whether it is Kahler.

    Returns ``(psi, kahler)`` with ``L0 psi = r - mu`` where ``r`` is the
    Ricci ratio.  When ``kahler`` is true, ``make_metric(psi)`` represents
    ``Ric omega_phi``.
    """
    bg = m.background
    require_anticanonical_sphere(bg, "ricci_forward")
    r = m.ricci.ricci_ratio_vs_base
    psi = bg.potential(poisson_solve(bg, r - bg.mu))
    return psi, bool(m.ricci.min_ricci_ratio > POSITIVITY_THRESHOLD)


def ricci_forward_rescaled(m: MetricState) -> tuple[Potential, bool]:
    """
    Potential of ``Ric omega_phi / mu`` in the class of ``omega_0``.

    For ``V != 2`` the Ricci form itself lies in a different class; this
    rescales it back, so it is a convenience operator and not the
    forward Ricci map.  Agrees with ``ricci_forward`` when ``V = 2``.
    """
    bg = m.background
    if not bg.is_sphere or bg.mu <= 0:
        raise BadInput("ricci_forward_rescaled: needs a sphere background")
    r = m.ricci.ricci_ratio_vs_base
    psi = bg.potential(poisson_solve(bg, r / bg.mu - 1.0))
    return psi, bool(m.ricci.min_ricci_ratio > POSITIVITY_THRESHOLD)


def ricci_inverse_fano(psi: Potential) -> MetricState:
    """
    The Kahler metric whose Ricci form is ``omega_psi``.

    ``psi`` need not be Kahler.  The density is ``exp(f0 - psi + c)``, so the
    result is always positive.
    """
    bg = psi.background
    require_anticanonical_sphere(bg, "ricci_inverse_fano")
    return _metric_with_log_density(bg, bg.base_ricci_potential - psi.values)


def ricci_inverse_general(m: MetricState) -> MetricState:
    """
    The metric ``omega_out`` in the class with ``Ric omega_out = mu * omega_in``.

    This is the time-one Euler step of the flow driven by the harmonic part of
    the Ricci form; on a flat torus it always returns the flat metric.
    """
    bg = m.background
    return _metric_with_log_density(bg, bg.base_ricci_potential - bg.mu * m.values)


def _metric_with_log_density(bg: BackgroundGeometry, log_density: np.ndarray) -> MetricState:
    density = np.exp(normalize_exponential(bg, log_density, np.ones(bg.shape)))
    phi = poisson_solve(bg, density - 1.0)
    return make_metric(bg.potential(phi))


def _require_sphere(bg: BackgroundGeometry, what: str) -> None:
    if not bg.is_sphere:
        raise BadInput(f"{what} requires the sphere background")


def base_twist_potential(bg: BackgroundGeometry, X: TwistedFieldSpec) -> np.ndarray:
    """Unnormalized potential of ``L_X omega_0``: ``L0 (beta V s) = -2 beta s``."""
    return X.beta * bg.volume * bg.nodes


def twisted_field_potential(m: MetricState, X: TwistedFieldSpec) -> np.ndarray:
    """
    ``psi^X`` at ``omega_phi``: ``beta V s + beta (1 - s^2) phi' + c``.

    ``c`` enforces ``(1/V) int e^{psi^X} U dm0 = 1``.
    """
    bg = m.background
    _require_sphere(bg, "twisted_field_potential")
    raw = base_twist_potential(bg, X) + X.beta * bg.drift(m.values)
    return normalize_exponential(bg, raw, m.density)


def twisted_ricci(m: MetricState, X: TwistedFieldSpec) -> np.ndarray:
    """Ratio of ``Ric omega - i ddbar psi^X`` against omega_0."""
    bg = m.background
    _require_sphere(bg, "twisted_ricci")
    if X.beta == 0:
        return m.ricci.ricci_ratio_vs_base
    return m.ricci.ricci_ratio_vs_base - bg.apply_L0(twisted_field_potential(m, X))


def twisted_ricci_inverse(
    target: MetricState, X: TwistedFieldSpec, cfg: SolverConfig | None = None
) -> MetricState:
    """
    Metric ``omega_phi`` with ``Ric omega_phi - i ddbar psi^X = omega_target``.

    Solved as one twisted step from the background::

        log U_phi = f0 - psi_target - psi^X_0 - X phi + c
    """
    bg = target.background
    require_anticanonical_sphere(bg, "twisted_ricci_inverse")
    if X.beta == 0:
        return ricci_inverse_fano(target.potential)
    g = bg.base_ricci_potential - target.values - base_twist_potential(bg, X)
    sol = solve_step_twisted(base_metric(bg), 0.0, g, X.beta, cfg)
    return make_metric(sol.increment)


def twisted_inverse_residual(phi: MetricState, target: MetricState, X: TwistedFieldSpec) -> float:
    """
    Sup-norm defect of ``log U_phi - f0 + psi_target + psi^X_0 + X phi = c``.

    The constant ``c`` is the one minimizing the sup norm.
    """
    bg = phi.background
    G = (
        np.log(phi.density)
        - bg.base_ricci_potential
        + target.values
        + base_twist_potential(bg, X)
        + X.beta * bg.drift(phi.values)
    )
    return float(0.5 * (np.max(G) - np.min(G)))


def ricci_index(m: MetricState, cap: int) -> RicciIndex:
    """
    Depth of ``m`` in the nested structure ``H(1) > H(2) > ...``.

    ``H(1)`` is the Kahler cone, ``H(2)`` the metrics of positive Ricci
    curvature, and so on: the index counts how often the forward Ricci operator
    can be applied while staying Kahler.  Stops at ``cap``.
    """
    require_anticanonical_sphere(m.background, "ricci_index")
    if cap < 1:
        raise BadInput("cap must be >= 1")
    index, current = 1, m
    while index < cap:
        psi, kahler = ricci_forward(current)
        if not kahler:
            return RicciIndex(index, False)
        current = make_metric(psi)
        index += 1
    return RicciIndex(cap, True)
