"""
Energy functionals on pairs of metrics in complex dimension one.

All functionals take a pair ``(alpha, beta)`` of metrics (MetricState) or
potentials (Potential) on a shared background and depend on the relative
potential ``chi = phi_beta - phi_alpha``.  In dimension one the Aubin
functionals collapse to Dirichlet energies::

    I = D(chi, chi) / V,   J = I / 2,   I_0 = 0,   I_1 = J

with ``D(u, v) = -int u L0 v dm0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from kim.errors import BadInput
from kim.kahler_core import (
    MetricState,
    TwistedFieldSpec,
    make_metric,
    require_anticanonical_sphere,
    ricci_inverse_fano,
    twisted_field_potential,
)
from kim.spectral_grid import BackgroundGeometry, Potential, dirichlet_pairing

Metricish = Union[MetricState, Potential]


@dataclass(frozen=True)
class AubinReport:
    I: float
    J: float
    I0: float
    I1: float
    I_cross: float  # I from the Dirichlet form, for cross-checking

    @property
    def IminusJ(self) -> float:
        return self.I - self.J


@dataclass(frozen=True)
class FunctionalReport:
    I: float
    J: float
    I0: float
    I1: float
    IminusJ: float
    E0: float
    E1: float | None
    F_mu: float
    E0_twisted: float | None = None
    E_kl: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MTOAudit:
    lhs: float
    rhs: float
    margin: float


@dataclass(frozen=True)
class ImprovedMTOAudit:
    margin: float
    j_terms: tuple[float, ...]
    strengthened_margin: float


def _potential(x: Metricish) -> Potential:
    return x.potential if isinstance(x, MetricState) else x


def _metric(x: Metricish) -> MetricState:
    return x if isinstance(x, MetricState) else make_metric(x)


def _density(x: Metricish) -> np.ndarray:
    """``1 + L0 phi``, without requiring positivity."""
    if isinstance(x, MetricState):
        return x.density
    return 1.0 + x.background.apply_L0(x.values)


def _pair(alpha: Metricish, beta: Metricish) -> tuple[BackgroundGeometry, np.ndarray]:
    pa, pb = _potential(alpha), _potential(beta)
    if pa.background is not pb.background:
        raise BadInput("functionals need both metrics on the same background")
    return pa.background, pb.values - pa.values


def aubin_report(alpha: Metricish, beta: Metricish) -> AubinReport:
    """
    Aubin's functionals, each from its own defining formula at n = 1.

    ``I`` and ``I1`` use the integral form ``int chi (U_alpha - U_beta)``,
    ``J`` the gradient form ``D(chi, chi) / 2V``; ``I0`` is identically zero.
    The identities ``I = 2J`` and ``I1 = J`` therefore test the discrete
    integration by parts.
    """
    bg, chi = _pair(alpha, beta)
    V = bg.volume
    integral = bg.integrate(chi * (_density(alpha) - _density(beta))) / V
    dirichlet = dirichlet_pairing(bg, chi, chi) / V
    return AubinReport(integral, dirichlet / 2.0, 0.0, integral / 2.0, dirichlet)


def aubin_J(alpha: Metricish, beta: Metricish) -> float:
    bg, chi = _pair(alpha, beta)
    return dirichlet_pairing(bg, chi, chi) / (2.0 * bg.volume)


def k_energy(alpha: Metricish, beta: Metricish) -> float:
    """Mabuchi K-energy ``E0(alpha, beta)`` in closed form."""
    a, b = _metric(alpha), _metric(beta)
    bg, chi = _pair(a, b)
    V = bg.volume
    Ua, Ub = a.density, b.density
    entropy = bg.integrate(np.log(Ub / Ua) * Ub) / V
    i_minus_j = dirichlet_pairing(bg, chi, chi) / (2.0 * V)
    drift = bg.integrate(a.ricci.ricci_potential * (Ua - Ub)) / V
    return entropy - bg.mu * i_minus_j + drift


def chen_tian_E1(alpha: Metricish, beta: Metricish) -> float:
    """
    ``E1`` through its relation with the K-energy::

        mu^2 E1 = mu E0 + J(beta, mu Ric beta) - J(alpha, mu Ric alpha)

    where the potential of ``mu Ric`` relative to ``mu omega`` is ``mu f``.
    """
    a, b = _metric(alpha), _metric(beta)
    bg = a.background
    mu = bg.mu
    if mu == 0:
        raise BadInput("E1 is defined through the K-energy only for mu != 0")

    def j_term(m: MetricState) -> float:
        f = m.ricci.ricci_potential
        return mu**2 * dirichlet_pairing(bg, f, f) / (2.0 * bg.volume)

    return (mu * k_energy(a, b) + j_term(b) - j_term(a)) / mu**2


def ding_functional(alpha: Metricish, beta: Metricish) -> float:
    """Ding functional ``F_mu``; ``beta`` may be any potential, not only Kahler ones."""
    a = _metric(alpha)
    bg, chi = _pair(a, beta)
    V = bg.volume
    mu = bg.mu
    f = a.ricci.ricci_potential
    Ua = a.density
    linear = -bg.integrate(chi * (Ua + _density(beta))) / (2.0 * V)
    if mu == 0:
        return linear + bg.integrate(chi * np.exp(f) * Ua) / V
    expo = f - mu * chi
    shift = float(np.max(expo))
    log_mean = np.log(bg.integrate(np.exp(expo - shift) * Ua) / V) + shift
    return linear - log_mean / mu


def pullback_functional(alpha: Metricish, beta: Metricish, k: int, l: int) -> float:
    """``E_{k,l}(alpha, beta) = E_k(Ric^-l alpha, Ric^-l beta)`` on the V = 2 sphere."""
    if k not in (0, 1):
        raise BadInput("only k in {0, 1} exists in dimension one")
    if l < 0:
        raise BadInput("l must be >= 0")
    require_anticanonical_sphere(_potential(alpha).background, "pullback_functional")
    a, b = alpha, beta
    for _ in range(l):
        a = ricci_inverse_fano(_potential(a))
        b = ricci_inverse_fano(_potential(b))
    return k_energy(a, b) if k == 0 else chen_tian_E1(a, b)


PathFn = Callable[[float], tuple[float, float]]


def linear_path(t: float) -> tuple[float, float]:
    return t, 1.0


def quadratic_path(t: float) -> tuple[float, float]:
    return t * t, 2.0 * t


def twisted_k_energy(
    alpha: Metricish,
    beta: Metricish,
    X: TwistedFieldSpec,
    t_nodes: int = 16,
    path: PathFn = linear_path,
    bend: np.ndarray | None = None,
) -> float:
    """
    Twisted K-energy as a path integral along ``phi_t = phi_alpha + p(t) chi``.

    The integrand is ``(1/V) <phi_dot, L^X (psi^X - f)>`` in the
    ``e^{psi^X} U_t`` weighted inner product, with ``L^X v = L0 v / U + X v``.
    ``path`` returns ``(p(t), p'(t))``.  An optional ``bend`` adds
    ``t (1 - t) bend`` to the path, which tests path independence on a
    genuinely different curve.
    """
    a = _metric(alpha)
    bg, chi = _pair(a, beta)
    if not bg.is_sphere:
        raise BadInput("the twisted K-energy is defined on the sphere background")
    if t_nodes < 1:
        raise BadInput("t_nodes must be >= 1")
    nodes, weights = np.polynomial.legendre.leggauss(t_nodes)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    total = 0.0
    for t, w in zip(nodes, weights):
        p, dp = path(t)
        phi = a.values + p * chi
        dphi = dp * chi
        if bend is not None:
            phi = phi + t * (1.0 - t) * bend
            dphi = dphi + (1.0 - 2.0 * t) * bend
        m = make_metric(Potential(bg, phi))
        psi = twisted_field_potential(m, X)
        v = psi - m.ricci.ricci_potential
        Lv = bg.apply_L0(v) + X.beta * m.density * bg.drift(v)
        total += w * bg.integrate(dphi * Lv * np.exp(psi))
    return total / bg.volume


def mto_audit(bg: BackgroundGeometry, phi: Potential) -> MTOAudit:
    """
    Moser-Trudinger-Onofri margin on the V = 2 round sphere.

    ``lhs = (1/V) int exp(-phi + mean phi)``, ``rhs = exp(J(omega_0, omega_phi))``
    and ``margin = log rhs - log lhs``, which is ``F_1(omega_0, omega_phi)``.
    ``phi`` need not be Kahler.
    """
    require_anticanonical_sphere(bg, "mto_audit")
    values = phi.values - bg.average(phi.values)
    J = dirichlet_pairing(bg, values, values) / (2.0 * bg.volume)
    shift = float(np.max(-values))
    log_lhs = np.log(bg.integrate(np.exp(-values - shift)) / bg.volume) + shift
    return MTOAudit(float(np.exp(log_lhs)), float(np.exp(J)), float(J - log_lhs))


def improved_mto_audit(bg: BackgroundGeometry, phi: Potential, terms: int) -> ImprovedMTOAudit:
    """
    Strengthened MTO margin along the inverse-Ricci orbit of ``omega_phi``.

    ``j_terms[j-1] = J(Ric^-j omega_phi, Ric^-(j-1) omega_phi)`` and the
    strengthened margin is ``F_1(omega_0, omega_phi) - sum(j_terms)``.
    """
    require_anticanonical_sphere(bg, "improved_mto_audit")
    if terms < 1:
        raise BadInput("terms must be >= 1")
    margin = mto_audit(bg, phi).margin
    j_terms = []
    previous: Potential = phi
    for _ in range(terms):
        current = ricci_inverse_fano(previous).potential
        j_terms.append(aubin_J(previous, current))
        previous = current
    return ImprovedMTOAudit(margin, tuple(j_terms), margin - float(np.sum(j_terms)))


def functional_report(
    alpha: Metricish, beta: Metricish, X: TwistedFieldSpec | None = None
) -> FunctionalReport:
    aub = aubin_report(alpha, beta)
    bg = _potential(alpha).background
    e1 = chen_tian_E1(alpha, beta) if bg.mu != 0 else None
    e0x = twisted_k_energy(alpha, beta, X) if X is not None else None
    return FunctionalReport(
        aub.I,
        aub.J,
        aub.I0,
        aub.I1,
        aub.IminusJ,
        k_energy(alpha, beta),
        e1,
        ding_functional(alpha, beta),
        e0x,
    )
