import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kim.errors import BadInput
from kim.functionals import (
    aubin_report,
    chen_tian_E1,
    ding_functional,
    functional_report,
    improved_mto_audit,
    k_energy,
    mto_audit,
    pullback_functional,
    quadratic_path,
    twisted_k_energy,
)
from kim.kahler_core import (
    TwistedFieldSpec,
    base_metric,
    make_metric,
    ricci_forward,
    ricci_inverse_fano,
)
from kim.spectral_grid import Kind, build_background, dilation_pullback_potential, random_potential

SPHERE = build_background(Kind.SPHERE, 48, V=2.0)


def _metric(bg, seed, amp=0.1):
    return make_metric(random_potential(bg, seed, 6, amp))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**5))
def test_cocycles(seed):
    a, b, c = (_metric(SPHERE, seed + j) for j in range(3))
    for fn in (k_energy, chen_tian_E1, ding_functional):
        assert abs(fn(a, b) + fn(b, c) - fn(a, c)) <= 1e-12
        assert abs(fn(a, a)) <= 1e-14


@pytest.mark.parametrize("which", ["torus", "negative"])
def test_cocycles_flat_and_negative(which, request):
    bg = request.getfixturevalue(which)
    a, b, c = (_metric(bg, j, 0.05) for j in range(3))
    fns = (k_energy, ding_functional) + ((chen_tian_E1,) if bg.mu else ())
    for fn in fns:
        assert abs(fn(a, b) + fn(b, c) - fn(a, c)) <= 1e-12


def test_k_energy_first_variation(sphere):
    # d/dt E0(alpha, phi + t v) = -(1/V) int v L0 f_phi dm0
    a = base_metric(sphere)
    b = _metric(sphere, 3)
    v = random_potential(sphere, 4, 5, 1.0).values
    h = 1e-5
    plus = make_metric(sphere.potential(b.values + h * v))
    minus = make_metric(sphere.potential(b.values - h * v))
    fd = (k_energy(a, plus) - k_energy(a, minus)) / (2 * h)
    exact = -sphere.integrate(v * sphere.apply_L0(b.ricci.ricci_potential)) / sphere.volume
    assert fd == pytest.approx(exact, abs=1e-9)


def test_ding_first_variation(sphere):
    # d/dt F(alpha, phi + t v) = (1/V) int v (e^{f_phi} - 1) U_phi dm0  (mu = 1)
    a = base_metric(sphere)
    b = _metric(sphere, 5)
    v = random_potential(sphere, 6, 5, 1.0).values
    h = 1e-5
    fd = (
        ding_functional(a, sphere.potential(b.values + h * v))
        - ding_functional(a, sphere.potential(b.values - h * v))
    ) / (2 * h)
    f = b.ricci.ricci_potential
    exact = sphere.integrate(v * (np.exp(f) - 1.0) * b.density) / sphere.volume
    assert fd == pytest.approx(exact, abs=1e-9)


def test_aubin_identities(sphere):
    r = aubin_report(_metric(sphere, 7), _metric(sphere, 8))
    assert r.I == pytest.approx(2 * r.J, rel=1e-11)
    assert r.I1 == pytest.approx(r.J, rel=1e-11)
    assert r.IminusJ == pytest.approx(r.J, rel=1e-11)
    assert r.I0 == 0.0
    assert r.I0 == pytest.approx(2 * r.J - r.I, abs=1e-12)
    assert r.I_cross == pytest.approx(r.I, rel=1e-11)
    assert r.I >= 0 and r.J >= 0 and r.I0 <= r.J and r.I1 <= r.J * (1 + 1e-12)


def test_round_metric_minimizes(sphere):
    o = base_metric(sphere)
    b = _metric(sphere, 9)
    assert k_energy(o, b) > 0
    assert ding_functional(o, b) > 0
    for lam in (0.5, 2.0):
        m = make_metric(dilation_pullback_potential(sphere, lam))
        assert abs(k_energy(o, m)) <= 1e-10
        assert abs(ding_functional(o, m)) <= 1e-10


def test_twisted_energy_reduces_to_k_energy(sphere):
    a, b = _metric(sphere, 10), _metric(sphere, 11)
    assert twisted_k_energy(a, b, TwistedFieldSpec(0.0)) == pytest.approx(k_energy(a, b), abs=1e-12)


def test_twisted_energy_path_independence(sphere):
    a, b = _metric(sphere, 12), _metric(sphere, 13)
    X = TwistedFieldSpec(0.3)
    lin = twisted_k_energy(a, b, X)
    assert twisted_k_energy(a, b, X, path=quadratic_path) == pytest.approx(lin, abs=1e-10)
    bend = random_potential(sphere, 14, 4, 0.05).values
    assert twisted_k_energy(a, b, X, bend=bend) == pytest.approx(lin, abs=1e-10)
    c = _metric(sphere, 15)
    assert abs(twisted_k_energy(a, b, X) + twisted_k_energy(b, c, X) - twisted_k_energy(a, c, X)) <= 1e-10


def test_energy_of_non_kahler_rejected_where_needed(sphere):
    wild = random_potential(sphere, 1, 5, 3.0)
    with pytest.raises(Exception):
        k_energy(base_metric(sphere), wild)
    # the Ding functional only needs the first argument to be Kahler
    assert np.isfinite(ding_functional(base_metric(sphere), wild))


def test_mto_margin_is_ding(sphere):
    phi = random_potential(sphere, 16, 6, 2.0)
    audit = mto_audit(sphere, phi)
    assert audit.margin == pytest.approx(ding_functional(base_metric(sphere), phi), abs=1e-12)
    assert audit.margin >= 0
    assert np.log(audit.rhs) - np.log(audit.lhs) == pytest.approx(audit.margin, abs=1e-12)


def test_mto_equality_on_mobius(sphere):
    for lam in (0.5, 1.0, 2.0):
        assert abs(mto_audit(sphere, dilation_pullback_potential(sphere, lam)).margin) <= 1e-8


def test_improved_mto(sphere):
    phi = random_potential(sphere, 17, 6, 1.0)
    r = improved_mto_audit(sphere, phi, 8)
    j = np.array(r.j_terms)
    assert np.all(j > 0)
    assert np.all(j[1:] < j[:-1])
    assert r.strengthened_margin >= -1e-9
    assert r.strengthened_margin <= r.margin + 1e-12
    fixed = improved_mto_audit(sphere, dilation_pullback_potential(sphere, 2.0), 4)
    assert max(fixed.j_terms) <= 1e-8 and abs(fixed.strengthened_margin) <= 1e-8


def test_enf_identity(sphere):
    o = base_metric(sphere)
    for seed, amp in ((18, 0.1), (19, 2.0)):
        phi = random_potential(sphere, seed, 6, amp)
        lhs = chen_tian_E1(ricci_inverse_fano(o.potential), ricci_inverse_fano(phi))
        assert lhs == pytest.approx(ding_functional(o, phi), abs=1e-10)
        assert pullback_functional(o, phi, 1, 1) == pytest.approx(lhs, abs=1e-14)


def test_ding_along_ricci(sphere):
    # F1(alpha, Ric alpha) = J(alpha, Ric alpha) - (1/V) int f_alpha U_alpha
    from kim.functionals import aubin_J

    a = _metric(sphere, 20)
    psi, kahler = ricci_forward(a)
    assert kahler
    rhs = aubin_J(a, psi) - sphere.integrate(a.ricci.ricci_potential * a.density) / sphere.volume
    assert ding_functional(a, psi) == pytest.approx(rhs, abs=1e-11)


def test_pullback_functional_levels(sphere):
    a, b = _metric(sphere, 21), _metric(sphere, 22)
    assert pullback_functional(a, b, 0, 0) == k_energy(a, b)
    assert pullback_functional(a, b, 1, 0) == chen_tian_E1(a, b)
    with pytest.raises(BadInput):
        pullback_functional(a, b, 2, 0)


def test_e1_undefined_for_flat(torus):
    with pytest.raises(BadInput):
        chen_tian_E1(base_metric(torus), _metric(torus, 1, 0.05))
    rep = functional_report(base_metric(torus), _metric(torus, 1, 0.05))
    assert rep.E1 is None


def test_background_mismatch(sphere, torus):
    with pytest.raises(BadInput):
        aubin_report(base_metric(sphere), base_metric(torus))
