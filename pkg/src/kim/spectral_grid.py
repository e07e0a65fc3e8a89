"""
Discretized model geometries in complex dimension one.

Three backgrounds are supported:

* ``SPHERE``: circle-invariant data on a round sphere of volume ``V``, written
  in the height coordinate ``s in (-1, 1)`` and sampled at Gauss-Legendre
  nodes.  The ratio operator ``L0 u = (i ddbar u) / omega_0`` acts as
  ``(1/V) d/ds[(1 - s^2) du/ds]`` and is diagonal on Legendre polynomials.
* ``TORUS``: a flat torus ``[0, 1)^2`` of area ``V`` on an ``N x N`` grid,
  ``L0`` diagonal on Fourier modes with eigenvalue ``-|k|^2 / V``.
* ``NEGATIVE``: the torus grid with ``mu = -1`` and a prescribed smooth Ricci
  potential ``f0``.  This is a stand-in for a negatively curved background
  that exercises the ``mu < 0`` equations; it is not an actual surface of
  genus two or more.

All differentiation and quadrature is spectral; nothing here uses finite
differences.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special

from kim.errors import BadInput

MIN_RESOLUTION = 8

# default prescribed Ricci potential for NEGATIVE: (k1, k2, cos, sin) modes
DEFAULT_F0_MODES = ((1, 0, 0.4, 0.0), (0, 1, 0.0, 0.3), (1, 1, 0.15, -0.1))


class Kind(str, enum.Enum):
    SPHERE = "sphere"
    TORUS = "torus"
    NEGATIVE = "negative"


class Symmetry(str, enum.Enum):
    NONE = "none"
    EVEN = "even"


class _LegendreTables(NamedTuple):
    nodes: np.ndarray
    weights: np.ndarray  # sum to 2
    vander: np.ndarray
    analysis: np.ndarray
    eig: np.ndarray  # for V = 1
    l0: np.ndarray  # for V = 1
    l0_inv: np.ndarray  # for V = 1
    drift: np.ndarray


@functools.lru_cache(maxsize=16)
def _legendre_tables(N: int) -> _LegendreTables:
    """
    Gauss-Legendre nodes and the node-space operator matrices.

    Everything is assembled in extended precision and rounded once.  Products
    like ``vander @ diag(eig) @ analysis`` lose ~N^3 ulps in plain binary64,
    which is far above the tolerances the energy identities are tested at.
    """
    ld = np.longdouble
    s0, _ = special.roots_legendre(N)
    s = s0.astype(ld)
    for _ in range(3):
        p, dp = _legendre_and_derivative(s, N)
        s = s - p / dp
    s = 0.5 * (s - s[::-1])
    p, dp = _legendre_and_derivative(s, N)
    w = 2 / ((1 - s * s) * dp * dp)

    vander = np.empty((N, N), dtype=ld)
    vander[:, 0] = 1
    if N > 1:
        vander[:, 1] = s
    for l in range(1, N - 1):
        vander[:, l + 1] = ((2 * l + 1) * s * vander[:, l] - l * vander[:, l - 1]) / (l + 1)
    degrees = np.arange(N)
    analysis = ((2 * degrees + 1) / ld(2))[:, None] * vander.T * w[None, :]
    eig = -(degrees * (degrees + 1)).astype(ld)
    inv_eig = np.zeros(N, dtype=ld)
    inv_eig[1:] = 1 / eig[1:]
    # (1 - s^2) P_l' = l (P_{l-1} - s P_l)
    flux = np.zeros((N, N), dtype=ld)
    flux[:, 1:] = degrees[1:] * (vander[:, :-1] - s[:, None] * vander[:, 1:])

    def rnd(a):
        return np.ascontiguousarray(a.astype(float))

    return _LegendreTables(
        rnd(s),
        rnd(w),
        rnd(vander),
        rnd(analysis),
        rnd(eig),
        rnd(np.dot(vander * eig, analysis)),
        rnd(np.dot(vander * inv_eig, analysis)),
        rnd(np.dot(flux, analysis)),
    )


def _legendre_and_derivative(s: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    p_prev = np.ones_like(s)
    p = s.copy()
    for l in range(1, N):
        p_prev, p = p, ((2 * l + 1) * s * p - l * p_prev) / (l + 1)
    dp = N * (s * p - p_prev) / (s * s - 1)
    return p, dp


@dataclass(frozen=True, eq=False)
class BackgroundGeometry:
    """
    Immutable reference geometry with its quadrature and spectral operators.

    Node values are 1-d arrays of length ``N`` on the sphere and ``(N, N)``
    arrays on the torus grids.  ``weights`` integrate against the background
    area form, so ``weights.sum() == volume``.
    """

    kind: Kind
    resolution: int
    volume: float
    mu: float
    nodes: np.ndarray
    weights: np.ndarray
    base_ricci_potential: np.ndarray
    symmetry: Symmetry = Symmetry.NONE

    # ---- spectral machinery -------------------------------------------------

    def __post_init__(self) -> None:
        N = self.resolution
        if self.kind is Kind.SPHERE:
            tables = _legendre_tables(N)
            object.__setattr__(self, "_vander", tables.vander)
            object.__setattr__(self, "_analysis", tables.analysis)
            object.__setattr__(self, "_eig", tables.eig / self.volume)
            object.__setattr__(self, "_l0", tables.l0 / self.volume)
            object.__setattr__(self, "_l0_inv", tables.l0_inv * self.volume)
            object.__setattr__(self, "_drift", tables.drift)
        else:
            k = np.fft.fftfreq(N, d=1.0 / N)
            k1, k2 = np.meshgrid(k, k, indexing="ij")
            object.__setattr__(self, "_eig", -(k1**2 + k2**2) / self.volume)
        for name in ("nodes", "weights", "base_ricci_potential"):
            getattr(self, name).setflags(write=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weights.shape

    @property
    def is_sphere(self) -> bool:
        return self.kind is Kind.SPHERE

    @property
    def eigenvalues(self) -> np.ndarray:
        """L0 eigenvalues indexed like the spectral coefficients."""
        return self._eig

    @property
    def l0_matrix(self) -> np.ndarray:
        """Dense node-space matrix of L0 (sphere only)."""
        self._require_sphere("l0_matrix")
        return self._l0

    @property
    def drift_matrix(self) -> np.ndarray:
        """Dense node-space matrix of ``u -> (1 - s^2) u'(s)`` (sphere only)."""
        self._require_sphere("drift_matrix")
        return self._drift

    def _require_sphere(self, what: str) -> None:
        if self.kind is not Kind.SPHERE:
            raise BadInput(f"{what} is only defined on the sphere background")

    def to_coefficients(self, u: np.ndarray) -> np.ndarray:
        if self.is_sphere:
            return self._analysis @ u
        return np.fft.fft2(u)

    def from_coefficients(self, c: np.ndarray) -> np.ndarray:
        if self.is_sphere:
            return self._vander @ c
        return np.fft.ifft2(c).real

    def apply_L0(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise BadInput("apply_L0: non-finite input")
        if self.is_sphere:
            return self._l0 @ u
        return np.fft.ifft2(self._eig * np.fft.fft2(u)).real

    def inverse_L0(self, g: np.ndarray) -> np.ndarray:
        """Mean-zero solution of ``L0 u = g - mean(g)``."""
        g = np.asarray(g, dtype=float)
        if self.is_sphere:
            return self.project(self._l0_inv @ g)
        c = np.fft.fft2(g)
        eig = self._eig.copy()
        eig[0, 0] = 1.0
        c = c / eig
        c[0, 0] = 0.0
        return np.fft.ifft2(c).real

    def drift(self, u: np.ndarray) -> np.ndarray:
        """Action of the dilation field ``(1 - s^2) d/ds`` (unit coefficient)."""
        self._require_sphere("drift")
        return self._drift @ u

    # ---- quadrature ---------------------------------------------------------

    def integrate(self, u: np.ndarray) -> float:
        return float(np.sum(self.weights * u))

    def average(self, u: np.ndarray) -> float:
        return self.integrate(u) / self.volume

    def project(self, u: np.ndarray) -> np.ndarray:
        """Restrict to the represented subspace (even part when EVEN)."""
        if self.symmetry is Symmetry.EVEN:
            return 0.5 * (u + u[::-1])
        return u

    def potential(self, values: np.ndarray) -> Potential:
        """Wrap node values as a mean-zero Potential on this background."""
        values = np.array(values, dtype=float).reshape(self.shape)
        values = self.project(values)
        values = values - self.average(values)
        return Potential(self, values)

    def zero_potential(self) -> Potential:
        return Potential(self, np.zeros(self.shape))

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "N": self.resolution,
            "V": self.volume,
            "mu": self.mu,
            "symmetry": self.symmetry.value,
        }


@dataclass(frozen=True, eq=False)
class Potential:
    """Node values of a (not necessarily plurisubharmonic) potential phi."""

    background: BackgroundGeometry
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values.setflags(write=False)

    def sup_distance(self, other: Potential) -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def scaled(self, factor: float) -> Potential:
        return Potential(self.background, factor * self.values)

    def __add__(self, other: Potential) -> Potential:
        return self.background.potential(self.values + other.values)

    def __sub__(self, other: Potential) -> Potential:
        return self.background.potential(self.values - other.values)


def build_background(
    kind: Kind | str,
    N: int,
    V: float = 1.0,
    f0_spec: Sequence[tuple[int, int, float, float]] | None = None,
    symmetry: Symmetry | str = Symmetry.NONE,
) -> BackgroundGeometry:
    """
    Construct one of the model backgrounds.

    Parameters
    ----------
    kind : Kind or str
        ``"sphere"``, ``"torus"`` or ``"negative"``.
    N : int
        Gauss-Legendre node count (sphere) or grid edge (torus grids).
    V : float
        Total volume.
    f0_spec : sequence of (k1, k2, a_cos, a_sin), optional
        Fourier modes of the prescribed Ricci potential; NEGATIVE only.
        Defaults to ``DEFAULT_F0_MODES``.
    symmetry : Symmetry or str
        ``"even"`` restricts sphere data to even functions of ``s``.
    """
    try:
        kind = Kind(kind)
        symmetry = Symmetry(symmetry)
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    if int(N) != N or N < MIN_RESOLUTION:
        raise BadInput(f"resolution N={N} must be an integer >= {MIN_RESOLUTION}")
    N = int(N)
    if not np.isfinite(V) or V <= 0:
        raise BadInput(f"volume V={V} must be positive")
    if f0_spec is not None and kind is not Kind.NEGATIVE:
        raise BadInput("f0_spec is only accepted for the negative background")
    if symmetry is Symmetry.EVEN and kind is not Kind.SPHERE:
        raise BadInput("even symmetry is only defined on the sphere")

    if kind is Kind.SPHERE:
        tables = _legendre_tables(N)
        s, w = tables.nodes, tables.weights
        return BackgroundGeometry(
            kind, N, float(V), 2.0 / V, s, w * (V / 2.0), np.zeros(N), symmetry
        )

    x = np.arange(N) / N
    X, Y = np.meshgrid(x, x, indexing="ij")
    nodes = np.stack([X, Y])
    weights = np.full((N, N), V / N**2)
    if kind is Kind.TORUS:
        return BackgroundGeometry(kind, N, float(V), 0.0, nodes, weights, np.zeros((N, N)))

    modes = DEFAULT_F0_MODES if f0_spec is None else f0_spec
    f0 = np.zeros((N, N))
    for k1, k2, a, b in modes:
        if max(abs(k1), abs(k2)) >= N // 2:
            raise BadInput(f"f0 mode ({k1}, {k2}) is not resolved at N={N}")
        arg = 2 * np.pi * (k1 * X + k2 * Y)
        f0 += a * np.cos(arg) + b * np.sin(arg)
    f0 -= np.log(np.sum(weights * np.exp(f0)) / V)
    return BackgroundGeometry(kind, N, float(V), -1.0, nodes, weights, f0)


def apply_L0(bg: BackgroundGeometry, u: np.ndarray) -> np.ndarray:
    return bg.apply_L0(u)


def integrate(bg: BackgroundGeometry, u: np.ndarray) -> float:
    return bg.integrate(u)


def dirichlet_pairing(bg: BackgroundGeometry, u: np.ndarray, v: np.ndarray) -> float:
    """``D(u, v) = -int u L0 v``, the integral of ``i du ^ dbar v``."""
    return -bg.integrate(u * bg.apply_L0(v))


def random_potential(
    bg: BackgroundGeometry, seed: int, band_limit: int, amplitude: float
) -> Potential:
    """
    Seeded band-limited potential with decaying spectrum.

    Coefficients are uniform on ``[-1, 1]`` scaled by ``amplitude / (1 + l)^2``.
    The draw order depends only on ``band_limit``, so the same seed gives the
    same smooth function at every resolution.
    """
    L = int(band_limit)
    if amplitude < 0:
        raise BadInput("amplitude must be nonnegative")
    rng = np.random.default_rng(seed)
    if bg.is_sphere:
        if not 1 <= L < bg.resolution:
            raise BadInput(f"band limit {L} must lie in [1, N) on the sphere")
        degrees = np.arange(1, L + 1)
        coef = rng.uniform(-1.0, 1.0, size=L) * amplitude / (1.0 + degrees) ** 2
        if bg.symmetry is Symmetry.EVEN:
            coef[degrees % 2 == 1] = 0.0
        full = np.zeros(bg.resolution)
        full[1 : L + 1] = coef
        return bg.potential(bg.from_coefficients(full))

    if not 1 <= L < bg.resolution // 2:
        raise BadInput(f"band limit {L} must lie in [1, N/2) on the torus")
    X, Y = bg.nodes
    values = np.zeros(bg.shape)
    for k1 in range(-L, L + 1):
        for k2 in range(0, L + 1):
            if k2 == 0 and k1 <= 0:
                continue
            a, b = rng.uniform(-1.0, 1.0, size=2)
            scale = amplitude / (1.0 + np.hypot(k1, k2)) ** 2
            arg = 2 * np.pi * (k1 * X + k2 * Y)
            values += scale * (a * np.cos(arg) + b * np.sin(arg))
    return bg.potential(values)


def dilation_density(s: np.ndarray, lam: float) -> np.ndarray:
    """Density of the pull-back of the round metric under ``z -> lam * z``."""
    return 4.0 * lam**2 / ((1.0 + s) * lam**2 + (1.0 - s)) ** 2


def dilation_pullback_potential(bg: BackgroundGeometry, lam: float) -> Potential:
    """Potential of the Mobius dilation pull-back of the round metric."""
    if not bg.is_sphere:
        raise BadInput("dilation pull-backs live on the sphere background")
    if not lam > 0:
        raise BadInput("dilation factor must be positive")
    if bg.symmetry is Symmetry.EVEN and lam != 1:
        raise BadInput("dilations are not even in s; use a background without symmetry")
    density = dilation_density(bg.nodes, lam)
    return bg.potential(bg.inverse_L0(density - 1.0))
