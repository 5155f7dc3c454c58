"""Two-mode truncated Fock space.

The basis holds |m, n> with m + n <= k_max, ordered by total photon number
and then by descending m, so the k-photon block is contiguous.  Only the
operators needed to check the parity-symmetry arguments live here.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from .model import discrete_randomized_pmf, poisson_pmf

PSD_TOL = 1e-9
# the true margin under the infidelity bound is ~ bound**2, far below double precision
BOUND_RTOL = 1e-12


@lru_cache(maxsize=None)
def basis(k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Photon numbers (m, n) of every basis vector; read-only arrays."""
    ms, ns = [], []
    for k in range(k_max + 1):
        for m in range(k, -1, -1):
            ms.append(m)
            ns.append(k - m)
    m_arr, n_arr = np.array(ms), np.array(ns)
    m_arr.flags.writeable = False
    n_arr.flags.writeable = False
    return m_arr, n_arr


def dimension(k_max: int) -> int:
    return (k_max + 1) * (k_max + 2) // 2


def index(m: int, n: int) -> int:
    k = m + n
    return k * (k + 1) // 2 + (k - m)


@dataclass(frozen=True)
class FockVector:
    amplitudes: np.ndarray
    k_max: int

    def __post_init__(self):
        if self.amplitudes.shape != (dimension(self.k_max),):
            raise ValueError("amplitude vector does not match the truncated basis")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def leakage(self) -> float:
        """Probability mass lost to truncation (for states that are normalized untruncated)."""
        return max(0.0, 1.0 - self.norm**2)

    def amplitude(self, m: int, n: int) -> complex:
        return complex(self.amplitudes[index(m, n)])

    def photon_number_distribution(self) -> np.ndarray:
        m, n = basis(self.k_max)
        return np.bincount(m + n, weights=np.abs(self.amplitudes) ** 2, minlength=self.k_max + 1)

    def density(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())

    def normalized(self) -> "FockVector":
        nrm = self.norm
        if nrm == 0:
            return self
        return FockVector(self.amplitudes / nrm, self.k_max)


@dataclass(frozen=True)
class FockOperator:
    matrix: np.ndarray
    label: Literal["parity_projector_odd", "parity_projector_even", "encoding_U", "custom"] = "custom"

    def __matmul__(self, other):
        if isinstance(other, FockVector):
            return FockVector(self.matrix @ other.amplitudes, other.k_max)
        if isinstance(other, FockOperator):
            return FockOperator(self.matrix @ other.matrix)
        return self.matrix @ other

    def conjugate(self, rho: np.ndarray) -> np.ndarray:
        return self.matrix @ rho @ self.matrix.conj().T


def fock_state(m: int, n: int, k_max: int) -> FockVector:
    amp = np.zeros(dimension(k_max), dtype=complex)
    amp[index(m, n)] = 1.0
    return FockVector(amp, k_max)


def parity_projector(k_max: int, parity: Literal["odd", "even"]) -> FockOperator:
    m, n = basis(k_max)
    want = 1 if parity == "odd" else 0
    diag = ((m + n) % 2 == want).astype(complex)
    return FockOperator(np.diag(diag), f"parity_projector_{parity}")


def encoding_operator(k_max: int) -> FockOperator:
    """U_A (x) U_B with U = exp(i pi a^dag a)."""
    m, n = basis(k_max)
    return FockOperator(np.diag((-1.0) ** (m + n)).astype(complex), "encoding_U")


def twirl(rho: np.ndarray, k_max: int) -> np.ndarray:
    """Average of rho and (U (x) U) rho (U (x) U)^dag."""
    u = encoding_operator(k_max)
    return 0.5 * rho + 0.5 * u.conjugate(rho)


def coherent_pair(alpha_a: complex, alpha_b: complex, k_max: int) -> FockVector:
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    m, n = basis(k_max)
    la = np.array([math.lgamma(x + 1) for x in range(k_max + 1)])
    pref = math.exp(-0.5 * (abs(alpha_a) ** 2 + abs(alpha_b) ** 2))
    # 0**0 == 1 in numpy, which is what the vacuum term needs
    amp = pref * (complex(alpha_a) ** m) * (complex(alpha_b) ** n) * np.exp(-0.5 * (la[m] + la[n]))
    return FockVector(amp.astype(complex), k_max)


def parity_decompose(state: FockVector) -> tuple[FockVector, FockVector, float, float]:
    """Normalized odd and even components and their weights.

    A component with zero weight is returned as the zero vector.
    """
    nrm2 = state.norm**2
    if nrm2 > 1 + 1e-10:
        raise ValueError(f"state norm^2 {nrm2} exceeds 1")
    m, n = basis(state.k_max)
    odd_mask = (m + n) % 2 == 1
    odd = np.where(odd_mask, state.amplitudes, 0)
    even = np.where(odd_mask, 0, state.amplitudes)
    p_odd = float(np.vdot(odd, odd).real)
    p_even = float(np.vdot(even, even).real)
    odd_v = FockVector(odd / math.sqrt(p_odd) if p_odd > 0 else odd, state.k_max)
    even_v = FockVector(even / math.sqrt(p_even) if p_even > 0 else even, state.k_max)
    return odd_v, even_v, p_odd, p_even


def k_photon_component(delta: float, k: int, k_max: int) -> FockVector:
    """(a^dag + e^{i delta} b^dag)^k |00> / sqrt(2^k k!)."""
    if not 0 <= k <= k_max:
        raise ValueError("need 0 <= k <= k_max")
    amp = np.zeros(dimension(k_max), dtype=complex)
    for m in range(k + 1):
        amp[index(m, k - m)] = math.sqrt(math.comb(k, m) / 2.0**k) * np.exp(1j * delta * (k - m))
    return FockVector(amp, k_max)


def discrete_pseudo_fock(mu: float, D: int, k: int, delta: float, k_max: int) -> FockVector:
    """k-th pseudo-Fock state of a D-slice phase-randomized coherent pair.

    Normalized with the exact untruncated weight, so ``leakage`` reports
    the part of the superposition cut off above ``k_max``.
    """
    if not 0 <= k < D:
        raise ValueError("need 0 <= k < D")
    weight = discrete_randomized_pmf(mu, D, k)
    amp = np.zeros(dimension(k_max), dtype=complex)
    if weight == 0:
        if k == 0:
            return fock_state(0, 0, k_max)
        raise ValueError(f"pseudo-Fock component k={k} has zero weight at mu={mu}")
    total = k
    while total <= k_max:
        coeff = math.exp(-mu / 2 + 0.5 * total * math.log(mu) - 0.5 * math.lgamma(total + 1))
        amp += coeff * k_photon_component(delta, total, k_max).amplitudes
        total += D
    state = FockVector(amp / math.sqrt(weight), k_max)
    if state.leakage > 1e-10:
        warnings.warn(f"pseudo-Fock state truncated at k_max={k_max}: leakage {state.leakage:.3g}", stacklevel=2)
    return state


def _as_density(x) -> np.ndarray:
    if isinstance(x, FockVector):
        return x.density()
    rho = np.asarray(x, dtype=complex)
    return 0.5 * (rho + rho.conj().T)


def _psd_sqrt(rho: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(rho)
    if w.min() < -PSD_TOL:
        raise ValueError(f"operator is not positive semidefinite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def fidelity(a, b) -> float:
    """Uhlmann fidelity Tr sqrt(sqrt(a) b sqrt(a)); |<a|b>| for two pure vectors."""
    if isinstance(a, FockVector) and isinstance(b, FockVector):
        return min(1.0, abs(np.vdot(a.amplitudes, b.amplitudes)))
    ra, rb = _as_density(a), _as_density(b)
    sa = _psd_sqrt(ra)
    _psd_sqrt(rb)  # validates b
    inner = sa @ rb @ sa
    w = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    return float(min(1.0, np.sqrt(np.clip(w, 0, None)).sum()))


def parity_component_states(mu: float, delta: float, k_max: int) -> tuple[FockVector, FockVector, float, float]:
    """Odd/even components of |sqrt(mu/2)>|sqrt(mu/2) e^{i delta}>."""
    a = math.sqrt(mu / 2)
    return parity_decompose(coherent_pair(a, a * np.exp(1j * delta), k_max))


def odd_state_density(mu: float, k_max: int) -> np.ndarray:
    """Odd-parity state of the 0/pi-mixed pair: equal mixture over delta in {0, pi}."""
    odd0 = parity_component_states(mu, 0.0, k_max)[0]
    oddpi = parity_component_states(mu, math.pi, k_max)[0]
    return 0.5 * (odd0.density() + oddpi.density())


def yield_deviation_bound(mu: float, nu: float, k_max: int = 20) -> tuple[float, float]:
    """(F, sqrt(1 - F^2)) between the odd states at total intensities mu and nu."""
    f = fidelity(odd_state_density(mu, k_max), odd_state_density(nu, k_max))
    return f, math.sqrt(max(0.0, 1 - f * f))


def phase_averaged_pair(mu: float, delta: float, k_max: int, points: int = 2**10) -> np.ndarray:
    """Average over a common phase phi of |sqrt(mu/2)e^{i phi}, sqrt(mu/2)e^{i(phi+delta)}>."""
    a = math.sqrt(mu / 2)
    rho = np.zeros((dimension(k_max),) * 2, dtype=complex)
    for phi in 2 * np.pi * np.arange(points) / points:
        v = coherent_pair(a * np.exp(1j * phi), a * np.exp(1j * (phi + delta)), k_max).amplitudes
        rho += np.outer(v, v.conj())
    return rho / points


def fock_mixture(mu: float, delta: float, k_max: int) -> np.ndarray:
    """sum_k P_mu(k) |k^delta><k^delta| up to k_max."""
    rho = np.zeros((dimension(k_max),) * 2, dtype=complex)
    for k in range(k_max + 1):
        rho += poisson_pmf(mu, k) * k_photon_component(delta, k, k_max).density()
    return rho


def pseudo_fock_infidelity(mu: float, D: int, delta: float, k_max: int) -> float:
    """1 - |<1^delta|lambda_1>|^2 as (weight outside the one-photon block) / (total weight).

    Subtracting a fidelity from 1 would lose the whole margin to rounding.
    """
    amp = discrete_pseudo_fock(mu, D, 1, delta, k_max).amplitudes
    m, n = basis(k_max)
    one = (m + n) == 1
    total = float(np.sum(np.abs(amp) ** 2))
    outside = float(np.sum(np.abs(amp[~one]) ** 2))
    # the one-photon block is parallel to |1^delta>; count any perpendicular part as infidelity
    ref = k_photon_component(delta, 1, k_max).amplitudes[one]
    perp = max(0.0, float(np.sum(np.abs(amp[one]) ** 2)) - abs(np.vdot(ref, amp[one])) ** 2)
    return (outside + perp) / total


def symmetry_report(k_max: int = 12, seed: int = 0) -> list[dict]:
    """Bound-versus-exact table behind the ``verify-symmetry`` command."""
    rows: list[dict] = []
    for D in (8, 16):
        for mu in np.round(np.arange(0.1, 1.01, 0.1), 10):
            kk = max(k_max, 2 * D + 2)
            value = pseudo_fock_infidelity(mu, D, 0.3, kk)
            bound = mu**D / math.factorial(D + 1)
            rows.append(dict(check="pseudo_fock_infidelity", mu=mu, D=D, bound=bound, value=value,
                             residual=bound - value, passed=value <= bound * (1 + BOUND_RTOL)))
    from .model import discrete_randomization_deviation
    for D in (8, 16):
        for mu in (0.1, 0.5, 1.0):
            rows.append(dict(check="xi_D", mu=mu, D=D, bound=float("nan"),
                             value=discrete_randomization_deviation(mu, D), residual=0.0, passed=True))
    rng = np.random.default_rng(seed)
    u = encoding_operator(k_max)
    po, pe = parity_projector(k_max, "odd"), parity_projector(k_max, "even")
    worst = 0.0
    for _ in range(20):
        v = rng.normal(size=dimension(k_max)) + 1j * rng.normal(size=dimension(k_max))
        v /= np.linalg.norm(v)
        worst = max(worst, np.linalg.norm(u.matrix @ (po.matrix @ v) + po.matrix @ v),
                    np.linalg.norm(u.matrix @ (pe.matrix @ v) - pe.matrix @ v))
    rows.append(dict(check="parity_eigen_residual", mu=float("nan"), D=0, bound=1e-10, value=worst,
                     residual=worst, passed=worst < 1e-10))
    single = np.zeros((dimension(1),) * 2, dtype=complex)
    single[index(0, 1), index(0, 1)] = single[index(1, 0), index(1, 0)] = 0.5
    for delta in (0.0, 0.3, math.pi / 2):
        rho = 0.5 * (k_photon_component(delta, 1, 1).density() + k_photon_component(delta + math.pi, 1, 1).density())
        r = float(np.abs(rho - single).max())
        rows.append(dict(check="single_photon_delta_independence", mu=float("nan"), D=0, bound=1e-12,
                         value=r, residual=r, passed=r < 1e-12))
    f, dev = yield_deviation_bound(0.5, 0.1, k_max)
    rows.append(dict(check="odd_state_yield_deviation", mu=0.5, D=0, bound=dev, value=f, residual=0.0, passed=True))
    return rows
