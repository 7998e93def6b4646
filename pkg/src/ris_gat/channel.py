"""Stochastic channel and RIS physics: Rician links, cascaded gain, phase
configuration, effective SNR, AWGN, and residual Doppler rotation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(x):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(x, dtype=np.float64) + np.pi, TWO_PI) - np.pi


@dataclass
class RicianParams:
    """Per-link fading law: amplitude Rician with shape k and mean power omega.

    phase_model "los" samples coefficient = LOS + complex-Gaussian scatter, so
    amplitude and phase are jointly Rician around los_phase. "uniform" keeps the
    Rician amplitude but draws the phase independently uniform on [-pi, pi).
    """

    k: float = 10.0
    omega: float = 1.0
    los_phase: float = 0.0
    phase_model: str = "los"

    def __post_init__(self) -> None:
        if self.k < 0 or self.omega <= 0:
            raise ValueError("RicianParams: need k >= 0 and omega > 0")
        if self.phase_model not in ("los", "uniform"):
            raise ValueError(f"RicianParams: unknown phase_model {self.phase_model!r}")


@dataclass
class PhaseShiftMatrix:
    phi: np.ndarray                       # radians, in [-pi, pi)
    amplitude: np.ndarray = field(default=None)  # type: ignore[assignment]
    n_zero_estimates: int = 0             # degenerate inputs mapped to phase 0

    def __post_init__(self) -> None:
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.amplitude is None:
            self.amplitude = np.ones_like(self.phi)  # lossless RIS


@dataclass
class LinkBudget:
    """The lumped ratio P_t * xi / N_0 on a linear scale."""

    pt_xi_over_n0: float

    def __post_init__(self) -> None:
        if not (self.pt_xi_over_n0 > 0 and np.isfinite(self.pt_xi_over_n0)):
            raise ValueError("LinkBudget: pt_xi_over_n0 must be positive and finite")

    @classmethod
    def from_db(cls, snr_db: float) -> "LinkBudget":
        return cls(pt_xi_over_n0=10.0 ** (snr_db / 10.0))


def sample_rician(n: int, p: RicianParams, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. complex coefficients with Rician amplitude, E[|.|^2] = omega."""
    if n < 1:
        raise ValueError("sample_rician: n must be >= 1")
    los = np.sqrt(p.k * p.omega / (p.k + 1.0)) * np.exp(1j * p.los_phase)
    sigma = np.sqrt(p.omega / (2.0 * (p.k + 1.0)))
    coeff = los + sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    if p.phase_model == "uniform":
        coeff = np.abs(coeff) * np.exp(1j * rng.uniform(-np.pi, np.pi, size=n))
    return coeff


def ris_phases_from_estimates(h_hat: np.ndarray, g_hat: np.ndarray) -> PhaseShiftMatrix:
    """phi_i = wrap(angle(h_hat_i) + angle(g_hat_i)); zero-magnitude estimates
    contribute phase 0 and are counted."""
    h_hat = np.asarray(h_hat)
    g_hat = np.asarray(g_hat)
    if h_hat.shape != g_hat.shape:
        raise ValueError(f"ris_phases_from_estimates: lengths {h_hat.shape} vs {g_hat.shape}")
    zeros = int(np.count_nonzero(h_hat == 0) + np.count_nonzero(g_hat == 0))
    phi = wrap_angle(np.angle(h_hat) + np.angle(g_hat))
    return PhaseShiftMatrix(phi=phi, n_zero_estimates=zeros)


def cascaded_gain(h: np.ndarray, g: np.ndarray, phi: PhaseShiftMatrix) -> complex:
    """g^T diag(A e^{-j phi}) h: the compound reflected-path gain.

    With phi_i = theta_i + nu_i exactly, every term is real and the magnitude
    reaches its coherent maximum sum(beta_i * rho_i).
    """
    h = np.asarray(h)
    g = np.asarray(g)
    if h.shape != g.shape or h.shape != phi.phi.shape:
        raise ValueError(
            f"cascaded_gain: mismatched lengths h{h.shape} g{g.shape} phi{phi.phi.shape}"
        )
    return complex(np.sum(phi.amplitude * h * g * np.exp(-1j * phi.phi)))


def effective_snr(budget: LinkBudget, gain: complex) -> float:
    return budget.pt_xi_over_n0 * float(np.abs(gain)) ** 2


def awgn(n: int, n0: float, rng: np.random.Generator) -> np.ndarray:
    """Circularly-symmetric complex Gaussian noise, per-sample variance n0."""
    if n0 < 0:
        raise ValueError("awgn: n0 must be >= 0")
    scale = np.sqrt(n0 / 2.0)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def apply_doppler(r: np.ndarray, f_d: float, symbol_rate: float, phase0: float = 0.0) -> np.ndarray:
    """Rotate symbol m by phase0 + 2*pi*f_d*m/symbol_rate (residual Doppler ramp)."""
    if symbol_rate <= 0:
        raise ValueError("apply_doppler: symbol_rate must be > 0")
    r = np.asarray(r)
    m = np.arange(r.shape[-1])
    return r * np.exp(1j * (phase0 + TWO_PI * f_d * m / symbol_rate))
