"""Pilot and message waveforms: LFSR PN sequence, BPSK, TDD frame assembly, and
synthesis of the received pilot vector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import LinkBudget, PhaseShiftMatrix, awgn, cascaded_gain

# taps bit mask: bit i set means an x^i term; default x^4 + x^2 + 1
DEFAULT_TAPS = (1 << 4) | (1 << 2)


@dataclass
class LfsrConfig:
    taps: int = DEFAULT_TAPS
    seed: int = 0b0001

    def __post_init__(self) -> None:
        if self.seed == 0:
            raise ValueError("LfsrConfig: seed must be nonzero")
        if self.taps >> 4 != 1:
            raise ValueError("LfsrConfig: taps must encode a degree-4 polynomial")
        if not 0 < self.seed < 16:
            raise ValueError("LfsrConfig: seed must be a nonzero 4-bit state")


def lfsr_bits(cfg: LfsrConfig, n: int) -> np.ndarray:
    """Fibonacci LFSR over GF(2).

    The 4-bit register holds the last four outputs s1..s4 (s1 newest, state bit
    i-1 = s_i). Each step emits s4 and feeds back the XOR of the delay taps
    declared in cfg.taps (s4 and s2 for x^4 + x^2 + 1).
    """
    if n < 1:
        raise ValueError("lfsr_bits: n must be >= 1")
    delays = [i for i in range(1, 5) if (cfg.taps >> i) & 1]
    state = cfg.seed
    out = np.empty(n, dtype=np.int64)
    for t in range(n):
        out[t] = (state >> 3) & 1
        fb = 0
        for d in delays:
            fb ^= (state >> (d - 1)) & 1
        state = ((state << 1) & 0b1111) | fb
    return out


def bpsk_mod(bits) -> np.ndarray:
    """0 -> +1, 1 -> -1."""
    bits = np.asarray(bits)
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bpsk_mod: bits must be 0/1")
    return 1.0 - 2.0 * bits.astype(np.float64)


@dataclass
class PilotSequence:
    bits: np.ndarray
    symbols: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.symbols is None:
            self.symbols = bpsk_mod(self.bits)

    def __len__(self) -> int:
        return len(self.bits)


def make_pilot(cfg: LfsrConfig | None = None, m_p: int = 16) -> PilotSequence:
    return PilotSequence(bits=lfsr_bits(cfg or LfsrConfig(), m_p))


def synthesize_pilot_rx(
    s: PilotSequence,
    h: np.ndarray,
    g: np.ndarray,
    budget: LinkBudget,
    rng: np.random.Generator,
    n0: float = 1.0,
) -> np.ndarray:
    """Received pilot with the RIS at unit (zero-phase) configuration:
    r[m] = sqrt(budget) * (g^T h) * s[m] + w[m], w ~ CN(0, n0)."""
    c = cascaded_gain(h, g, PhaseShiftMatrix(phi=np.zeros(len(np.asarray(h)))))
    w = awgn(len(s), n0, rng) if n0 > 0 else np.zeros(len(s), dtype=complex)
    return np.sqrt(budget.pt_xi_over_n0) * c * s.symbols + w


def bpsk_demod_coherent(r: np.ndarray, gain_ref: complex) -> np.ndarray:
    """bit = 0 iff Re(r * conj(gain_ref)) >= 0."""
    if gain_ref == 0:
        raise ValueError("bpsk_demod_coherent: gain_ref must be nonzero")
    return (np.real(np.asarray(r) * np.conj(gain_ref)) < 0).astype(np.int64)


@dataclass
class TddFrame:
    m_p: int
    m_u: int
    m_d: int
    guard: int = 0

    def __post_init__(self) -> None:
        if min(self.m_p, self.m_u, self.m_d, self.guard) < 0:
            raise ValueError("TddFrame: counts must be >= 0")

    def total_length(self) -> int:
        return self.m_p + self.m_u + self.m_d + 3 * self.guard


def build_frame(frame: TddFrame, pilot, ul_syms, dl_syms) -> np.ndarray:
    """Pilot | guard | uplink | guard | downlink | guard, with zero-energy guards."""
    pilot = np.asarray(pilot, dtype=complex)
    ul = np.asarray(ul_syms, dtype=complex)
    dl = np.asarray(dl_syms, dtype=complex)
    for name, seg, want in (("pilot", pilot, frame.m_p), ("uplink", ul, frame.m_u),
                            ("downlink", dl, frame.m_d)):
        if len(seg) != want:
            raise ValueError(f"build_frame: {name} length {len(seg)}, frame says {want}")
    gap = np.zeros(frame.guard, dtype=complex)
    return np.concatenate([pilot, gap, ul, gap, dl, gap])


def parse_frame(frame: TddFrame, stream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    stream = np.asarray(stream)
    if len(stream) != frame.total_length():
        raise ValueError(
            f"parse_frame: stream length {len(stream)}, expected {frame.total_length()}"
        )
    i = 0
    pilot = stream[i:i + frame.m_p]; i += frame.m_p + frame.guard
    ul = stream[i:i + frame.m_u]; i += frame.m_u + frame.guard
    dl = stream[i:i + frame.m_d]
    return pilot, ul, dl
