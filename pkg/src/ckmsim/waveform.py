"""OFDM sensing/ISAC frame generation and the DFT beam codebook.

A sensing frame sweeps Q analog beams over Q subframes of M_q symbols each,
every resource element carrying a known constant-modulus sequence; an ISAC
frame keeps one beam and carries QPSK payload.  Beam q of the codebook has
element phases 2*pi*q*n/Q and is labelled with the broadside angle
arcsin(2q/Q) (arcsin(2q/Q - 2) on the wrapped half), which matches the
physical pointing of the codebook exactly when the array spacing is half a
wavelength.
"""

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 3e8  # matches the closed-form range/bin constants used throughout


@dataclass(frozen=True)
class OfdmConfig:
    """Waveform and array parameters.

    Defaults reproduce the 27.5 GHz / 80 MHz prototype configuration, except
    that the antenna spacing defaults to exactly half a wavelength so that
    codebook beam labels coincide with physical pointing directions.
    """

    carrier_frequency_hz: float = 27.5e9
    bandwidth_hz: float = 80e6
    subcarrier_spacing_hz: float = 78.125e3
    num_subcarriers: int = 1024
    symbol_duration_s: float = 16e-6
    symbols_per_frame: int = 1027
    antenna_spacing_m: float = SPEED_OF_LIGHT / 27.5e9 / 2.0
    num_tx_elements: int = 16
    num_rx_elements: int = 16

    def __post_init__(self):
        for name in (
            "carrier_frequency_hz",
            "bandwidth_hz",
            "subcarrier_spacing_hz",
            "num_subcarriers",
            "symbol_duration_s",
            "symbols_per_frame",
            "antenna_spacing_m",
            "num_tx_elements",
            "num_rx_elements",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"OfdmConfig.{name} must be strictly positive")
        if self.subcarrier_spacing_hz * self.num_subcarriers > self.bandwidth_hz:
            raise ValueError(
                "subcarrier_spacing_hz * num_subcarriers exceeds bandwidth_hz"
            )
        if self.cp_duration_s <= 0:
            raise ValueError(
                "cyclic prefix duration is not positive: symbol_duration_s must "
                "exceed 1/subcarrier_spacing_hz"
            )

    @property
    def useful_symbol_duration_s(self) -> float:
        """Symbol duration without the cyclic prefix (1/subcarrier spacing)."""
        return 1.0 / self.subcarrier_spacing_hz

    @property
    def cp_duration_s(self) -> float:
        return self.symbol_duration_s - self.useful_symbol_duration_s

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    @property
    def range_resolution_m(self) -> float:
        """Matched-filter range resolution c/(2B)."""
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz)


@dataclass(frozen=True)
class SensingFrameSpec:
    """Beam-sweep layout of a sensing frame: Q subframes of M_q symbols."""

    num_beams: int = 64
    symbols_per_subframe: int = 16
    zc_root: int = 25

    def __post_init__(self):
        if self.num_beams < 1 or self.symbols_per_subframe < 1:
            raise ValueError("num_beams and symbols_per_subframe must be >= 1")
        if self.zc_root < 1:
            raise ValueError("zc_root must be >= 1")

    def beam_schedule(self, symbols_per_frame: int) -> np.ndarray:
        """Per-symbol transmit beam indices: floor(m / M_q), trailing symbols
        beyond Q*M_q repeat the last beam."""
        q, mq = self.num_beams, self.symbols_per_subframe
        if q * mq > symbols_per_frame:
            raise ValueError(
                f"num_beams * symbols_per_subframe = {q * mq} exceeds "
                f"symbols_per_frame = {symbols_per_frame}"
            )
        sched = np.minimum(np.arange(symbols_per_frame) // mq, q - 1)
        return sched.astype(np.int64)


@dataclass(frozen=True)
class FrameSpec:
    """One transmitted OFDM frame: symbol grid (N_sc x M_symb), per-symbol
    beam schedule and, for ISAC frames, the payload bits."""

    kind: str  # "sensing" | "isac"
    symbol_grid: np.ndarray
    beam_schedule: np.ndarray
    num_beams: int
    payload_bits: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sensing", "isac"):
            raise ValueError(f"unknown frame kind: {self.kind!r}")
        if self.symbol_grid.ndim != 2:
            raise ValueError("symbol_grid must be a 2-D matrix")
        if self.beam_schedule.shape != (self.symbol_grid.shape[1],):
            raise ValueError("beam_schedule length must equal symbols per frame")


def largest_prime_at_most(n: int) -> int:
    """Largest prime <= n (trial division; n is a subcarrier count)."""
    if n < 2:
        raise ValueError("no prime <= 1")
    for p in range(n, 1, -1):
        if all(p % k for k in range(2, int(math.isqrt(p)) + 1)):
            return p
    raise AssertionError


def generate_zc_sequence(root: int, length: int) -> np.ndarray:
    """Zadoff-Chu sequence of the given root and length.

    x[n] = exp(-j*pi*root*n*(n+1)/length) for odd length and
    exp(-j*pi*root*n^2/length) for even length; unit modulus everywhere, and
    ideal (zero) cyclic autocorrelation at nonzero lags for prime lengths.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    if not 0 < root < length:
        raise ValueError(f"root must satisfy 0 < root < length, got {root}")
    if math.gcd(root, length) != 1:
        raise ValueError(f"root {root} is not coprime with length {length}")
    n = np.arange(length, dtype=np.float64)
    exponent = n * (n + 1) if length % 2 else n * n
    return np.exp(-1j * np.pi * root * exponent / length)


def map_qpsk(bits) -> np.ndarray:
    """Gray-map a bit vector (even length) onto unit-energy QPSK symbols:
    00 -> (1+j)/sqrt2, 01 -> (-1+j)/sqrt2, 11 -> (-1-j)/sqrt2, 10 -> (1-j)/sqrt2."""
    bits = np.asarray(bits, dtype=np.int64)
    if bits.ndim != 1 or bits.size % 2:
        raise ValueError("QPSK mapping needs a flat, even-length bit vector")
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0 or 1")
    pairs = bits.reshape(-1, 2)
    return ((1 - 2 * pairs[:, 1]) + 1j * (1 - 2 * pairs[:, 0])) / np.sqrt(2.0)


def demap_qpsk(symbols) -> np.ndarray:
    """Hard-decision inverse of :func:`map_qpsk`."""
    symbols = np.asarray(symbols)
    b0 = (symbols.imag < 0).astype(np.int64)
    b1 = (symbols.real < 0).astype(np.int64)
    return np.stack([b0, b1], axis=1).reshape(-1)


def _zc_grid_column(cfg: OfdmConfig, zc_root: int) -> np.ndarray:
    """Known sequence over the N_sc subcarriers: a Zadoff-Chu sequence of the
    largest prime length <= N_sc, cyclically extended to N_sc."""
    n_sc = cfg.num_subcarriers
    zc_len = largest_prime_at_most(n_sc)
    root = zc_root % zc_len
    if root == 0:
        raise ValueError(f"zc_root {zc_root} collapses to 0 modulo {zc_len}")
    seq = generate_zc_sequence(root, zc_len)
    return seq[np.arange(n_sc) % zc_len]


def build_sensing_frame(cfg: OfdmConfig, sf: SensingFrameSpec) -> FrameSpec:
    """Sensing frame: the ZC-derived known sequence on every subcarrier of
    every symbol, with the subframe beam sweep of `sf`."""
    schedule = sf.beam_schedule(cfg.symbols_per_frame)
    column = _zc_grid_column(cfg, sf.zc_root)
    grid = np.tile(column[:, None], (1, cfg.symbols_per_frame))
    return FrameSpec(
        kind="sensing", symbol_grid=grid, beam_schedule=schedule, num_beams=sf.num_beams
    )


def build_isac_frame(
    cfg: OfdmConfig, payload_bits, beam: int, num_beams: int = 64, zc_root: int = 25
) -> FrameSpec:
    """Fixed-beam ISAC frame: QPSK payload placed subcarrier-major starting at
    (n=0, m=0); remaining resource elements carry the known ZC symbols."""
    payload_bits = np.asarray(payload_bits, dtype=np.int64).reshape(-1)
    n_sc, m_symb = cfg.num_subcarriers, cfg.symbols_per_frame
    if payload_bits.size > 2 * n_sc * m_symb:
        raise ValueError("payload does not fit in one frame")
    if not 0 <= beam < num_beams:
        raise ValueError(f"beam index {beam} outside [0, {num_beams})")
    column = _zc_grid_column(cfg, zc_root)
    grid = np.tile(column[:, None], (1, m_symb))
    symbols = map_qpsk(payload_bits)
    if symbols.size:
        flat = grid.reshape(-1, order="F")  # subcarrier-major
        flat[: symbols.size] = symbols
        grid = flat.reshape(n_sc, m_symb, order="F")
    schedule = np.full(m_symb, beam, dtype=np.int64)
    return FrameSpec(
        kind="isac",
        symbol_grid=grid,
        beam_schedule=schedule,
        num_beams=num_beams,
        payload_bits=payload_bits,
    )


def dft_beam_vector(q: int, num_beams: int, num_elements: int) -> np.ndarray:
    """Codebook beam q: element n carries phase 2*pi*q*n/Q, n = 0..N-1."""
    if not 0 <= q < num_beams:
        raise ValueError(f"beam index {q} outside [0, {num_beams})")
    if num_elements < 1:
        raise ValueError("num_elements must be >= 1")
    n = np.arange(num_elements)
    return np.exp(2j * np.pi * q * n / num_beams)


def beam_angle(q: int, num_beams: int) -> float:
    """Broadside angle label of codebook beam q.

    arcsin(2q/Q) on the first half of the codebook, arcsin(2q/Q - 2) on the
    wrapped half; range [-pi/2, pi/2].
    """
    if not 0 <= q < num_beams:
        raise ValueError(f"beam index {q} outside [0, {num_beams})")
    x = 2.0 * q / num_beams
    return math.asin(x) if x <= 1.0 else math.asin(x - 2.0)


def beam_angles(num_beams: int) -> np.ndarray:
    """Angle labels for the full codebook."""
    return np.array([beam_angle(q, num_beams) for q in range(num_beams)])


def nearest_beam(theta: float, num_beams: int) -> int:
    """Codebook index pointing closest to `theta`; ties go to the lower index.

    Proximity is measured in sin-angle space with the codebook's period-2
    wrap (the DFT beams are uniform in sin(theta) and the endfire beam covers
    both +90 and -90 degrees), which is where the physical array gain of a
    half-wavelength ULA is actually maximized.
    """
    delta = np.abs(math.sin(theta) - np.sin(beam_angles(num_beams)))
    return int(np.argmin(np.minimum(delta, 2.0 - delta)))


def steering_vector(
    theta: float, num_elements: int, spacing_m: float, wavelength_m: float
) -> np.ndarray:
    """ULA steering vector: element n carries phase -2*pi*(d/lambda)*n*sin(theta)."""
    if abs(theta) > np.pi / 2 + 1e-12:
        raise ValueError("theta must lie within [-pi/2, pi/2]")
    if num_elements < 1 or spacing_m <= 0 or wavelength_m <= 0:
        raise ValueError("invalid array geometry")
    n = np.arange(num_elements)
    return np.exp(-2j * np.pi * spacing_m / wavelength_m * n * np.sin(theta))
