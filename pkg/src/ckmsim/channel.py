"""2-D geometric scene model and monostatic/downlink OFDM channel synthesis.

The scene is planar: a base station with a uniform linear array (boresight a
unit vector in the plane), point targets with radar cross sections, oriented
mirror segments providing single-bounce paths, and obstacle segments that
attenuate whatever crosses them.  Angles are measured from the array
broadside, positive toward the boresight rotated clockwise by 90 degrees
(for the +y boresight of the reference scene, positive angles point toward
+x).

Synthesis follows the narrowband OFDM model: entry (n, m) of an observation
accumulates gamma_{k,m} * b_{n,m} * exp(j*2*pi*(nu_k*m*T_symb -
tau_k*n*delta_f)) per path k, with the Doppler phase held constant over one
symbol.  A brute-force time-domain path (modulate, delay, segment, strip CP,
FFT) exists as an independent verification oracle and matches the closed
form to floating-point accuracy for any delay shorter than the CP.
"""

import math
from dataclasses import dataclass

import numpy as np

from .waveform import (
    SPEED_OF_LIGHT,
    FrameSpec,
    OfdmConfig,
    dft_beam_vector,
    steering_vector,
)

_ENDPOINT_T_EPS = 1e-9


@dataclass(frozen=True)
class Target:
    """Point target: the UE, a static scatterer, or a dynamic obstacle."""

    kind: str  # "ue" | "static_scatterer" | "dynamic_obstacle"
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    rcs_m2: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ue", "static_scatterer", "dynamic_obstacle"):
            raise ValueError(f"unknown target kind: {self.kind!r}")
        if self.rcs_m2 <= 0:
            raise ValueError("rcs_m2 must be > 0")
        if self.kind == "static_scatterer" and any(v != 0.0 for v in self.velocity):
            raise ValueError("static scatterers must have zero velocity")


@dataclass(frozen=True)
class Reflector:
    """Oriented mirror segment (single-bounce specular reflection).

    `angle_deg` is measured counterclockwise from the +x axis.  The segment
    also scatters echoes back to the BS as a point target of `rcs_m2` at its
    center.
    """

    center: tuple[float, float]
    width_m: float
    angle_deg: float
    reflection_coeff: complex = 0.7
    rcs_m2: float = 1.0

    def __post_init__(self):
        if self.width_m <= 0:
            raise ValueError("reflector width must be > 0")
        if abs(self.reflection_coeff) > 1.0 + 1e-12:
            raise ValueError("|reflection_coeff| must be <= 1")
        if self.rcs_m2 <= 0:
            raise ValueError("rcs_m2 must be > 0")

    @property
    def direction(self) -> np.ndarray:
        a = math.radians(self.angle_deg)
        return np.array([math.cos(a), math.sin(a)])

    @property
    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        half = 0.5 * self.width_m * self.direction
        return c - half, c + half


@dataclass(frozen=True)
class Obstacle:
    """Blocking segment: paths crossing it lose `blockage_loss_db` (power dB)."""

    p1: tuple[float, float]
    p2: tuple[float, float]
    blockage_loss_db: float = 20.0

    def __post_init__(self):
        if self.blockage_loss_db < 0:
            raise ValueError("blockage_loss_db must be >= 0")
        if np.allclose(self.p1, self.p2):
            raise ValueError("obstacle endpoints coincide")


@dataclass(frozen=True)
class Scene:
    """BS pose plus the static environment (targets, mirrors, obstacles)."""

    bs_position: tuple[float, float] = (0.0, 0.0)
    bs_boresight: tuple[float, float] = (0.0, 1.0)
    targets: tuple[Target, ...] = ()
    reflectors: tuple[Reflector, ...] = ()
    obstacles: tuple[Obstacle, ...] = ()

    def __post_init__(self):
        norm = math.hypot(*self.bs_boresight)
        if not math.isclose(norm, 1.0, rel_tol=1e-9):
            raise ValueError("bs_boresight must be a unit vector")

    @property
    def boresight(self) -> np.ndarray:
        return np.asarray(self.bs_boresight, dtype=float)

    @property
    def boresight_normal(self) -> np.ndarray:
        """Positive-angle direction: boresight rotated clockwise 90 degrees."""
        bx, by = self.bs_boresight
        return np.array([by, -bx])


@dataclass(frozen=True)
class NoiseConfig:
    """Per-resource-element SNR relative to the gain model's 1 m reference.

    The complex noise variance is 10^(-snr_db/10) times the squared magnitude
    of the relevant gain model evaluated at 1 m with unit RCS / unit
    reflection and no array gain.  `snr_db = inf` disables noise.  A fixed
    seed yields a bit-identical realization.
    """

    snr_db: float = 30.0
    rng_seed: int = 0


@dataclass(frozen=True)
class PathParams:
    """One propagation path as seen from the BS array.

    `complex_gain` carries the mode-appropriate amplitude: the one-way Friis
    gain for downlink paths, or the two-way radar-equation gain for echo
    paths (see :func:`compute_paths`).  `blocked_db` is the total obstacle
    loss over the path as used (both legs counted for echoes).
    """

    geometric_length_m: float
    angle_rad: float
    doppler_hz: float
    complex_gain: complex
    blocked_db: float = 0.0
    via_reflector: int | None = None


@dataclass(frozen=True)
class ChannelObservation:
    """Received N_sc x M_symb time-frequency matrix for one frame."""

    matrix: np.ndarray
    frame: FrameSpec
    kind: str  # "bs_echo" | "ue_downlink"


# ---------------------------------------------------------------------------
# planar geometry helpers
# ---------------------------------------------------------------------------


def _cross(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def segment_intersection_params(p1, p2, q1, q2):
    """(t, s) with p1 + t*(p2-p1) == q1 + s*(q2-q1), or None if parallel."""
    p1 = np.asarray(p1, float)
    d1 = np.asarray(p2, float) - p1
    q1 = np.asarray(q1, float)
    d2 = np.asarray(q2, float) - q1
    denom = _cross(d1, d2)
    scale = max(np.abs(d1).max(), np.abs(d2).max(), 1.0)
    if abs(denom) < 1e-12 * scale * scale:
        return None
    w = q1 - p1
    return _cross(w, d2) / denom, _cross(w, d1) / denom


def segments_intersect(p1, p2, q1, q2) -> bool:
    """True if the closed segments share a point (endpoint touches count)."""
    ts = segment_intersection_params(p1, p2, q1, q2)
    if ts is None:
        # parallel: collinear overlap check
        p1 = np.asarray(p1, float)
        d1 = np.asarray(p2, float) - p1
        w = np.asarray(q1, float) - p1
        if abs(_cross(w, d1)) > 1e-9 * max(np.linalg.norm(d1), 1.0):
            return False
        denom = d1 @ d1
        if denom == 0.0:
            return False
        ta = (w @ d1) / denom
        tb = ((np.asarray(q2, float) - p1) @ d1) / denom
        lo, hi = min(ta, tb), max(ta, tb)
        return hi >= 0.0 and lo <= 1.0
    t, s = ts
    return -1e-12 <= t <= 1 + 1e-12 and -1e-12 <= s <= 1 + 1e-12


def path_blockage_db(scene: Scene, a, b, endpoint_eps: float = _ENDPOINT_T_EPS) -> float:
    """Summed obstacle loss over segment a-b, ignoring crossings within
    `endpoint_eps` (parametric) of either endpoint so that a target sitting
    on an obstacle does not shadow itself."""
    loss = 0.0
    for obs in scene.obstacles:
        ts = segment_intersection_params(a, b, obs.p1, obs.p2)
        if ts is None:
            continue
        t, s = ts
        if endpoint_eps < t < 1.0 - endpoint_eps and -1e-12 <= s <= 1 + 1e-12:
            loss += obs.blockage_loss_db
    return loss


def angle_from_boresight(scene: Scene, point) -> float:
    """Signed angle of `point` from the array broadside at the BS."""
    u = np.asarray(point, float) - np.asarray(scene.bs_position, float)
    along = float(u @ scene.boresight)
    across = float(u @ scene.boresight_normal)
    return math.atan2(across, along)


def position_from_range_angle(scene: Scene, range_m: float, angle_rad: float) -> np.ndarray:
    """Inverse of the BS polar parametrization used for detections."""
    return (
        np.asarray(scene.bs_position, float)
        + range_m * math.sin(angle_rad) * scene.boresight_normal
        + range_m * math.cos(angle_rad) * scene.boresight
    )


def mirror_point(reflector: Reflector, point) -> np.ndarray:
    """Mirror `point` across the reflector's infinite line."""
    c = np.asarray(reflector.center, float)
    u = reflector.direction
    n = np.array([u[1], -u[0]])
    d = float((np.asarray(point, float) - c) @ n)
    return np.asarray(point, float) - 2.0 * d * n


def reflection_point(reflector: Reflector, source, destination):
    """Specular bounce point on the reflector segment for source->destination,
    or None when the mirrored ray misses the segment."""
    img = mirror_point(reflector, source)
    e1, e2 = reflector.endpoints
    ts = segment_intersection_params(img, destination, e1, e2)
    if ts is None:
        return None
    t, s = ts
    if not (1e-9 < t < 1.0 - 1e-9 and -1e-12 <= s <= 1 + 1e-12):
        return None
    return img + t * (np.asarray(destination, float) - img)


# ---------------------------------------------------------------------------
# path computation
# ---------------------------------------------------------------------------


def _friis_gain(wavelength_m: float, length_m: float) -> float:
    return wavelength_m / (4.0 * math.pi * length_m)


def _radar_gain(wavelength_m: float, length_m: float, rcs_m2: float) -> float:
    return math.sqrt(rcs_m2) * wavelength_m / ((4.0 * math.pi) ** 1.5 * length_m**2)


def compute_paths(
    scene: Scene,
    terminal: Target,
    wavelength_m: float,
    kind: str = "downlink",
) -> list[PathParams]:
    """Direct and single-bounce paths between the BS and `terminal`.

    kind="downlink": one-way gains lambda/(4*pi*r) (times the reflection
    coefficient per bounce), Doppler v_radial/lambda, phase -2*pi*r/lambda.
    kind="echo": two-way radar gains sqrt(RCS)*lambda/((4*pi)^1.5*r^2) (the
    reflection coefficient applies twice), Doppler 2*v_radial/lambda, phase
    over the round trip; `blocked_db` counts the obstacle loss of both legs.
    Approaching targets have positive Doppler.  Image-source paths are only
    returned when both legs are unobstructed.
    """
    if kind not in ("downlink", "echo"):
        raise ValueError(f"unknown path kind: {kind!r}")
    bs = np.asarray(scene.bs_position, float)
    pos = np.asarray(terminal.position, float)
    vel = np.asarray(terminal.velocity, float)
    if np.linalg.norm(pos - bs) < 1e-9:
        raise ValueError("terminal coincides with the BS position")
    two_way = kind == "echo"
    paths = []

    def make(length, angle, v_radial, refl_product, blocked_one_way, via):
        if two_way:
            gain = _radar_gain(wavelength_m, length, terminal.rcs_m2)
            gain *= abs(refl_product) ** 2
            phase = -2.0 * math.pi * (2.0 * length) / wavelength_m
            phase += 2.0 * np.angle(refl_product) if refl_product != 1.0 else 0.0
            doppler = 2.0 * v_radial / wavelength_m
            blocked = 2.0 * blocked_one_way
        else:
            gain = _friis_gain(wavelength_m, length) * abs(refl_product)
            phase = -2.0 * math.pi * length / wavelength_m + np.angle(refl_product)
            doppler = v_radial / wavelength_m
            blocked = blocked_one_way
        return PathParams(
            geometric_length_m=length,
            angle_rad=angle,
            doppler_hz=doppler,
            complex_gain=gain * np.exp(1j * phase),
            blocked_db=blocked,
            via_reflector=via,
        )

    # direct path (kept even when blocked; the loss is finite)
    r = float(np.linalg.norm(pos - bs))
    v_radial = float(vel @ (bs - pos)) / r if vel.any() else 0.0
    paths.append(
        make(
            r,
            angle_from_boresight(scene, pos),
            v_radial,
            1.0,
            path_blockage_db(scene, bs, pos),
            None,
        )
    )

    for idx, refl in enumerate(scene.reflectors):
        if refl.reflection_coeff == 0:
            continue
        bounce = reflection_point(refl, bs, pos)
        if bounce is None:
            continue
        if path_blockage_db(scene, bs, bounce) > 0.0:
            continue
        if path_blockage_db(scene, bounce, pos) > 0.0:
            continue
        img = mirror_point(refl, bs)
        length = float(np.linalg.norm(pos - img))
        if length < 1e-9:
            continue
        v_radial = float(vel @ (img - pos)) / length if vel.any() else 0.0
        paths.append(
            make(
                length,
                angle_from_boresight(scene, bounce),
                v_radial,
                complex(refl.reflection_coeff),
                0.0,
                idx,
            )
        )
    return paths


def scene_echo_paths(
    scene: Scene,
    wavelength_m: float,
    extra_targets: tuple[Target, ...] = (),
) -> list[PathParams]:
    """Direct (single-scatter) echo paths of every scene target, the
    reflector bodies included as point scatterers at their centers.

    Round trips involving a mirror bounce are multi-bounce and deliberately
    excluded: each sensing target contributes exactly one echo.
    """
    paths = []
    for target in tuple(scene.targets) + tuple(extra_targets):
        direct = compute_paths(scene, target, wavelength_m, kind="echo")[0]
        paths.append(direct)
    for refl in scene.reflectors:
        body = Target(kind="static_scatterer", position=tuple(refl.center), rcs_m2=refl.rcs_m2)
        paths.append(compute_paths(scene, body, wavelength_m, kind="echo")[0])
    return paths


# ---------------------------------------------------------------------------
# frequency-domain synthesis (production path)
# ---------------------------------------------------------------------------


def _codebook(num_beams: int, num_elements: int) -> np.ndarray:
    return np.stack(
        [dft_beam_vector(q, num_beams, num_elements) for q in range(num_beams)], axis=1
    )


def _array_factors(
    theta: float, schedule: np.ndarray, cfg: OfdmConfig, num_beams: int, num_elements: int
) -> np.ndarray:
    """beta(theta)^T f_q for the scheduled beam of every symbol."""
    beta = steering_vector(theta, num_elements, cfg.antenna_spacing_m, cfg.wavelength_m)
    codebook = _codebook(num_beams, num_elements)
    per_beam = beta @ codebook
    return per_beam[schedule]


def _reference_amplitude(cfg: OfdmConfig, kind: str) -> float:
    lam = cfg.wavelength_m
    return _radar_gain(lam, 1.0, 1.0) if kind == "bs_echo" else _friis_gain(lam, 1.0)


def _noise_matrix(shape, noise: NoiseConfig, ref_amp: float) -> np.ndarray:
    if noise is None or math.isinf(noise.snr_db):
        return np.zeros(shape, dtype=complex)
    sigma2 = ref_amp**2 * 10.0 ** (-noise.snr_db / 10.0)
    rng = np.random.default_rng(noise.rng_seed)
    scale = math.sqrt(sigma2 / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _synthesize(
    frame: FrameSpec,
    cfg: OfdmConfig,
    terms,
    noise: NoiseConfig,
    kind: str,
) -> ChannelObservation:
    """Closed-form accumulation of per-path phase ramps over the grid.

    `terms` yields (tau_s, doppler_hz, gamma_per_symbol)."""
    n_sc, m_symb = frame.symbol_grid.shape
    n = np.arange(n_sc)
    m = np.arange(m_symb)
    total = np.zeros((n_sc, m_symb), dtype=complex)
    df = cfg.subcarrier_spacing_hz
    for tau, doppler, gamma in terms:
        sub_phase = np.exp(-2j * np.pi * tau * df * n)
        sym_phase = np.exp(2j * np.pi * doppler * cfg.symbol_duration_s * m)
        total += np.outer(sub_phase, gamma * sym_phase)
    y = frame.symbol_grid * total
    y += _noise_matrix(y.shape, noise, _reference_amplitude(cfg, kind))
    return ChannelObservation(matrix=y, frame=frame, kind=kind)


def monostatic_echo_matrix(
    frame: FrameSpec,
    paths,
    cfg: OfdmConfig,
    noise: NoiseConfig | None = None,
    rx_schedule: np.ndarray | None = None,
) -> ChannelObservation:
    """BS-side echo observation of `frame` through echo-mode paths.

    Receive beams default to the transmit schedule (monostatic co-pointing).
    Every round-trip delay must stay below the CP duration.
    """
    if rx_schedule is None:
        rx_schedule = frame.beam_schedule
    rx_schedule = np.asarray(rx_schedule)
    if rx_schedule.shape != frame.beam_schedule.shape:
        raise ValueError("rx_schedule must cover every symbol of the frame")
    terms = []
    for path in paths:
        tau = 2.0 * path.geometric_length_m / SPEED_OF_LIGHT
        if tau >= cfg.cp_duration_s:
            raise ValueError(
                f"round-trip delay {tau:.3e}s reaches the CP duration "
                f"{cfg.cp_duration_s:.3e}s; inter-symbol interference is not modeled"
            )
        af_tx = _array_factors(
            path.angle_rad, frame.beam_schedule, cfg, frame.num_beams, cfg.num_tx_elements
        )
        af_rx = _array_factors(
            path.angle_rad, rx_schedule, cfg, frame.num_beams, cfg.num_rx_elements
        )
        amp = path.complex_gain * 10.0 ** (-path.blocked_db / 20.0)
        terms.append((tau, path.doppler_hz, amp * af_rx * af_tx))
    return _synthesize(frame, cfg, terms, noise, "bs_echo")


def downlink_observation(
    frame: FrameSpec,
    paths,
    cfg: OfdmConfig,
    noise: NoiseConfig | None = None,
) -> ChannelObservation:
    """Single-antenna UE observation of `frame` through downlink-mode paths."""
    terms = []
    for path in paths:
        tau = path.geometric_length_m / SPEED_OF_LIGHT
        if tau >= cfg.cp_duration_s:
            raise ValueError(
                f"path delay {tau:.3e}s reaches the CP duration "
                f"{cfg.cp_duration_s:.3e}s; inter-symbol interference is not modeled"
            )
        af_tx = _array_factors(
            path.angle_rad, frame.beam_schedule, cfg, frame.num_beams, cfg.num_tx_elements
        )
        amp = path.complex_gain * 10.0 ** (-path.blocked_db / 20.0)
        terms.append((tau, path.doppler_hz, amp * af_tx))
    return _synthesize(frame, cfg, terms, noise, "ue_downlink")


# ---------------------------------------------------------------------------
# time-domain reference synthesis (verification oracle)
# ---------------------------------------------------------------------------


def _sampling_layout(cfg: OfdmConfig):
    """Samples per symbol / CP at rate B; requires B = N_sc * delta_f."""
    b = cfg.bandwidth_hz
    if not math.isclose(b, cfg.num_subcarriers * cfg.subcarrier_spacing_hz, rel_tol=1e-9):
        raise ValueError(
            "time-domain synthesis requires bandwidth = num_subcarriers * "
            "subcarrier_spacing (critically sampled layout)"
        )
    s = b * cfg.symbol_duration_s
    if not math.isclose(s, round(s), abs_tol=1e-6):
        raise ValueError("symbol_duration_s must span an integer number of samples")
    s = round(s)
    return s, s - cfg.num_subcarriers


def modulate_frame(frame: FrameSpec, cfg: OfdmConfig) -> np.ndarray:
    """Scalar baseband sample stream of the frame at rate B (per antenna
    element before beamforming): each symbol is the tone sum of its grid
    column, CP included."""
    s_len, cp_len = _sampling_layout(cfg)
    n_sc, m_symb = frame.symbol_grid.shape
    p = np.arange(s_len) - cp_len
    basis = np.exp(2j * np.pi * np.outer(p, np.arange(n_sc)) / n_sc)
    blocks = basis @ frame.symbol_grid  # (S, M)
    return blocks.reshape(-1, order="F")


def time_domain_reference_synthesis(
    frame: FrameSpec,
    paths,
    cfg: OfdmConfig,
    rx_schedule: np.ndarray | None = None,
) -> np.ndarray:
    """Brute-force noiseless echo stream: per path, evaluate the transmitted
    waveform (tone sums on the symbol supports) at delayed sample instants,
    apply beamforming per originating symbol, then Doppler and receive
    combining per received block.  Returns the combined scalar stream; pass
    it through :func:`demodulate_time_stream` to compare against
    :func:`monostatic_echo_matrix`.

    The waveform is evaluated analytically at the delayed instants, so any
    delay below the CP duration reproduces the closed form exactly (no
    fractional-delay interpolation is involved).
    """
    if rx_schedule is None:
        rx_schedule = frame.beam_schedule
    rx_schedule = np.asarray(rx_schedule)
    if rx_schedule.shape != frame.beam_schedule.shape:
        raise ValueError("rx_schedule must cover every symbol of the frame")
    s_len, cp_len = _sampling_layout(cfg)
    n_sc, m_symb = frame.symbol_grid.shape
    b = cfg.bandwidth_hz
    df = cfg.subcarrier_spacing_hz
    t_cp = cfg.cp_duration_s
    total = np.zeros(m_symb * s_len, dtype=complex)
    n = np.arange(n_sc)
    block_idx = np.repeat(np.arange(m_symb), s_len)
    for path in paths:
        tau = 2.0 * path.geometric_length_m / SPEED_OF_LIGHT
        if tau >= t_cp:
            raise ValueError("round-trip delay reaches the CP duration")
        d = math.ceil(tau * b - 1e-12)
        # sample instants of one delayed symbol, relative to its own start
        t_local = (d + np.arange(s_len)) / b - tau
        basis = np.exp(2j * np.pi * df * np.outer(t_local - t_cp, n))
        blocks = basis @ frame.symbol_grid  # (S, M): delayed samples per symbol
        af_tx = _array_factors(
            path.angle_rad, frame.beam_schedule, cfg, frame.num_beams, cfg.num_tx_elements
        )
        stream = np.zeros(m_symb * s_len + d + s_len, dtype=complex)
        starts = np.arange(m_symb) * s_len + d
        for m in range(m_symb):  # symbol supports tile without overlap
            stream[starts[m] : starts[m] + s_len] = blocks[:, m] * af_tx[m]
        stream = stream[: m_symb * s_len]
        af_rx = _array_factors(
            path.angle_rad, rx_schedule, cfg, frame.num_beams, cfg.num_rx_elements
        )
        sym_phase = np.exp(
            2j * np.pi * path.doppler_hz * cfg.symbol_duration_s * np.arange(m_symb)
        )
        amp = path.complex_gain * 10.0 ** (-path.blocked_db / 20.0)
        total += stream * (amp * af_rx * sym_phase)[block_idx]
    return total


def demodulate_time_stream(samples: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Segment into symbol blocks, strip the CP, FFT each block (normalized
    by the window length) -> N_sc x M_symb matrix."""
    s_len, cp_len = _sampling_layout(cfg)
    samples = np.asarray(samples)
    if samples.size % s_len:
        raise ValueError("sample stream does not tile into whole symbols")
    m_symb = samples.size // s_len
    blocks = samples.reshape(m_symb, s_len)[:, cp_len:]
    return np.fft.fft(blocks, axis=1).T / cfg.num_subcarriers
