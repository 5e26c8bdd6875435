"""Radar estimation pipeline: equalization, beam slicing, Periodogram,
MUSIC (spatial smoothing + forward-backward averaging), Capon, range-Doppler
maps, clutter rejection and density clustering into point detections.

All delay/range spectra are indexed by one-way range in meters; the
underlying steering phases use the round-trip delay 2r/c because the channel
matrices come from monostatic echoes.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .channel import Scene, ChannelObservation, position_from_range_angle
from .waveform import SPEED_OF_LIGHT, FrameSpec, beam_angles

ESTIMATORS = ("periodogram", "music", "capon")
POWER_FAITHFUL_ESTIMATORS = ("periodogram", "capon")
AUTO_ORDER_EIGENVALUE_RATIO = 1e-2


@dataclass(frozen=True)
class RangeAngleSpectrum:
    """Real power spectrum over (range bin, beam)."""

    power: np.ndarray  # (num bins, Q), elementwise >= 0
    range_bin_m: float
    angles_rad: np.ndarray
    estimator: str
    range_start_m: float = 0.0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator: {self.estimator!r}")
        if self.power.ndim != 2 or self.power.shape[1] != self.angles_rad.size:
            raise ValueError("power must be (range bins x beams)")

    @property
    def range_axis_m(self) -> np.ndarray:
        return self.range_start_m + self.range_bin_m * np.arange(self.power.shape[0])


@dataclass(frozen=True)
class MusicConfig:
    """Subspace estimator knobs shared by MUSIC and Capon."""

    smoothing_rho: float = 0.4
    model_order: int | str = "auto"
    delay_grid: tuple[float, float, float] = (0.0, 60.0, 0.05)  # start/stop/step, meters
    diagonal_loading: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.smoothing_rho < 1.0:
            raise ValueError("smoothing_rho must lie in (0, 1)")
        start, stop, step = self.delay_grid
        if step <= 0 or stop <= start:
            raise ValueError("delay_grid must be (start, stop, step) with step > 0")
        if self.diagonal_loading < 0:
            raise ValueError("diagonal_loading must be >= 0")

    def range_grid_m(self) -> np.ndarray:
        start, stop, step = self.delay_grid
        count = int(round((stop - start) / step))
        return start + step * np.arange(count)


@dataclass(frozen=True)
class Detection:
    """One clustered target: cluster-center range/angle and peak power."""

    range_m: float
    angle_rad: float
    power_db: float
    position_xy: tuple[float, float]

    def __post_init__(self):
        if self.range_m <= 0:
            raise ValueError("detection range must be > 0")


# ---------------------------------------------------------------------------
# equalization and slicing
# ---------------------------------------------------------------------------


def equalize_known_data(obs: ChannelObservation, frame: FrameSpec) -> np.ndarray:
    """Element-wise division Y / b removing the known transmitted symbols."""
    b = frame.symbol_grid
    if b.shape != obs.matrix.shape:
        raise ValueError("observation and frame grids disagree in shape")
    if not np.all(np.abs(b) > 0):
        raise ValueError("frame grid contains zero symbols; cannot equalize")
    return obs.matrix / b


def slice_beams(h: np.ndarray, symbols_per_subframe: int, num_beams: int) -> list[np.ndarray]:
    """Split the channel matrix into one N_sc x M_q block per swept beam;
    trailing symbols beyond Q*M_q are discarded."""
    mq, q = symbols_per_subframe, num_beams
    if q < 1 or mq < 1:
        raise ValueError("num_beams and symbols_per_subframe must be >= 1")
    if q * mq > h.shape[1]:
        raise ValueError(
            f"cannot slice {q} beams of {mq} symbols from {h.shape[1]} columns"
        )
    return [h[:, i * mq : (i + 1) * mq] for i in range(q)]


# ---------------------------------------------------------------------------
# periodogram
# ---------------------------------------------------------------------------


def periodogram_range(hq: np.ndarray, n_idft: int) -> np.ndarray:
    """Zero-padded unnormalized IDFT power profile averaged over symbols:
    P[i] = sum_m |IDFT(hq[:, m])[i]|^2 / (N_sc * M_q)."""
    n_sc, mq = hq.shape
    if n_idft < n_sc:
        raise ValueError("n_idft must be >= the number of subcarriers")
    transformed = np.fft.ifft(hq, n=n_idft, axis=0) * n_idft
    return (np.abs(transformed) ** 2).sum(axis=1) / (n_sc * mq)


def range_from_bin(bin_index: int, delta_f: float, n_idft: int) -> float:
    """One-way range of an IDFT bin: bin * c / (2 * delta_f * n_idft)."""
    if not 0 <= bin_index < n_idft:
        raise ValueError("bin index outside the IDFT grid")
    return bin_index * SPEED_OF_LIGHT / (2.0 * delta_f * n_idft)


def range_doppler_map(h_beam: np.ndarray, n_idft: int, n_dopp: int) -> np.ndarray:
    """Range-Doppler power map of a constant-beam channel matrix: unnormalized
    IDFT over subcarriers, DFT over symbols, squared magnitude averaged by
    the data size.  Doppler bin k corresponds to k / (n_dopp * T_symb) Hz."""
    n_sc, m_symb = h_beam.shape
    if m_symb < 2:
        raise ValueError("range-Doppler processing needs at least 2 symbols")
    if n_idft < n_sc or n_dopp < m_symb:
        raise ValueError("transform sizes must cover the data")
    fast = np.fft.ifft(h_beam, n=n_idft, axis=0) * n_idft
    slow = np.fft.fft(fast, n=n_dopp, axis=1)
    return (np.abs(slow) ** 2) / (n_sc * m_symb)


# ---------------------------------------------------------------------------
# smoothed covariance, MUSIC, Capon
# ---------------------------------------------------------------------------


def smoothing_window_length(num_subcarriers: int, rho: float) -> int:
    ell = int(math.floor(rho * num_subcarriers))
    if ell < 2:
        raise ValueError("smoothing window floor(rho * N_sc) must be >= 2")
    if num_subcarriers - ell + 1 < 1:
        raise ValueError("no smoothing snapshots available")
    return ell


def mssp_covariance(hq: np.ndarray, rho: float) -> np.ndarray:
    """Spatially smoothed covariance: every length-L subcarrier window of
    every symbol is one snapshot; R' = sum(s s^H) / (N_sub * M_q).

    Entries are accumulated per diagonal via running sums, which is
    algebraically the snapshot Gram matrix at a fraction of the flops.
    """
    n_sc, mq = hq.shape
    ell = smoothing_window_length(n_sc, rho)
    n_sub = n_sc - ell + 1
    r = np.zeros((ell, ell), dtype=complex)
    for lag in range(ell):
        z = (hq[lag:, :] * np.conj(hq[: n_sc - lag, :])).sum(axis=1)
        csum = np.cumsum(z)
        hi = csum[n_sub - 1 : n_sub - 1 + ell - lag]
        lo = np.concatenate(([0.0], csum[: ell - lag - 1]))
        diag = hi - lo  # entry (i, i-lag) for i = lag .. L-1
        idx = np.arange(ell - lag)
        r[idx + lag, idx] = diag
        if lag:
            r[idx, idx + lag] = np.conj(diag)
    return r / (n_sub * mq)


def forward_backward_average(r: np.ndarray) -> np.ndarray:
    """(R + U conj(R) U) / 2 with U the exchange (anti-identity) matrix."""
    flipped = np.conj(r)[::-1, ::-1]
    return (r + flipped) / 2.0


def mssp_fbcm_covariance(hq: np.ndarray, rho: float) -> np.ndarray:
    """Smoothed forward-backward covariance used by MUSIC and Capon."""
    return forward_backward_average(mssp_covariance(hq, rho))


def _check_hermitian(r: np.ndarray):
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError("covariance must be square")
    scale = np.abs(r).max()
    if scale > 0 and not np.allclose(r, r.conj().T, atol=1e-9 * scale, rtol=1e-9):
        raise ValueError("covariance is not Hermitian")


def _delay_steering(ell: int, ranges_m: np.ndarray, delta_f: float) -> np.ndarray:
    taus = 2.0 * ranges_m / SPEED_OF_LIGHT
    n = np.arange(ell)
    return np.exp(-2j * np.pi * delta_f * np.outer(n, taus))


def select_model_order(eigenvalues: np.ndarray, model_order) -> int:
    """Signal-subspace dimension: explicit, or eigenvalues above 1e-2 of the
    largest under the "auto" rule; always in [1, L-1]."""
    ell = eigenvalues.size
    if model_order == "auto":
        top = eigenvalues.max()
        order = int(np.sum(eigenvalues > AUTO_ORDER_EIGENVALUE_RATIO * top)) if top > 0 else 1
        return min(max(order, 1), ell - 1)
    order = int(model_order)
    if not 1 <= order < ell:
        raise ValueError(f"model order {order} must lie in [1, {ell})")
    return order


def music_spectrum(r: np.ndarray, cfg: MusicConfig, delta_f: float) -> np.ndarray:
    """MUSIC pseudo-spectrum over the configured range grid:
    P(tau) = 1 / ||E_n^H x(tau)||^2 with E_n the noise subspace."""
    _check_hermitian(r)
    eigvals, eigvecs = np.linalg.eigh(r)
    order = select_model_order(eigvals, cfg.model_order)
    noise_basis = eigvecs[:, : r.shape[0] - order]
    x = _delay_steering(r.shape[0], cfg.range_grid_m(), delta_f)
    denom = (np.abs(noise_basis.conj().T @ x) ** 2).sum(axis=0)
    return 1.0 / np.maximum(denom, 1e-300)


def capon_spectrum(r: np.ndarray, cfg: MusicConfig, delta_f: float) -> np.ndarray:
    """Capon/MVDR spectrum P(tau) = 1 / (x^H R_dl^-1 x) with diagonal loading
    R_dl = R + eps * (trace(R)/L) * I."""
    _check_hermitian(r)
    if not np.any(r):
        raise ValueError("covariance is identically zero")
    ell = r.shape[0]
    loaded = r + cfg.diagonal_loading * (np.trace(r).real / ell) * np.eye(ell)
    factor = cho_factor(loaded)
    x = _delay_steering(ell, cfg.range_grid_m(), delta_f)
    denom = np.real(np.sum(np.conj(x) * cho_solve(factor, x), axis=0))
    return 1.0 / np.maximum(denom, 1e-300)


# ---------------------------------------------------------------------------
# range-angle spectra
# ---------------------------------------------------------------------------


def build_range_angle_spectrum(
    slices,
    estimator: str,
    delta_f: float,
    n_idft: int | None = None,
    music_cfg: MusicConfig | None = None,
) -> RangeAngleSpectrum:
    """Apply the chosen per-beam estimator to every slice and concatenate the
    columns into the range-angle power matrix."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator: {estimator!r}")
    if not slices:
        raise ValueError("need at least one beam slice")
    shape = slices[0].shape
    if any(s.shape != shape for s in slices):
        raise ValueError("beam slices disagree in shape")
    num_beams = len(slices)
    if estimator == "periodogram":
        n_idft = shape[0] if n_idft is None else n_idft
        columns = [periodogram_range(s, n_idft) for s in slices]
        bin_m = SPEED_OF_LIGHT / (2.0 * delta_f * n_idft)
        start_m = 0.0
    else:
        cfg = music_cfg if music_cfg is not None else MusicConfig()
        func = music_spectrum if estimator == "music" else capon_spectrum
        columns = [func(mssp_fbcm_covariance(s, cfg.smoothing_rho), cfg, delta_f) for s in slices]
        start_m, _, bin_m = cfg.delay_grid
    return RangeAngleSpectrum(
        power=np.stack(columns, axis=1),
        range_bin_m=bin_m,
        angles_rad=beam_angles(num_beams),
        estimator=estimator,
        range_start_m=start_m,
    )


def subtract_clutter(
    spectrum: RangeAngleSpectrum, static: RangeAngleSpectrum
) -> RangeAngleSpectrum:
    """Clutter-map rejection max(P - P_static, 0); only meaningful for the
    power-faithful estimators (periodogram, Capon)."""
    if spectrum.estimator not in POWER_FAITHFUL_ESTIMATORS:
        raise ValueError("clutter subtraction requires a power-faithful estimator")
    if spectrum.estimator != static.estimator:
        raise ValueError("clutter map estimator does not match")
    if spectrum.power.shape != static.power.shape:
        raise ValueError("clutter map shape does not match")
    return RangeAngleSpectrum(
        power=np.maximum(spectrum.power - static.power, 0.0),
        range_bin_m=spectrum.range_bin_m,
        angles_rad=spectrum.angles_rad,
        estimator=spectrum.estimator,
        range_start_m=spectrum.range_start_m,
    )


# ---------------------------------------------------------------------------
# clustering into detections
# ---------------------------------------------------------------------------


def _dbscan(points: np.ndarray, eps: float, min_points: int) -> np.ndarray:
    """Labels per point, -1 for noise (classic DBSCAN, KD-tree neighbors)."""
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points, r=eps)
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    core = np.array([len(nb) >= min_points for nb in neighborhoods])
    next_label = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = next_label
        stack = [seed]
        while stack:
            current = stack.pop()
            if not core[current]:
                continue
            for neighbor in neighborhoods[current]:
                if labels[neighbor] == -1:
                    labels[neighbor] = next_label
                    stack.append(neighbor)
        next_label += 1
    return labels


def extract_detections(
    spectrum: RangeAngleSpectrum,
    scene: Scene,
    threshold_db_below_peak: float = 25.0,
    cluster_eps_m: float = 0.5,
    min_points: int = 1,
) -> list[Detection]:
    """Threshold the spectrum relative to its global peak, map surviving
    cells to plane positions, cluster them, and emit one detection per
    cluster at the power-weighted centroid (in range/angle)."""
    power = spectrum.power
    peak = power.max(initial=0.0)
    if peak <= 0.0:
        return []
    mask = power >= peak * 10.0 ** (-threshold_db_below_peak / 10.0)
    ranges = spectrum.range_axis_m
    bin_idx, beam_idx = np.nonzero(mask)
    keep = ranges[bin_idx] > 0
    bin_idx, beam_idx = bin_idx[keep], beam_idx[keep]
    if bin_idx.size == 0:
        return []
    cell_r = ranges[bin_idx]
    cell_theta = spectrum.angles_rad[beam_idx]
    cell_power = power[bin_idx, beam_idx]
    points = np.stack(
        [position_from_range_angle(scene, r, t) for r, t in zip(cell_r, cell_theta)]
    )
    labels = _dbscan(points, cluster_eps_m, min_points)
    detections = []
    for label in range(labels.max() + 1):
        members = labels == label
        w = cell_power[members]
        r_bar = float(np.average(cell_r[members], weights=w))
        theta_bar = float(np.average(cell_theta[members], weights=w))
        pos = position_from_range_angle(scene, r_bar, theta_bar)
        detections.append(
            Detection(
                range_m=r_bar,
                angle_rad=theta_bar,
                power_db=10.0 * math.log10(w.max()),
                position_xy=(float(pos[0]), float(pos[1])),
            )
        )
    detections.sort(key=lambda d: d.power_db, reverse=True)
    return detections


# ---------------------------------------------------------------------------
# file export
# ---------------------------------------------------------------------------


def save_spectrum_csv(spectrum: RangeAngleSpectrum, csv_path, sidecar_path):
    """Spectrum matrix as CSV (row = range bin, column = beam) with a JSON
    sidecar describing the axes; 9 significant digits."""
    np.savetxt(csv_path, spectrum.power, fmt="%.9g", delimiter=",")
    sidecar = {
        "estimator": spectrum.estimator,
        "range_bin_m": spectrum.range_bin_m,
        "range_start_m": spectrum.range_start_m,
        "num_range_bins": int(spectrum.power.shape[0]),
        "angles_deg": [float(np.degrees(a)) for a in spectrum.angles_rad],
    }
    if spectrum.estimator == "periodogram":
        sidecar["n_idft"] = int(spectrum.power.shape[0])
    else:
        sidecar["delay_grid_m"] = [
            spectrum.range_start_m,
            spectrum.range_start_m + spectrum.range_bin_m * spectrum.power.shape[0],
            spectrum.range_bin_m,
        ]
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_detections_csv(detections, path):
    with open(path, "w") as fh:
        fh.write("range_m,angle_deg,power_db,x,y\n")
        for det in detections:
            fh.write(
                f"{det.range_m:.6f},{math.degrees(det.angle_rad):.6f},"
                f"{det.power_db:.6f},{det.position_xy[0]:.6f},{det.position_xy[1]:.6f}\n"
            )
