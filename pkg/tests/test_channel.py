"""Channel geometry and synthesis tests, including the time-domain oracle."""

import math

import numpy as np
import pytest

from ckmsim.channel import (
    NoiseConfig,
    Obstacle,
    PathParams,
    Reflector,
    Scene,
    Target,
    angle_from_boresight,
    compute_paths,
    demodulate_time_stream,
    downlink_observation,
    modulate_frame,
    monostatic_echo_matrix,
    position_from_range_angle,
    scene_echo_paths,
    time_domain_reference_synthesis,
)
from ckmsim.waveform import (
    SPEED_OF_LIGHT,
    OfdmConfig,
    SensingFrameSpec,
    build_isac_frame,
    build_sensing_frame,
)


def desk_cfg(n_sc=64, m_symb=24):
    return OfdmConfig(
        bandwidth_hz=n_sc * 78.125e3,
        num_subcarriers=n_sc,
        symbol_duration_s=16e-6,
        symbols_per_frame=m_symb,
    )


def desk_frame(cfg, num_beams=6, mq=4):
    return build_sensing_frame(
        cfg, SensingFrameSpec(num_beams=num_beams, symbols_per_subframe=mq, zc_root=5)
    )


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def test_direct_path_boresight():
    scene = Scene(bs_position=(0.0, 0.0))
    ue = Target(kind="ue", position=(0.0, 5.0))
    paths = compute_paths(scene, ue, 0.01)
    assert len(paths) == 1
    assert paths[0].geometric_length_m == pytest.approx(5.0)
    assert paths[0].angle_rad == pytest.approx(0.0)
    assert paths[0].blocked_db == 0.0
    assert paths[0].via_reflector is None


def test_angle_sign_convention():
    scene = Scene(bs_position=(3.2, 0.0))
    assert angle_from_boresight(scene, (6.4, 5.6)) > 0  # +x side is positive
    assert angle_from_boresight(scene, (0.0, 5.6)) < 0
    pos = position_from_range_angle(scene, 5.0, math.radians(30.0))
    np.testing.assert_allclose(pos, [3.2 + 2.5, 5.0 * math.cos(math.radians(30))])


def test_blocked_direct_path_gets_configured_loss():
    scene = Scene(
        bs_position=(0.0, 0.0),
        obstacles=(Obstacle(p1=(-1.0, 2.0), p2=(1.0, 2.0), blockage_loss_db=17.0),),
    )
    ue = Target(kind="ue", position=(0.0, 5.0))
    assert compute_paths(scene, ue, 0.01)[0].blocked_db == pytest.approx(17.0)


def test_target_on_obstacle_does_not_self_block():
    scene = Scene(
        bs_position=(0.0, 0.0),
        obstacles=(Obstacle(p1=(-1.0, 2.0), p2=(1.0, 2.0), blockage_loss_db=20.0),),
    )
    scatterer = Target(kind="static_scatterer", position=(0.0, 2.0))
    assert compute_paths(scene, scatterer, 0.01)[0].blocked_db == 0.0


def test_image_source_path_geometry():
    scene = Scene(
        bs_position=(0.0, 0.0),
        reflectors=(Reflector(center=(5.0, 0.0), width_m=4.0, angle_deg=90.0),),
    )
    ue = Target(kind="ue", position=(0.0, 2.0))
    paths = compute_paths(scene, ue, 0.01)
    assert len(paths) == 2
    image = paths[1]
    assert image.via_reflector == 0
    assert image.geometric_length_m == pytest.approx(math.sqrt(10.0**2 + 2.0**2))


def test_image_path_requires_bounce_on_segment():
    scene = Scene(
        bs_position=(0.0, 0.0),
        reflectors=(Reflector(center=(5.0, 10.0), width_m=1.0, angle_deg=90.0),),
    )
    ue = Target(kind="ue", position=(0.0, 2.0))
    assert len(compute_paths(scene, ue, 0.01)) == 1  # mirrored ray misses the segment


def test_image_path_dropped_when_leg_blocked():
    scene = Scene(
        bs_position=(0.0, 0.0),
        reflectors=(Reflector(center=(5.0, 0.0), width_m=4.0, angle_deg=90.0),),
        obstacles=(Obstacle(p1=(3.0, -1.5), p2=(3.0, 1.5), blockage_loss_db=20.0),),
    )
    ue = Target(kind="ue", position=(0.0, 2.0))
    paths = compute_paths(scene, ue, 0.01)
    assert all(p.via_reflector is None for p in paths)


def test_terminal_coincident_with_bs_raises():
    scene = Scene(bs_position=(1.0, 1.0))
    with pytest.raises(ValueError):
        compute_paths(scene, Target(kind="ue", position=(1.0, 1.0)), 0.01)


def test_geometry_reciprocity():
    obstacles = (Obstacle(p1=(1.0, 1.0), p2=(3.0, 1.5), blockage_loss_db=12.0),)
    fwd = Scene(bs_position=(0.0, 0.0), bs_boresight=(0.0, 1.0), obstacles=obstacles)
    rev = Scene(bs_position=(2.0, 4.0), bs_boresight=(0.0, -1.0), obstacles=obstacles)
    p_fwd = compute_paths(fwd, Target(kind="ue", position=(2.0, 4.0)), 0.01)[0]
    p_rev = compute_paths(rev, Target(kind="ue", position=(0.0, 0.0)), 0.01)[0]
    assert p_fwd.geometric_length_m == pytest.approx(p_rev.geometric_length_m)
    assert p_fwd.blocked_db == pytest.approx(p_rev.blocked_db)


def test_doppler_sign_approaching_positive():
    scene = Scene(bs_position=(0.0, 0.0))
    lam = 0.01
    closing = Target(kind="ue", position=(0.0, 5.0), velocity=(0.0, -1.0))
    receding = Target(kind="ue", position=(0.0, 5.0), velocity=(0.0, 2.0))
    assert compute_paths(scene, closing, lam, kind="echo")[0].doppler_hz == pytest.approx(2.0 / lam)
    assert compute_paths(scene, receding, lam)[0].doppler_hz == pytest.approx(-2.0 / lam)


def test_echo_gain_scales_with_sqrt_rcs():
    scene = Scene(bs_position=(0.0, 0.0))
    lam = 0.01
    base = Target(kind="static_scatterer", position=(1.0, 3.0), rcs_m2=1.0)
    doubled = Target(kind="static_scatterer", position=(1.0, 3.0), rcs_m2=2.0)
    g1 = compute_paths(scene, base, lam, kind="echo")[0].complex_gain
    g2 = compute_paths(scene, doubled, lam, kind="echo")[0].complex_gain
    assert abs(g2) / abs(g1) == pytest.approx(math.sqrt(2.0))


def test_scene_echo_paths_include_reflector_body():
    scene = Scene(
        bs_position=(0.0, 0.0),
        targets=(Target(kind="static_scatterer", position=(0.0, 3.0)),),
        reflectors=(Reflector(center=(4.0, 4.0), width_m=2.0, angle_deg=100.0, rcs_m2=2.0),),
    )
    paths = scene_echo_paths(scene, 0.01)
    assert len(paths) == 2
    assert all(p.via_reflector is None for p in paths)


# ---------------------------------------------------------------------------
# frequency-domain synthesis
# ---------------------------------------------------------------------------


def test_zero_targets_zero_matrix():
    cfg = desk_cfg()
    frame = desk_frame(cfg)
    obs = monostatic_echo_matrix(frame, [], cfg, noise=NoiseConfig(math.inf, 0))
    assert not np.any(obs.matrix)


def test_single_static_path_column_structure():
    cfg = desk_cfg()
    frame = desk_frame(cfg)
    path = PathParams(
        geometric_length_m=6.0, angle_rad=0.3, doppler_hz=0.0, complex_gain=0.5 - 0.2j
    )
    obs = monostatic_echo_matrix(frame, [path], cfg, noise=None)
    tau = 2 * 6.0 / SPEED_OF_LIGHT
    ramp = np.exp(-2j * np.pi * tau * cfg.subcarrier_spacing_hz * np.arange(cfg.num_subcarriers))
    h = obs.matrix / frame.symbol_grid
    for m in range(cfg.symbols_per_frame):
        gamma = h[:, m] / ramp
        np.testing.assert_allclose(gamma, gamma[0], rtol=1e-10)


def test_moving_target_symbol_phase_ratio():
    cfg = desk_cfg()
    frame = build_isac_frame(cfg, [], beam=0, num_beams=4, zc_root=5)
    nu = 321.0
    path = PathParams(
        geometric_length_m=4.0, angle_rad=0.0, doppler_hz=nu, complex_gain=1.0
    )
    obs = monostatic_echo_matrix(frame, [path], cfg, noise=None)
    h = obs.matrix / frame.symbol_grid
    ratio = h[0, 1:] / h[0, :-1]
    np.testing.assert_allclose(
        ratio, np.exp(2j * np.pi * nu * cfg.symbol_duration_s), rtol=1e-10
    )


def test_downlink_constant_magnitude_single_path():
    cfg = desk_cfg()
    frame = build_isac_frame(cfg, [], beam=2, num_beams=4, zc_root=5)
    path = PathParams(
        geometric_length_m=5.0, angle_rad=0.4, doppler_hz=10.0, complex_gain=1e-3 + 0j
    )
    obs = downlink_observation(frame, [path], cfg, noise=None)
    mags = np.abs(obs.matrix)
    np.testing.assert_allclose(mags, mags[0, 0], rtol=1e-10)


def test_downlink_blockage_is_twenty_db():
    cfg = desk_cfg()
    frame = build_isac_frame(cfg, [], beam=0, num_beams=4, zc_root=5)
    clear = PathParams(geometric_length_m=5.0, angle_rad=0.0, doppler_hz=0.0, complex_gain=1.0)
    blocked = PathParams(
        geometric_length_m=5.0, angle_rad=0.0, doppler_hz=0.0, complex_gain=1.0, blocked_db=20.0
    )
    y_clear = downlink_observation(frame, [clear], cfg, noise=None).matrix
    y_blocked = downlink_observation(frame, [blocked], cfg, noise=None).matrix
    np.testing.assert_allclose(np.abs(y_blocked), 0.1 * np.abs(y_clear), rtol=1e-12)


def test_two_opposite_paths_null_subcarrier():
    cfg = desk_cfg()
    frame = build_isac_frame(cfg, [], beam=0, num_beams=4, zc_root=5)
    n0 = 8
    df = cfg.subcarrier_spacing_hz
    tau1 = 4 / cfg.bandwidth_hz
    tau2 = tau1 + 1.0 / (2 * n0 * df)  # opposite phase at subcarrier n0
    r1 = tau1 * SPEED_OF_LIGHT
    r2 = tau2 * SPEED_OF_LIGHT
    p1 = PathParams(geometric_length_m=r1, angle_rad=0.0, doppler_hz=0.0, complex_gain=1.0)
    p2 = PathParams(geometric_length_m=r2, angle_rad=0.0, doppler_hz=0.0, complex_gain=1.0)
    y = downlink_observation(frame, [p1, p2], cfg, noise=None).matrix
    assert np.abs(y[n0]).max() < 1e-9 * np.abs(y[0]).max()


def test_noise_deterministic_under_seed():
    cfg = desk_cfg()
    frame = desk_frame(cfg)
    noise = NoiseConfig(snr_db=10.0, rng_seed=42)
    y1 = monostatic_echo_matrix(frame, [], cfg, noise=noise).matrix
    y2 = monostatic_echo_matrix(frame, [], cfg, noise=noise).matrix
    np.testing.assert_array_equal(y1, y2)
    y3 = monostatic_echo_matrix(frame, [], cfg, noise=NoiseConfig(10.0, 43)).matrix
    assert np.any(y3 != y1)


def test_delay_beyond_cp_rejected():
    cfg = desk_cfg()
    frame = desk_frame(cfg)
    too_far = PathParams(
        geometric_length_m=0.6 * SPEED_OF_LIGHT * cfg.cp_duration_s,
        angle_rad=0.0,
        doppler_hz=0.0,
        complex_gain=1.0,
    )
    with pytest.raises(ValueError, match="CP"):
        monostatic_echo_matrix(frame, [too_far], cfg, noise=None)


# ---------------------------------------------------------------------------
# time-domain oracle
# ---------------------------------------------------------------------------


def test_time_domain_zero_paths_zero_samples():
    cfg = desk_cfg()
    frame = desk_frame(cfg)
    samples = time_domain_reference_synthesis(frame, [], cfg)
    assert not np.any(samples)


def test_modulator_parseval():
    cfg = desk_cfg()
    frame = desk_frame(cfg)
    samples = modulate_frame(frame, cfg)
    s_len = round(cfg.bandwidth_hz * cfg.symbol_duration_s)
    blocks = samples.reshape(cfg.symbols_per_frame, s_len)[:, s_len - cfg.num_subcarriers :]
    sample_energy = np.sum(np.abs(blocks) ** 2)
    grid_energy = np.sum(np.abs(frame.symbol_grid) ** 2)
    assert sample_energy == pytest.approx(cfg.num_subcarriers * grid_energy, rel=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_oracle_matches_closed_form_with_sweeping_beams(seed):
    rng = np.random.default_rng(seed)
    cfg = desk_cfg()
    frame = desk_frame(cfg)
    paths = []
    for _ in range(rng.integers(1, 4)):
        # mix of on-grid and fractional delays; the oracle is exact for both
        delay_s = rng.uniform(2, 0.9 * cfg.cp_duration_s * cfg.bandwidth_hz) / cfg.bandwidth_hz
        paths.append(
            PathParams(
                geometric_length_m=delay_s * SPEED_OF_LIGHT / 2.0,
                angle_rad=float(rng.uniform(-1.3, 1.3)),
                doppler_hz=float(rng.uniform(-300.0, 300.0)),
                complex_gain=complex(rng.normal(), rng.normal()),
            )
        )
    y_fd = monostatic_echo_matrix(frame, paths, cfg, noise=None).matrix
    y_td = demodulate_time_stream(time_domain_reference_synthesis(frame, paths, cfg), cfg)
    err = np.abs(y_fd - y_td).max() / np.abs(y_fd).max()
    assert err < 1e-6
