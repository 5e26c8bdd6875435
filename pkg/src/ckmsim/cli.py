"""Batch front end: load a scenario config, run sensing / CKM construction /
beam-alignment evaluation, and write the artifacts atomically.

Output directories never hold partial results: files are staged in a
temporary directory and moved in only after the run succeeds; on failure the
output directory contains a single FAILED.txt marker.  Every successful run
embeds resolved_config.json, which reproduces the run byte-for-byte when fed
back through --config.

Exit codes: 0 success, 1 domain error during the run, 2 usage/config error.
"""

import argparse
import json
import math
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .channel import NoiseConfig, Obstacle, Reflector, Scene, Target
from .ckm import ckm_save
from .dsp import MusicConfig, save_detections_csv, save_spectrum_csv
from .scenario import (
    CkmGridSpec,
    ScenarioConfig,
    TrajectorySpec,
    run_beam_alignment_eval,
    run_ckm_construction,
    run_environment_sensing,
    summarize_alignment,
    write_construction_log_csv,
    write_run_log_csv,
)
from .waveform import OfdmConfig, SensingFrameSpec


class ConfigError(ValueError):
    """Configuration problem; the message names the offending field."""


def _check_keys(obj: dict, allowed: set, path: str):
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown field")


def _pair(value, path: str) -> tuple[float, float]:
    try:
        x, y = value
        return (float(x), float(y))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: expected a pair of numbers") from exc


def _build(factory, kwargs, path: str):
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_scene(obj: dict, path: str = "scene") -> Scene:
    _check_keys(obj, {"bs_position", "bs_boresight", "targets", "reflectors", "obstacles"}, path)
    kwargs = {}
    if "bs_position" in obj:
        kwargs["bs_position"] = _pair(obj["bs_position"], f"{path}.bs_position")
    if "bs_boresight" in obj:
        kwargs["bs_boresight"] = _pair(obj["bs_boresight"], f"{path}.bs_boresight")
    targets = []
    for i, t in enumerate(obj.get("targets", [])):
        tp = f"{path}.targets.{i}"
        _check_keys(t, {"kind", "position", "velocity", "rcs_m2"}, tp)
        if "kind" not in t or "position" not in t:
            raise ConfigError(f"{tp}: needs kind and position")
        targets.append(
            _build(
                Target,
                {
                    "kind": t["kind"],
                    "position": _pair(t["position"], f"{tp}.position"),
                    "velocity": _pair(t.get("velocity", (0.0, 0.0)), f"{tp}.velocity"),
                    "rcs_m2": float(t.get("rcs_m2", 1.0)),
                },
                tp,
            )
        )
    reflectors = []
    for i, r in enumerate(obj.get("reflectors", [])):
        rp = f"{path}.reflectors.{i}"
        _check_keys(r, {"center", "width_m", "angle_deg", "reflection_coeff", "rcs_m2"}, rp)
        if "center" not in r or "width_m" not in r or "angle_deg" not in r:
            raise ConfigError(f"{rp}: needs center, width_m and angle_deg")
        coeff = r.get("reflection_coeff", 0.7)
        if isinstance(coeff, (list, tuple)):
            coeff = complex(float(coeff[0]), float(coeff[1]))
        else:
            coeff = complex(float(coeff), 0.0)
        reflectors.append(
            _build(
                Reflector,
                {
                    "center": _pair(r["center"], f"{rp}.center"),
                    "width_m": float(r["width_m"]),
                    "angle_deg": float(r["angle_deg"]),
                    "reflection_coeff": coeff,
                    "rcs_m2": float(r.get("rcs_m2", 1.0)),
                },
                rp,
            )
        )
    obstacles = []
    for i, o in enumerate(obj.get("obstacles", [])):
        op = f"{path}.obstacles.{i}"
        _check_keys(o, {"p1", "p2", "blockage_loss_db"}, op)
        if "p1" not in o or "p2" not in o:
            raise ConfigError(f"{op}: needs p1 and p2")
        obstacles.append(
            _build(
                Obstacle,
                {
                    "p1": _pair(o["p1"], f"{op}.p1"),
                    "p2": _pair(o["p2"], f"{op}.p2"),
                    "blockage_loss_db": float(o.get("blockage_loss_db", 20.0)),
                },
                op,
            )
        )
    kwargs["targets"] = tuple(targets)
    kwargs["reflectors"] = tuple(reflectors)
    kwargs["obstacles"] = tuple(obstacles)
    return _build(Scene, kwargs, path)


def _parse_section(obj, factory, fields: dict, path: str):
    _check_keys(obj, set(fields), path)
    kwargs = {}
    for name, caster in fields.items():
        if name in obj:
            try:
                kwargs[name] = caster(obj[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{name}: {exc}") from exc
    return _build(factory, kwargs, path)


def config_from_dict(doc: dict) -> ScenarioConfig:
    """Validated ScenarioConfig from a JSON-style dict; all fields optional,
    defaults carry the reference prototype parameters."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    _check_keys(
        doc,
        {
            "scene",
            "trajectory",
            "waveform",
            "sensing",
            "music",
            "noise",
            "ckm",
            "estimator",
            "n_idft",
            "sensing_interval_frames",
            "association_gate_m",
            "detection_threshold_db",
            "cluster_eps_m",
            "cluster_min_points",
            "ue_rcs_m2",
        },
        "config",
    )
    kwargs = {}
    if "scene" in doc:
        kwargs["scene"] = _parse_scene(doc["scene"])
    if "trajectory" in doc:
        kwargs["trajectory"] = _parse_section(
            doc["trajectory"],
            TrajectorySpec,
            {
                "waypoints": lambda v: tuple(_pair(p, "trajectory.waypoints") for p in v),
                "speed_mps": float,
                "sample_period_s": float,
            },
            "trajectory",
        )
    if "waveform" in doc:
        kwargs["ofdm"] = _parse_section(
            doc["waveform"],
            OfdmConfig,
            {
                "carrier_frequency_hz": float,
                "bandwidth_hz": float,
                "subcarrier_spacing_hz": float,
                "num_subcarriers": int,
                "symbol_duration_s": float,
                "symbols_per_frame": int,
                "antenna_spacing_m": float,
                "num_tx_elements": int,
                "num_rx_elements": int,
            },
            "waveform",
        )
    if "sensing" in doc:
        kwargs["sensing"] = _parse_section(
            doc["sensing"],
            SensingFrameSpec,
            {"num_beams": int, "symbols_per_subframe": int, "zc_root": int},
            "sensing",
        )
    if "music" in doc:
        kwargs["music"] = _parse_section(
            doc["music"],
            MusicConfig,
            {
                "smoothing_rho": float,
                "model_order": lambda v: v if v == "auto" else int(v),
                "delay_grid": lambda v: tuple(float(x) for x in v),
                "diagonal_loading": float,
            },
            "music",
        )
    if "noise" in doc:
        kwargs["noise"] = _parse_section(
            doc["noise"],
            NoiseConfig,
            {"snr_db": lambda v: math.inf if v in ("inf", None) else float(v), "rng_seed": int},
            "noise",
        )
    if "ckm" in doc:
        kwargs["ckm"] = _parse_section(
            doc["ckm"],
            CkmGridSpec,
            {
                "origin_xy": lambda v: _pair(v, "ckm.origin_xy"),
                "cell_size_m": float,
                "extent": lambda v: (int(v[0]), int(v[1])),
                "n_max": int,
            },
            "ckm",
        )
    for name in (
        "estimator",
        "n_idft",
        "sensing_interval_frames",
        "association_gate_m",
        "detection_threshold_db",
        "cluster_eps_m",
        "cluster_min_points",
        "ue_rcs_m2",
    ):
        if name in doc:
            caster = {
                "estimator": str,
                "n_idft": int,
                "sensing_interval_frames": int,
                "cluster_min_points": int,
            }.get(name, float)
            try:
                kwargs[name] = caster(doc[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config.{name}: {exc}") from exc
    return _build(ScenarioConfig, kwargs, "config")


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Fully resolved config as a JSON-ready dict (inverse of load_config)."""

    def coeff(c: complex):
        return [c.real, c.imag] if c.imag else c.real

    return {
        "scene": {
            "bs_position": list(cfg.scene.bs_position),
            "bs_boresight": list(cfg.scene.bs_boresight),
            "targets": [
                {
                    "kind": t.kind,
                    "position": list(t.position),
                    "velocity": list(t.velocity),
                    "rcs_m2": t.rcs_m2,
                }
                for t in cfg.scene.targets
            ],
            "reflectors": [
                {
                    "center": list(r.center),
                    "width_m": r.width_m,
                    "angle_deg": r.angle_deg,
                    "reflection_coeff": coeff(complex(r.reflection_coeff)),
                    "rcs_m2": r.rcs_m2,
                }
                for r in cfg.scene.reflectors
            ],
            "obstacles": [
                {"p1": list(o.p1), "p2": list(o.p2), "blockage_loss_db": o.blockage_loss_db}
                for o in cfg.scene.obstacles
            ],
        },
        "trajectory": {
            "waypoints": [list(p) for p in cfg.trajectory.waypoints],
            "speed_mps": cfg.trajectory.speed_mps,
            "sample_period_s": cfg.trajectory.sample_period_s,
        },
        "waveform": {
            "carrier_frequency_hz": cfg.ofdm.carrier_frequency_hz,
            "bandwidth_hz": cfg.ofdm.bandwidth_hz,
            "subcarrier_spacing_hz": cfg.ofdm.subcarrier_spacing_hz,
            "num_subcarriers": cfg.ofdm.num_subcarriers,
            "symbol_duration_s": cfg.ofdm.symbol_duration_s,
            "symbols_per_frame": cfg.ofdm.symbols_per_frame,
            "antenna_spacing_m": cfg.ofdm.antenna_spacing_m,
            "num_tx_elements": cfg.ofdm.num_tx_elements,
            "num_rx_elements": cfg.ofdm.num_rx_elements,
        },
        "sensing": {
            "num_beams": cfg.sensing.num_beams,
            "symbols_per_subframe": cfg.sensing.symbols_per_subframe,
            "zc_root": cfg.sensing.zc_root,
        },
        "music": {
            "smoothing_rho": cfg.music.smoothing_rho,
            "model_order": cfg.music.model_order,
            "delay_grid": list(cfg.music.delay_grid),
            "diagonal_loading": cfg.music.diagonal_loading,
        },
        "noise": {
            "snr_db": "inf" if math.isinf(cfg.noise.snr_db) else cfg.noise.snr_db,
            "rng_seed": cfg.noise.rng_seed,
        },
        "ckm": {
            "origin_xy": list(cfg.ckm.origin_xy),
            "cell_size_m": cfg.ckm.cell_size_m,
            "extent": list(cfg.ckm.extent),
            "n_max": cfg.ckm.n_max,
        },
        "estimator": cfg.estimator,
        "n_idft": cfg.n_idft,
        "sensing_interval_frames": cfg.sensing_interval_frames,
        "association_gate_m": cfg.association_gate_m,
        "detection_threshold_db": cfg.detection_threshold_db,
        "cluster_eps_m": cfg.cluster_eps_m,
        "cluster_min_points": cfg.cluster_min_points,
        "ue_rcs_m2": cfg.ue_rcs_m2,
    }


def apply_override(doc: dict, assignment: str):
    """Apply one dotted-path `key=value` override onto the raw config dict."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    tokens = key.split(".")
    node = doc
    for i, token in enumerate(tokens[:-1]):
        if isinstance(node, list):
            try:
                node = node[int(token)]
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"override {key!r}: bad list index {token!r}") from exc
        elif isinstance(node, dict):
            node = node.setdefault(token, {})
            if not isinstance(node, (dict, list)):
                raise ConfigError(f"override {key!r}: {'.'.join(tokens[: i + 1])} is a scalar")
        else:
            raise ConfigError(f"override {key!r}: cannot descend into scalar")
    last = tokens[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"override {key!r}: bad list index {last!r}") from exc
    else:
        node[last] = value


# ---------------------------------------------------------------------------
# atomic output directory
# ---------------------------------------------------------------------------


class _Staging:
    """Write files into a temp dir; publish them to `out_dir` only on success."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))

    def path(self, name: str) -> Path:
        return self.tmp / name

    def publish(self):
        for item in sorted(self.tmp.iterdir()):
            os.replace(item, self.out_dir / item.name)
        self.tmp.rmdir()

    def abort(self, error: Exception):
        shutil.rmtree(self.tmp, ignore_errors=True)
        with open(self.out_dir / "FAILED.txt", "w") as fh:
            fh.write(f"{type(error).__name__}: {error}\n")


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _resolve_config(args) -> ScenarioConfig:
    with open(args.config) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for assignment in args.set or []:
        apply_override(doc, assignment)
    cfg = config_from_dict(doc)
    if args.seed is not None:
        cfg = replace(cfg, noise=NoiseConfig(cfg.noise.snr_db, args.seed))
    if args.estimator is not None:
        cfg = replace(cfg, estimator=args.estimator)
    return cfg


def _cmd_sense(cfg: ScenarioConfig, staging: _Staging):
    spectrum, detections = run_environment_sensing(cfg)
    save_spectrum_csv(spectrum, staging.path("spectrum.csv"), staging.path("spectrum_meta.json"))
    save_detections_csv(detections, staging.path("detections.csv"))


def _cmd_build_ckm(cfg: ScenarioConfig, staging: _Staging):
    grid, logs = run_ckm_construction(cfg)
    ckm_save(grid, staging.path("ckm.json"))
    write_construction_log_csv(logs, staging.path("construction_log.csv"))


def _cmd_eval_align(cfg: ScenarioConfig, staging: _Staging):
    grid, logs = run_ckm_construction(cfg)
    records = run_beam_alignment_eval(cfg, grid)
    ckm_save(grid, staging.path("ckm.json"))
    write_construction_log_csv(logs, staging.path("construction_log.csv"))
    write_run_log_csv(records, staging.path("run_log.csv"))
    _write_json(staging.path("summary.json"), summarize_alignment(records))


def _selftest() -> int:
    """Built-in oracle suite: synthesis equivalence and estimator bins."""
    from .channel import (
        PathParams,
        demodulate_time_stream,
        time_domain_reference_synthesis,
    )
    from .dsp import (
        build_range_angle_spectrum,
        capon_spectrum,
        mssp_fbcm_covariance,
        music_spectrum,
        periodogram_range,
    )
    from .waveform import SPEED_OF_LIGHT, build_sensing_frame

    failures = 0

    def report(name: str, ok: bool):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1

    cfg = OfdmConfig(
        bandwidth_hz=64 * 78.125e3,
        num_subcarriers=64,
        symbol_duration_s=16e-6,
        symbols_per_frame=35,
    )
    sf = SensingFrameSpec(num_beams=8, symbols_per_subframe=4, zc_root=5)
    frame = build_sensing_frame(cfg, sf)
    rng = np.random.default_rng(2024)
    ok = True
    for _ in range(3):
        paths = []
        for _ in range(rng.integers(1, 4)):
            delay_samples = int(rng.integers(1, 12))
            length = delay_samples / cfg.bandwidth_hz * SPEED_OF_LIGHT / 2.0
            paths.append(
                PathParams(
                    geometric_length_m=length,
                    angle_rad=float(rng.uniform(-1.2, 1.2)),
                    doppler_hz=float(rng.uniform(-200, 200)),
                    complex_gain=complex(rng.normal(), rng.normal()),
                )
            )
        from .channel import monostatic_echo_matrix

        y_fd = monostatic_echo_matrix(frame, paths, cfg, noise=None).matrix
        y_td = demodulate_time_stream(time_domain_reference_synthesis(frame, paths, cfg), cfg)
        err = np.abs(y_fd - y_td).max() / np.abs(y_fd).max()
        ok = ok and err < 1e-6
    report("time-domain vs frequency-domain synthesis (< 1e-6)", ok)

    df = cfg.subcarrier_spacing_hz
    n_idft = 256
    k = 17
    tau = k / (df * n_idft)
    h = np.exp(-2j * np.pi * tau * df * np.arange(cfg.num_subcarriers))[:, None]
    profile = periodogram_range(np.tile(h, (1, 4)), n_idft)
    report("periodogram on-grid delay lands in its bin", int(np.argmax(profile)) == k)

    true_r = 4.0
    taus = 2 * true_r / SPEED_OF_LIGHT
    hq = np.exp(-2j * np.pi * taus * df * np.arange(cfg.num_subcarriers))[:, None] * np.ones((1, 8))
    r = mssp_fbcm_covariance(hq, 0.4)
    mcfg = MusicConfig(delay_grid=(0.0, 12.0, 0.05))
    grid_m = mcfg.range_grid_m()
    for name, func in (("music", music_spectrum), ("capon", capon_spectrum)):
        spec = func(r, mcfg, df)
        est = grid_m[int(np.argmax(spec))]
        report(f"{name} single-path peak within one grid step", abs(est - true_r) <= 0.05 + 1e-9)

    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckmsim",
        description="ISAC-based channel knowledge map simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("sense", "environment sensing: range-angle spectrum and detections"),
        ("build-ckm", "construct the CKM over the cell raster"),
        ("eval-align", "compare CKM-based and location-based beam alignment"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="scenario config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="noise seed override")
        p.add_argument("--estimator", choices=("periodogram", "music", "capon"),
                       default=None, help="estimator override")
    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


_COMMANDS = {"sense": _cmd_sense, "build-ckm": _cmd_build_ckm, "eval-align": _cmd_eval_align}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return _selftest()
    try:
        cfg = _resolve_config(args)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    staging = _Staging(args.out)
    try:
        _write_json(staging.path("resolved_config.json"), config_to_dict(cfg))
        _COMMANDS[args.command](cfg, staging)
        staging.publish()
    except Exception as exc:  # domain error: leave only the failure marker
        staging.abort(exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
