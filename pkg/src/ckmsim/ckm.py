"""Channel knowledge map: per-cell candidate beam indices (BIM) and per-beam
received signal strength (CGM), with measurement, insertion, query and a
lossless JSON store.

Stored numbers are quantized to 6 decimal places at insert time (micro-dB /
micrometer granularity), so the on-disk 6-decimal format round-trips grids
exactly.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelObservation

RSS_FLOOR_DB = -300.0
QUERY_FALLBACK_RADIUS_CELLS = 1.5
CKM_FORMAT_VERSION = 1


class CkmFormatError(ValueError):
    """Malformed CKM file."""


def _quantize(value: float) -> float:
    value = max(float(value), RSS_FLOOR_DB)
    return float(f"{value:.6f}")


@dataclass
class CkmCell:
    """One populated grid cell: candidate beams sorted by descending RSS plus
    the full per-beam RSS vector."""

    center_xy: tuple[float, float]
    beam_indices: list[int]
    rss_db: np.ndarray
    sample_count: int = 1


@dataclass
class CkmGrid:
    """Rectangular cell grid; cell (ix, iy) is centered at
    origin + (ix, iy) * cell_size."""

    origin_xy: tuple[float, float] = (0.0, 0.0)
    cell_size_m: float = 0.5
    extent: tuple[int, int] = (1, 1)
    num_beams: int = 64
    n_max: int = 3
    cells: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be > 0")
        if self.extent[0] < 1 or self.extent[1] < 1:
            raise ValueError("extent must be at least one cell in each axis")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    def cell_index(self, position) -> tuple[int, int]:
        """Nearest cell index, rounding half-way coordinates up."""
        x, y = position
        ix = math.floor((x - self.origin_xy[0]) / self.cell_size_m + 0.5)
        iy = math.floor((y - self.origin_xy[1]) / self.cell_size_m + 0.5)
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            _quantize(self.origin_xy[0] + ix * self.cell_size_m),
            _quantize(self.origin_xy[1] + iy * self.cell_size_m),
        )

    def in_extent(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.extent[0] and 0 <= iy < self.extent[1]


def ue_measure_rss_per_beam(obs: ChannelObservation, symbols_per_subframe: int, num_beams: int) -> np.ndarray:
    """Per-beam RSS of a downlink sensing frame at the UE:
    a[q] = 10*log10(||Y_q||_F^2 / M_q) over the q-th beam slice of the raw
    received grid.  Zero-energy slices yield -inf."""
    mq, q = symbols_per_subframe, num_beams
    y = obs.matrix
    if q * mq > y.shape[1]:
        raise ValueError("observation too short for the requested beam slicing")
    rss = np.empty(q)
    for i in range(q):
        energy = float(np.sum(np.abs(y[:, i * mq : (i + 1) * mq]) ** 2))
        rss[i] = 10.0 * math.log10(energy / mq) if energy > 0 else -math.inf
    return rss


def top_beams(rss: np.ndarray, n_max: int) -> list[int]:
    """Indices of the n_max strongest entries, descending; ties break toward
    the lower index.  n_max beyond the vector length is truncated."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    rss = np.asarray(rss, dtype=float)
    order = np.argsort(-rss, kind="stable")
    return [int(i) for i in order[: min(n_max, rss.size)]]


def ckm_insert(grid: CkmGrid, position, rss: np.ndarray, n_max: int | None = None) -> CkmGrid:
    """Store a measurement in the cell nearest to `position` (overwriting any
    previous content, keeping the visit count)."""
    rss = np.asarray(rss, dtype=float)
    if rss.shape != (grid.num_beams,):
        raise ValueError(f"rss vector must have length Q = {grid.num_beams}")
    ix, iy = grid.cell_index(position)
    if not grid.in_extent(ix, iy):
        raise ValueError(f"position {tuple(position)} falls outside the grid extent")
    n_max = grid.n_max if n_max is None else n_max
    stored = np.array([_quantize(v) for v in rss])
    previous = grid.cells.get((ix, iy))
    grid.cells[(ix, iy)] = CkmCell(
        center_xy=grid.cell_center(ix, iy),
        beam_indices=top_beams(stored, n_max),
        rss_db=stored,
        sample_count=(previous.sample_count + 1) if previous else 1,
    )
    return grid


def ckm_query(grid: CkmGrid, position) -> CkmCell | None:
    """Populated cell nearest to `position` within 1.5 cell sizes, else None."""
    if not grid.cells:
        return None
    x, y = float(position[0]), float(position[1])
    best, best_dist = None, math.inf
    for cell in grid.cells.values():
        d = math.hypot(cell.center_xy[0] - x, cell.center_xy[1] - y)
        if d < best_dist:
            best, best_dist = cell, d
    if best_dist <= QUERY_FALLBACK_RADIUS_CELLS * grid.cell_size_m:
        return best
    return None


# ---------------------------------------------------------------------------
# JSON store (fixed 6-decimal formatting)
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        raise TypeError("no booleans in the CKM format")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_fmt(v)}" for k, v in value.items()) + "}"
    raise TypeError(f"cannot serialize {type(value)!r}")


def ckm_save(grid: CkmGrid, path):
    """Write the grid as a JSON document; cells sorted by (iy, ix)."""
    records = []
    for (ix, iy) in sorted(grid.cells, key=lambda k: (k[1], k[0])):
        cell = grid.cells[(ix, iy)]
        records.append(
            {
                "ix": ix,
                "iy": iy,
                "center": list(cell.center_xy),
                "beams": [
                    {"q": q, "rss_db": float(cell.rss_db[q])} for q in cell.beam_indices
                ],
                "rss_db": list(cell.rss_db),
                "samples": cell.sample_count,
            }
        )
    doc = {
        "version": CKM_FORMAT_VERSION,
        "cell_size_m": grid.cell_size_m,
        "origin_xy": list(grid.origin_xy),
        "extent": list(grid.extent),
        "Q": grid.num_beams,
        "n_max": grid.n_max,
        "cells": records,
    }
    with open(path, "w") as fh:
        fh.write(_fmt(doc))
        fh.write("\n")


def _require(condition: bool, message: str):
    if not condition:
        raise CkmFormatError(message)


def ckm_load(path) -> CkmGrid:
    """Parse a CKM file, rejecting duplicate or out-of-extent cell records."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CkmFormatError(f"not valid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "top level must be an object")
    for key in ("version", "cell_size_m", "origin_xy", "extent", "Q", "n_max", "cells"):
        _require(key in doc, f"missing header field {key!r}")
    _require(doc["version"] == CKM_FORMAT_VERSION, f"unsupported version {doc['version']!r}")
    grid = CkmGrid(
        origin_xy=tuple(float(v) for v in doc["origin_xy"]),
        cell_size_m=float(doc["cell_size_m"]),
        extent=tuple(int(v) for v in doc["extent"]),
        num_beams=int(doc["Q"]),
        n_max=int(doc["n_max"]),
    )
    for record in doc["cells"]:
        where = f"cell record ix={record.get('ix')!r} iy={record.get('iy')!r}"
        for key in ("ix", "iy", "center", "beams", "rss_db", "samples"):
            _require(key in record, f"{where}: missing field {key!r}")
        ix, iy = int(record["ix"]), int(record["iy"])
        _require(grid.in_extent(ix, iy), f"{where}: outside the grid extent")
        _require((ix, iy) not in grid.cells, f"{where}: duplicate cell")
        rss = np.array([float(v) for v in record["rss_db"]])
        _require(rss.size == grid.num_beams, f"{where}: rss_db length != Q")
        _require(np.all(np.isfinite(rss)), f"{where}: non-finite rss_db")
        beams = [int(b["q"]) for b in record["beams"]]
        _require(len(set(beams)) == len(beams), f"{where}: repeated beam index")
        _require(
            all(0 <= q < grid.num_beams for q in beams), f"{where}: beam index outside [0, Q)"
        )
        grid.cells[(ix, iy)] = CkmCell(
            center_xy=tuple(float(v) for v in record["center"]),
            beam_indices=beams,
            rss_db=rss,
            sample_count=int(record["samples"]),
        )
    return grid


def grids_equal(a: CkmGrid, b: CkmGrid) -> bool:
    """Structural equality including cell ordering data and sample counts."""
    if (
        a.origin_xy != b.origin_xy
        or a.cell_size_m != b.cell_size_m
        or a.extent != b.extent
        or a.num_beams != b.num_beams
        or a.n_max != b.n_max
        or set(a.cells) != set(b.cells)
    ):
        return False
    for key, cell_a in a.cells.items():
        cell_b = b.cells[key]
        if (
            cell_a.center_xy != cell_b.center_xy
            or cell_a.beam_indices != cell_b.beam_indices
            or cell_a.sample_count != cell_b.sample_count
            or not np.array_equal(cell_a.rss_db, cell_b.rss_db)
        ):
            return False
    return True
