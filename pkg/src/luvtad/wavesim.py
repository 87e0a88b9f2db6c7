"""Synthetic laser-ultrasonic wavefield sequences.

A 2-D scalar wave equation is integrated with the second-order leapfrog
scheme on a rectangular specimen.  A Ricker-wavelet point source sits just
below the top edge, the outer ring of cells is held at zero pressure and
circular voids are modelled as zero-pressure inclusions.  Snapshots are
area-resampled to the output raster and min-max normalised per sequence.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, NormalizationError, NumericInstabilityError

RASTER_MAGIC = b"LUVT"
RASTER_VERSION = 1
CFL_LIMIT = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class SimConfig:
    region_mm: tuple[float, float] = (20.0, 50.0)
    grid: tuple[int, int] = (80, 200)
    wave_speed_mm_per_us: float = 6.3
    source_center_frequency_MHz: float = 2.0
    # (row, col) as fractions of the region; row 0 is the top edge
    source_position: tuple[float, float] = (0.07, 0.5)
    dt_us: float = 0.02
    n_steps: int = 455
    frame_stride: int = 35
    n_frames: int = 10
    seed: int = 0
    # output raster (h, w); frames are area-resampled from the simulation grid
    image_size: tuple[int, int] = (64, 64)

    @property
    def dx_mm(self) -> float:
        return self.region_mm[1] / self.grid[1]

    @property
    def dy_mm(self) -> float:
        return self.region_mm[0] / self.grid[0]

    @property
    def cfl(self) -> float:
        return self.wave_speed_mm_per_us * self.dt_us / self.dx_mm

    def validate(self) -> None:
        h, w = self.grid
        if h < 3 or w < 3:
            raise ConfigError(f"grid {self.grid} too small; need at least 3x3")
        if min(self.region_mm) <= 0:
            raise ConfigError(f"region_mm must be positive, got {self.region_mm}")
        if abs(h - w * self.region_mm[0] / self.region_mm[1]) > 1.0:
            raise ConfigError(
                f"grid {self.grid} aspect does not match region {self.region_mm} within one cell"
            )
        if self.wave_speed_mm_per_us <= 0 or self.dt_us <= 0:
            raise ConfigError("wave speed and dt must be positive")
        if self.cfl > CFL_LIMIT:
            raise ConfigError(
                f"CFL number {self.cfl:.4f} exceeds 1/sqrt(2); reduce dt_us or refine the grid"
            )
        if self.n_frames < 1 or self.frame_stride < 1:
            raise ConfigError("n_frames and frame_stride must be >= 1")
        if self.n_steps < self.n_frames * self.frame_stride:
            raise ConfigError(
                f"n_steps={self.n_steps} < n_frames*frame_stride={self.n_frames * self.frame_stride}"
            )
        if min(self.image_size) < 1:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        r, c = self.source_position
        if not (0.0 <= r <= 1.0 and 0.0 <= c <= 1.0):
            raise ConfigError(f"source_position {self.source_position} outside [0,1]^2")

    def frame_steps(self) -> list[int]:
        """Step indices sampled into frames: the last ``n_frames`` multiples of the stride."""
        last = (self.n_steps // self.frame_stride) * self.frame_stride
        return [last - (self.n_frames - 1 - k) * self.frame_stride for k in range(self.n_frames)]


@dataclass(frozen=True)
class DefectSpec:
    center_mm: tuple[float, float]
    diameter_mm: float = 2.0
    kind: str = "rigid-void"

    def validate(self, region_mm: tuple[float, float]) -> None:
        if self.diameter_mm <= 0:
            raise ConfigError(f"defect diameter must be > 0, got {self.diameter_mm}")
        if self.kind != "rigid-void":
            raise ConfigError(f"unsupported defect kind {self.kind!r}")
        r = self.diameter_mm / 2
        y, x = self.center_mm
        if not (r <= y <= region_mm[0] - r and r <= x <= region_mm[1] - r):
            raise ConfigError(f"defect circle at {self.center_mm} (d={self.diameter_mm}) leaves the region")


@dataclass
class WaveField:
    pressure: np.ndarray
    previous: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, config: SimConfig) -> "WaveField":
        return cls(np.zeros(config.grid), np.zeros(config.grid), 0)


@dataclass
class ImageSequence:
    frames: np.ndarray  # (K, h, w) float32 in [0, 1]
    label: str = "defect-free"
    defect_center_px: Optional[tuple[float, float]] = None
    defect_radius_px: Optional[float] = None
    seed: int = 0
    id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def is_defective(self) -> bool:
        return self.label == "defective"

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise FormatError(f"frames must be (K, h, w), got shape {self.frames.shape}")
        if self.label not in ("defective", "defect-free"):
            raise FormatError(f"unknown label {self.label!r}")
        if (self.label == "defective") != (self.defect_center_px is not None):
            raise FormatError("label 'defective' requires defect_center_px and vice versa")


# ---------------------------------------------------------------------------
# geometry helpers


def defect_mask(config: SimConfig, defect: Optional[DefectSpec]) -> np.ndarray:
    """Boolean grid of cells whose centres fall inside the defect circle."""
    h, w = config.grid
    if defect is None:
        return np.zeros((h, w), dtype=bool)
    yc = (np.arange(h) + 0.5) * config.dy_mm
    xc = (np.arange(w) + 0.5) * config.dx_mm
    cy, cx = defect.center_mm
    r = defect.diameter_mm / 2
    return (yc[:, None] - cy) ** 2 + (xc[None, :] - cx) ** 2 <= r * r


def source_weights(config: SimConfig) -> np.ndarray:
    """Injection weights of the point source.

    The column is split linearly between the two nearest cell centres so a
    source at the horizontal centre stays mirror-symmetric; the row is the
    nearest interior row.
    """
    h, w = config.grid
    fr, fc = config.source_position
    row = int(min(max(round(fr * h - 0.5), 1), h - 2))
    col = min(max(fc * w - 0.5, 1.0), w - 2.0)
    c0 = int(math.floor(col))
    frac = col - c0
    weights = np.zeros((h, w))
    weights[row, c0] += 1.0 - frac
    if frac > 0:
        weights[row, c0 + 1] += frac
    return weights


def ricker(t_us: np.ndarray | float, f_MHz: float, delay_us: Optional[float] = None) -> np.ndarray:
    """Ricker wavelet with peak at ``delay_us`` (default ``1/f``)."""
    if delay_us is None:
        delay_us = 1.0 / f_MHz
    a = (math.pi * f_MHz * (np.asarray(t_us) - delay_us)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def mm_to_px(config: SimConfig, point_mm: tuple[float, float]) -> tuple[float, float]:
    """Map (y, x) in mm to continuous (row, col) in the output raster."""
    H, W = config.region_mm
    h, w = config.image_size
    return (point_mm[0] / H * h - 0.5, point_mm[1] / W * w - 0.5)


def radius_mm_to_px(config: SimConfig, radius_mm: float) -> float:
    """Area-equivalent radius in output pixels (rows and cols scale differently)."""
    H, W = config.region_mm
    h, w = config.image_size
    return radius_mm * math.sqrt((h / H) * (w / W))


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # row i averages the input cells overlapping output bin i
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(edges[1:, None], lo + 1) - np.maximum(edges[:-1, None], lo), 0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resample(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-weighted resampling of (..., h, w) arrays to ``size``."""
    h, w = frames.shape[-2:]
    if (h, w) == tuple(size):
        return frames
    rh = _area_matrix(h, size[0])
    rw = _area_matrix(w, size[1])
    return rh @ frames @ rw.T


# ---------------------------------------------------------------------------
# stepping


def _leapfrog(p, p_prev, coef_y, coef_x, void, forcing):
    nxt = 2.0 * p - p_prev
    nxt[1:-1, 1:-1] += coef_y * (p[2:, 1:-1] + p[:-2, 1:-1] - 2.0 * p[1:-1, 1:-1]) + coef_x * (
        p[1:-1, 2:] + p[1:-1, :-2] - 2.0 * p[1:-1, 1:-1]
    )
    if forcing is not None:
        nxt += forcing
    nxt[0, :] = 0.0
    nxt[-1, :] = 0.0
    nxt[:, 0] = 0.0
    nxt[:, -1] = 0.0
    nxt[void] = 0.0
    return nxt


def _coefficients(config: SimConfig) -> tuple[float, float]:
    c_dt = config.wave_speed_mm_per_us * config.dt_us
    return (c_dt / config.dy_mm) ** 2, (c_dt / config.dx_mm) ** 2


def step_fdtd(
    field: WaveField,
    config: SimConfig,
    defect: Optional[DefectSpec] = None,
    forcing: Optional[np.ndarray] = None,
) -> WaveField:
    """Advance ``field`` by one leapfrog step.

    ``forcing`` is an optional source term added to the new pressure grid.
    """
    config.validate()
    if defect is not None:
        defect.validate(config.region_mm)
    if field.pressure.shape != tuple(config.grid) or field.previous.shape != tuple(config.grid):
        raise ConfigError(f"field shape {field.pressure.shape} does not match grid {config.grid}")
    cy, cx = _coefficients(config)
    nxt = _leapfrog(field.pressure, field.previous, cy, cx, defect_mask(config, defect), forcing)
    if not np.isfinite(nxt).all():
        raise NumericInstabilityError(f"non-finite pressure at step {field.step + 1}")
    return WaveField(nxt, field.pressure, field.step + 1)


def simulate_raw(
    config: SimConfig, defect: Optional[DefectSpec] = None, record_every: Optional[int] = None
) -> np.ndarray:
    """Run the solver and return raw pressure snapshots on the simulation grid.

    By default the frames selected by ``config.frame_steps()`` are returned;
    with ``record_every`` set, every ``record_every``-th step is returned
    instead (step 0 excluded).
    """
    config.validate()
    if defect is not None:
        defect.validate(config.region_mm)
    cy, cx = _coefficients(config)
    void = defect_mask(config, defect)
    weights = source_weights(config) * (config.wave_speed_mm_per_us * config.dt_us) ** 2
    wanted = set(config.frame_steps()) if record_every is None else None
    p = np.zeros(config.grid)
    p_prev = np.zeros(config.grid)
    out = []
    for n in range(1, config.n_steps + 1):
        amp = ricker((n - 1) * config.dt_us, config.source_center_frequency_MHz)
        p, p_prev = _leapfrog(p, p_prev, cy, cx, void, weights * amp), p
        if not np.isfinite(p).all():
            raise NumericInstabilityError(f"non-finite pressure at step {n}")
        if (wanted is not None and n in wanted) or (record_every is not None and n % record_every == 0):
            out.append(p.copy())
    return np.stack(out)


def normalize_sequence(frames: np.ndarray) -> np.ndarray:
    lo = float(frames.min())
    hi = float(frames.max())
    if not hi > lo:
        raise NormalizationError("sequence is constant; cannot min-max normalise")
    out = ((frames - lo) / (hi - lo)).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def run_simulation(
    config: SimConfig, defect: Optional[DefectSpec] = None, seq_id: str = ""
) -> ImageSequence:
    raw = simulate_raw(config, defect)
    frames = normalize_sequence(resample(raw, config.image_size))
    if defect is None:
        return ImageSequence(frames, "defect-free", None, None, config.seed, seq_id)
    return ImageSequence(
        frames,
        "defective",
        mm_to_px(config, defect.center_mm),
        radius_mm_to_px(config, defect.diameter_mm / 2),
        config.seed,
        seq_id,
    )


# ---------------------------------------------------------------------------
# raster and manifest I/O


def write_raster(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 3:
        raise FormatError(f"raster needs (K, h, w) frames, got {frames.shape}")
    k, h, w = frames.shape
    try:
        with open(path, "wb") as fh:
            fh.write(RASTER_MAGIC + struct.pack("<HIII", RASTER_VERSION, k, h, w))
            fh.write(frames.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write raster {path}: {exc}") from exc


def read_raster(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, k, h, w = struct.unpack_from("<HIII", data, 4)
    if version != RASTER_VERSION:
        raise FormatError(f"{path}: unsupported raster version {version}")
    body = data[18:]
    if len(body) != 4 * k * h * w:
        raise FormatError(f"{path}: expected {k * h * w} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(k, h, w).astype(np.float32)


def load_manifest(directory: str | os.PathLike) -> list[dict]:
    with open(Path(directory) / "manifest.json", encoding="utf-8") as fh:
        return json.load(fh)


def load_sequence(directory: str | os.PathLike, record: dict) -> ImageSequence:
    frames = read_raster(Path(directory) / record["file"])
    center = record.get("defect_center_px")
    return ImageSequence(
        frames,
        record["label"],
        tuple(center) if center is not None else None,
        record.get("defect_radius_px"),
        record["seed"],
        record["id"],
    )


def load_dataset(directory: str | os.PathLike, ids: Optional[list[str]] = None) -> list[ImageSequence]:
    records = load_manifest(directory)
    if ids is not None:
        keep = set(ids)
        records = [r for r in records if r["id"] in keep]
    return [load_sequence(directory, r) for r in records]


# ---------------------------------------------------------------------------
# dataset synthesis


def _draw_defect(rng: np.random.Generator, config: SimConfig, diameter_mm: float) -> DefectSpec:
    H, W = config.region_mm
    # keep one cell clear of the zero-pressure rim
    cell = max(config.dx_mm, config.dy_mm)
    margin = diameter_mm / 2 + cell
    src = source_weights(config) > 0
    while True:
        y = rng.uniform(margin, H - margin)
        x = rng.uniform(margin, W - margin)
        defect = DefectSpec((float(y), float(x)), diameter_mm)
        # a void swallowing the source cell would silence the whole sequence
        grown = DefectSpec(defect.center_mm, diameter_mm + 4 * cell)
        if not (defect_mask(config, grown) & src).any():
            return defect


def plan_dataset(
    n_defect_free: int, n_defective: int, base: SimConfig, seed: int, diameter_mm: float = 2.0
) -> list[tuple[str, SimConfig, Optional[DefectSpec]]]:
    """Draw per-sequence source positions, defects and seeds.

    Every sequence gets its own child seed from a ``SeedSequence`` rooted at
    ``seed`` so the plan is independent of generation order.
    """
    if n_defect_free < 0 or n_defective < 0:
        raise ConfigError("sequence counts must be >= 0")
    total = n_defect_free + n_defective
    if total == 0:
        raise ConfigError("dataset must contain at least one sequence")
    base.validate()
    children = np.random.SeedSequence(seed).spawn(total)
    plan = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        seq_seed = int(child.generate_state(1)[0])
        col = float(rng.uniform(0.0, 1.0))
        cfg = replace(base, source_position=(base.source_position[0], col), seed=seq_seed)
        defective = i >= n_defect_free
        defect = _draw_defect(rng, cfg, diameter_mm) if defective else None
        prefix = "def" if defective else "ok"
        plan.append((f"{prefix}{i:05d}", cfg, defect))
    return plan


def _manifest_record(seq_id: str, cfg: SimConfig, defect: Optional[DefectSpec]) -> dict:
    rec = {
        "id": seq_id,
        "file": f"{seq_id}.luvt",
        "label": "defective" if defect else "defect-free",
        "defect_center_px": None,
        "defect_radius_px": None,
        "defect_center_mm": None,
        "defect_diameter_mm": None,
        "source_position": list(cfg.source_position),
        "seed": cfg.seed,
    }
    if defect is not None:
        rec["defect_center_px"] = list(mm_to_px(cfg, defect.center_mm))
        rec["defect_radius_px"] = radius_mm_to_px(cfg, defect.diameter_mm / 2)
        rec["defect_center_mm"] = list(defect.center_mm)
        rec["defect_diameter_mm"] = defect.diameter_mm
    return rec


def synth_dataset(
    n_defect_free: int,
    n_defective: int,
    base: SimConfig,
    seed: int,
    out_dir: str | os.PathLike,
    diameter_mm: float = 2.0,
    workers: int = 1,
) -> list[dict]:
    """Simulate a dataset into ``out_dir`` and return the manifest records."""
    plan = plan_dataset(n_defect_free, n_defective, base, seed, diameter_mm)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    def work(item):
        seq_id, cfg, defect = item
        seq = run_simulation(cfg, defect, seq_id)
        write_raster(out / f"{seq_id}.luvt", seq.frames)
        return _manifest_record(seq_id, cfg, defect)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(work, plan))
    else:
        records = [work(item) for item in plan]
    records.sort(key=lambda r: r["id"])
    manifest = out / "manifest.json"
    try:
        manifest.write_text(json.dumps(records, indent=1, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write manifest {manifest}: {exc}") from exc
    return records


def config_to_dict(config: SimConfig) -> dict:
    return asdict(config)
