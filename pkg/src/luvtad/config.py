"""Experiment configuration: ``key = value`` files with dotted keys.

Every key has a typed default below; files and command-line overrides are
coerced to the default's type and unknown keys are rejected.  The resolved
mapping (defaults + file + flags) is what gets recorded with each run.
"""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .errors import ConfigError

OUT_ENV = "LUVTAD_OUT"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": "ddpm",
    "out": "",
    "repetitions": 1,
    # simulation
    "sim.region_mm": (20.0, 50.0),
    "sim.grid": (80, 200),
    "sim.wave_speed_mm_per_us": 6.3,
    "sim.source_center_frequency_MHz": 2.0,
    "sim.source_row": 0.07,
    "sim.dt_us": 0.02,
    "sim.n_steps": 455,
    "sim.frame_stride": 35,
    "sim.n_frames": 10,
    "sim.image_size": (64, 64),
    # dataset and split
    "data.n_defect_free": 100,
    "data.n_defective": 50,
    "data.defect_diameter_mm": 2.0,
    "data.workers": 1,
    "split.test_defect_free": 40,
    "split.test_defective": 40,
    "split.val_defect_free": 10,
    # diffusion model
    "ddpm.T": 1000,
    "ddpm.epochs": 1000,
    "ddpm.batch_size": 16,
    "ddpm.lr": 1e-6,
    "ddpm.weight_decay": 0.0,
    "ddpm.widths": (32, 64, 128),
    "ddpm.noise_kind": "simplex",
    "ddpm.lambda_t": 0,  # 0: T // 4
    "ddpm.simplex_octaves": 4,
    "ddpm.simplex_frequency": 4.0,
    "ddpm.simplex_persistence": 0.5,
    "ddpm.hflip": True,
    "ddpm.checkpoint_every": 10,
    "ddpm.ema_decay": 0.0,
    # VAE baseline
    "vae.epochs": 200,
    "vae.batch_size": 16,
    "vae.lr": 1e-3,
    "vae.weight_decay": 0.0,
    "vae.widths": (32, 64, 128),
    "vae.latent_dim": 64,
    "vae.hflip": True,
    "vae.checkpoint_every": 10,
    # localisation
    "localize.thresholds": tuple(round(0.15 + 0.01 * i, 2) for i in range(21)),
    "localize.connectivity": 8,
    "localize.decision_threshold": "default",  # default | calibrate | <number>
    "localize.calibration_margin": 1.0,
    "localize.scale_thresholds": False,  # grid * score_threshold / 0.25
    # evaluation
    "eval.score_threshold": "0.25",  # <number> | calibrate
    "eval.calibration_margin": 1.0,
    "eval.r_max": 20,
    "eval.r_report": 5.0,
    "eval.granularity": "sequence",
}

CHOICES = {
    "model": ("ddpm", "vae"),
    "ddpm.noise_kind": ("gaussian", "simplex"),
    "eval.granularity": ("sequence", "frame"),
    "localize.connectivity": (4, 8),
}


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(raw, str):
            text = raw.strip()
            if isinstance(default, bool):
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                value = low in ("true", "1", "yes")
            elif isinstance(default, tuple):
                kind = type(default[0])
                value = tuple(kind(v) for v in text.replace(" ", "").split(",") if v)
            elif isinstance(default, int):
                value = int(text)
            elif isinstance(default, float):
                value = float(text)
            else:
                value = text
        else:
            value = tuple(raw) if isinstance(default, tuple) else type(default)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} not one of {CHOICES[key]}")
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if section and key not in DEFAULTS:
            key = f"{section}.{key}"
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> dict[str, Any]:
    """Defaults, then the file, then non-None overrides."""
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_config_text(p.read_text(), str(p)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    if not cfg["out"]:
        cfg["out"] = os.environ.get(OUT_ENV, "luvtad_out")
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    if cfg["repetitions"] < 1:
        raise ConfigError("repetitions must be >= 1")
    for key in ("data.n_defect_free", "data.n_defective", "split.test_defect_free", "split.test_defective", "split.val_defect_free"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    if cfg["split.test_defective"] > cfg["data.n_defective"]:
        raise ConfigError("split.test_defective exceeds data.n_defective")
    if cfg["split.test_defect_free"] + cfg["split.val_defect_free"] >= cfg["data.n_defect_free"]:
        raise ConfigError("no defect-free sequences left for training after the test/validation split")
    for key, modes in (("localize.decision_threshold", ("default", "calibrate")), ("eval.score_threshold", ("calibrate",))):
        value = cfg[key]
        if value in modes:
            continue
        try:
            number = float(value)
        except ValueError:
            number = math.nan
        if not number >= 0:
            names = " or ".join(repr(m) for m in modes)
            raise ConfigError(f"{key} must be {names} or a non-negative number, got {value!r}")
    for key in ("localize.calibration_margin", "eval.calibration_margin"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be > 0")
    if cfg["eval.r_max"] < 0:
        raise ConfigError("eval.r_max must be >= 0")


def format_config(cfg: Mapping[str, Any]) -> str:
    """Render a resolved config back into the file syntax."""
    lines = []
    for key in DEFAULTS:
        v = cfg[key]
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# seeds

STAGES = ("synth", "train-ddpm", "train-vae", "reconstruct")


def stage_seed(master: int, stage: str, repetition: int = 0) -> int:
    """Counter-based seed: hash of (master, stage index, repetition)."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    ss = np.random.SeedSequence([int(master), STAGES.index(stage), int(repetition)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
