import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from luvtad import wavesim as W
from luvtad.errors import ConfigError, FormatError, NormalizationError

CFG = W.SimConfig()


def steps(n, **kw):
    return replace(CFG, n_steps=n, frame_stride=n // 10, n_frames=10, **kw)


def test_default_config_is_valid_and_stable():
    CFG.validate()
    assert CFG.cfl <= W.CFL_LIMIT


def test_cfl_violation_rejected():
    bad = replace(CFG, dt_us=0.05)
    assert bad.cfl > W.CFL_LIMIT
    with pytest.raises(ConfigError, match="CFL"):
        bad.validate()
    with pytest.raises(ConfigError):
        W.step_fdtd(W.WaveField.zeros(bad), bad)


def test_aspect_and_step_budget_checks():
    with pytest.raises(ConfigError, match="aspect"):
        replace(CFG, grid=(60, 200)).validate()
    with pytest.raises(ConfigError, match="n_steps"):
        replace(CFG, n_steps=100).validate()
    with pytest.raises(ConfigError):
        replace(CFG, source_position=(0.1, 1.5)).validate()


def test_frame_steps_are_last_multiples():
    steps = CFG.frame_steps()
    assert len(steps) == CFG.n_frames
    assert steps[-1] <= CFG.n_steps
    assert np.all(np.diff(steps) == CFG.frame_stride)


def test_defect_must_fit_region():
    with pytest.raises(ConfigError):
        W.DefectSpec((0.5, 25.0), 2.0).validate(CFG.region_mm)
    with pytest.raises(ConfigError):
        W.DefectSpec((10.0, 25.0), 0.0).validate(CFG.region_mm)
    W.DefectSpec((10.0, 25.0), 2.0).validate(CFG.region_mm)


def test_mirror_symmetry_centered_source():
    cfg = steps(300, source_position=(0.07, 0.5))
    raw = W.simulate_raw(cfg, None, record_every=10)
    asym = np.abs(raw - raw[:, :, ::-1]).max()
    assert asym <= 1e-6 * np.abs(raw).max()


def test_step_fdtd_matches_simulate_raw():
    cfg = replace(CFG, n_steps=40, frame_stride=4, n_frames=10)
    weights = W.source_weights(cfg) * (cfg.wave_speed_mm_per_us * cfg.dt_us) ** 2
    field = W.WaveField.zeros(cfg)
    for n in range(1, cfg.n_steps + 1):
        field = W.step_fdtd(field, cfg, forcing=weights * W.ricker((n - 1) * cfg.dt_us, 2.0))
    ref = W.simulate_raw(cfg, None, record_every=cfg.n_steps)
    np.testing.assert_array_equal(field.pressure, ref[-1])
    assert field.step == cfg.n_steps


def test_rim_and_void_held_at_zero():
    cfg = steps(200)
    d = W.DefectSpec((8.0, 20.0), 2.0)
    raw = W.simulate_raw(cfg, d, record_every=50)
    mask = W.defect_mask(cfg, d)
    assert mask.sum() > 0
    for p in raw:
        assert np.all(p[mask] == 0.0)
        assert np.all(p[0] == 0) and np.all(p[-1] == 0) and np.all(p[:, 0] == 0) and np.all(p[:, -1] == 0)


def _source_mm(cfg):
    row = np.argwhere(W.source_weights(cfg) > 0)[0][0]
    return (row + 0.5) * cfg.dy_mm, cfg.source_position[1] * cfg.region_mm[1]


@pytest.mark.parametrize("center", [(10.0, 25.0), (15.0, 10.0), (6.0, 40.0)])
def test_defect_causality(center):
    cfg = steps(260, source_position=(0.07, 0.5))
    d = W.DefectSpec(center, 2.0)
    a = W.simulate_raw(cfg, None, record_every=1)
    b = W.simulate_raw(cfg, d, record_every=1)
    diff = np.abs(a - b).reshape(len(a), -1).max(axis=1)
    scale = np.abs(a).max()
    sy, sx = _source_mm(cfg)
    dist = math.hypot(center[0] - sy, center[1] - sx) - d.diameter_mm / 2
    arrival = dist / cfg.wave_speed_mm_per_us / cfg.dt_us

    # nothing can differ before the stencil's domain of dependence reaches the void
    mask = W.defect_mask(cfg, d)
    src = np.argwhere(W.source_weights(cfg) > 0)
    cells = np.argwhere(mask)
    manhattan = min(abs(c[0] - s[0]) + abs(c[1] - s[1]) for c in cells for s in src)
    assert diff[: manhattan - 1].max() <= 1e-12

    # the pulse is emitted from t = 0 at Ricker onset level exp(-pi^2) ~ 5e-5 of its peak;
    # the first difference above that level marks arrival of the emitted front
    first = int(np.argmax(diff > 1e-4 * scale)) + 1
    assert abs(first - arrival) <= 2.0
    assert diff[-1] > 0


def test_energy_grows_while_front_descends():
    # frames every 0.2 us from the start; the front hits the bottom after ~3 us
    cfg = replace(CFG, n_steps=150, frame_stride=10, n_frames=15)
    seq = W.run_simulation(cfg)
    energy = ((seq.frames - seq.frames.mean(axis=(1, 2), keepdims=True)) ** 2).sum(axis=(1, 2))
    t = np.array(cfg.frame_steps()) * cfg.dt_us
    sy, _ = _source_mm(cfg)
    reach_bottom = (cfg.region_mm[0] - sy) / cfg.wave_speed_mm_per_us

    first = seq.frames[0]
    assert np.argmax(np.abs(first - np.median(first)).max(axis=1)) < first.shape[0] // 4

    # while the wavelet is still being emitted (support ~2/f) energy only grows
    emitting = t <= 2.0 / cfg.source_center_frequency_MHz + 1e-9
    assert emitting.sum() >= 4
    assert np.all(np.diff(energy[emitting]) > 0)
    # afterwards the pressure-only energy stays on its plateau until the bottom echo
    free = (t > 2.0 / cfg.source_center_frequency_MHz) & (t < reach_bottom)
    assert free.sum() >= 5
    assert energy[free].min() >= 0.97 * energy[free].max()
    assert energy[free].min() >= energy[emitting].max() * 0.97


def test_defective_run_differs_near_defect():
    cfg = CFG
    d = W.DefectSpec((12.0, 30.0), 2.0)
    a = W.resample(W.simulate_raw(cfg), cfg.image_size)
    seq = W.run_simulation(cfg, d, "x")
    raw_b = W.resample(W.simulate_raw(cfg, d), cfg.image_size)
    lo, hi = raw_b.min(), raw_b.max()
    twin = (a - lo) / (hi - lo)
    r, c = seq.defect_center_px
    rr, cc = np.mgrid[: cfg.image_size[0], : cfg.image_size[1]]
    near = (rr - r) ** 2 + (cc - c) ** 2 <= 8**2
    assert np.abs(seq.frames - twin)[:, near].max() > 0.05


def test_run_simulation_normalized_and_deterministic():
    d = W.DefectSpec((12.0, 30.0), 2.0)
    s1 = W.run_simulation(CFG, d, "a")
    s2 = W.run_simulation(CFG, d, "a")
    np.testing.assert_array_equal(s1.frames, s2.frames)
    assert s1.frames.dtype == np.float32
    assert s1.frames.min() == 0.0 and s1.frames.max() == 1.0
    assert s1.is_defective and s1.defect_radius_px > 0


def test_normalize_constant_rejected():
    with pytest.raises(NormalizationError):
        W.normalize_sequence(np.ones((2, 4, 4)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=8, max_size=8))
def test_normalize_bounds(values):
    arr = np.array(values).reshape(2, 2, 2)
    if arr.max() == arr.min():
        with pytest.raises(NormalizationError):
            W.normalize_sequence(arr)
        return
    out = W.normalize_sequence(arr)
    assert out.min() == 0.0 and out.max() == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(1, 40))
def test_area_resample_preserves_mean(n_in, n_out):
    rng = np.random.default_rng(n_in * 100 + n_out)
    x = rng.normal(size=(n_in, n_in))
    y = W.resample(x, (n_out, n_out))
    assert y.shape == (n_out, n_out)
    assert abs(y.mean() - x.mean()) < 1e-9
    const = W.resample(np.full((n_in, n_in), 3.5), (n_out, n_out))
    np.testing.assert_allclose(const, 3.5)


def test_raster_roundtrip_and_bad_magic(tmp_path):
    frames = np.random.default_rng(0).random((3, 5, 7)).astype(np.float32)
    path = tmp_path / "x.luvt"
    W.write_raster(path, frames)
    raw = path.read_bytes()
    assert raw[:4] == b"LUVT" and len(raw) == 18 + 4 * frames.size
    np.testing.assert_array_equal(W.read_raster(path), frames)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        W.read_raster(path)
    path.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        W.read_raster(path)


def test_image_sequence_label_contract():
    f = np.zeros((1, 2, 2), np.float32)
    with pytest.raises(FormatError):
        W.ImageSequence(f, "defective")
    with pytest.raises(FormatError):
        W.ImageSequence(f, "defect-free", (1.0, 1.0))


def test_plan_dataset_counts_and_constraints():
    plan = W.plan_dataset(100, 50, CFG, 1)
    assert len(plan) == 150
    ok = [p for p in plan if p[2] is None]
    bad = [p for p in plan if p[2] is not None]
    assert len(ok) == 100 and len(bad) == 50
    for _, cfg, d in bad:
        d.validate(cfg.region_mm)
        assert not (W.defect_mask(cfg, d) & (W.source_weights(cfg) > 0)).any()
    cols = [cfg.source_position[1] for _, cfg, _ in plan]
    assert 0.0 <= min(cols) and max(cols) <= 1.0
    assert W.plan_dataset(100, 50, CFG, 1)[7][1] == plan[7][1]
    with pytest.raises(ConfigError):
        W.plan_dataset(0, 0, CFG, 1)
    with pytest.raises(ConfigError):
        W.plan_dataset(-1, 3, CFG, 1)


def test_synth_dataset_manifest(tmp_path):
    small = replace(CFG, n_steps=120, frame_stride=30, n_frames=4, image_size=(16, 16))
    out = tmp_path / "new" / "data"
    recs = W.synth_dataset(3, 2, small, 5, out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest == recs
    assert [r["label"] for r in manifest].count("defective") == 2
    for r in manifest:
        seq = W.load_sequence(out, r)
        assert seq.frames.shape == (4, 16, 16)
        if r["label"] == "defective":
            y, x = r["defect_center_mm"]
            assert 0 < y < small.region_mm[0] and 0 < x < small.region_mm[1]
        else:
            assert r["defect_center_px"] is None
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    W.synth_dataset(3, 2, small, 5, out, workers=2)
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first
