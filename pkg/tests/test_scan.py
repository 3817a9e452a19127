from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from nvbridge.config import load_config
from nvbridge.model import ModelParams
from nvbridge.optics import BridgePatch, Electrode, OpticsConfig, Scene, SourcePoint
from nvbridge.photophysics import NVCentre
from nvbridge.scan import (Axis, ScanPlan, charge_vs_time, current_vs_generation, dark_spots, half_widths,
                           reference_state, run_contrast_sweep, run_decay, run_depth_scan, run_discharge,
                           run_power_sweep, run_reset_scan, run_standard_scan)


def spot_positions(result, centroids):
    """Centroids (row, col) in pixel units -> (x, y) for an xy scan with rows along y."""
    r0, rp = result.metadata["rows"]["start"], result.metadata["rows"]["pitch"]
    c0, cp = result.metadata["cols"]["start"], result.metadata["cols"]["pitch"]
    return [(c0 + cp * c, r0 + rp * r) for r, c in centroids]


def nv_on_source_scene():
    """NV and Source share a spot; the Bridge sits 2 um away on the same electrode."""
    return Scene(
        nvs=[NVCentre(position=(0.0, 0.0, 0.0), g_nv=0.5)],
        sources=[SourcePoint(position=(0.0, 0.0, 0.0))],
        bridges=[BridgePatch(center=(2.0, 0.0, 0.0), radius=0.2)],
        electrodes=[Electrode(x=(-0.5, 5.0), y=(-1.0, 1.0), transparency=1.0)],
        optics=OpticsConfig(laser_power=2.0),
        params=(ModelParams(B_max=1.0, kappa_rec=0.0),),
    )


XY = dict(rows=Axis("y", -1.0, 1.0, 0.2), cols=Axis("x", -2.0, 2.6, 0.2))


# ---------------------------------------------------------------- plan

@pytest.mark.parametrize("kwargs", [dict(kind="nope"), dict(settle_time=0.0), dict(reset_threshold=0.0),
                                    dict(reset_threshold=1.5), dict(order="spiral"), dict(restore="maybe"),
                                    dict(rows=Axis("x", 0, 1, 0.5), cols=Axis("x", 0, 1, 0.5))])
def test_plan_validation(kwargs):
    with pytest.raises(ValueError):
        ScanPlan(**kwargs)


def test_axis_values_and_validation():
    assert Axis("x", -2.0, 2.0, 0.2).values.size == 21
    assert Axis("z", 0.0, 0.0, 1.0).values.tolist() == [0.0]
    for bad in (dict(name="q"), dict(pitch=0.0), dict(stop=-5.0)):
        with pytest.raises(ValueError):
            Axis(**{"name": "x", "start": 0.0, "stop": 1.0, "pitch": 0.1, **bad})


# ---------------------------------------------------------------- standard scan

def test_standard_scan_current_only_within_nv_spot():
    scene = nv_on_source_scene()
    res = run_standard_scan(scene, ScanPlan(kind="standard", **XY))
    J = res.reset_map
    assert res.reset_map.shape == (XY["rows"].values.size, XY["cols"].values.size)
    Y, X = np.meshgrid(res.row_values, res.col_values, indexing="ij")
    lit = np.abs(J) > 1e-3 * np.max(np.abs(J))
    assert lit.any()
    assert np.all(np.hypot(X[lit], Y[lit]) <= 3 * scene.optics.spot_radius)
    assert np.all(np.isnan(res.reaction_map))


def test_standard_scan_of_empty_scene_is_zero():
    empty = Scene(nvs=[], sources=[], bridges=[], electrodes=[])
    res = run_standard_scan(empty, ScanPlan(kind="standard", **XY))
    assert np.all(res.reset_map == 0.0)


def test_second_standard_scan_not_below_first():
    scene, _ = load_config("sample_m")
    plan = ScanPlan(kind="standard", rows=Axis("y", -2, 2, 0.4), cols=Axis("x", -2, 2, 0.4))
    first = run_standard_scan(scene, plan)
    second = run_standard_scan(scene, plan, initial_B=first.final_B)
    assert np.all(second.reset_map >= first.reset_map * (1 - 1e-6) - 1e-9)
    assert np.any(second.reset_map > first.reset_map * 1.01)


def test_standard_scan_is_path_dependent():
    scene, plan = load_config("sample_m")
    rows = run_standard_scan(scene, replace(plan, kind="standard", order="row")).reset_map
    cols = run_standard_scan(scene, replace(plan, kind="standard", order="column")).reset_map
    rel = np.abs(rows - cols) / np.maximum(np.abs(rows), np.abs(cols))
    assert np.nanmax(rel) > 0.05


# ---------------------------------------------------------------- reset scan

@pytest.fixture(scope="module")
def sample_m_far():
    scene, plan = load_config("sample_m")
    return scene, plan, run_reset_scan(scene, plan)


@pytest.fixture(scope="module")
def sample_m_near():
    scene, plan = load_config("sample_m_near")
    return scene, plan, run_reset_scan(scene, plan)


def test_reset_scan_far_nv_two_dark_spots_at_bridges(sample_m_far):
    scene, plan, res = sample_m_far
    count, cents = dark_spots(res.reaction_map, res.metadata["J_ref"])
    assert count == 2
    centres = np.array([b.center[:2] for b in scene.bridges])
    for p in spot_positions(res, cents):
        assert np.min(np.hypot(*(centres - p).T)) <= scene.optics.spot_radius


def test_reset_scan_near_nv_one_dark_spot(sample_m_near):
    scene, plan, res = sample_m_near
    count, cents = dark_spots(res.reaction_map, res.metadata["J_ref"])
    assert count == 1
    centres = np.array([b.center[:2] for b in scene.bridges])
    (p,) = spot_positions(res, cents)
    assert np.min(np.hypot(*(centres - p).T)) <= scene.optics.spot_radius


def test_bridge_pixel_depresses_reaction_far_pixel_does_not(sample_m_far):
    scene, plan, res = sample_m_far
    J_ref = res.metadata["J_ref"]
    bx, by = scene.bridges[0].center[:2]
    i = int(np.argmin(np.abs(res.row_values - by)))
    j = int(np.argmin(np.abs(res.col_values - bx)))
    assert res.reaction_map[i, j] < 0.7 * J_ref
    # corner pixel: nothing nearby
    assert res.reaction_map[0, -1] == pytest.approx(J_ref, rel=1e-6)
    assert res.per_pixel_tau[0, -1] == 0.0


def test_far_pixel_reset_value_is_background(sample_m_far):
    scene, plan, res = sample_m_far
    J_ref, B_ref, _ = reference_state(scene, plan)
    # a pixel far from every element carries only the residual Source tails
    assert abs(res.reset_map[0, -1]) < 1e-6 * J_ref


def test_tau_non_negative_and_time_out_flagged(sample_m_far):
    scene, plan, res = sample_m_far
    assert np.all(res.per_pixel_tau >= 0)
    assert not res.timed_out.any()
    short = run_reset_scan(scene, replace(plan, tau_cap=1e-3, rows=Axis("y", 0.4, 0.8, 0.2),
                                          cols=Axis("x", 0.6, 1.0, 0.2)))
    assert short.timed_out.any()
    assert np.all(short.per_pixel_tau[short.timed_out] == 1e-3)


@pytest.mark.parametrize("order", ["column", "random"])
def test_reset_scan_is_order_independent(sample_m_near, order):
    scene, plan, base = sample_m_near
    other = run_reset_scan(scene, replace(plan, order=order, seed=3))
    np.testing.assert_allclose(other.reset_map, base.reset_map, rtol=1e-9, atol=0)
    np.testing.assert_allclose(other.reaction_map, base.reaction_map, rtol=1e-9, atol=0)


def test_noise_is_drawn_in_grid_order(sample_m_near):
    scene, plan, _ = sample_m_near
    a = run_reset_scan(scene, replace(plan, noise_sigma=0.5, seed=11))
    b = run_reset_scan(scene, replace(plan, noise_sigma=0.5, seed=11, order="random"))
    np.testing.assert_allclose(a.reset_map, b.reset_map, rtol=1e-9)
    c = run_reset_scan(scene, replace(plan, noise_sigma=0.5, seed=12))
    assert not np.allclose(a.reset_map, c.reset_map)


def test_carry_restore_runs_sequentially(sample_m_near):
    scene, plan, ideal = sample_m_near
    small = replace(plan, rows=Axis("y", 0.2, 1.0, 0.4), cols=Axis("x", 0.4, 1.2, 0.4))
    carry = run_reset_scan(scene, replace(small, restore="carry"))
    ref = run_reset_scan(scene, small)
    # each pixel starts within the threshold band of the settled state
    assert np.all(carry.reaction_map >= 0.5 * ref.reaction_map)
    assert np.all(carry.per_pixel_tau >= 0)


def test_metadata_echoes_plan(sample_m_far):
    scene, plan, res = sample_m_far
    md = res.metadata
    assert md["scene_hash"] == scene.digest()
    assert md["rows"]["pitch"] == plan.rows.pitch
    assert md["kind"] == "reset"


# ---------------------------------------------------------------- depth scan

@pytest.fixture(scope="module")
def depth_single():
    scene, plan = load_config("depth_single")
    return scene, plan, run_depth_scan(scene, plan)


def test_depth_peak_at_twenty_micrometres(depth_single):
    scene, plan, res = depth_single
    i, j = np.unravel_index(np.argmax(res.reset_map), res.reset_map.shape)
    assert res.row_values[i] == 20.0
    assert res.col_values[j] == 0.0
    assert res.metadata["focus_depth"][i] == 50.0
    assert res.metadata["depth_axis"] == "rows"


def test_depth_cone_widens_away_from_peak(depth_single):
    scene, plan, res = depth_single
    w = half_widths(res.reset_map, res.col_values)
    i = int(np.argmax(res.reset_map.max(axis=1)))
    assert np.all(np.diff(w[i:]) >= -1e-12)
    assert np.all(np.diff(w[: i + 1]) <= 1e-12)
    assert w[0] > 3 * w[i] and w[-1] > 3 * w[i]


def test_depth_scan_without_sources_is_zero():
    scene = Scene(nvs=[NVCentre(position=(0, 0, 0))], sources=[],
                  bridges=[BridgePatch(center=(0.5, 0, 0), radius=0.1)], electrodes=[Electrode((0, 1), (-1, 1))])
    plan = ScanPlan(kind="depth_reset", rows=Axis("z", -2, 4, 1.0), cols=Axis("y", -2, 2, 0.5))
    res = run_depth_scan(scene, plan)
    assert np.all(res.reset_map == 0.0) and np.all(res.reaction_map == 0.0)


def test_depth_scan_needs_a_z_axis():
    scene, _ = load_config("depth_single")
    with pytest.raises(ValueError):
        run_depth_scan(scene, ScanPlan(kind="depth_reset"))


# ---------------------------------------------------------------- decay

def test_decay_below_one_percent_within_thirty_seconds():
    scene, plan = load_config("sample_g")
    rec = run_decay(scene, plan, plan.probe, duration=60.0)
    assert np.all(np.diff(rec.J) <= 0)
    assert 15.0 <= rec.t_one_percent <= 45.0


# ---------------------------------------------------------------- discharge

@pytest.fixture(scope="module")
def discharge():
    return load_config("discharge")


def test_discharge_zero_time_gives_zero_charge(discharge):
    scene, plan = discharge
    rec = run_discharge(scene, plan, 0.0)
    assert rec.integrated_charge == 0.0


def test_discharge_monotone_saturating_and_conserved(discharge):
    scene, plan = discharge
    times = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 30.0]
    recs = charge_vs_time(scene, plan, times)
    Q = np.array([r.integrated_charge for r in recs])
    assert np.all(np.diff(Q) >= -1e-9 * Q.max())
    B_max = scene.params[0].B_max
    assert Q[-1] == pytest.approx(plan.q_scale * B_max, rel=2e-3)
    assert Q[-1] <= plan.q_scale * B_max
    for r in recs[1:]:
        assert r.conservation_error() < 1e-6
        assert r.B_end < 1e-3 * B_max


@settings(max_examples=10, deadline=None)
@given(st.floats(min_value=0.1, max_value=5.0), st.floats(min_value=0.1, max_value=10.0))
def test_discharge_conservation_scales_with_q(t, q):
    scene, plan = load_config("discharge")
    rec = run_discharge(scene, replace(plan, q_scale=q), t)
    assert rec.conservation_error() < 1e-6
    assert trapezoid(rec.spike_I, rec.spike_t) == pytest.approx(rec.integrated_charge, rel=1e-2)


def test_nv_current_proportional_to_charge_after_first_second(discharge):
    scene, plan = discharge
    recs = charge_vs_time(scene, plan, np.linspace(1.0, 10.0, 10))
    ratio = np.array([r.J_nv / r.integrated_charge for r in recs])
    assert np.ptp(ratio) / np.mean(ratio) < 0.10


def test_discharge_bad_arguments(discharge):
    scene, plan = discharge
    with pytest.raises(ValueError):
        run_discharge(scene, plan, -1.0)
    with pytest.raises(ValueError):
        run_discharge(scene, replace(plan, bridge=4), 1.0)


# ---------------------------------------------------------------- sweeps

def test_power_sweep_monotone_in_aux_and_linear_without():
    scene, plan = load_config("aux_enhancement")
    main = np.geomspace(0.5, 500.0, 13)
    aux = [0.0, 0.5, 1.0, 2.0, 4.0]
    table = run_power_sweep(scene, plan, main, aux)
    J = table[:, 2].reshape(len(aux), len(main))
    assert np.all(np.diff(J, axis=0) <= 1e-12 * J[:-1])
    slope = J[0, -3:] / main[-3:]
    assert np.ptp(slope) / slope.mean() < 0.01
    with pytest.raises(ValueError):
        run_power_sweep(scene, plan, [0.0, 1.0], [0.0])


def test_contrast_zero_without_odmr():
    scene, plan = load_config("calibration")
    flat = scene.with_nv(0, odmr_contrast=0.0)
    for _, _, pair in run_contrast_sweep(flat, plan, main_powers=[0.5, 2.0, 8.0]):
        assert pair.C_PC == 0.0 and pair.C_PL == 0.0


def test_contrast_vanishes_at_saturation():
    scene, plan = load_config("calibration")
    out = run_contrast_sweep(scene, plan, main_powers=[1.0, 10.0, 100.0, 1000.0])
    c = [p.C_PC for _, _, p in out]
    assert np.all(np.diff(c) < 0)
    assert c[-1] < 1e-3


def test_aux_restores_contrast():
    scene, plan = load_config("aux_enhancement")
    out = run_contrast_sweep(scene, plan, aux_powers=plan.aux_powers)
    c = [p.C_PC for _, _, p in out]
    assert c[0] == pytest.approx(0.03, abs=0.01)
    assert max(c) >= 0.20


def test_contrast_sweep_needs_exactly_one_axis():
    scene, plan = load_config("calibration")
    with pytest.raises(ValueError):
        run_contrast_sweep(scene, plan)
    with pytest.raises(ValueError):
        run_contrast_sweep(scene, plan, main_powers=[1.0], aux_powers=[1.0])


def test_contrast_matches_curve_secant():
    scene, plan = load_config("calibration")
    (_, _, pair), = run_contrast_sweep(scene, plan, main_powers=[2.0])
    G, J = current_vs_generation(scene, plan, [1.0 - scene.nvs[0].odmr_contrast, 1.0], main_power=2.0)
    assert pair.C_PC == pytest.approx((J[1] - J[0]) / J[1], rel=1e-9)
    assert pair.identity_residual() < 1e-12


# ---------------------------------------------------------------- analysis helpers

def test_dark_spots_and_half_widths_on_synthetic_maps():
    m = np.ones((10, 10))
    m[2:4, 2:4] = 0.1
    m[7, 7] = 0.2
    count, cents = dark_spots(m, 1.0)
    assert count == 2
    assert cents[0] == (2.5, 2.5) and cents[1] == (7.0, 7.0)
    x = np.linspace(-5, 5, 101)
    prof = np.exp(-x**2 / 2)[None, :]
    assert half_widths(prof, x)[0] == pytest.approx(2 * np.sqrt(2 * np.log(2)), rel=1e-3)
