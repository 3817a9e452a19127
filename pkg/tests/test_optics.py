import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvbridge.optics import (BridgePatch, Electrode, OpticsConfig, Scene, SourcePoint, drive_from_focus,
                             focus_position, illumination_at, transmission)
from nvbridge.photophysics import NVCentre

OPT = OpticsConfig(spot_radius=0.3, half_angle=0.38, refraction_factor=2.5, laser_power=10.0)
FAR_EL = [Electrode(x=(4.0, 6.0), y=(4.0, 6.0))]
coord = st.floats(min_value=-5.0, max_value=5.0)


def simple_scene(**optics):
    return Scene(
        nvs=[NVCentre(position=(0.0, 0.0, 0.0))],
        sources=[SourcePoint(position=(0.5, 0.5, 0.0))],
        bridges=[BridgePatch(center=(0.0, 0.5, 0.0), radius=0.1)],
        electrodes=[Electrode(x=(-1.0, 1.0), y=(0.4, 2.0))],
        optics=OpticsConfig(**{"laser_power": 10.0, **optics}),
    )


# ---------------------------------------------------------------- focus

def test_focus_examples():
    assert focus_position(20.0, (0.0, 0.0), OPT)[2] == 50.0
    assert focus_position(0.0, (1.0, 2.0), OPT).tolist() == [1.0, 2.0, 0.0]
    assert focus_position(-4.0, (0.0, 0.0), OPT)[2] == -4.0


@given(st.floats(min_value=-50.0, max_value=50.0), st.floats(min_value=1.01, max_value=4.0))
def test_refraction_is_piecewise_linear(oz, factor):
    opt = OpticsConfig(refraction_factor=factor)
    z = focus_position(oz, (0.0, 0.0), opt)[2]
    assert z == (factor * oz if oz > 0 else oz)


def test_focus_broadcasts():
    out = focus_position(np.array([-1.0, 0.0, 2.0]), np.zeros(2), OPT)
    assert out.shape == (3, 3)
    assert out[:, 2].tolist() == [-1.0, 0.0, 5.0]


# ---------------------------------------------------------------- illumination

def test_power_at_focus_is_laser_power():
    assert illumination_at((1.0, 2.0, 3.0), (1.0, 2.0, 3.0), OPT) == 10.0


def test_on_axis_at_twice_radius_is_quarter():
    dz = 2 * OPT.spot_radius / math.tan(OPT.half_angle)
    assert illumination_at((0, 0, dz), (0, 0, 0), OPT) == pytest.approx(2.5, rel=1e-12)
    assert illumination_at((0, 0, -dz), (0, 0, 0), OPT) == pytest.approx(2.5, rel=1e-12)


@settings(max_examples=200)
@given(coord, coord, coord, coord, coord, coord)
def test_maximum_exactly_at_focus(px, py, pz, fx, fy, fz):
    p, f = (px, py, pz), (fx, fy, fz)
    val = illumination_at(p, f, OPT)
    assert val <= OPT.laser_power
    if val == OPT.laser_power:
        # the cone radius is capped at the waist, so the peak value extends along the
        # axis for |dz| tan(theta) <= w; off axis only rounding can saturate exp(-rho^2/r^2)
        assert math.hypot(px - fx, py - fy) < 1e-7
        assert abs(pz - fz) * math.tan(OPT.half_angle) <= OPT.spot_radius * (1 + 1e-12)


@settings(max_examples=100)
@given(coord, coord, coord, st.floats(min_value=-1.0, max_value=1.0), st.floats(min_value=-1.0, max_value=1.0))
def test_continuity(px, py, pz, ux, uz):
    f = np.array([0.3, -0.2, 1.0])
    p = np.array([px, py, pz])
    eps = 1e-7
    a = illumination_at(p, f, OPT)
    b = illumination_at(p + eps * np.array([ux, 0.0, uz]), f, OPT)
    c = illumination_at(p, f + eps * np.array([0.0, ux, uz]), OPT)
    # the density is Lipschitz with a constant bounded by ~P / spot_radius
    bound = 10 * OPT.laser_power / OPT.spot_radius * eps
    assert abs(a - b) <= bound and abs(a - c) <= bound


def test_transmission_only_for_surface_points_under_electrode():
    el = [Electrode(x=(0.0, 1.0), y=(0.0, 1.0), transparency=0.3)]
    pts = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 1.0], [2.0, 0.5, 0.0]])
    assert transmission(pts, el).tolist() == [0.3, 1.0, 1.0]
    assert illumination_at(pts[0], pts[0], OPT, el) == pytest.approx(3.0)


def test_depth_cone_widens_with_distance():
    f = np.array([0.0, 0.0, 0.0])
    widths = []
    for dz in np.linspace(0.0, 20.0, 41):
        x = np.linspace(0, 20, 20001)
        prof = illumination_at(np.column_stack([x, 0 * x, dz + 0 * x]), f, OPT)
        widths.append(x[np.argmax(prof < prof[0] / 2)])
    assert np.all(np.diff(widths) >= 0)
    assert widths[-1] > 5 * widths[0]


# ---------------------------------------------------------------- drives

def test_far_bridge_sees_nothing():
    scene = Scene(nvs=[NVCentre(position=(0, 0, 0))], sources=[SourcePoint(position=(5, 5, 0))],
                  bridges=[BridgePatch(center=(3.0, 0.0, 0.0), radius=0.1)], electrodes=FAR_EL, optics=OPT)
    d = drive_from_focus(scene, (0.0, 0.0, 0.0))
    assert d.P_b[0, 0] < 1e-6 * OPT.laser_power
    assert d.P_nv[0, 0] == OPT.laser_power


def test_near_bridge_edge_is_illuminated():
    # NV 0.2 um from the edge of a Bridge of radius 0.1
    scene = Scene(nvs=[NVCentre(position=(0, 0, 0))], sources=[SourcePoint(position=(5, 5, 0))],
                  bridges=[BridgePatch(center=(0.3, 0.0, 0.0), radius=0.1)], electrodes=FAR_EL, optics=OPT)
    d = drive_from_focus(scene, (0.0, 0.0, 0.0))
    assert d.P_b[0, 0] > 0.1 * OPT.laser_power


def test_bridge_averages_nine_samples():
    b = BridgePatch(center=(0.2, 0.1, 0.0), radius=0.3)
    pts = b.sample_points()
    assert pts.shape == (9, 3)
    assert np.allclose(pts.mean(axis=0), [0.2, 0.1, 0.0])
    assert np.all(pts[:, 2] == 0.0)
    scene = Scene(nvs=[], sources=[SourcePoint(position=(5, 5, 0))], bridges=[b], electrodes=FAR_EL, optics=OPT)
    focus = np.array([0.5, -0.3, 1.0])
    d = drive_from_focus(scene, focus)
    assert d.P_b[0, 0] == pytest.approx(np.mean(illumination_at(pts, focus, OPT)), rel=1e-14)


def test_aux_beam_adds_on_the_bridge_only():
    scene = Scene(nvs=[NVCentre(position=(0, 0, 0))], sources=[SourcePoint(position=(5, 5, 0))],
                  bridges=[BridgePatch(center=(3.0, 0.0, 0.0), radius=0.1)], electrodes=FAR_EL,
                  optics=OpticsConfig(laser_power=10.0, aux_power=2.0, aux_offset=(3.0, 0.0, 0.0)))
    off = drive_from_focus(scene, (0.0, 0.0, 0.0))
    on = drive_from_focus(scene, (0.0, 0.0, 0.0), aux_on=True)
    aux_only = np.mean(illumination_at(scene.bridges[0].sample_points(), (3.0, 0.0, 0.0), scene.optics, power=2.0))
    assert on.P_b[0, 0] == pytest.approx(off.P_b[0, 0] + aux_only, rel=1e-12)
    assert on.P_nv[0, 0] == pytest.approx(off.P_nv[0, 0], rel=1e-12)


@settings(max_examples=100)
@given(coord, coord, st.floats(min_value=-2.0, max_value=2.0), st.floats(min_value=-2.0, max_value=2.0),
       st.floats(min_value=-1.0, max_value=3.0))
def test_translational_invariance(sx, sy, fx, fy, fz):
    # shifts on a 1/64 grid keep every coordinate exactly representable
    sx, sy = round(sx * 64) / 64, round(sy * 64) / 64
    base = simple_scene()

    def shifted(p):
        return (p[0] + sx, p[1] + sy, p[2])

    moved = Scene(
        nvs=[NVCentre(position=shifted(n.position)) for n in base.nvs],
        sources=[SourcePoint(position=shifted(s.position)) for s in base.sources],
        bridges=[BridgePatch(center=shifted(b.center), radius=b.radius) for b in base.bridges],
        electrodes=[Electrode(x=(e.x[0] + sx, e.x[1] + sx), y=(e.y[0] + sy, e.y[1] + sy)) for e in base.electrodes],
        optics=base.optics,
    )
    f = np.array([fx, fy, fz])
    d0 = drive_from_focus(base, f)
    d1 = drive_from_focus(moved, f + np.array([sx, sy, 0.0]))
    for a, b in ((d0.P_nv, d1.P_nv), (d0.P_s, d1.P_s), (d0.P_b, d1.P_b)):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-300)


# ---------------------------------------------------------------- validation

@pytest.mark.parametrize("kwargs", [dict(spot_radius=0.0), dict(refraction_factor=1.0), dict(laser_power=-1.0)])
def test_optics_validation(kwargs):
    with pytest.raises(ValueError):
        OpticsConfig(**kwargs)


def test_bridge_must_sit_on_surface():
    with pytest.raises(ValueError):
        BridgePatch(center=(0, 0, 1.0), radius=0.1)
    with pytest.raises(ValueError):
        BridgePatch(center=(0, 0, 0), radius=0.0)


def test_scene_rejects_bad_indices_and_duplicate_bridges():
    with pytest.raises(ValueError):
        Scene(nvs=[], sources=[SourcePoint(position=(0, 0, 0), electrode=3)], bridges=[], electrodes=[])
    el = [Electrode(x=(0, 1), y=(0, 1))]
    two = [BridgePatch(center=(0, 0, 0), radius=0.1), BridgePatch(center=(1, 0, 0), radius=0.1)]
    with pytest.raises(ValueError):
        Scene(nvs=[], sources=[], bridges=two, electrodes=el)


def test_digest_tracks_content():
    a = simple_scene()
    assert a.digest() == simple_scene().digest()
    assert a.digest() != simple_scene(laser_power=11.0).digest()
    assert a.with_optics(laser_power=11.0).optics.laser_power == 11.0
    assert a.with_nv(0, g_nv=2.0).nvs[0].g_nv == 2.0
