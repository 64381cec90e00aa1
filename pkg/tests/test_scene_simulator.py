import json
import os

import numpy as np
import pytest

from extraction_errors import ConfigError, InvalidGeometry, InvalidScenario
from scene_simulator import (
    PathSpec,
    RoomSpec,
    Scenario,
    SourceSpec,
    Waypoint,
    arc_path,
    crossfade_weights,
    image_method_rir,
    linear_array,
    moving_mixture,
    random_grid_path,
    room_rirs,
    speech_surrogate,
    synthetic_csv_mixture,
    write_scene,
)

FS = 16000
C = 343.0


def _room(t60=0.0):
    return RoomSpec([5.0, 4.0, 3.0], t60)


# ----------------------------------------------------------------------
# Room impulse responses
# ----------------------------------------------------------------------

def test_anechoic_integer_delay_is_a_scaled_impulse():
    dist = C * 32 / FS
    mic = np.array([1.0, 1.0, 1.5])
    h = image_method_rir(_room(), mic + [dist, 0, 0], mic, FS)
    assert np.argmax(np.abs(h)) == 32
    assert h[32] == pytest.approx(1 / (4 * np.pi * dist))
    others = np.delete(h, 32)
    assert np.max(np.abs(others)) < 1e-12


def test_anechoic_peak_for_one_meter():
    mic = np.array([1.0, 1.0, 1.5])
    h = image_method_rir(_room(), mic + [1.0, 0, 0], mic, FS)
    assert np.argmax(np.abs(h)) == 47


def test_doubling_distance_costs_six_db():
    mic = np.array([1.0, 1.0, 1.5])
    d1 = C * 32 / FS
    h1 = image_method_rir(_room(), mic + [d1, 0, 0], mic, FS)
    h2 = image_method_rir(_room(), mic + [2 * d1, 0, 0], mic, FS)
    drop = 20 * np.log10(np.max(np.abs(h2)) / np.max(np.abs(h1)))
    assert drop == pytest.approx(-6.02, abs=0.01)


def test_geometry_checks():
    with pytest.raises(InvalidGeometry):
        image_method_rir(_room(), [6.0, 1.0, 1.0], [1.0, 1.0, 1.0], FS)
    with pytest.raises(InvalidGeometry):
        image_method_rir(_room(), [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], FS)
    with pytest.raises(InvalidGeometry):
        RoomSpec([5.0, 4.0], 0.3)
    with pytest.raises(InvalidGeometry):
        RoomSpec([5.0, 4.0, 3.0], -0.1)


def test_sabine_absorption():
    room = _room(0.5)
    alpha = 24 * np.log(10) * room.volume / (C * room.surface * 0.5)
    assert room.absorption() == pytest.approx(alpha)
    assert room.reflection() == pytest.approx(np.sqrt(1 - alpha))
    assert _room(0.0).reflection() == 0.0
    # too short a t60 clips to full absorption
    assert _room(0.01).absorption() == 1.0


@pytest.mark.slow
def test_reverberant_decay_matches_t60():
    t60 = 1.0
    h = image_method_rir(_room(t60), [3.2, 2.6, 1.7], [1.3, 1.1, 1.2], FS, length=FS // 2)
    edc = np.cumsum(h[::-1] ** 2)[::-1]
    edc_db = 10 * np.log10(edc / edc[0])
    t = np.arange(len(h)) / FS
    sel = (edc_db <= -5) & (edc_db >= -15)
    slope = np.polyfit(t[sel], edc_db[sel], 1)[0]
    assert -60 / slope == pytest.approx(t60, rel=0.2)


# ----------------------------------------------------------------------
# Crossfades and paths
# ----------------------------------------------------------------------

def test_crossfade_weights_sum_to_one():
    bounds = np.array([0, 8000, 16000, 24000])
    weights = crossfade_weights(bounds, FS)
    assert weights.shape == (3, 24000)
    assert np.allclose(weights.sum(axis=0), 1.0)
    assert weights[0, 0] == 1.0 and weights[2, -1] == 1.0
    # ramps centred on the segment change
    assert 0 < weights[1, 8000] < 1


def test_crossfade_rejects_short_segment():
    with pytest.raises(InvalidScenario):
        crossfade_weights(np.array([0, 100, 16000]), FS)


def test_path_helpers():
    path = arc_path([2.5, 2.0, 1.5], 1.0, 0, 180, 5, 2.0)
    assert len(path.waypoints) == 5
    assert path.duration == pytest.approx(2.0)
    assert np.allclose(path.waypoints[0].position, [3.5, 2.0, 1.5])
    assert path.boundaries(FS, 32000).tolist() == [0, 6400, 12800, 19200, 25600, 32000]

    room = _room()
    walk = random_grid_path(room, [2.5, 2.0, 1.5], 0.1, 3, 0.5, 2.0, seed=1)
    assert walk.duration == pytest.approx(2.0)
    assert all(room.contains(wp.position) for wp in walk.waypoints)

    mics = linear_array([2.0, 2.0, 1.0], 4, 0.05)
    assert mics.shape == (4, 3)
    assert np.allclose(mics.mean(axis=0), [2.0, 2.0, 1.0])
    assert np.allclose(np.diff(mics[:, 0]), 0.05)


# ----------------------------------------------------------------------
# Scenes
# ----------------------------------------------------------------------

def _scene(t60=0.15, duration=1.0, **kw):
    room = _room(t60)
    mics = linear_array([2.0, 2.0, 1.2], 3, 0.05)
    soi = SourceSpec("soi", kw.pop("soi_path", PathSpec.static([3.0, 2.5, 1.2], duration)), kw.pop("soi_signal", None))
    return Scenario(
        room=room,
        mics=mics,
        soi=soi,
        interferers=kw.pop("interferers", [SourceSpec("interferer0", PathSpec.static([1.0, 3.0, 1.2], duration))]),
        noise=kw.pop("noise", [SourceSpec("noise0", PathSpec.static([4.0, 1.0, 1.8], duration))]),
        duration=duration,
        **kw,
    )


def test_mixture_is_sum_of_images():
    scene = moving_mixture(_scene(soi_to_background_db=3.0), seed=0)
    images = scene.truth.images
    total = images["soi"] + images["interference"] + images["noise"]
    assert np.allclose(scene.mixture.samples, total, atol=1e-12)

    ratio = np.mean(images["soi"] ** 2) / np.mean(scene.truth.background ** 2)
    assert 10 * np.log10(ratio) == pytest.approx(3.0, abs=1e-6)


def test_scene_is_deterministic():
    a = moving_mixture(_scene(), seed=5)
    b = moving_mixture(_scene(), seed=5)
    c = moving_mixture(_scene(), seed=6)
    assert np.array_equal(a.mixture.samples, b.mixture.samples)
    assert not np.array_equal(a.mixture.samples, c.mixture.samples)


def test_static_source_is_plain_convolution():
    dry = np.random.default_rng(1).standard_normal(FS)
    scenario = _scene(soi_signal=dry, interferers=[], noise=[])
    scene = moving_mixture(scenario, seed=0)
    rirs = room_rirs(scenario.room, scenario.soi.path.waypoints[0].position, scenario.mics, FS)
    for m, rir in enumerate(rirs):
        expected = np.convolve(dry, rir)[:FS]
        assert np.allclose(scene.mixture.samples[:, m], expected, atol=1e-10)


def test_identical_waypoints_match_static_source():
    pos = [3.0, 2.5, 1.2]
    static = moving_mixture(_scene(), seed=2)
    split = moving_mixture(_scene(soi_path=PathSpec([Waypoint(pos, 0.5), Waypoint(pos, 0.5)])), seed=2)
    assert np.allclose(static.truth.images["soi"], split.truth.images["soi"], atol=1e-10)


def test_invalid_scenarios():
    with pytest.raises(InvalidScenario):
        moving_mixture(_scene(soi_path=PathSpec.static([3.0, 2.5, 1.2], 0.5)), seed=0)
    with pytest.raises(InvalidScenario):
        moving_mixture(_scene(soi_signal=np.ones(100)), seed=0)


def test_speech_surrogate_is_unit_rms():
    sig = speech_surrogate(1.0, FS, seed=3)
    assert sig.shape == (FS,)
    assert np.sqrt(np.mean(sig ** 2)) == pytest.approx(1.0)


def test_scenario_from_dict():
    data = {
        "room": {"dimensions": [5, 4, 3], "t60": 0.2},
        "duration": 2.0,
        "mics": {"center": [2.0, 2.0, 1.2], "count": 4, "spacing": 0.05},
        "soi": {"path": {"arc": {"center": [2.0, 2.0, 1.2], "radius": 1.0,
                                 "start_deg": 0, "end_deg": 90, "points": 4}}},
        "interferers": [{"position": [1.0, 3.0, 1.2]}],
        "ratios": {"soi_to_background_db": -3},
    }
    scenario = Scenario.from_dict(data)
    assert scenario.mics.shape == (4, 3)
    assert len(scenario.soi.path.waypoints) == 4
    assert scenario.soi.path.duration == pytest.approx(2.0)
    assert scenario.soi_to_background_db == -3.0

    with pytest.raises(ConfigError):
        Scenario.from_dict({k: v for k, v in data.items() if k != "soi"})
    with pytest.raises(ConfigError):
        Scenario.from_dict({**data, "soi": {"path": {}}})


def test_write_scene(tmp_path):
    scene = moving_mixture(_scene(t60=0.0), seed=0)
    paths = write_scene(str(tmp_path), scene, {"seed": 0})
    for key in ("mixture", "soi", "interference", "noise", "soi_dry", "manifest"):
        assert os.path.exists(paths[key])
    with open(paths["manifest"], encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["n_samples"] == FS
    assert manifest["files"]["mixture"] == "mixture.wav"


# ----------------------------------------------------------------------
# Synthetic CSV mixtures
# ----------------------------------------------------------------------

def test_synthetic_separating_vector_is_exact():
    mix = synthetic_csv_mixture(6, 3, 4, 100, seed=0)
    s_hat = np.einsum("kd,knd->kn", mix.w_true.conj(), mix.x.coeffs)
    assert np.allclose(s_hat, mix.soi, atol=1e-12)
    assert np.allclose(np.einsum("kd,ktd->kt", mix.w_true.conj(), mix.a_true), 1.0)
    assert mix.x.coeffs.shape == (6, 400, 3)


def test_synthetic_block_variances():
    mix = synthetic_csv_mixture(4, 2, 3, 5000, seed=1)
    emp = np.stack([np.mean(np.abs(mix.soi[:, t * 5000:(t + 1) * 5000]) ** 2, axis=1) for t in range(3)], axis=1)
    ratio = emp / mix.sigma2
    assert abs(np.mean(ratio) - 1) < 0.1
    assert np.all(np.abs(ratio - 1) < 0.25)


def test_synthetic_is_deterministic_and_validated():
    a = synthetic_csv_mixture(4, 2, 2, 50, seed=9)
    b = synthetic_csv_mixture(4, 2, 2, 50, seed=9)
    assert np.array_equal(a.x.coeffs, b.x.coeffs)
    with pytest.raises(InvalidScenario):
        synthetic_csv_mixture(4, 1, 2, 50, seed=0)


if __name__ == "__main__":
    test_anechoic_integer_delay_is_a_scaled_impulse()
    test_mixture_is_sum_of_images()
    print("✅ scene simulator tests passed")
