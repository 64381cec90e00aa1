import numpy as np
import pandas as pd
import pytest

from extraction_errors import UndefinedMetric
from extraction_metrics import (
    GridSpec,
    MetricReport,
    attenuation_at,
    attenuation_map,
    block_isinr,
    evaluate_extraction,
    evaluate_synthetic,
    fail_rate,
    isdr,
    isinr,
    metrics_table,
    sdr,
)
from mixing_model import ExtractionState, block_covariances, ogc_state
from scene_simulator import PathSpec, RoomSpec, Scenario, SourceSpec, linear_array, moving_mixture, synthetic_csv_mixture
from stft_service import StftConfig

FS = 16000


def _signals(seed=0, n=20000):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n), rng.standard_normal(n)


def _orthogonal_noise(s, power_ratio, seed=1):
    n = np.random.default_rng(seed).standard_normal(s.size)
    n -= np.dot(n, s) / np.dot(s, s) * s
    return n * np.sqrt(power_ratio * np.dot(s, s) / np.dot(n, n))


# ----------------------------------------------------------------------
# iSINR
# ----------------------------------------------------------------------

def test_isinr_identity_is_zero():
    soi, noise = _signals()
    assert isinr(soi, noise, soi, noise) == pytest.approx(0.0, abs=1e-12)


def test_isinr_perfect_extraction_is_capped():
    soi, noise = _signals()
    capped = []
    assert isinr(soi, np.zeros_like(noise), soi, noise, capped) == 80.0
    assert capped == ["isinr"]


def test_isinr_gain():
    soi, noise = _signals()
    # background attenuated by 10 dB
    assert isinr(soi, noise / np.sqrt(10), soi, noise) == pytest.approx(10.0)


def test_isinr_silent_soi():
    zeros = np.zeros(100)
    with pytest.raises(UndefinedMetric):
        isinr(zeros, zeros, zeros, zeros)


def test_block_isinr_marks_silent_blocks():
    soi, noise = _signals(n=3000)
    soi_out = soi.copy()
    soi_out[:1000] = 0
    noise_out = noise.copy()
    noise_out[:1000] = 0
    soi_in, noise_in = soi_out.copy(), noise_out.copy()
    values = block_isinr(soi_out, noise_out, soi_in, noise_in, 1000)
    assert np.isnan(values[0])
    assert np.allclose(values[1:], 0.0)


# ----------------------------------------------------------------------
# SDR
# ----------------------------------------------------------------------

def test_sdr_delayed_copy():
    s = np.zeros(4000)
    s[500:3500] = np.random.default_rng(2).standard_normal(3000)
    assert sdr(np.roll(s, 37), s, max_delay=512) == 80.0
    # out of the search range
    assert sdr(np.roll(s, 600), s, max_delay=512) < 0


def test_sdr_white_noise():
    s, _ = _signals(seed=3)
    e = s + _orthogonal_noise(s, 0.1)
    assert sdr(e, s) == pytest.approx(10.0, abs=0.1)


def test_sdr_is_scale_invariant():
    s, _ = _signals(seed=4)
    e = s + _orthogonal_noise(s, 0.1)
    assert sdr(3.0 * e, s) == pytest.approx(sdr(e, s))


def test_sdr_silent_reference():
    with pytest.raises(UndefinedMetric):
        sdr(np.ones(10), np.zeros(10))


def test_isdr():
    s, _ = _signals(seed=5)
    noisy = s + _orthogonal_noise(s, 0.1)
    assert isdr(s, s, noisy) == pytest.approx(70.0, abs=0.1)
    assert isdr(noisy, s, noisy) == pytest.approx(0.0, abs=1e-9)


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

def _static_scene():
    mics = linear_array([2.0, 2.0, 1.2], 2, 0.05)
    scenario = Scenario(
        room=RoomSpec([5.0, 4.0, 3.0], 0.0),
        mics=mics,
        soi=SourceSpec("soi", PathSpec.static([3.0, 2.5, 1.2], 1.0)),
        interferers=[SourceSpec("interferer0", PathSpec.static([1.0, 3.0, 1.2], 1.0))],
        duration=1.0,
    )
    return moving_mixture(scenario, seed=0)


def test_evaluate_identity_filter_scores_zero():
    scene = _static_scene()
    cfg = StftConfig(512, 128)
    K = cfg.n_bins
    w = np.zeros((K, 2), dtype=complex)
    w[:, 0] = 1.0
    a = np.zeros((K, 1, 2), dtype=complex)
    a[:, :, 0] = 1.0
    state = ExtractionState(w=w, a=a, sigma=np.ones((K, 1)))

    report = evaluate_extraction(state, scene.truth, cfg, ref=0, algorithm="identity", seed=0)
    assert report.isinr_db == pytest.approx(0.0, abs=1e-6)
    assert report.isdr_db == pytest.approx(0.0, abs=1e-6)
    assert not report.fail


def test_evaluate_synthetic_oracle():
    mix = synthetic_csv_mixture(4, 3, 2, 1000, seed=0)
    blocks = block_covariances(mix.x, 2)
    report = evaluate_synthetic(ogc_state(mix.w_true, blocks), mix, algorithm="oracle")
    assert report.isinr_db == 80.0
    assert np.isnan(report.isdr_db)
    assert len(report.block_isinr_db) == 2


def test_fail_rate():
    reports = [MetricReport("a", v, v, 0.0, v < -5) for v in (-6.0, 0.0, 10.0)]
    assert fail_rate(reports) == pytest.approx(100 / 3)
    with pytest.raises(UndefinedMetric):
        fail_rate([])


def test_metrics_table_summary_rows():
    reports = [
        MetricReport("block_auxive", 10.0, 9.0, 5.0, False, seed=0),
        MetricReport("block_auxive", -8.0, -7.0, -2.0, True, seed=1),
        MetricReport("bogive_w", 4.0, 4.0, 1.0, False, seed=0),
    ]
    table = metrics_table(reports)
    assert list(table.columns) == ["seed", "algorithm", "isinr_db", "isinr_global_db", "isdr_db", "fail", "wall_time_s"]
    summary = table[table["seed"] == "summary"].set_index("algorithm")
    assert len(summary) == 2
    assert summary.loc["block_auxive", "isinr_db"] == "1.00 ± 9.00"
    assert summary.loc["block_auxive", "fail"] == "50%"
    assert metrics_table([]).empty


# ----------------------------------------------------------------------
# Attenuation maps
# ----------------------------------------------------------------------

def test_single_mic_passthrough_is_zero_db():
    room = RoomSpec([5.0, 4.0, 3.0], 0.0)
    mics = np.array([[2.0, 2.0, 1.2]])
    filt = np.ones((257, 1), dtype=complex)
    att = attenuation_at([[3.0, 2.5, 1.2], [1.0, 1.0, 1.0]], filt, room, mics, duration=0.25, seed=0)
    assert np.allclose(att, 0.0, atol=1e-9)
    assert np.allclose(attenuation_at([[3.0, 2.5, 1.2]], 3.0 * filt, room, mics, duration=0.25, seed=0), 0.0,
                       atol=1e-9)


def test_broadside_beam_prefers_broadside():
    room = RoomSpec([5.0, 4.0, 3.0], 0.0)
    mics = linear_array([2.0, 2.0, 1.2], 4, 0.05)
    filt = np.full((257, 4), 0.25, dtype=complex)
    broadside, endfire = attenuation_at([[2.0, 3.5, 1.2], [3.5, 2.0, 1.2]], filt, room, mics, duration=0.25, seed=1)
    assert broadside > endfire + 1.0


def test_attenuation_map_is_thread_invariant():
    room = RoomSpec([5.0, 4.0, 3.0], 0.0)
    mics = linear_array([2.0, 2.0, 1.2], 2, 0.05)
    filt = np.full((257, 2), 0.5, dtype=complex)
    grid = GridSpec((3.0, 3.2), (2.8, 3.0), 1.2, spacing=0.1)
    one = attenuation_map(filt, room, mics, grid, seed=3, duration=0.1, n_jobs=1)
    two = attenuation_map(filt, room, mics, grid, seed=3, duration=0.1, n_jobs=2)
    assert one.points.shape == (9, 3)
    assert np.array_equal(one.attenuation_db, two.attenuation_db)
    frame = one.to_frame()
    assert isinstance(frame, pd.DataFrame)
    assert list(frame.columns) == ["x", "y", "z", "attenuation_db"]


def test_default_grid_is_two_centimetres():
    grid = GridSpec((1.0, 1.1), (2.0, 2.04), 1.0)
    assert grid.spacing == pytest.approx(0.02)
    points = grid.points()
    assert points.shape == (18, 3)
    assert np.allclose(np.unique(points[:, 1]), [2.0, 2.02, 2.04])


if __name__ == "__main__":
    test_sdr_white_noise()
    test_evaluate_identity_filter_scores_zero()
    print("✅ metric tests passed")
