import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdlmgroup.design import (DesignMatrix, DesignSpec, HrfParams, StimulusTrack,
                              TruncationWarning, assemble_design, block_track, boxcar,
                              hrf_convolve, hrf_kernel, merge_tracks)
from mdlmgroup.errors import ValidationError


def test_boxcar_direct_definition():
    track = StimulusTrack("a", [0.0], [10.0])
    np.testing.assert_array_equal(boxcar(track, 2.0, 10, oversample=1),
                                  [1, 1, 1, 1, 1, 0, 0, 0, 0, 0])


def test_boxcar_empty_track_is_zero():
    np.testing.assert_array_equal(boxcar(StimulusTrack("a"), 2.0, 10), np.zeros(160))


def test_boxcar_truncation_warns():
    track = StimulusTrack("a", [19.9], [10.0])
    with pytest.warns(TruncationWarning):
        sig = boxcar(track, 2.0, 10, oversample=1)
    assert sig[-1] == 0.0 and sig.sum() == 0.0  # 19.9 falls between the last samples
    with pytest.warns(TruncationWarning):
        sig = boxcar(StimulusTrack("a", [18.0], [10.0]), 2.0, 10, oversample=1)
    np.testing.assert_array_equal(sig[-2:], [0, 1])


def test_track_validation():
    with pytest.raises(ValidationError):
        StimulusTrack("a", [0.0, 1.0], [1.0])
    with pytest.raises(ValidationError):
        StimulusTrack("a", [2.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValidationError):
        StimulusTrack("a", [0.0], [-1.0])


def test_merge_tracks_sorts_and_unions():
    merged = merge_tracks([StimulusTrack("voice", [10.0, 30.0], [5.0, 5.0]),
                           StimulusTrack("other", [0.0, 20.0], [5.0, 5.0])], "stim")
    assert merged.onsets == (0.0, 10.0, 20.0, 30.0)
    assert merged.durations == (5.0,) * 4


def test_zero_signal_gives_zero_regressor():
    np.testing.assert_array_equal(hrf_convolve(np.zeros(160), HrfParams(), 2.0), np.zeros(10))


def test_impulse_response_peaks_near_five_seconds():
    kernel = hrf_kernel(HrfParams(), 0.01)
    assert abs(np.argmax(kernel) * 0.01 - 5.0) < 0.05
    track = StimulusTrack("imp", [0.0], [0.0])
    reg = hrf_convolve(boxcar(track, 1.0, 32), HrfParams(), 1.0)
    assert np.argmax(reg) == 5
    assert reg.max() == 1.0


def test_sustained_block_plateau_is_normalized():
    track = StimulusTrack("blk", [0.0], [60.0])
    reg = hrf_convolve(boxcar(track, 2.0, 40), HrfParams(), 2.0)
    assert np.max(np.abs(reg)) == pytest.approx(1.0)
    # plateau: late in the block the response is flat and positive
    assert np.ptp(reg[16:28]) < 1e-6 and reg[20] > 0.5


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=64, max_size=64),
       st.lists(st.floats(-5, 5), min_size=64, max_size=64))
def test_convolution_is_linear(a, b):
    a, b = np.array(a), np.array(b)
    hrf = HrfParams()
    lhs = hrf_convolve(a + b, hrf, 2.0, oversample=4, normalize=False)
    rhs = (hrf_convolve(a, hrf, 2.0, oversample=4, normalize=False)
           + hrf_convolve(b, hrf, 2.0, oversample=4, normalize=False))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_shift_equivariance_on_fine_grid():
    sig = np.zeros(320)
    sig[20:60] = 1.0
    shifted = np.roll(sig, 16)  # one TR at oversample 16
    a = hrf_convolve(sig, HrfParams(), 2.0, normalize=False)
    b = hrf_convolve(shifted, HrfParams(), 2.0, normalize=False)
    np.testing.assert_allclose(b[1:], a[:-1], atol=1e-12)


def test_design_columns_and_intercept():
    one = assemble_design(DesignSpec([block_track("s", 20, 20, 200)], 2.0, 100))
    assert one.p == 2 and one.names == ("intercept", "s")
    assert one.stimulus_indices() == [1]
    none = assemble_design(DesignSpec([], 2.0, 30))
    assert none.p == 1
    np.testing.assert_array_equal(none.columns[:, 0], np.ones(30))


def test_block_design_matches_direct_convolution():
    tr, n_scans, over = 2.0, 60, 16
    spec = DesignSpec([block_track("voice", 10, 10, tr * n_scans)], tr, n_scans)
    reg = assemble_design(spec).columns[:, 1]
    # oracle: explicit double loop over the fine grid
    dt = tr / over
    times = np.arange(n_scans * over) * dt
    stim = ((times % 20.0) < 10.0).astype(float)
    kernel = hrf_kernel(HrfParams(), dt)
    fine = np.array([sum(stim[i - j] * kernel[j] for j in range(min(i + 1, kernel.size)))
                     for i in range(stim.size)])
    oracle = fine[::over] / np.max(np.abs(fine[::over]))
    np.testing.assert_allclose(reg, oracle, atol=1e-12)
    # oscillates at the 20 s block period: ten cycles in 120 s
    centred = reg - reg.mean()
    spectrum = np.abs(np.fft.rfft(centred))
    assert np.argmax(spectrum) == 6


def test_design_is_deterministic_and_round_trips(tmp_path):
    spec = DesignSpec([block_track("s", 20, 20, 200)], 2.0, 100)
    a, b = assemble_design(spec), assemble_design(spec)
    assert a.columns.tobytes() == b.columns.tobytes()
    a.save(tmp_path / "d.json")
    c = DesignMatrix.load(tmp_path / "d.json")
    assert c.names == a.names and c.columns.tobytes() == a.columns.tobytes()


def test_design_spec_validation():
    with pytest.raises(ValidationError):
        DesignSpec([], 0.0, 10)
    with pytest.raises(ValidationError):
        DesignSpec([], 2.0, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assemble_design(DesignSpec([block_track("s", 20, 20, 200)], 2.0, 100))
