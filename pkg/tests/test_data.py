import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nowcast.data import (CADENCE, DataError, NormalizationSpec, RainField, SyntheticConfig, chronological_split,
                          crop_boxes, forward_transform, inverse_transform, load_dataset, read_granule,
                          save_dataset, synth_advection, synth_fields, window_sequences, write_granule)

from conftest import T0

SPEC = NormalizationSpec.analytic(100.0)


def _fields(n, gap_at=None, size=4):
    out, t = [], T0
    for k in range(n):
        if gap_at is not None and k == gap_at:
            t += CADENCE
        out.append(RainField(values=np.full((size, size), float(k)), timestamp=t))
        t += CADENCE
    return out


class TestReadGranule:
    def test_zero_field(self, tmp_path):
        p = write_granule(tmp_path / "g.HDF5", np.zeros((20, 30)), T0)
        f = read_granule(p)
        assert f.values.shape == (20, 30)
        assert not f.values.any()
        assert f.timestamp == T0

    def test_single_pixel_round_trip(self, tmp_path):
        v = np.zeros((16, 16))
        v[3, 7] = 12.5
        f = read_granule(write_granule(tmp_path / "g.HDF5", v, T0))
        assert np.count_nonzero(f.values) == 1
        assert f.values[3, 7] == 12.5

    def test_sentinel_maps_to_zero(self, tmp_path):
        v = np.ones((8, 8))
        v[2, 2] = -9999.9
        f = read_granule(write_granule(tmp_path / "g.HDF5", v, T0))
        assert f.values[2, 2] == 0.0
        assert f.values.sum() == 63.0

    def test_timestamp_from_filename(self, tmp_path):
        import h5py

        p = tmp_path / "3B-HHR-E.MS.MRG.3IMERG.20230309-S033000-E035959.0210.V07B.HDF5"
        with h5py.File(p, "w") as f:
            f.create_dataset("Grid/precipitation", data=np.zeros((1, 4, 4), dtype=np.float32))
        assert read_granule(p).timestamp == dt.datetime(2023, 3, 9, 3, 30, tzinfo=dt.timezone.utc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_granule(tmp_path / "nope.HDF5")

    def test_missing_dataset(self, tmp_path):
        p = write_granule(tmp_path / "g.HDF5", np.zeros((4, 4)), T0)
        with pytest.raises(DataError, match="missing dataset"):
            read_granule(p, dataset_path="Grid/precipitationCal")

    def test_nan_rejected(self, tmp_path):
        v = np.zeros((4, 4))
        v[0, 0] = np.nan
        with pytest.raises(DataError):
            read_granule(write_granule(tmp_path / "g.HDF5", v, T0))


class TestCropBoxes:
    def test_quadrants_tile(self, rng):
        f = RainField(values=rng.uniform(0, 5, (256, 256)), timestamp=T0)
        boxes = [(0, 0), (0, 128), (128, 0), (128, 128)]
        crops = crop_boxes(f, boxes)
        assert all(c.values.shape == (128, 128) for c in crops)
        top = np.hstack([crops[0].values, crops[1].values])
        bottom = np.hstack([crops[2].values, crops[3].values])
        np.testing.assert_array_equal(np.vstack([top, bottom]), f.values)

    def test_full_extent_identity(self, rng):
        f = RainField(values=rng.uniform(0, 5, (128, 128)), timestamp=T0)
        np.testing.assert_array_equal(crop_boxes(f, [(0, 0)])[0].values, f.values)

    def test_overlap_consistent(self, rng):
        f = RainField(values=rng.uniform(0, 5, (200, 200)), timestamp=T0)
        a, b = crop_boxes(f, [(10, 20), (50, 60)])
        np.testing.assert_array_equal(a.values[40:, 40:], b.values[:88, :88])

    def test_out_of_bounds(self):
        f = RainField(values=np.zeros((130, 130)), timestamp=T0)
        with pytest.raises(DataError):
            crop_boxes(f, [(3, 0)])


class TestTransforms:
    def test_zero_maps_to_zero(self):
        assert not forward_transform(np.zeros((4, 4)), SPEC).any()

    def test_clip_max_maps_to_one(self):
        np.testing.assert_allclose(forward_transform(np.full((3, 3), 100.0), SPEC), 1.0, rtol=0, atol=1e-15)

    def test_scalar(self):
        assert forward_transform(np.array(5.0), SPEC) == pytest.approx(math.log(6) / math.log(101), rel=1e-14)

    def test_values_above_clip_saturate(self):
        assert forward_transform(np.array(500.0), SPEC) == pytest.approx(1.0)

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            forward_transform(np.array([-1.0]), SPEC)

    def test_degenerate_spec(self):
        with pytest.raises(DataError):
            NormalizationSpec(minmax_lo=1.0, minmax_hi=1.0)

    def test_inverse_zero(self):
        assert inverse_transform(np.array(0.0), SPEC) == 0.0

    def test_inverse_half(self):
        expected = math.exp(0.5 * math.log(101)) - 1  # sqrt(101) - 1
        assert inverse_transform(np.array(0.5), SPEC) == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(9.05, abs=5e-3)

    def test_inverse_range_checked(self):
        with pytest.raises(DataError):
            inverse_transform(np.array([1.2]), SPEC)

    @given(st.floats(0.0, 100.0))
    def test_round_trip(self, x):
        back = float(inverse_transform(forward_transform(np.array(x), SPEC), SPEC))
        assert abs(back - x) < 1e-5 * max(1.0, x)

    @given(st.floats(0.0, 99.0), st.floats(1e-6, 1.0))
    def test_strictly_increasing(self, x, dx):
        a, b = forward_transform(np.array([x, x + dx]), SPEC)
        assert b > a


class TestWindowing:
    def test_minimal_window(self):
        assert len(window_sequences(_fields(9), h=8)) == 1

    def test_two_windows_share_frames(self):
        seqs = window_sequences(_fields(10), h=8, spec=SPEC)
        assert len(seqs) == 2
        np.testing.assert_array_equal(seqs[0].frames[1:], seqs[1].frames[:8])
        assert seqs[1].start_time - seqs[0].start_time == CADENCE

    def test_gap_rejected(self):
        assert window_sequences(_fields(9, gap_at=4), h=8) == []

    def test_too_few_frames(self):
        with pytest.raises(DataError):
            window_sequences(_fields(5), h=8)

    def test_conservation(self):
        src = _fields(14)
        for s in window_sequences(src, h=8, stride=2, spec=SPEC):
            start = [f.timestamp for f in src].index(s.start_time)
            for k in range(s.frames.shape[0]):
                np.testing.assert_array_equal(s.frames[k, 0], forward_transform(src[start + k].values, SPEC).astype(np.float32))

    def test_context_window(self):
        seqs = window_sequences(_fields(12), h=8, context=4)
        assert len(seqs) == 1
        assert seqs[0].frames.shape[0] == 12 and seqs[0].h == 8
        np.testing.assert_array_equal(seqs[0].x0, seqs[0].frames[3])

    def test_normalized_range(self, rng):
        fields = [RainField(values=rng.exponential(5.0, (8, 8)), timestamp=T0 + k * CADENCE) for k in range(9)]
        s = window_sequences(fields, h=8)[0]
        assert s.frames.min() >= 0 and s.frames.max() <= 1


class TestSynthetic:
    def test_static(self):
        seqs = synth_advection(SyntheticConfig(n_sequences=3, advection_velocity=(0.0, 0.0), growth_rate=0.0, size=32))
        for s in seqs:
            for k in range(1, s.frames.shape[0]):
                np.testing.assert_array_equal(s.frames[k], s.frames[0])

    def test_centroid_tracks_velocity(self):
        cfg = SyntheticConfig(seed=3, n_sequences=1, n_blobs=1, advection_velocity=(1.0, 0.0), size=64)
        f = synth_fields(cfg)[0]
        yy, xx = np.mgrid[0:64, 0:64]
        cx = [(xx * fr).sum() / fr.sum() for fr in f]
        cy = [(yy * fr).sum() / fr.sum() for fr in f]
        for k in range(len(f)):
            assert cx[k] - cx[0] == pytest.approx(k, abs=1e-3)
            assert cy[k] == pytest.approx(cy[0], abs=1e-3)

    def test_deterministic(self):
        cfg = SyntheticConfig(seed=7, n_sequences=4, growth_rate=0.05)
        a = np.stack([s.frames for s in synth_advection(cfg)])
        b = np.stack([s.frames for s in synth_advection(cfg)])
        assert a.tobytes() == b.tobytes()

    def test_peaks_span_all_bands(self):
        f = synth_fields(SyntheticConfig(seed=1, n_sequences=7, n_blobs=1))
        peaks = f[:, 0].max(axis=(1, 2))
        bands = np.searchsorted([0.5, 2, 6, 10, 18, 30], peaks, side="left")
        assert set(bands.tolist()) == set(range(7))

    def test_invalid_config(self):
        with pytest.raises(DataError):
            SyntheticConfig(n_sequences=0)


def test_dataset_round_trip(tmp_path):
    seqs = synth_advection(SyntheticConfig(n_sequences=5, size=16, context=2, h=3))
    save_dataset(tmp_path / "ds", seqs)
    back = load_dataset(tmp_path / "ds")
    assert len(back) == 5 and back[0].context == 2 and back[0].h == 3
    for a, b in zip(seqs, back):
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.start_time == b.start_time
    assert back[0].spec == seqs[0].spec


def test_chronological_split_orders_by_time():
    seqs = synth_advection(SyntheticConfig(n_sequences=10, size=16))
    train, val, test = chronological_split(list(reversed(seqs)))
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    assert max(s.start_time for s in train) < val[0].start_time < test[0].start_time
