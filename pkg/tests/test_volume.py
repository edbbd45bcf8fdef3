import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from strokeseg.volume import (FormatError, LabelVolume, Projection, VolumeGrid, hu_normalize,
                              interpolate_labels, read_smsk, read_svol, resample_isotropic,
                              reslice, reslice_array, unreslice_array, window_scale, write_smsk,
                              write_svol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestFiles:
    def test_svol_round_trip(self, tmp_path, rng):
        v = VolumeGrid(rng.standard_normal((3, 4, 5)), (2.0, 1.0, 0.5), "raw", 1.0, -1024.0)
        write_svol(tmp_path / "a.svol", v)
        got = read_svol(tmp_path / "a.svol")
        np.testing.assert_array_equal(got.values, v.values)
        assert (got.spacing, got.kind, got.rescale_intercept) == (v.spacing, "raw", -1024.0)

    def test_smsk_round_trip(self, tmp_path, rng):
        lab = LabelVolume(rng.integers(0, 3, (4, 4, 4)), (1.0, 1.0, 1.0))
        write_smsk(tmp_path / "a.smsk", lab)
        np.testing.assert_array_equal(read_smsk(tmp_path / "a.smsk").labels, lab.labels)

    def test_short_payload(self, tmp_path, rng):
        path = tmp_path / "a.svol"
        write_svol(path, VolumeGrid(rng.standard_normal((2, 2, 2))))
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(FormatError, match="31 bytes, expected 32"):
            read_svol(path)

    def test_bad_label_byte(self, tmp_path):
        path = tmp_path / "a.smsk"
        write_smsk(path, LabelVolume(np.zeros((2, 2, 2))))
        data = bytearray(path.read_bytes())
        data[-3] = 3
        path.write_bytes(bytes(data))
        offset = len(data) - 3
        with pytest.raises(FormatError, match=f"label byte 3 at byte offset {offset}"):
            read_smsk(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.svol"
        write_smsk(path, LabelVolume(np.zeros((2, 2, 2))))
        with pytest.raises(FormatError, match="bad magic"):
            read_svol(path)

    def test_invalid_containers(self):
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            VolumeGrid(np.full((2, 2, 2), 2.0), kind="probability")
        with pytest.raises(ValueError):
            LabelVolume(np.full((2, 2, 2), 3))


class TestIntensity:
    @pytest.mark.parametrize("raw,slope,intercept,hu", [
        (1024, 1, -1024, 0), (0, 1, -1024, -1024), (2, 2.5, 10, 15),
    ])
    def test_hu_affine(self, raw, slope, intercept, hu):
        v = VolumeGrid(np.full((1, 1, 1), raw, np.float32), kind="raw")
        assert hu_normalize(v, slope, intercept).values.item() == hu

    def test_header_slope_used_by_default(self):
        v = VolumeGrid(np.full((1, 1, 1), 1024.0), kind="raw", rescale_intercept=-1024.0)
        assert hu_normalize(v).values.item() == 0

    def test_zero_slope_rejected(self):
        with pytest.raises(ValueError):
            hu_normalize(VolumeGrid(np.zeros((1, 1, 1)), kind="raw"), 0, 0)

    def test_window(self):
        v = window_scale(VolumeGrid(np.array([-10.0, 200.0, 40.0]).reshape(1, 1, 3)))
        np.testing.assert_array_equal(v.values.ravel(), [0.0, 1.0, 0.5])
        assert v.kind == "windowed"


class TestInterpolation:
    def _thick(self, top, bottom):
        lab = np.zeros((2, 1, 1), np.uint8)
        lab[0], lab[1] = top, bottom
        return LabelVolume(lab, (4.0, 1.0, 1.0))

    def test_constant(self):
        out = interpolate_labels(self._thick(1, 1), [0, 4], [1, 2, 3])
        assert out.labels.ravel().tolist() == [1, 1, 1]

    def test_midpoint_kept(self):
        # value 0.5 at the midpoint -> labelled
        assert interpolate_labels(self._thick(1, 0), [0, 4], [2]).labels.item() == 1

    def test_three_quarters_dropped(self):
        # value 0.25 three quarters towards the empty slice -> unlabelled
        assert interpolate_labels(self._thick(1, 0), [0, 4], [3]).labels.item() == 0

    def test_no_extrapolation(self):
        with pytest.raises(ValueError, match="extrapolation"):
            interpolate_labels(self._thick(1, 0), [0, 4], [5])

    def test_thick_positions_reproduced(self, rng):
        lab = LabelVolume(rng.integers(0, 3, (4, 3, 3)), (3.0, 1.0, 1.0))
        out = interpolate_labels(lab, [0, 3, 6, 9], [0, 3, 6, 9])
        np.testing.assert_array_equal(out.labels, lab.labels)


class TestReslice:
    def test_coronal_index(self):
        arr = np.zeros((5, 6, 7))
        arr[2, 3, 4] = 9
        assert reslice_array(arr, Projection.CORONAL)[3, 2, 4] == 9
        assert reslice_array(arr, Projection.SAGITTAL)[4, 2, 3] == 9

    def test_dims_and_spacing(self):
        v = VolumeGrid(np.zeros((10, 20, 30)), (1.0, 2.0, 3.0))
        c = reslice(v, "coronal")
        assert c.dims == (20, 10, 30) and c.spacing == (2.0, 1.0, 3.0)
        assert reslice(v, "sagittal").dims == (30, 10, 20)

    @pytest.mark.parametrize("p", list(Projection))
    def test_round_trip_bit_exact(self, rng, p):
        v = VolumeGrid(rng.standard_normal((4, 5, 6)), (1.0, 2.0, 3.0))
        back = reslice(reslice(v, p), p, inverse=True)
        np.testing.assert_array_equal(back.values, v.values)
        assert back.spacing == v.spacing
        lab = LabelVolume(rng.integers(0, 3, (4, 5, 6)))
        np.testing.assert_array_equal(reslice(reslice(lab, p), p, inverse=True).labels, lab.labels)


class TestResample:
    def test_isotropic_identity(self, rng):
        v = VolumeGrid(rng.standard_normal((3, 4, 5)))
        out = resample_isotropic(v, 1.0)
        assert out.dims == v.dims
        np.testing.assert_allclose(out.values, v.values, atol=1e-6)

    def test_ramp_along_z(self):
        ramp = np.broadcast_to(np.arange(6.0)[:, None, None], (6, 2, 2))
        out = resample_isotropic(VolumeGrid(ramp, (5.0, 1.0, 1.0)), 1.0)
        assert out.dims == (30, 2, 2)
        coords = (np.arange(30) + 0.5) / 5 - 0.5
        inside = (coords >= 0) & (coords <= 5)
        np.testing.assert_allclose(out.values[inside, 0, 0], coords[inside], atol=1e-5)

    def test_labels_stay_labels(self, rng):
        lab = LabelVolume(rng.integers(0, 3, (4, 4, 4)), (2.0, 1.0, 1.0))
        out = resample_isotropic(lab, 1.0)
        assert out.dims == (8, 4, 4) and set(np.unique(out.labels)) <= {0, 1, 2}

    def test_empty_result_rejected(self):
        with pytest.raises(ValueError, match="empty dims"):
            resample_isotropic(VolumeGrid(np.zeros((1, 1, 1)), (0.1, 0.1, 0.1)), 1.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(*[st.integers(1, 6)] * 3), elements=st.integers(0, 2)),
       st.sampled_from(list(Projection)))
def test_reslice_array_bijective(arr, p):
    np.testing.assert_array_equal(unreslice_array(reslice_array(arr, p), p), arr)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, 5, elements=st.floats(-3000, 3000, width=32)))
def test_window_range(hu):
    v = window_scale(VolumeGrid(hu.reshape(1, 1, 5)))
    assert np.all((v.values >= 0) & (v.values <= 1))
