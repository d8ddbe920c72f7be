import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrfield.field import FieldConfig, FieldModel
from xrfield.formats import (FormatError, checkpoint_bytes, checkpoint_from_bytes, read_checkpoint,
                             read_stack, read_volume, stack_bytes, stack_from_bytes, volume_bytes,
                             volume_from_bytes, write_checkpoint, write_stack, write_volume)
from xrfield.geometry import GridSpec, ViewGeometry
from xrfield.phantom import RefractiveVolume
from xrfield.projector import ContrastImage, ProjectionStack

SMALL = dict(mlp_width=8, latent_dim=8, stage_widths=(2, 2, 4), shared_blocks=1, head_blocks=1,
             encoding_levels=2)


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def random_volume(dims=(5, 4, 3), seed=0):
    g = GridSpec.centered(dims, 3.2e-6)
    r = np.random.default_rng(seed)
    return RefractiveVolume(g, r.uniform(0, 2e-7, g.shape), r.uniform(0, 1e-8, g.shape), 18.0)


def random_stack(K=3, H=4, W=6, channels=("attenuation", "phase"), seed=0):
    r = np.random.default_rng(seed)
    ims = []
    for k in range(K):
        v = ViewGeometry(0.4 * k, (H, W), 3.2e-6, k)
        ims.append(ContrastImage(r.random((H, W)), r.random((H, W)) if "phase" in channels else None, v))
    return ProjectionStack(ims, 18.0, channels)


class TestVolume:
    def test_round_trip(self, tmp_path):
        v = random_volume()
        write_volume(tmp_path / "v.vol", v)
        back = read_volume(tmp_path / "v.vol")
        assert back.grid == v.grid and back.energy == 18.0
        assert np.array_equal(back.delta, f32(v.delta)) and np.array_equal(back.beta, f32(v.beta))

    @settings(max_examples=25, deadline=None)
    @given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), st.integers(0, 99))
    def test_round_trip_any_dims(self, dims, seed):
        v = random_volume(dims, seed)
        back = volume_from_bytes(volume_bytes(v))
        assert np.array_equal(back.beta, f32(v.beta))
        assert volume_bytes(back) == volume_bytes(v)

    def test_missing_channel_zero_filled(self):
        v = random_volume()
        back = volume_from_bytes(volume_bytes(v, ("beta",)))
        assert not back.delta.any() and np.array_equal(back.beta, f32(v.beta))

    def test_payload_layout(self):
        v = random_volume((2, 1, 1))
        data = volume_bytes(v)
        (n,) = struct.unpack("<I", data[8:12])
        payload = np.frombuffer(data[12 + n:], dtype="<f4")
        assert np.array_equal(payload, np.concatenate([v.delta.ravel(), v.beta.ravel()]).astype("<f4"))

    def test_truncated_and_trailing(self):
        data = volume_bytes(random_volume())
        with pytest.raises(FormatError, match="truncated: expected"):
            volume_from_bytes(data[:-3])
        with pytest.raises(FormatError, match="trailing"):
            volume_from_bytes(data + b"\0")
        with pytest.raises(FormatError, match="truncated"):
            volume_from_bytes(data[:5])
        with pytest.raises(FormatError, match="header truncated"):
            volume_from_bytes(data[:20])

    def test_bad_magic(self):
        data = volume_bytes(random_volume())
        with pytest.raises(FormatError, match="bad magic"):
            volume_from_bytes(b"X" + data[1:])
        with pytest.raises(FormatError, match="bad magic"):
            stack_from_bytes(data)


class TestStack:
    def test_round_trip(self, tmp_path):
        s = random_stack()
        write_stack(tmp_path / "s.prj", s)
        back = read_stack(tmp_path / "s.prj")
        assert back.channels == s.channels and np.array_equal(back.angles, s.angles)
        for a, b in zip(back.images, s.images):
            assert np.array_equal(a.attenuation, f32(b.attenuation))
            assert np.array_equal(a.phase, f32(b.phase))
            assert a.view.detector_dims == b.view.detector_dims

    def test_attenuation_only(self):
        s = random_stack(channels=("attenuation",))
        back = stack_from_bytes(stack_bytes(s))
        assert back.channels == ("attenuation",) and back.images[0].phase is None

    def test_truncated(self):
        data = stack_bytes(random_stack())
        with pytest.raises(FormatError, match=r"expected \d+ bytes"):
            stack_from_bytes(data[:-4])

    def test_inconsistent_header(self):
        s = random_stack()
        data = stack_bytes(s)
        (n,) = struct.unpack("<I", data[8:12])
        header = data[12:12 + n].replace(b'"n_views": 3', b'"n_views": 2')
        bad = data[:8] + struct.pack("<I", len(header)) + header + data[12 + n:]
        with pytest.raises(FormatError, match="angles"):
            stack_from_bytes(bad)


class TestCheckpoint:
    def model(self, precision="float64"):
        return FieldModel.create(FieldConfig(**SMALL, precision=precision),
                                 GridSpec.centered((8, 8, 8), 3.2e-6), seed=4)

    @pytest.mark.parametrize("precision", ["float64", "float32"])
    def test_round_trip_exact(self, tmp_path, precision):
        m = self.model(precision)
        write_checkpoint(tmp_path / "m.ckpt", m, {"epoch": 3})
        back, extra = read_checkpoint(tmp_path / "m.ckpt")
        assert extra == {"epoch": 3}
        assert back.config == m.config and back.energy == m.energy
        assert back.depth_half_extent == m.depth_half_extent
        for k, p in m.params.params.items():
            assert back.params.params[k].dtype == p.dtype
            assert np.array_equal(back.params.params[k], p)
        assert checkpoint_bytes(back, extra) == checkpoint_bytes(m, extra)

    def test_truncated(self):
        data = checkpoint_bytes(self.model())
        with pytest.raises(FormatError, match="truncated"):
            checkpoint_from_bytes(data[:-8])

    def test_shape_mismatch_detected(self):
        m = self.model()
        m.params.params["mlp.in.W"] = m.params.params["mlp.in.W"][:, :4].copy()
        with pytest.raises(FormatError, match="mlp.in.W"):
            checkpoint_from_bytes(checkpoint_bytes(m))
