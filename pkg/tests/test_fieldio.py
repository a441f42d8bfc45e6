import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veloreg.fieldio import HEADER_SIZE, MAGIC, FieldFormatError, read_field, write_field
from veloreg.fields import Grid3
from veloreg.synthetic import ball_pair, generate_synthetic, synthetic_template, synthetic_velocity
from veloreg.transport import solve_state


class TestFieldIO:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_scalar_round_trip_bitwise(self, tmp_path, rng, dtype):
        f = rng.standard_normal((16, 16, 16)).astype(dtype)
        write_field(tmp_path / "f.vrf", f)
        g = read_field(tmp_path / "f.vrf")
        assert g.dtype == dtype and g.shape == f.shape
        assert g.tobytes() == f.tobytes()

    def test_vector_component_order(self, tmp_path):
        v = np.stack([np.full((4, 6, 8), c) for c in (1.0, 2.0, 3.0)])
        write_field(tmp_path / "v.vrf", v)
        w = read_field(tmp_path / "v.vrf")
        assert w.shape == (3, 4, 6, 8)
        assert [float(w[c, 0, 0, 0]) for c in range(3)] == [1.0, 2.0, 3.0]
        np.testing.assert_array_equal(w, v)

    def test_header_layout(self, tmp_path):
        write_field(tmp_path / "f.vrf", np.zeros((2, 3, 4), dtype=np.float32))
        raw = (tmp_path / "f.vrf").read_bytes()
        assert raw[:8] == MAGIC
        assert struct.unpack_from("<IIIIII", raw, 8) == (1, 1, 2, 3, 4, 4)
        assert raw[32:33] == b"<" and raw[33:41] == b"c,x1..x3"
        assert len(raw) == HEADER_SIZE + 2 * 3 * 4 * 4

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "f.vrf"
        write_field(p, np.ones((4, 4, 4)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FieldFormatError, match=r"504 bytes .* expected 512"):
            read_field(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "f.vrf"
        write_field(p, np.ones((4, 4, 4)))
        p.write_bytes(b"NOTFIELD" + p.read_bytes()[8:])
        with pytest.raises(FieldFormatError, match="offset 0"):
            read_field(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "f.vrf"
        p.write_bytes(MAGIC)
        with pytest.raises(FieldFormatError, match="header truncated"):
            read_field(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_field(tmp_path / "nope.vrf")

    @pytest.mark.parametrize("bad", [np.zeros((2, 4, 4, 4)), np.zeros((4, 4)), np.array([[[np.nan]]])])
    def test_write_rejects(self, tmp_path, bad):
        with pytest.raises(ValueError):
            write_field(tmp_path / "f.vrf", bad)

    @settings(max_examples=25, deadline=None)
    @given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), st.booleans(), st.integers(0, 2**31))
    def test_round_trip_property(self, tmp_path_factory, dims, vector, seed):
        shape = ((3,) if vector else ()) + dims
        f = np.random.default_rng(seed).standard_normal(shape)
        p = tmp_path_factory.mktemp("rt") / "f.vrf"
        write_field(p, f)
        assert read_field(p).tobytes() == f.tobytes()


class TestSynthetic:
    def test_template_range(self, grid32):
        m = synthetic_template(grid32)
        assert m.min() >= 0.0 and m.max() <= 1.0

    def test_template_peak(self):
        g = Grid3.cube(16)
        m = synthetic_template(g)
        # x = pi/2 is grid index n/4
        assert m[4, 4, 4] == pytest.approx(1.0, abs=1e-15)

    def test_velocity_bound(self):
        g = Grid3.cube(64)
        v = synthetic_velocity(g)
        mag = np.sqrt((v**2).sum(axis=0))
        assert np.abs(v).max() <= 0.5 + 1e-15
        assert mag.max() <= np.sqrt(3) * 0.5

    def test_reference_is_transported_template(self, grid16):
        m_R, m_T, v = generate_synthetic(grid16, 4)
        np.testing.assert_array_equal(m_R, solve_state(m_T, v, 4)[-1])

    def test_ball_pair(self, grid16):
        m_R, m_T = ball_pair(grid16)
        assert m_T.sum() > m_R.sum() > 0
        assert m_T.max() <= 1.0 + 1e-12
