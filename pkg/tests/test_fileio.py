import numpy as np
import pytest

from ensbench.fileio import (FormatError, read_container, read_field, read_fields, write_container,
                             write_field, write_fields)
from ensbench.grid import Field, GridSpec


def test_field_round_trip(tmp_path, rng):
    g = GridSpec(3, 5, -1.0, 0.5, 10.0, 0.25)
    v = rng.standard_normal((3, 5))
    write_field(tmp_path / "a.ensf", Field(g, v))
    out = read_field(tmp_path / "a.ensf")
    assert out.grid == g
    np.testing.assert_array_equal(out.values, v.astype(np.float32).astype(np.float64))


def test_stacked_fields(tmp_path, rng):
    g = GridSpec(2, 4, 0.0, 1.0)
    stack = rng.standard_normal((6, 2, 4))
    write_fields(tmp_path / "s.ensf", g, stack)
    g2, out = read_fields(tmp_path / "s.ensf")
    assert g2 == g and out.shape == (6, 2, 4)


def test_truncated_and_foreign_files(tmp_path):
    g = GridSpec(2, 2, 0.0, 1.0)
    p = tmp_path / "t.ensf"
    write_fields(p, g, np.zeros((1, 2, 2)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_fields(p)
    q = tmp_path / "x.ensf"
    q.write_bytes(b"NOPE" + b"\0" * 60)
    with pytest.raises(FormatError):
        read_fields(q)


def test_container_round_trip(tmp_path, rng):
    arrays = {"w": rng.standard_normal((3, 2)), "b": np.zeros(4)}
    write_container(tmp_path / "c.bin", b"TEST", {"k": 1}, arrays)
    head, out = read_container(tmp_path / "c.bin", b"TEST")
    assert head["k"] == 1
    np.testing.assert_array_equal(out["b"], arrays["b"])
    assert out["w"].shape == (3, 2)
    with pytest.raises(FormatError):
        read_container(tmp_path / "c.bin", b"ELSE")


def test_container_bytes_deterministic(tmp_path):
    arrays = {"a": np.arange(5.0)}
    write_container(tmp_path / "1", b"TEST", {"x": [1, 2]}, arrays)
    write_container(tmp_path / "2", b"TEST", {"x": [1, 2]}, arrays)
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()
