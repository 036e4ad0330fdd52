import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from harness_ssl import container

DTYPES = [np.float32, np.float64, np.int64, np.int32]


def _resign(blob: bytes) -> bytes:
    body = blob[:8] + blob[12:]
    return blob[:8] + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF) + blob[12:]


@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       st.sampled_from(DTYPES).flatmap(
                           lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4))),
                       max_size=4),
       st.dictionaries(st.text(max_size=8), st.integers(-5, 5), max_size=3))
@settings(max_examples=80, deadline=None)
def test_roundtrip_bitwise(tensors, meta):
    meta2, back = container.decode(container.encode(meta, tensors))
    assert meta2 == meta and list(back) == list(tensors)
    for k, a in tensors.items():
        assert back[k].dtype == a.dtype.newbyteorder("<") and back[k].shape == a.shape
        assert back[k].tobytes() == np.ascontiguousarray(a).tobytes()


def test_layout_header():
    blob = container.encode({"a": 1}, {"x": np.zeros(2, np.float32)})
    assert blob[:4] == b"HRNS"
    assert struct.unpack("<I", blob[4:8])[0] == container.VERSION


def test_single_byte_corruption_always_detected():
    rng = np.random.default_rng(0)
    blob = container.encode({"kind": "t"}, {"w": rng.standard_normal((5, 7)).astype(np.float32)})
    for pos in range(len(blob)):
        bad = bytearray(blob)
        bad[pos] ^= int(rng.integers(1, 256))
        with pytest.raises(container.ChecksumError):
            container.decode(bytes(bad))


@pytest.mark.parametrize("n", [0, 5, 11, 40])
def test_truncation(n):
    blob = container.encode({}, {"w": np.arange(10.0)})
    with pytest.raises(container.ChecksumError):
        container.decode(blob[:n])


def test_version_mismatch_with_valid_crc():
    blob = bytearray(container.encode({}, {}))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(container.VersionError):
        container.decode(_resign(bytes(blob)))


def test_trailing_bytes_with_valid_crc():
    blob = container.encode({}, {"w": np.zeros(1)}) + b"\x00"
    with pytest.raises(container.FormatError, match="trailing"):
        container.decode(_resign(blob))


def test_unsupported_dtype():
    with pytest.raises(container.FormatError):
        container.encode({}, {"w": np.zeros(2, np.complex64)})


def test_write_is_atomic_and_hashed(tmp_path):
    h = container.write(tmp_path / "sub" / "x.hrns", {"k": 1}, {"w": np.ones(3)})
    assert h == container.file_hash(tmp_path / "sub" / "x.hrns")
    assert not list((tmp_path / "sub").glob("*.tmp"))
    meta, t = container.read(tmp_path / "sub" / "x.hrns")
    assert meta == {"k": 1} and t["w"].tolist() == [1, 1, 1]


def test_error_names_file(tmp_path):
    p = tmp_path / "broken.hrns"
    p.write_bytes(b"HRNS\x01\x00\x00\x00garbage")
    with pytest.raises(container.ChecksumError, match="broken.hrns"):
        container.read(p)
