import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ccoll import codec


def scalar_quantize(values, eb):
    """Plain-Python quantizer used as an oracle for a single Dense block."""
    lo = min(float(v) for v in values)
    base = float(np.float32(lo))
    qs = [round((float(v) - base) / (2 * eb)) for v in values]
    m = max(1, math.ceil(math.log2(max(qs) + 1)))
    recon = [float(np.float32(base + q * 2 * eb)) for q in qs]
    return m, qs, recon


def test_constant_zeros():
    stream = codec.compress(np.zeros(5120, np.float32), 1e-3)
    assert codec.block_kinds(stream) == [codec.CONSTANT] * 40
    out = codec.decompress(stream)
    assert np.array_equal(out, np.zeros(5120, np.float32))
    # representative is stored right after the kind byte
    assert struct.unpack_from("<f", stream, 24)[0] == 0.0


def test_uniform_block_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    x = rng.random(128).astype(np.float32)
    eb = 1e-2
    stream = codec.compress(x, eb)
    assert codec.block_kinds(stream) == [codec.DENSE]
    m, qs, recon = scalar_quantize(x, eb)
    expected_m = math.ceil(math.log2((float(x.max()) - float(x.min())) / (2 * eb) + 1))
    assert stream[24] == m
    assert abs(m - expected_m) <= 1
    out = codec.decompress(stream)
    assert out.tolist() == recon
    assert np.abs(out.astype(np.float64) - x).max() <= eb


def test_nan_block_is_raw_and_bit_exact():
    x = np.linspace(0, 1, 300, dtype=np.float32)
    x[130] = np.nan
    stream = codec.compress(x, 1e-3)
    assert codec.block_kinds(stream)[1] == codec.RAW
    out = codec.decompress(stream)
    assert out[128:256].tobytes() == x[128:256].tobytes()
    assert np.abs(out[:128] - x[:128]).max() <= 1e-3


def test_constant_record_decodes_to_copies():
    header = struct.pack("<4sBQdH", b"CCZX", 1, 128, 1e-3, 128)
    stream = header + struct.pack("<Bf", codec.CONSTANT, 3.5)
    assert np.array_equal(codec.decompress(stream), np.full(128, 3.5, np.float32))


def test_dense_record_formula():
    eb, m, q = 1e-2, 6, 50
    header = struct.pack("<4sBQdH", b"CCZX", 1, 1, eb, 128)
    payload = bytes([q << 2])  # one 6-bit value, MSB first
    stream = header + struct.pack("<BBf", codec.DENSE, m, 0.0) + payload
    out = codec.decompress(stream)
    assert out[0] == np.float32(0.0 + q * 2 * eb)
    assert out[0] == pytest.approx(1.0)


def test_wide_range_falls_back_to_raw():
    x = np.array([0.0, 1e9] * 64, np.float32)
    stream = codec.compress(x, 1e-6)
    assert codec.block_kinds(stream) == [codec.RAW]
    assert codec.decompress(stream).tobytes() == x.tobytes()


@pytest.mark.parametrize("eb", [0.0, -1.0, math.nan, math.inf])
def test_invalid_error_bound(eb):
    with pytest.raises(codec.CodecError):
        codec.compress(np.ones(4, np.float32), eb)


def test_empty_input_rejected():
    with pytest.raises(codec.CodecError):
        codec.compress(np.array([], np.float32), 1e-3)


def test_corrupt_streams_rejected():
    stream = codec.compress(np.linspace(0, 1, 500, dtype=np.float32), 1e-3)
    with pytest.raises(codec.CodecError):
        codec.decompress(stream[:-1])
    with pytest.raises(codec.CodecError):
        codec.decompress(stream[:10])
    with pytest.raises(codec.CodecError):
        codec.decompress(b"XXXX" + stream[4:])
    with pytest.raises(codec.CodecError):
        codec.decompress(stream[:4] + bytes([2]) + stream[5:])
    with pytest.raises(codec.CodecError):
        codec.decompress(stream + b"\0")
    bad_kind = bytearray(stream)
    bad_kind[23] = 7
    with pytest.raises(codec.CodecError):
        codec.decompress(bytes(bad_kind))


def test_pipelined_chunk_index():
    x = np.linspace(-1, 1, 10240, dtype=np.float32)
    stream = codec.compress_pipelined(x, 1e-3, 5120)
    header = codec.read_pipelined_header(stream)
    assert header.chunk_count == 2
    assert len(header.index) == 2
    assert sum(header.index) + header.payload_offset == len(stream)


def test_short_field_is_single_chunk():
    x = np.linspace(-1, 1, 1000, dtype=np.float32)
    stream = codec.compress_pipelined(x, 1e-3, 5120)
    assert codec.read_pipelined_header(stream).chunk_count == 1
    payload = next(codec.iter_pipelined_payloads(stream))
    assert payload == codec.compress(x, 1e-3)


def test_pipelined_rejects_bad_chunk_size():
    with pytest.raises(codec.CodecError):
        codec.compress_pipelined(np.ones(1000, np.float32), 1e-3, 100)


def test_pipelined_index_overrun():
    stream = bytearray(codec.compress_pipelined(np.linspace(0, 1, 600, dtype=np.float32), 1e-3, 256))
    first = struct.unpack_from("<I", stream, 12)[0]
    struct.pack_into("<I", stream, 12, first + 10_000)
    with pytest.raises(codec.CodecError):
        codec.decompress_pipelined(bytes(stream))


def test_hooks_called_between_chunks():
    x = np.linspace(0, 1, 5 * 256, dtype=np.float32)
    calls = []
    stream = codec.compress_pipelined(x, 1e-3, 256, hook=lambda: calls.append("c"))
    codec.decompress_pipelined(stream, hook=lambda: calls.append("d"))
    assert calls.count("c") >= 4
    assert calls.count("d") >= 4


def test_ratio_examples():
    const = codec.compress(np.full(5120, 2.0, np.float32), 1e-3)
    # 23-byte header + 5 bytes per constant block
    assert len(const) == 23 + 5 * 40
    assert codec.compression_ratio(const) >= 20
    rng = np.random.default_rng(0)
    noise = rng.standard_normal(5120).astype(np.float32)
    noise[::128] = np.nan
    raw = codec.compress(noise, 1e-3)
    assert 0.95 < codec.compression_ratio(raw) < 1
    with pytest.raises(codec.CodecError):
        codec.compression_ratio(b"")


def test_decode_dispatch():
    x = np.linspace(0, 1, 700, dtype=np.float32)
    a = codec.decode(codec.compress(x, 1e-3))
    b = codec.decode(codec.compress_pipelined(x, 1e-3, 256))
    assert np.array_equal(a, b)


finite_f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)
fields = hnp.arrays(np.float32, st.integers(1, 700), elements=finite_f32)
bounds = st.sampled_from([1e-1, 1e-2, 1e-3, 1e-4])


@settings(max_examples=60, deadline=None)
@given(fields, bounds)
def test_roundtrip_within_bound(x, eb):
    out = codec.decompress(codec.compress(x, eb))
    assert out.dtype == np.float32 and out.shape == x.shape
    assert np.abs(out.astype(np.float64) - x.astype(np.float64)).max() <= eb


@settings(max_examples=40, deadline=None)
@given(fields, bounds)
def test_deterministic_and_idempotent(x, eb):
    s1 = codec.compress(x, eb)
    assert codec.compress(x.copy(), eb) == s1
    once = codec.decompress(s1)
    twice = codec.decompress(codec.compress(once, eb))
    assert np.abs(twice.astype(np.float64) - once).max() <= eb


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float32, st.integers(1, 1500),
               elements=st.floats(width=32, allow_nan=True, allow_infinity=True)),
    bounds,
)
def test_nonfinite_bit_exact(x, eb):
    out = codec.decompress(codec.compress(x, eb))
    bad = ~np.isfinite(x)
    assert out[bad].tobytes() == x[bad].tobytes()
    ok = np.isfinite(x)
    if ok.any():
        assert np.abs(out[ok].astype(np.float64) - x[ok]).max() <= eb


@settings(max_examples=30, deadline=None)
@given(fields, bounds, st.sampled_from([128, 256, 640]))
def test_pipelined_equals_monolithic(x, eb, chunk):
    mono = codec.decompress(codec.compress(x, eb))
    pipe = codec.decompress_pipelined(codec.compress_pipelined(x, eb, chunk))
    assert np.array_equal(mono, pipe)
    assert codec.element_count(codec.compress_pipelined(x, eb, chunk)) == x.size
