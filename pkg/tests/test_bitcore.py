import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnet import bitcore
from bnet.bitcore import BitTensor, FormatError, ZeroValueError


def nonzero_gauss(rng, shape):
    x = rng.standard_normal(shape)
    x[x == 0] = 1.0
    return x


def test_pack_small_vector():
    bt = bitcore.pack(np.array([1.0, -1.0, -1.0, 1.0]))
    assert bt.words.shape == (1,)
    assert int(bt.words[0]) == 0b1001
    assert bt.pad_len == 60


def test_pack_all_positive_word():
    bt = bitcore.pack(np.ones(64))
    assert int(bt.words[0]) == 0xFFFFFFFFFFFFFFFF
    assert bt.pad_len == 0


def test_pack_roundtrip_many_vectors(rng):
    for _ in range(1000):
        v = nonzero_gauss(rng, int(rng.integers(1, 200)))
        np.testing.assert_array_equal(bitcore.unpack(bitcore.pack(v)), np.sign(v))


def test_pack_rows_are_independent(rng):
    x = nonzero_gauss(rng, (3, 4, 70))
    bt = bitcore.pack(x)
    assert bt.words.shape == (3, 4, 2)
    np.testing.assert_array_equal(bitcore.unpack(bt), np.sign(x))


def test_padding_bits_are_zero(rng):
    bt = bitcore.pack(nonzero_gauss(rng, (5, 70)))
    assert np.all(bt.words[:, -1] >> np.uint64(6) == 0)


def test_zero_policy():
    assert bitcore.unpack(bitcore.pack(np.array([0.0, -1.0])))[0] == 1.0
    with pytest.raises(ZeroValueError) as exc:
        bitcore.pack(np.array([[1.0, 2.0], [3.0, 0.0]]), zero_policy="strict")
    assert exc.value.index == (1, 1)


def test_pack_rejects_other_axes_and_nonfinite():
    with pytest.raises(ValueError):
        bitcore.pack(np.ones((2, 3)), axis=0)
    with pytest.raises(ValueError):
        bitcore.pack(np.array([1.0, np.nan]))


def test_xnor_dot_self_and_complement(rng):
    a = bitcore.pack(nonzero_gauss(rng, 64))
    assert bitcore.xnor_dot(a, a, 64) == 64
    comp = BitTensor(a.logical_shape, ~a.words)
    assert bitcore.xnor_dot(a, comp, 64) == -64


def test_xnor_dot_matches_real_dot(rng):
    for _ in range(10_000):
        n = int(rng.integers(1, 513))
        a, b = np.sign(nonzero_gauss(rng, n)), np.sign(nonzero_gauss(rng, n))
        assert bitcore.xnor_dot(bitcore.pack(a), bitcore.pack(b), n) == int(a @ b)


def test_xnor_dot_length_mismatch():
    with pytest.raises(ValueError):
        bitcore.xnor_dot(bitcore.pack(np.ones(65)), bitcore.pack(np.ones(10)), 65)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 300), garbage=st.integers(0, 2**64 - 1), seed=st.integers(0, 2**32 - 1))
def test_padding_garbage_never_changes_dot(n, garbage, seed):
    rng = np.random.default_rng(seed)
    a, b = bitcore.pack(nonzero_gauss(rng, n)), bitcore.pack(nonzero_gauss(rng, n))
    clean = bitcore.xnor_dot(a, b, n)
    pad_mask = ~bitcore.last_word_mask(n)
    dirty_a = a.words.copy()
    dirty_a[-1] |= np.uint64(garbage) & pad_mask
    dirty_b = b.words.copy()
    dirty_b[-1] |= np.uint64(garbage >> 3) & pad_mask
    assert bitcore.xnor_dot(dirty_a, dirty_b, n) == clean


def test_binary_conv_trivial():
    x = bitcore.pack_conv_input(np.ones((1, 1, 3, 3)))
    w = bitcore.pack_conv_weight(np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(bitcore.binary_conv2d(x, w, np.array([1.0])), [[[[9.0]]]])
    np.testing.assert_array_equal(bitcore.binary_conv2d(x, w, np.array([0.5])), [[[[4.5]]]])


def test_binary_conv_padding_counts_minus_one():
    x = bitcore.pack_conv_input(np.ones((1, 1, 1, 1)))
    w = bitcore.pack_conv_weight(np.ones((1, 1, 3, 3)))
    # one +1 centre and eight padded -1 values
    assert bitcore.binary_conv2d_int(x, w, padding=1)[0, 0, 0, 0] == 1 - 8


def random_conv_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.choice([1, 3, 17, 64, 70, 130]))
    f = int(rng.integers(1, 5))
    k = int(rng.choice([1, 2, 3, 5]))
    stride = int(rng.integers(1, 4))
    padding = int(rng.integers(0, 3))
    h = int(rng.integers(max(1, k - 2 * padding), 9))
    w = int(rng.integers(max(1, k - 2 * padding), 9))
    x = nonzero_gauss(rng, (n, c, h, w))
    wt = nonzero_gauss(rng, (f, c, k, k))
    alpha = rng.uniform(0.1, 2.0, f)
    return x, wt, alpha, stride, padding


def conv_oracle(x, w, stride, padding):
    # direct float64 correlation of the sign tensors, padded with -1
    xs = np.pad(np.sign(x), ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2), constant_values=-1.0)
    ws = np.sign(w)
    n, _, hp, wp = xs.shape
    f, _, k, _ = ws.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xs[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, ws)
    return out


def test_binary_conv_matches_oracle(rng):
    for _ in range(200):
        x, w, alpha, stride, padding = random_conv_case(rng)
        got = bitcore.binary_conv2d(bitcore.pack_conv_input(x), bitcore.pack_conv_weight(w), alpha,
                                    stride, padding)
        np.testing.assert_array_equal(got, conv_oracle(x, w, stride, padding) * alpha[None, :, None, None])


def test_naive_conv_matches_oracle(rng):
    x, w, _, stride, padding = random_conv_case(rng)
    got = bitcore.naive_conv2d(np.sign(x), np.sign(w), stride, padding, pad_value=-1.0)
    np.testing.assert_array_equal(got, conv_oracle(x, w, stride, padding))


def test_binary_conv_errors(rng):
    x = bitcore.pack_conv_input(nonzero_gauss(rng, (1, 3, 4, 4)))
    w = bitcore.pack_conv_weight(nonzero_gauss(rng, (2, 3, 3, 3)))
    with pytest.raises(ValueError):
        bitcore.binary_conv2d(x, w, np.array([1.0]))
    with pytest.raises(ValueError):
        bitcore.binary_conv2d(x, w, np.array([1.0, 0.0]))
    w4 = bitcore.pack_conv_weight(nonzero_gauss(rng, (2, 4, 3, 3)))
    with pytest.raises(ValueError):
        bitcore.binary_conv2d(x, w4, np.ones(2))


def test_scale_equivariance(rng):
    x = nonzero_gauss(rng, (1, 8, 5, 5))
    w = nonzero_gauss(rng, (4, 8, 3, 3))
    xb = bitcore.pack_conv_input(x)
    alpha = np.abs(w).reshape(4, -1).mean(axis=1)
    base = bitcore.binary_conv2d(xb, bitcore.pack_conv_weight(w), alpha)
    scaled = bitcore.binary_conv2d(xb, bitcore.pack_conv_weight(2.0 * w), 2.0 * alpha)
    np.testing.assert_array_equal(scaled, 2.0 * base)


def test_storage_bits():
    assert bitcore.packed_storage_bits(4096, 1) == 4096 + 32
    assert bitcore.packed_storage_bits(65, 2) == 128 + 64
    assert bitcore.compression_ratio(4096) >= 30


# -- serialization ---------------------------------------------------------------

def test_dense_tensor_header_layout():
    blob = bitcore.tensor_to_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == b"BNT1"
    assert blob[4:6] == bytes([1, 2])
    assert blob[6:14] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert blob[14:18] == np.float32(0).tobytes()
    assert len(blob) == 14 + 24


def test_bits_tensor_layout(rng):
    bt = bitcore.pack(nonzero_gauss(rng, (2, 70)))
    blob = bitcore.tensor_to_bytes(bt)
    assert blob[4] == 2 and blob[5] == 2
    assert len(blob) == 6 + 8 + 2 * 2 * 8 + 1
    assert blob[-1] == 58
    back = bitcore.tensor_from_bytes(blob)
    assert back.logical_shape == bt.logical_shape
    np.testing.assert_array_equal(back.words, bt.words)


@settings(max_examples=50, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=0, max_size=4), seed=st.integers(0, 1000))
def test_dense_roundtrip_bitwise(shape, seed):
    a = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    blob = bitcore.tensor_to_bytes(a)
    back = bitcore.tensor_from_bytes(blob)
    assert back.tobytes() == a.tobytes() and back.shape == a.shape
    assert bitcore.tensor_to_bytes(back) == blob


def test_reserved_and_bad_records():
    blob = bytearray(bitcore.tensor_to_bytes(np.ones(2, dtype=np.float32)))
    for code in (3, 4, 9):
        blob[4] = code
        with pytest.raises(FormatError):
            bitcore.tensor_from_bytes(bytes(blob))
    with pytest.raises(FormatError):
        bitcore.tensor_from_bytes(b"XXXX" + bytes(blob[4:]))
    good = bitcore.tensor_to_bytes(np.ones(2, dtype=np.float32))
    with pytest.raises(FormatError):
        bitcore.tensor_from_bytes(good[:-1])
    with pytest.raises(ValueError):
        bitcore.tensor_to_bytes(np.array([np.inf], dtype=np.float32))


def test_stream_of_records(rng):
    buf = io.BytesIO()
    a = rng.standard_normal(3).astype(np.float32)
    b = bitcore.pack(nonzero_gauss(rng, 10))
    bitcore.write_tensor(buf, a)
    bitcore.write_tensor(buf, b)
    buf.seek(0)
    np.testing.assert_array_equal(bitcore.read_tensor(buf), a)
    np.testing.assert_array_equal(bitcore.read_tensor(buf).words, b.words)
