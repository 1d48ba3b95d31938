"""Bit-packed sign tensors and XNOR-popcount arithmetic.

Values are packed 64 per ``uint64`` word along the innermost axis, bit ``i`` of
word ``k`` holding element ``64 * k + i``. A set bit means +1, a clear bit -1.
Trailing bits of the last word of every row are kept at zero and masked out of
every dot product.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit, types
from numba.extending import intrinsic

WORD_BITS = 64

MAGIC = b"BNT1"
DTYPE_F32 = 1
DTYPE_BITS = 2
# 3 and 4 are held back for a per-position scaling variant of the packed format
RESERVED_DTYPES = (3, 4)

ZERO_POLICIES = ("ceil", "strict")


class ZeroValueError(ValueError):
    """Raised by ``pack`` under the strict zero policy."""

    def __init__(self, index):
        self.index = tuple(int(i) for i in index)
        super().__init__(f"exact zero at element {self.index} (zero_policy='strict')")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class BitTensor:
    logical_shape: tuple
    words: np.ndarray  # uint64, shape logical_shape[:-1] + (n_words,)

    @property
    def row_length(self) -> int:
        return int(self.logical_shape[-1])

    @property
    def n_words(self) -> int:
        return int(self.words.shape[-1])

    @property
    def pad_len(self) -> int:
        return self.n_words * WORD_BITS - self.row_length

    @property
    def nbytes(self) -> int:
        return int(self.words.size) * 8


def n_words_for(n: int) -> int:
    return -(-int(n) // WORD_BITS)


def last_word_mask(n: int) -> np.uint64:
    rem = int(n) % WORD_BITS
    if rem == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << rem) - 1)


def sign(x, zero_policy: str = "ceil") -> np.ndarray:
    """Elementwise sign onto {-1, +1}; zeros follow ``zero_policy``."""
    x = np.asarray(x)
    if zero_policy not in ZERO_POLICIES:
        raise ValueError(f"unknown zero_policy {zero_policy!r}")
    if zero_policy == "strict":
        _reject_zeros(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def _reject_zeros(x):
    zeros = np.argwhere(x == 0)
    if len(zeros):
        raise ZeroValueError(zeros[0])


def pack(v, axis: int = -1, zero_policy: str = "ceil") -> BitTensor:
    """Pack ``sign(v)`` along its innermost axis."""
    v = np.asarray(v)
    if v.ndim == 0:
        raise ValueError("cannot pack a scalar")
    if axis not in (-1, v.ndim - 1):
        raise ValueError("pack only runs along the innermost axis; transpose first")
    if zero_policy not in ZERO_POLICIES:
        raise ValueError(f"unknown zero_policy {zero_policy!r}")
    if zero_policy == "strict":
        _reject_zeros(v)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot pack non-finite values")

    n = v.shape[-1]
    nw = n_words_for(n)
    bits = np.zeros(v.shape[:-1] + (nw * WORD_BITS,), dtype=bool)
    bits[..., :n] = v >= 0
    packed = np.packbits(bits.reshape(v.shape[:-1] + (nw, WORD_BITS)), axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").reshape(v.shape[:-1] + (nw,))
    return BitTensor(tuple(int(s) for s in v.shape), words.astype(np.uint64, copy=False))


def unpack(bt: BitTensor, dtype=np.float64) -> np.ndarray:
    n = bt.row_length
    as_bytes = np.ascontiguousarray(bt.words.astype("<u8")).view(np.uint8)
    as_bytes = as_bytes.reshape(bt.words.shape[:-1] + (bt.n_words * 8,))
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")[..., :n]
    return np.where(bits == 1, 1.0, -1.0).astype(dtype)


@intrinsic
def _popcount64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@njit(cache=True)
def _xnor_dot_words(a, b, n, mask):
    nw = a.shape[0]
    full = np.uint64(0xFFFFFFFFFFFFFFFF)
    pc = 0
    for k in range(nw - 1):
        pc += _popcount64(~(a[k] ^ b[k]) & full)
    pc += _popcount64(~(a[nw - 1] ^ b[nw - 1]) & mask)
    return 2 * pc - n


def xnor_dot(a, b, n: int) -> int:
    """Sum of ``a_i * b_i`` over two packed {-1, +1} rows of logical length ``n``."""
    a = a.words if isinstance(a, BitTensor) else a
    b = b.words if isinstance(b, BitTensor) else b
    a = np.ascontiguousarray(a, dtype=np.uint64).reshape(-1)
    b = np.ascontiguousarray(b, dtype=np.uint64).reshape(-1)
    nw = n_words_for(n)
    if n <= 0 or a.shape[0] != nw or b.shape[0] != nw:
        raise ValueError(f"row length mismatch: {a.shape[0]} and {b.shape[0]} words for n={n}")
    return int(_xnor_dot_words(a, b, n, last_word_mask(n)))


@njit(cache=True)
def _bconv_kernel(xw, ww, c, stride, out):
    # xw: [N, Hp, Wp, nw] (spatially padded), ww: [F, kh, kw, nw]
    n_img, _, _, nw = xw.shape
    n_f, kh, kw, _ = ww.shape
    _, _, ho, wo = out.shape
    full = np.uint64(0xFFFFFFFFFFFFFFFF)
    rem = c % 64
    last = full if rem == 0 else (np.uint64(1) << np.uint64(rem)) - np.uint64(1)
    n_bits = c * kh * kw
    for n in range(n_img):
        for i in range(ho):
            for j in range(wo):
                for f in range(n_f):
                    pc = 0
                    for di in range(kh):
                        for dj in range(kw):
                            xrow = xw[n, i * stride + di, j * stride + dj]
                            wrow = ww[f, di, dj]
                            for k in range(nw - 1):
                                pc += _popcount64(~(xrow[k] ^ wrow[k]) & full)
                            pc += _popcount64(~(xrow[nw - 1] ^ wrow[nw - 1]) & last)
                    out[n, f, i, j] = 2 * pc - n_bits


def _conv_out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def binary_conv2d_int(x_bits: BitTensor, w_bits: BitTensor, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Integer XNOR-popcount correlation, int32 of shape [N, F, Ho, Wo].

    ``x_bits`` packs an NHWC tensor along C; ``w_bits`` packs [F, kh, kw, C]
    along C. Spatial padding contributes -1 values (zero words).
    """
    if len(x_bits.logical_shape) != 4 or len(w_bits.logical_shape) != 4:
        raise ValueError("binary_conv2d expects rank-4 NHWC input and FHWC weights")
    n, h, w, c = x_bits.logical_shape
    f, kh, kw, cw = w_bits.logical_shape
    if c != cw:
        raise ValueError(f"channel mismatch: input has {c}, weights expect {cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    xw = x_bits.words
    if padding:
        xw = np.pad(xw, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.empty((n, f, ho, wo), dtype=np.int32)
    _bconv_kernel(np.ascontiguousarray(xw), np.ascontiguousarray(w_bits.words), c, stride, out)
    return out


def binary_conv2d(x_bits: BitTensor, w_bits: BitTensor, alpha, stride: int = 1, padding: int = 0,
                  dtype=None) -> np.ndarray:
    """``alpha[f]`` times the exact XNOR-popcount correlation, NCHW output."""
    alpha = np.asarray(alpha)
    dtype = np.dtype(dtype or (alpha.dtype if alpha.dtype.kind == "f" else np.float64))
    f = w_bits.logical_shape[0]
    if alpha.ndim != 1 or alpha.shape[0] != f:
        raise ValueError(f"alpha must have one entry per filter ({f}), got shape {alpha.shape}")
    if not np.all(alpha > 0):
        raise ValueError("alpha must be strictly positive")
    acc = binary_conv2d_int(x_bits, w_bits, stride, padding)
    return acc.astype(dtype) * alpha.astype(dtype)[None, :, None, None]


def pack_conv_input(x, zero_policy: str = "ceil") -> BitTensor:
    """Pack an NCHW tensor channel-wise (NHWC bit layout)."""
    return pack(np.moveaxis(np.asarray(x), 1, -1), zero_policy=zero_policy)


def pack_conv_weight(w, zero_policy: str = "ceil") -> BitTensor:
    """Pack [F, C, kh, kw] weights channel-wise ([F, kh, kw, C] bit layout)."""
    return pack(np.moveaxis(np.asarray(w), 1, -1), zero_policy=zero_policy)


@njit(cache=True)
def _naive_conv_kernel(x, w, stride, out):
    n_img, c, _, _ = x.shape
    n_f, _, kh, kw = w.shape
    _, _, ho, wo = out.shape
    for n in range(n_img):
        for f in range(n_f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x[n, ch, i * stride + di, j * stride + dj] * w[f, ch, di, dj]
                    out[n, f, i, j] = acc


def naive_conv2d(x, w, stride: int = 1, padding: int = 0, pad_value: float = 0.0) -> np.ndarray:
    """Direct scalar-loop cross-correlation; the float baseline for benchmarks."""
    x = np.asarray(x)
    w = np.asarray(w, dtype=x.dtype)
    if x.shape[1] != w.shape[1]:
        raise ValueError("channel mismatch")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=pad_value)
    ho = (x.shape[2] - w.shape[2]) // stride + 1
    wo = (x.shape[3] - w.shape[3]) // stride + 1
    out = np.empty((x.shape[0], w.shape[0], ho, wo), dtype=x.dtype)
    _naive_conv_kernel(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, out)
    return out


def packed_storage_bits(n_weights: int, n_scales: int = 1) -> int:
    """Payload bits of a packed weight tensor stored as one flat bit row plus f32 scales."""
    return n_words_for(n_weights) * WORD_BITS + 32 * n_scales


def compression_ratio(n_weights: int, n_scales: int = 1) -> float:
    return 32.0 * n_weights / packed_storage_bits(n_weights, n_scales)


# -- canonical serialization -------------------------------------------------

def write_tensor(stream, value) -> None:
    """Write a dense (as f32) or packed tensor record."""
    if isinstance(value, BitTensor):
        shape = value.logical_shape
        stream.write(MAGIC + struct.pack("<BB", DTYPE_BITS, len(shape)))
        stream.write(struct.pack(f"<{len(shape)}I", *shape))
        stream.write(value.words.astype("<u8").tobytes())
        stream.write(struct.pack("<B", value.pad_len))
        return
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize non-finite values")
    stream.write(MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.astype("<f4").tobytes())


def _read_exact(stream, n):
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream):
    magic = _read_exact(stream, 4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(stream, 2))
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    if code == DTYPE_F32:
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4")
        return data.astype(np.float32).reshape(shape)
    if code == DTYPE_BITS:
        if rank == 0:
            raise FormatError("packed tensor needs rank >= 1")
        nw = n_words_for(shape[-1])
        count = int(np.prod(shape[:-1], dtype=np.int64)) * nw
        words = np.frombuffer(_read_exact(stream, 8 * count), dtype="<u8").astype(np.uint64)
        (pad_len,) = struct.unpack("<B", _read_exact(stream, 1))
        bt = BitTensor(tuple(shape), words.reshape(tuple(shape[:-1]) + (nw,)))
        if pad_len != bt.pad_len:
            raise FormatError(f"pad_len trailer {pad_len} does not match shape (expected {bt.pad_len})")
        return bt
    if code in RESERVED_DTYPES:
        raise FormatError(f"dtype code {code} is reserved")
    raise FormatError(f"unknown dtype code {code}")


def tensor_to_bytes(value) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, value)
    return buf.getvalue()


def tensor_from_bytes(data: bytes):
    buf = io.BytesIO(data)
    out = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor record")
    return out
