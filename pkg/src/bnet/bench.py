"""Storage and speed measurements for packed binary convolutions."""
from __future__ import annotations

import time

import numpy as np

from bnet import bitcore, models


def packed_weight_bytes(w, n_scales: int = 1) -> int:
    """Bytes to store ``w`` as one flat bit row plus f32 scales."""
    bits = bitcore.pack(np.asarray(w).reshape(-1))
    return bits.nbytes + 4 * n_scales


def measured_ratio(w, n_scales: int = 1) -> float:
    return 4 * np.asarray(w).size / packed_weight_bytes(w, n_scales)


def compression_report(shape=(256, 256, 3, 3), alpha_granularity="per_tensor", seed=0) -> dict:
    w = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    n_scales = shape[0] if alpha_granularity == "per_filter" else 1
    return {
        "bench": "compression",
        "shape": list(shape),
        "alpha": alpha_granularity,
        "float_bytes": 4 * w.size,
        "packed_bytes": packed_weight_bytes(w, n_scales),
        "ratio": measured_ratio(w, n_scales),
    }


def layer_ratios(net: models.Network, min_weights: int = 4096) -> dict:
    """Measured ratio for every binarized weight tensor with at least ``min_weights`` entries."""
    out = {}
    for key in net.binary_param_keys():
        w = net.parameters()[key]
        if w.size >= min_weights:
            layer = net.layers[key.split("/")[0]]
            n_scales = w.shape[0] if getattr(layer, "alpha_granularity", "per_tensor") == "per_filter" else 1
            out[key] = measured_ratio(w, n_scales)
    return out


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def speedup_report(channels=64, size=32, k=3, filters=None, batch=1, repeats=5, seed=0) -> dict:
    """Best-of-``repeats`` wall time: packed XNOR conv (input packing included) vs the scalar float loop."""
    filters = filters or channels
    rng = np.random.default_rng(seed)
    x = bitcore.sign(rng.standard_normal((batch, channels, size, size))).astype(np.float32)
    w = bitcore.sign(rng.standard_normal((filters, channels, k, k))).astype(np.float32)
    wb = bitcore.pack_conv_weight(w)
    alpha = np.ones(filters, dtype=np.float32)
    pad = k // 2

    def xnor():
        return bitcore.binary_conv2d(bitcore.pack_conv_input(x), wb, alpha, 1, pad)

    def naive():
        return bitcore.naive_conv2d(x, w, 1, pad, pad_value=-1.0)

    if not np.array_equal(xnor(), naive()):  # also warms both JITs
        raise AssertionError("kernels disagree")
    tx, tn = _best_time(xnor, repeats), _best_time(naive, repeats)
    return {
        "bench": "speedup",
        "workload": {"batch": batch, "channels": channels, "filters": filters, "size": size, "k": k},
        "xnor_seconds": tx,
        "naive_seconds": tn,
        "speedup": tn / tx,
    }
