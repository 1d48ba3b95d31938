"""Sign approximators, straight-through gradients, weight scales and the
sharpness schedule used for progressive binarization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from bnet import bitcore

log = logging.getLogger(__name__)

KINDS = ("sigmoid", "softsign", "tanh", "hard")
SMOOTH_KINDS = ("sigmoid", "softsign", "tanh")
ALPHA_EPS = 1e-8


@dataclass(frozen=True)
class ApproxSpec:
    kind: str = "tanh"
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown approximator {self.kind!r}; expected one of {KINDS}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be a positive finite number, got {self.lam}")

    @property
    def smooth(self) -> bool:
        return self.kind != "hard"


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to the sign approximator")


def approx_forward(x, spec: ApproxSpec, zero_policy: str = "ceil") -> np.ndarray:
    x = np.asarray(x)
    _check_finite(x)
    lam = spec.lam
    if spec.kind == "tanh":
        return np.tanh(lam * x)
    if spec.kind == "softsign":
        return lam * x / (1 + lam * np.abs(x))
    if spec.kind == "sigmoid":
        # 2 * sigmoid(lam x) - 1 == tanh(lam x / 2); this form cannot overflow
        return np.tanh(0.5 * lam * x)
    return bitcore.sign(x, zero_policy)


def approx_backward(x, spec: ApproxSpec) -> np.ndarray:
    """d/dx of ``approx_forward``."""
    if not spec.smooth:
        raise ValueError("the hard sign has no useful derivative; use ste_backward")
    x = np.asarray(x)
    _check_finite(x)
    lam = spec.lam
    if spec.kind == "softsign":
        d = 1 + lam * np.abs(x)
        return lam / (d * d)
    # tanh: lam sech^2(lam x); sigmoid: 2 lam e^{lam x} / (e^{lam x} + 1)^2 = (lam / 2) sech^2(lam x / 2).
    # sech^2(u) = 4 e^{-2|u|} / (1 + e^{-2|u|})^2 keeps full relative precision in the tails.
    scale = lam if spec.kind == "tanh" else 0.5 * lam
    e = np.exp(-2.0 * np.abs(scale * x))
    return scale * 4.0 * e / ((1.0 + e) * (1.0 + e))


def ste_backward(x, upstream, clip: float = 1.0) -> np.ndarray:
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    return np.where(np.abs(x) <= clip, upstream, 0).astype(upstream.dtype)


def weight_scale(w, granularity: str = "per_filter") -> np.ndarray:
    """Mean absolute weight per output filter (axis 0), or over the whole tensor."""
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    if granularity == "per_filter":
        alpha = np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
    elif granularity == "per_tensor":
        alpha = np.abs(w).mean(keepdims=True).reshape(1)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    if np.any(alpha < ALPHA_EPS):
        log.warning("all-zero filter; clamping its scale to %g", ALPHA_EPS)
        alpha = np.maximum(alpha, ALPHA_EPS).astype(alpha.dtype)
    return alpha


def weight_scale_backward(w, grad_alpha, granularity: str = "per_filter") -> np.ndarray:
    """Gradient of ``weight_scale`` w.r.t. ``w`` (subgradient 0 at w == 0)."""
    w = np.asarray(w)
    if granularity == "per_filter":
        per = w[0].size
        return np.sign(w) * (np.asarray(grad_alpha).reshape((-1,) + (1,) * (w.ndim - 1)) / per)
    return np.sign(w) * (np.asarray(grad_alpha).reshape(()) / w.size)


@dataclass(frozen=True)
class LambdaSchedule:
    """Geometric sharpness schedule, constant within each stage.

    ``stage_length`` is counted in whatever unit the caller steps with; the
    training loop uses optimizer iterations.
    """

    start: float = 1.0
    end: float = 65536.0
    num_stages: int = 17
    stage_length: int = 1
    total_steps: int = 0  # when shorter than num_stages, stages are skipped evenly to reach ``end``

    def __post_init__(self):
        if not (self.start > 0 and self.end >= self.start):
            raise ValueError("need 0 < start <= end")
        if self.num_stages < 1 or self.stage_length < 1:
            raise ValueError("num_stages and stage_length must be >= 1")

    @classmethod
    def spanning(cls, total_steps: int, start: float = 1.0, end: float = 65536.0, num_stages: int = 17):
        """Schedule whose last stage begins no later than ``total_steps - 1``."""
        total = max(1, int(total_steps))
        return cls(start, end, num_stages, max(1, total // num_stages), total if total < num_stages else 0)

    def stage(self, step: int) -> int:
        if self.total_steps:
            if self.total_steps == 1:
                return self.num_stages - 1
            k = int(step) * (self.num_stages - 1) // (self.total_steps - 1)
            return min(k, self.num_stages - 1)
        return min(int(step) // self.stage_length, self.num_stages - 1)

    def values(self) -> list[float]:
        return [self.value_of_stage(k) for k in range(self.num_stages)]

    def value_of_stage(self, k: int) -> float:
        if self.num_stages == 1:
            return float(self.end)
        if k >= self.num_stages - 1:
            return float(self.end)
        ratio = (self.end / self.start) ** (1.0 / (self.num_stages - 1))
        return float(self.start * ratio ** k)


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return schedule.value_of_stage(schedule.stage(step))
