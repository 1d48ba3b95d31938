"""RMSProp and Adam over dicts of parameter arrays, plus learning-rate recipes."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class Optimizer:
    kind = "base"

    def __init__(self, **hyper):
        self.hyper = hyper
        self.t = 0
        self.state: dict[str, np.ndarray] = {}
        self.skipped = 0

    def step(self, params: dict, grads: dict, lr: float, clamp_keys=()) -> bool:
        """Update ``params`` in place; returns False if the step was skipped."""
        self.t += 1
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient at step %d; update skipped", self.t)
            return False
        for key in sorted(grads):
            params[key] = self._update(key, params[key], grads[key], lr)
        for key in clamp_keys:
            np.clip(params[key], -1.0, 1.0, out=params[key])
        return True

    def reset(self) -> None:
        """Forget moments and the step count (bias correction restarts)."""
        self.t = 0
        self.state = {}

    def _moment(self, name, like):
        if name not in self.state:
            self.state[name] = np.zeros_like(like)
        return self.state[name]


class RMSProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, rho=0.99, eps=1e-8):
        super().__init__(rho=rho, eps=eps)

    def _update(self, key, p, g, lr):
        rho, eps = self.hyper["rho"], self.hyper["eps"]
        v = self._moment(key + "#v", p)
        v *= rho
        v += (1 - rho) * g * g
        p -= (lr * g / (np.sqrt(v) + eps)).astype(p.dtype)
        return p


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(beta1=beta1, beta2=beta2, eps=eps)

    def _update(self, key, p, g, lr):
        b1, b2, eps = self.hyper["beta1"], self.hyper["beta2"], self.hyper["eps"]
        m = self._moment(key + "#m", p)
        v = self._moment(key + "#v", p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** self.t)
        v_hat = v / (1 - b2 ** self.t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        return p


def make_optimizer(kind: str) -> Optimizer:
    if kind == "rmsprop":
        return RMSProp()
    if kind == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass(frozen=True)
class LRRecipe:
    base: float
    drop_every: int
    drop_factor: float = 0.1


LR_RECIPES = {
    "pose": LRRecipe(2.5e-4, 40, 0.1),
    "imagenet_like": LRRecipe(1e-3, 25, 0.1),
}


def lr_schedule(recipe, epoch: int) -> float:
    """Step decay: ``base * drop_factor ** (epoch // drop_every)``."""
    if isinstance(recipe, str):
        recipe = LR_RECIPES[recipe]
    return recipe.base * recipe.drop_factor ** (int(epoch) // recipe.drop_every)
