"""Desk-scale pose ablations: each variant differs from the base recipe in one setting."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from bnet import train
from bnet.config import RunConfig
from bnet.layers import BinMode
from bnet.losses import DistillSpec

log = logging.getLogger(__name__)

VARIANTS = {
    "base": {},
    "relu": {"model.activation": "relu"},
    "standard": {"recipe.init": "standard"},
    "abrupt": {"quant.progressive": False},
    "stack2": {"model.stacks": 2},
    "distilled": {},
}

# (name, better, worse, metric): the first variant is expected to match or beat the second
COMPARISONS = [
    ("prelu_vs_relu", "base", "relu", "final"),
    ("reverse_vs_standard_init", "base", "standard", "phase_b_epoch5"),
    ("progressive_vs_abrupt", "base", "abrupt", "final"),
    ("stack2_vs_stack1", "stack2", "base", "final"),
    ("distilled_vs_plain", "distilled", "base", "final"),
]


@dataclass
class AblationResult:
    pck: dict = field(default_factory=dict)  # (variant, metric) -> list over seeds
    seconds: float = 0.0

    def mean(self, variant, metric) -> float:
        return float(np.mean(self.pck[(variant, metric)]))

    def verdicts(self):
        out = []
        for name, a, b, metric in COMPARISONS:
            ma, mb = self.mean(a, metric), self.mean(b, metric)
            out.append((name, ma, mb, ma >= mb))
        return out


def _summaries(metrics: train.Metrics, plan_epochs_a: int) -> dict:
    pck = dict(metrics.get("val", "pck"))
    return {"final": pck[max(pck)], "phase_b_epoch5": pck.get(plan_epochs_a + 4, float("nan"))}


def run_ablations(base: RunConfig, seeds=(1, 2, 3, 4, 5), variants=None) -> AblationResult:
    variants = list(variants or VARIANTS)
    res = AblationResult()
    t0 = time.perf_counter()
    phase_a = int(round(base["recipe.phase_a_frac"] * base["recipe.epochs"]))
    for seed in seeds:
        cfg0 = base.with_values({"seed": seed})
        task = train.PoseTask(cfg0)
        teacher = None
        if "distilled" in variants:
            t_cfg = cfg0.with_values({"recipe.init": "real"})
            t_state, _ = train.train(t_cfg, task)
            teacher = train.Teacher(t_state.net, BinMode("real", "real"), DistillSpec(base["distill.gt_weight"]))
        for name in variants:
            cfg = cfg0.with_values(VARIANTS[name])
            _, metrics = train.train(cfg, task, teacher=teacher if name == "distilled" else None)
            for metric, value in _summaries(metrics, phase_a).items():
                res.pck.setdefault((name, metric), []).append(value)
            log.info("seed %d %s: %s", seed, name, _summaries(metrics, phase_a))
    res.seconds = time.perf_counter() - t0
    return res
