"""Training pipeline: phases, the sharpness schedule hook, distillation,
evaluation, metrics and checkpoints."""
from __future__ import annotations

import enum
import io
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from bnet import bitcore, data, models
from bnet.binarize import ApproxSpec, LambdaSchedule, lambda_at
from bnet.config import RunConfig
from bnet.layers import BinMode
from bnet.losses import DistillSpec, bce_heatmap_loss, distill_loss, feature_match_loss, softmax_ce_loss
from bnet.optim import LRRecipe, lr_schedule, make_optimizer

log = logging.getLogger(__name__)


class Phase(enum.IntEnum):
    REAL = 0
    BIN_FEATURES = 1
    BIN_FULL = 2


class PhaseError(RuntimeError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class TrainState:
    net: models.Network
    optimizer: object
    seed: int
    epoch: int = 0
    step: int = 0
    phase: Phase = Phase.REAL
    phase_step: int = 0  # optimizer steps taken in the current phase

    def advance(self, phase: Phase) -> None:
        if phase < self.phase:
            raise PhaseError(f"phase regression {self.phase.name} -> {phase.name}")
        if phase != self.phase:
            self.phase = phase
            self.phase_step = 0


@dataclass
class Metrics:
    """``epoch,split,metric,value`` records."""

    rows: list = field(default_factory=list)

    def add(self, epoch, split, metric, value):
        self.rows.append((int(epoch), split, metric, float(value)))

    def get(self, split, metric) -> list:
        return [(e, v) for e, s, m, v in self.rows if s == split and m == metric]

    def last(self, split, metric) -> float:
        return self.get(split, metric)[-1][1]

    def to_csv(self) -> str:
        lines = ["epoch,split,metric,value"]
        lines += [f"{e},{s},{m},{v!r}" for e, s, m, v in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text) -> "Metrics":
        out = cls()
        for line in text.splitlines()[1:]:
            if line:
                e, s, m, v = line.split(",")
                out.add(int(e), s, m, float(v))
        return out


# -- run plan -------------------------------------------------------------------------

@dataclass(frozen=True)
class Plan:
    """Phase per epoch plus the feature-sharpness schedule."""

    epochs: int
    init: str
    phase_a_epochs: int
    steps_per_epoch: int
    progressive: bool
    kind: str
    schedule: LambdaSchedule
    hard_threshold: float

    @classmethod
    def from_config(cls, cfg: RunConfig, steps_per_epoch: int) -> "Plan":
        epochs = cfg["recipe.epochs"]
        init = cfg["recipe.init"]
        a = epochs if init == "real" else int(round(cfg["recipe.phase_a_frac"] * epochs))
        a = min(max(a, 0), epochs)
        sched = LambdaSchedule.spanning(max(1, a * steps_per_epoch), cfg["quant.lambda_start"],
                                        cfg["quant.lambda_end"], cfg["quant.stages"])
        return cls(epochs, init, a, steps_per_epoch, cfg["quant.progressive"], cfg["quant.kind"], sched,
                   cfg["quant.hard_threshold"])

    def phase_of(self, epoch: int) -> Phase:
        if self.init == "real":
            return Phase.REAL
        if epoch < self.phase_a_epochs:
            return Phase.BIN_FEATURES if self.init == "reverse" else Phase.REAL
        return Phase.BIN_FULL

    def mode(self, phase: Phase, phase_step: int) -> BinMode:
        if phase == Phase.REAL:
            return BinMode("real", "real")
        if phase == Phase.BIN_FEATURES:
            if not self.progressive:
                return BinMode("hard", "real")
            lam = lambda_at(self.schedule, phase_step)
            return BinMode("smooth", "real", ApproxSpec(self.kind, lam))
        return BinMode("hard", "hard")


# -- tasks -----------------------------------------------------------------------------

class PoseTask:
    kind = "heatmap"

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        seed = cfg["seed"]
        size, stride = cfg["data.image_size"], cfg["data.stride"]
        lm, sigma = cfg["data.landmarks"], cfg["data.sigma"]
        self.train = data.synth_pose_dataset(cfg["data.train_size"], seed, lm, size, sigma, stride)
        self.val = data.synth_pose_dataset(cfg["data.val_size"], seed + 100_003, lm, size, sigma, stride)
        self.augment = cfg["data.augment"]

    def build_graph(self, cfg: RunConfig | None = None) -> models.LayerGraph:
        c = cfg or self.cfg
        return models.build_pose_net(c["data.image_size"], 1, c["model.depth"], c["model.width"],
                                     c["data.landmarks"], c["model.stacks"], c["model.binarize_joins"],
                                     c["model.activation"], c["model.prelu_per_channel"],
                                     heatmap_stride=c["data.stride"])

    def __len__(self):
        return len(self.train)

    def batch(self, idx, rng):
        ds = self.train
        if not self.augment:
            return ds.images[idx], ds.heatmaps[idx]
        imgs, heats = [], []
        for i in idx:
            im, _, hm, _ = data.augment(ds.images[i], ds.landmarks[i], rng, stride=ds.stride, sigma=ds.sigma)
            imgs.append(im)
            heats.append(hm)
        return np.stack(imgs), np.stack(heats)

    def loss(self, out, target):
        return bce_heatmap_loss(out, target)

    def evaluate(self, net, mode, batch=64):
        outs = predict(net, self.val.images, mode, batch)
        loss = sum(bce_heatmap_loss(o, self.val.heatmaps)[0] for o in outs)
        return {"loss": loss, "pck": data.pck(outs[-1], self.val.landmarks, 0.1, stride=self.val.stride)}


class ClassifyTask:
    kind = "logits"

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        if not cfg["data.idx_images"] or not cfg["data.idx_labels"]:
            raise FileNotFoundError("classify task needs data.idx_images and data.idx_labels")
        x, y = data.load_idx_archive(cfg["data.idx_images"], cfg["data.idx_labels"])
        if cfg["data.val_idx_images"]:
            vx, vy = data.load_idx_archive(cfg["data.val_idx_images"], cfg["data.val_idx_labels"])
        else:
            n_val = max(1, len(x) // 6)
            x, vx, y, vy = x[n_val:], x[:n_val], y[n_val:], y[:n_val]
        n_train = cfg["data.train_size"]
        self.x, self.y = x[:n_train, :, :, None], y[:n_train]
        self.vx, self.vy = vx[:cfg["data.val_size"], :, :, None], vy[:cfg["data.val_size"]]
        self.num_classes = int(max(self.y.max(), self.vy.max())) + 1

    def build_graph(self, cfg: RunConfig | None = None):
        c = cfg or self.cfg
        return models.build_classifier(c["model.classifier"], max(self.num_classes, 2), self.x.shape[-1],
                                       self.x.shape[1], act=c["model.activation"],
                                       per_channel=c["model.prelu_per_channel"])

    def __len__(self):
        return len(self.x)

    def batch(self, idx, rng):
        return self.x[idx], self.y[idx]

    def loss(self, out, target):
        return softmax_ce_loss(out, target)

    def evaluate(self, net, mode, batch=64):
        logits = predict(net, self.vx, mode, batch)[-1]
        return {"loss": softmax_ce_loss(logits, self.vy)[0],
                "accuracy": 100.0 * float((logits.argmax(axis=1) == self.vy).mean())}


def make_task(cfg: RunConfig):
    return PoseTask(cfg) if cfg["task"] == "pose" else ClassifyTask(cfg)


def predict(net, x, mode, batch=64, keep=()):
    """Inference-mode forward in chunks; returns per-tap outputs."""
    outs = None
    for start in range(0, len(x), batch):
        res = net.forward(x[start:start + batch], mode, training=False)
        outs = [[r] for r in res] if outs is None else [o + [r] for o, r in zip(outs, res)]
    return [np.concatenate(o) for o in outs]


# -- teacher ----------------------------------------------------------------------------

@dataclass
class Teacher:
    net: models.Network
    mode: BinMode
    spec: DistillSpec
    feature_node: str | None = None

    def outputs(self, x):
        keep = (self.feature_node,) if self.spec.match_features else ()
        if keep:
            outs, kept = self.net.forward(x, self.mode, training=False, keep=keep)
            return outs[-1], kept[self.feature_node]
        return self.net.forward(x, self.mode, training=False)[-1], None


# -- the loop -------------------------------------------------------------------------------

def new_state(cfg: RunConfig, graph: models.LayerGraph) -> TrainState:
    net = models.Network(graph, seed=cfg["seed"], alpha_granularity=cfg["model.alpha"])
    return TrainState(net, make_optimizer(cfg["recipe.optimizer"]), cfg["seed"])


def lr_recipe(cfg: RunConfig) -> LRRecipe:
    return LRRecipe(cfg["recipe.lr"], cfg["recipe.lr_drop_every"], cfg["recipe.lr_drop_factor"])


def current_mode(state: TrainState, plan: Plan) -> BinMode:
    return plan.mode(state.phase, state.phase_step)


def train(cfg: RunConfig, task=None, state: TrainState | None = None, teacher: Teacher | None = None,
          metrics: Metrics | None = None, stop_after: int | None = None, on_epoch=None):
    """Run (or resume) training; returns (state, metrics)."""
    task = task or make_task(cfg)
    if state is None:
        state = new_state(cfg, task.build_graph(cfg))
    metrics = metrics or Metrics()
    net = state.net
    batch = cfg["recipe.batch"]
    n = len(task)
    steps_per_epoch = n // batch
    if steps_per_epoch < 1:
        raise ValueError("training set smaller than one batch")
    plan = Plan.from_config(cfg, steps_per_epoch)
    recipe = lr_recipe(cfg)
    binary_keys = net.binary_param_keys()
    feat_node = None
    if teacher is not None and teacher.spec.match_features:
        feat_node = models.last_features_node(net.graph)
    last = plan.epochs if stop_after is None else min(plan.epochs, stop_after)

    if state.step == 0:
        state.advance(plan.phase_of(0))
    for epoch in range(state.epoch, last):
        phase = plan.phase_of(epoch)
        if phase != state.phase:
            if phase == Phase.BIN_FULL and state.phase == Phase.BIN_FEATURES and plan.progressive:
                lam = current_mode(state, plan).spec.lam
                if lam < plan.hard_threshold:
                    log.warning("switching to hard kernels at lambda=%g < threshold %g", lam, plan.hard_threshold)
            before = task.evaluate(net, current_mode(state, plan))
            state.advance(phase)
            if cfg["recipe.reset_moments"]:
                state.optimizer.reset()
            after = task.evaluate(net, current_mode(state, plan))
            metrics.add(epoch, "transition", "loss_before", before["loss"])
            metrics.add(epoch, "transition", "loss_after", after["loss"])
        rng = np.random.default_rng(np.random.SeedSequence([state.seed, epoch, 1]))
        order = rng.permutation(n)
        lr = lr_schedule(recipe, epoch)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * batch:(b + 1) * batch])
            x, target = task.batch(idx, rng)
            mode = current_mode(state, plan)
            net.zero_grad()
            keep = (feat_node,) if feat_node else ()
            res = net.forward(x, mode, training=True, keep=keep)
            outs, kept = res if keep else (res, {})
            t_out = t_feat = None
            if teacher is not None:
                t_out, t_feat = teacher.outputs(x)
            grads, loss = [], 0.0
            for o in outs:
                if teacher is None:
                    lv, g = task.loss(o, target)
                else:
                    lv, g = distill_loss(o, t_out, target, teacher.spec, task.kind)
                loss += lv
                grads.append(g)
            extra = {}
            if feat_node:
                lv, g = feature_match_loss(kept[feat_node], t_feat, teacher.spec.feature_weight)
                loss += lv
                extra[feat_node] = g
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {state.step}")
            net.backward(grads, extra)
            state.optimizer.step(net.parameters(), net.gradients(), lr, clamp_keys=binary_keys)
            state.step += 1
            state.phase_step += 1
            total += loss
        mode = current_mode(state, plan)
        metrics.add(epoch, "train", "loss", total / steps_per_epoch)
        metrics.add(epoch, "train", "phase", int(state.phase))
        if mode.features == "smooth":
            metrics.add(epoch, "train", "lambda", mode.spec.lam)
        for k, v in task.evaluate(net, mode).items():
            metrics.add(epoch, "val", k, v)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(state, metrics)
    return state, metrics


def reverse_order_train(cfg: RunConfig, task=None, state: TrainState | None = None, **kw):
    """Real weights with binarized features first, then fully binary.

    ``state`` must be fresh or still real-valued; anything further along raises.
    """
    if state is not None and state.phase > Phase.REAL:
        raise PhaseError(f"reverse-order training needs a fresh or REAL state, got {state.phase.name}")
    if state is not None:
        state.step = 0  # re-plan from a real-valued start
        state.epoch = 0
    return train(cfg.with_values({"recipe.init": "reverse"}), task, state, **kw)


def eval_mode_for(state: TrainState, cfg: RunConfig, steps_per_epoch: int) -> BinMode:
    return current_mode(state, Plan.from_config(cfg, steps_per_epoch))


# -- checkpoints ---------------------------------------------------------------------------

CKPT_MAGIC = b"BNCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _put_str(buf, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _get_str(buf) -> str:
    (n,) = struct.unpack("<I", _read(buf, 4))
    return _read(buf, n).decode("utf-8")


def _read(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _put_tensors(buf, tensors: dict):
    buf.write(struct.pack("<I", len(tensors)))
    for k in sorted(tensors):
        _put_str(buf, k)
        bitcore.write_tensor(buf, tensors[k])


def _get_tensors(buf) -> dict:
    (n,) = struct.unpack("<I", _read(buf, 4))
    out = {}
    for _ in range(n):
        k = _get_str(buf)
        try:
            out[k] = bitcore.read_tensor(buf)
        except bitcore.FormatError as exc:
            raise CheckpointError(str(exc)) from None
    return out


def checkpoint_bytes(state: TrainState, cfg: RunConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    _put_str(buf, cfg.dump(exclude_prefixes=("io.",)))
    _put_str(buf, state.net.graph.to_text())
    _put_tensors(buf, state.net.parameters())
    _put_tensors(buf, state.net.buffers())
    opt = state.optimizer
    _put_str(buf, opt.kind)
    buf.write(struct.pack("<QQ", opt.t, opt.skipped))
    _put_tensors(buf, opt.state)
    buf.write(struct.pack("<IQBQQ", state.epoch, state.step, int(state.phase), state.phase_step, state.seed))
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(path, state: TrainState, cfg: RunConfig) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(state, cfg))


@dataclass
class Checkpoint:
    config_text: str
    graph: models.LayerGraph
    params: dict
    buffers: dict
    optimizer_kind: str
    optimizer_t: int
    optimizer_skipped: int
    optimizer_state: dict
    epoch: int
    step: int
    phase: Phase
    phase_step: int
    seed: int


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    buf = io.BytesIO(payload)
    buf.read(4)
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = _get_str(buf)
    graph = models.LayerGraph.from_text(_get_str(buf))
    params = _get_tensors(buf)
    buffers = _get_tensors(buf)
    kind = _get_str(buf)
    t, skipped = struct.unpack("<QQ", _read(buf, 16))
    opt_state = _get_tensors(buf)
    epoch, step, phase, phase_step, seed = struct.unpack("<IQBQQ", _read(buf, 29))
    if buf.read(1):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(config_text, graph, params, buffers, kind, t, skipped, opt_state, epoch, step,
                      Phase(phase), phase_step, seed)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


def restore_state(ck: Checkpoint, cfg: RunConfig) -> TrainState:
    net = models.Network(ck.graph, seed=ck.seed, alpha_granularity=cfg["model.alpha"])
    expected = set(net.parameters()) | set(net.buffers())
    got = set(ck.params) | set(ck.buffers)
    if expected != got:
        raise CheckpointError(f"checkpoint tensors do not match graph: {sorted(expected ^ got)[:5]}")
    for k, v in {**ck.params, **ck.buffers}.items():
        net.set_parameter(k, np.array(v, dtype=np.float32))
    opt = make_optimizer(ck.optimizer_kind)
    opt.t, opt.skipped = ck.optimizer_t, ck.optimizer_skipped
    opt.state = {k: np.array(v, dtype=np.float32) for k, v in ck.optimizer_state.items()}
    return TrainState(net, opt, ck.seed, ck.epoch, ck.step, ck.phase, ck.phase_step)
