"""Run configuration: ``key = value`` text with typed, known keys only."""
from __future__ import annotations

from dataclasses import dataclass


class ConfigError(ValueError):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*options):
    def parse(v):
        v = str(v).strip()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v
    parse.__name__ = "|".join(options)
    return parse


@dataclass(frozen=True)
class Key:
    default: object
    parse: object
    help: str


KEYS: dict[str, Key] = {
    "task": Key("pose", _choice("pose", "classify"), "pose (synthetic heatmaps) or classify (IDX digits)"),
    "preset": Key("desk", _choice("desk", "tiny"), "named model/recipe preset"),
    "seed": Key(1, int, "seed for initialization, data order and augmentation"),
    "model.depth": Key(2, int, "hourglass recursion depth"),
    "model.width": Key(16, int, "hourglass feature width (divisible by 4)"),
    "model.stacks": Key(1, int, "number of stacked hourglasses"),
    "model.activation": Key("prelu", _choice("prelu", "relu", "leaky_relu"), "non-linearity after binary convs"),
    "model.prelu_per_channel": Key(True, _bool, "one PReLU slope per channel (else one per layer)"),
    "model.binarize_joins": Key(True, _bool, "binarize the 1x1 convs joining stacked hourglasses"),
    "model.alpha": Key("per_tensor", _choice("per_tensor", "per_filter"), "weight scale granularity"),
    "model.classifier": Key("tiny", _choice("tiny", "alexnet_like", "resnet18_like"), "classifier preset"),
    "data.train_size": Key(128, int, "synthetic training samples"),
    "data.val_size": Key(128, int, "synthetic validation samples"),
    "data.image_size": Key(32, int, "synthetic image side in pixels"),
    "data.stride": Key(2, int, "image pixels per heatmap pixel"),
    "data.landmarks": Key(5, int, "landmarks per figure"),
    "data.sigma": Key(1.0, float, "heatmap Gaussian std in heatmap pixels"),
    "data.augment": Key(True, _bool, "random flip/scale/rotation during training"),
    "data.idx_images": Key("", str, "IDX image archive (classify task)"),
    "data.idx_labels": Key("", str, "IDX label archive (classify task)"),
    "data.val_idx_images": Key("", str, "IDX validation images (classify task; defaults to a holdout split)"),
    "data.val_idx_labels": Key("", str, "IDX validation labels (classify task)"),
    "recipe.epochs": Key(20, int, "total training epochs"),
    "recipe.batch": Key(4, int, "minibatch size"),
    "recipe.optimizer": Key("rmsprop", _choice("rmsprop", "adam"), "optimizer"),
    "recipe.lr": Key(2.5e-3, float, "initial learning rate"),
    "recipe.lr_drop_every": Key(40, int, "epochs between learning-rate drops"),
    "recipe.lr_drop_factor": Key(0.1, float, "learning-rate multiplier at each drop"),
    "recipe.init": Key("reverse", _choice("reverse", "standard", "real"),
                       "reverse: binary features then weights; standard: real then fully binary; real: no binarization"),
    "recipe.reset_moments": Key(True, _bool, "clear optimizer moments when the training phase changes"),
    "recipe.phase_a_frac": Key(0.6, float, "fraction of epochs spent before weights are binarized"),
    "quant.kind": Key("tanh", _choice("tanh", "sigmoid", "softsign"), "smooth sign approximator"),
    "quant.progressive": Key(True, _bool, "anneal the approximator (else hard sign with STE from the start)"),
    "quant.lambda_start": Key(1.0, float, "first sharpness value"),
    "quant.lambda_end": Key(65536.0, float, "final sharpness value"),
    "quant.stages": Key(17, int, "number of geometric sharpness stages"),
    "quant.hard_threshold": Key(65536.0, float, "sharpness at which hard kernels take over"),
    "distill.teacher": Key("", str, "teacher checkpoint path (empty: no distillation)"),
    "distill.gt_weight": Key(0.25, float, "weight of the ground-truth term; soft term gets 1 - gt_weight"),
    "distill.match_features": Key(False, _bool, "add an L2 term on pre-head features"),
    "distill.feature_weight": Key(0.1, float, "weight of the feature-matching term"),
    "io.out": Key("run", str, "output directory"),
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Immutable mapping of every known key to a typed value."""

    def __init__(self, values: dict | None = None):
        resolved = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            resolved[k] = self._parse(k, v)
        self._values = resolved

    @staticmethod
    def _parse(key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            return KEYS[key].parse(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None

    def __getitem__(self, key):
        return self._values[key]

    def replace(self, **overrides) -> "RunConfig":
        vals = dict(self._values)
        for k, v in overrides.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def with_values(self, values: dict) -> "RunConfig":
        vals = dict(self._values)
        vals.update(values)
        return RunConfig(vals)

    def as_dict(self) -> dict:
        return dict(self._values)

    def dump(self, exclude_prefixes=()) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in sorted(self._values.items())
                 if not any(k.startswith(p) for p in exclude_prefixes)]
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def __repr__(self):
        return f"RunConfig({self._values!r})"


# Values a preset sets before the config file and flags are applied.
PRESETS = {
    "desk": {},
    "tiny": {
        "model.depth": 1, "model.width": 8, "data.train_size": 32, "data.val_size": 16,
        "data.image_size": 16, "recipe.epochs": 3, "recipe.batch": 8,
    },
}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = value.strip()
    return values


def load_config(text: str = "", overrides: dict | None = None) -> RunConfig:
    """Defaults, then the preset, then the config text, then ``overrides``."""
    values = parse_config_text(text) if text else {}
    values.update(overrides or {})
    preset = RunConfig._parse("preset", values.get("preset", KEYS["preset"].default))
    merged = {**PRESETS[preset], **values}
    return RunConfig(merged)


def help_text() -> str:
    width = max(len(k) for k in KEYS)
    lines = [f"  {k.ljust(width)}  {_fmt(spec.default):>10}  {spec.help}" for k, spec in KEYS.items()]
    return "config keys (default shown):\n" + "\n".join(lines)
