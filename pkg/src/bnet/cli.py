"""``bnet`` command line: train, distill, eval, bench, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from bnet import bench, data, models, train
from bnet.config import ConfigError, RunConfig, help_text, load_config
from bnet.layers import weight_histogram
from bnet.losses import DistillSpec

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("bnet")


def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config_from_args(args, base_text: str = "") -> RunConfig:
    text = base_text
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            text += "\n" + f.read()
    overrides = _parse_sets(args.set)
    for flag, key in (("seed", "seed"), ("task", "task"), ("preset", "preset"), ("init", "recipe.init"),
                      ("out", "io.out"), ("epochs", "recipe.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(text, overrides)


def _write_run(cfg: RunConfig, state, metrics) -> str:
    out = cfg["io.out"]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "checkpoint.bnck")
    train.save_checkpoint(path, state, cfg)
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(metrics.to_csv())
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as f:
        f.write(cfg.dump())
    return path


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _steps_per_epoch(cfg: RunConfig, task=None) -> int:
    n = len(task) if task is not None else cfg["data.train_size"]
    return max(1, n // cfg["recipe.batch"])


def _load_teacher(path: str, spec: DistillSpec) -> train.Teacher:
    ck = train.load_checkpoint(path)
    t_cfg = load_config(ck.config_text)
    state = train.restore_state(ck, t_cfg)
    mode = train.Plan.from_config(t_cfg, _steps_per_epoch(t_cfg)).mode(ck.phase, ck.phase_step)
    feat = models.last_features_node(ck.graph) if spec.match_features else None
    return train.Teacher(state.net, mode, spec, feat)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    teacher = None
    if cfg["distill.teacher"]:
        teacher = _load_teacher(cfg["distill.teacher"], _distill_spec(cfg))
    state, metrics = train.train(cfg, teacher=teacher)
    path = _write_run(cfg, state, metrics)
    last = {m: v for e, s, m, v in metrics.rows if s == "val" and e == state.epoch - 1}
    _emit({"checkpoint": path, "epoch": state.epoch, "phase": state.phase.name, **last})
    return EXIT_OK


def _distill_spec(cfg: RunConfig) -> DistillSpec:
    return DistillSpec(cfg["distill.gt_weight"], cfg["distill.match_features"], cfg["distill.feature_weight"])


def cmd_distill(args) -> int:
    overrides = {"distill.teacher": args.teacher}
    args.set = list(args.set or []) + [f"{k}={v}" for k, v in overrides.items()]
    if not os.path.isfile(args.teacher):
        raise FileNotFoundError(f"teacher checkpoint not found: {args.teacher}")
    return cmd_train(args)


def _restore(path, sets):
    ck = train.load_checkpoint(path)
    cfg = load_config(ck.config_text, _parse_sets(sets))
    return ck, cfg, train.restore_state(ck, cfg)


def cmd_eval(args) -> int:
    ck, cfg, state = _restore(args.checkpoint, args.set)
    task = train.make_task(cfg)
    mode = train.Plan.from_config(cfg, _steps_per_epoch(cfg, task)).mode(ck.phase, ck.phase_step)
    metrics = task.evaluate(state.net, mode)
    _emit({"checkpoint": args.checkpoint, "mode": mode.label, "phase": ck.phase.name,
           **{k: float(v) for k, v in metrics.items()}})
    return EXIT_OK


def cmd_bench(args) -> int:
    shape = tuple(int(s) for s in args.shape.split("x"))
    _emit(bench.compression_report(shape, args.alpha))
    _emit(bench.speedup_report(args.channels, args.size, repeats=args.repeats))
    return EXIT_OK


def _histogram_rows(net: models.Network, bins: int):
    binary = set(net.binary_param_keys())
    for key, w in net.parameters().items():
        if key in binary:
            lo, hi = -1.0, 1.0
        else:
            lo, hi = float(w.min()), float(w.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
        counts, edges = weight_histogram(w, bins, (lo, hi))
        yield key, key in binary, counts, edges


def cmd_inspect(args) -> int:
    ck = train.load_checkpoint(args.checkpoint)
    cfg = load_config(ck.config_text)
    state = train.restore_state(ck, cfg)
    graph = ck.graph
    print(f"checkpoint: {args.checkpoint}")
    print(f"epoch {ck.epoch}  step {ck.step}  phase {ck.phase.name}  seed {ck.seed}")
    print(f"nodes {len(graph.nodes)}  stacks {graph.stack_count}  parameters {graph.param_count}")
    n_bin = sum(n.binarize for n in graph.nodes)
    print(f"binarized layers {n_bin}  optimizer {ck.optimizer_kind} (t={ck.optimizer_t})")
    total = 0
    for key, is_bin, counts, edges in _histogram_rows(state.net, args.bins):
        total += int(counts.sum())
        peak = max(int(counts.max()), 1)
        print(f"\n{key}  [{'binary' if is_bin else 'real'}]  n={int(counts.sum())}  "
              f"range [{edges[0]:.4g}, {edges[-1]:.4g}]")
        if args.bars:
            for c, lo in zip(counts, edges[:-1]):
                print(f"  {lo:+9.4f} {int(c):7d} {'#' * round(40 * c / peak)}")
        else:
            print("  counts " + " ".join(str(int(c)) for c in counts))
    print(f"\nhistogram total {total}")
    if args.graph:
        print("\n" + graph.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnet", description="Binarized network training and inference.",
                                epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--task", choices=("pose", "classify"))
        sp.add_argument("--preset", choices=("desk", "tiny"))
        sp.add_argument("--init", choices=("reverse", "standard", "real"))
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", help="output directory (io.out)")

    kw = dict(epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sp = sub.add_parser("train", help="train a network and write a checkpoint", **kw)
    run_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("distill", help="train a student against a teacher checkpoint", **kw)
    run_args(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the validation split", **kw)
    sp.add_argument("checkpoint")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="storage ratio and XNOR vs naive convolution timing")
    sp.add_argument("--shape", default="256x256x3x3", help="weight shape for the storage ratio")
    sp.add_argument("--alpha", default="per_tensor", choices=("per_tensor", "per_filter"))
    sp.add_argument("--channels", type=int, default=64)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("inspect", help="summarize a checkpoint with weight histograms")
    sp.add_argument("checkpoint")
    sp.add_argument("--bins", type=int, default=20)
    sp.add_argument("--bars", action="store_true", help="draw histograms as text bars")
    sp.add_argument("--graph", action="store_true", help="also print the graph text")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, train.CheckpointError, data.IdxFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (train.NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
