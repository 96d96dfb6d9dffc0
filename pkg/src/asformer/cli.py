"""Command-line entry point: train, predict, eval, bench-attn, dump-attn, gen-synth."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, data, metrics
from .model import ASFormer, CheckpointError, ModelConfig
from .tensor import ConfigError
from .training import DataError, fit, write_log

log = logging.getLogger("asformer")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DIM, EXIT_DATA = 0, 1, 2, 3, 4

MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
PATH_FIELDS = ("manifest", "class_map", "checkpoint", "out")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def load_run_config(args: argparse.Namespace) -> dict:
    """Merge built-in defaults < JSON config < command-line flags."""
    cfg: dict = {"seed": 0}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_USAGE, f"config not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_USAGE, f"{path}: invalid JSON ({exc})") from exc
        unknown = set(loaded) - MODEL_FIELDS - set(PATH_FIELDS) - {"seed"}
        if unknown:
            raise CliError(EXIT_USAGE, f"{path}: unknown fields {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if value is not None and (key in MODEL_FIELDS or key in PATH_FIELDS or key == "seed"):
            cfg[key] = value
    return cfg


def _require_file(cfg: dict, key: str, label: str) -> Path:
    value = cfg.get(key)
    if not value:
        raise CliError(EXIT_USAGE, f"missing {_flag(key)}")
    path = Path(value)
    if not path.is_file():
        raise CliError(EXIT_USAGE, f"{label} not found: {path}")
    return path


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(cfg: dict, **inferred) -> ModelConfig:
    fields = {k: v for k, v in cfg.items() if k in MODEL_FIELDS}
    for key, value in inferred.items():
        fields.setdefault(key, value)
    try:
        return ModelConfig(**fields)
    except (ConfigError, TypeError) as exc:
        raise CliError(EXIT_USAGE, f"invalid model config: {exc}") from exc


def _load_checkpoint(path: Path) -> ASFormer:
    try:
        return ASFormer.load(path)
    except (CheckpointError, ConfigError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"cannot load checkpoint: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    manifest = _require_file(cfg, "manifest", "manifest")
    cmap = data.ClassMap.load(_require_file(cfg, "class_map", "class map"))
    dataset = data.load_dataset(manifest, cmap)
    if not dataset:
        raise CliError(EXIT_DATA, f"{manifest}: no sequences")
    dims = {f.shape[1] for _, f, _ in dataset}
    if len(dims) != 1:
        raise CliError(EXIT_DIM, f"sequences have differing feature dims {sorted(dims)}")
    config = _model_config(cfg, feature_dim=dims.pop(), num_classes=len(cmap))
    if config.num_classes != len(cmap):
        raise CliError(EXIT_DIM, f"num_classes {config.num_classes} != class map size {len(cmap)}")
    if config.feature_dim != dataset[0][1].shape[1]:
        raise CliError(
            EXIT_DIM, f"feature_dim {config.feature_dim} != data feature dim {dataset[0][1].shape[1]}"
        )
    out = _out_dir(cfg)
    resolved = {**config.to_dict(), "seed": cfg["seed"], "manifest": str(manifest),
                "class_map": str(cfg["class_map"])}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    pairs = [(f, l) for _, f, l in dataset]
    model, history = fit(pairs, config, np.random.default_rng(cfg["seed"]))
    ckpt = Path(cfg.get("checkpoint") or out / "model.asfm")
    model.save(ckpt)
    write_log(out / "train_log.csv", history)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: loss {last.total_loss:.4f}, train acc {last.train_acc:.2f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _feature_inputs(args, cfg) -> list[Path]:
    if args.features:
        paths = [Path(p) for p in args.features]
    elif cfg.get("manifest"):
        paths = [Path(e["features"]) for e in data.load_manifest(_require_file(cfg, "manifest", "manifest"))]
    else:
        raise CliError(EXIT_USAGE, "give --features or --manifest")
    for p in paths:
        if not p.is_file():
            raise CliError(EXIT_USAGE, f"features not found: {p}")
    return paths


def cmd_predict(args) -> int:
    cfg = load_run_config(args)
    model = _load_checkpoint(_require_file(cfg, "checkpoint", "checkpoint"))
    cmap = data.ClassMap.load(_require_file(cfg, "class_map", "class map"))
    if len(cmap) != model.config.num_classes:
        raise CliError(EXIT_DIM, f"class map has {len(cmap)} classes, checkpoint {model.config.num_classes}")
    out = _out_dir(cfg)
    for path in _feature_inputs(args, cfg):
        feats = data.load_features(path)
        if feats.shape[1] != model.config.feature_dim:
            raise CliError(
                EXIT_DIM,
                f"{path}: features are {feats.shape[1]}-d, checkpoint expects {model.config.feature_dim}-d",
            )
        stages = model.predict(feats.astype(np.float64), all_stages=True)
        data.write_labels(out / f"{path.stem}.txt", stages[-1], cmap)
        if args.all_stages:
            names = ["encoder"] + [f"decoder{k}" for k in range(1, len(stages))]
            for i, (name, labels) in enumerate(zip(names, stages)):
                data.write_labels(out / f"{path.stem}.stage{i}_{name}.txt", labels, cmap)
        print(f"{path.stem}: {len(stages[-1])} frames")
    return EXIT_OK


def _label_pairs(pred: Path, gt: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise CliError(EXIT_USAGE, "--pred and --gt must both be files or both directories")
    if not pred.is_dir():
        return [(gt.stem, pred, gt)]
    pairs = []
    for g in sorted(gt.glob("*.txt")):
        p = pred / g.name
        if not p.is_file():
            raise CliError(EXIT_DATA, f"no prediction for {g.name} in {pred}")
        pairs.append((g.stem, p, g))
    if not pairs:
        raise CliError(EXIT_DATA, f"no label files in {gt}")
    return pairs


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    cmap = data.ClassMap.load(_require_file(cfg, "class_map", "class map"))
    for p in (args.pred, args.gt):
        if not Path(p).exists():
            raise CliError(EXIT_USAGE, f"labels not found: {p}")
    rows = []
    for video, p, g in _label_pairs(Path(args.pred), Path(args.gt)):
        pred = data.load_labels(p, cmap)
        gt = data.load_labels(g, cmap)
        if len(pred) != len(gt):
            raise CliError(EXIT_DATA, f"{video}: prediction has {len(pred)} frames, ground truth {len(gt)}")
        rows.append((video, metrics.evaluate(pred, gt)))
    overall = metrics.aggregate([r for _, r in rows])
    print(overall.text(f"{len(rows)} video(s)"))
    out = _out_dir(cfg)
    metrics.write_report_csv(out / "eval.csv", rows + [("overall", overall)])
    return EXIT_OK


def cmd_bench_attn(args) -> int:
    if args.length < 2 or args.blocks < 1:
        raise CliError(EXIT_USAGE, f"need --length >= 2 and --blocks >= 1, got {args.length}, {args.blocks}")
    cfg = load_run_config(args)
    report = bench.measure_attention(args.length, args.blocks, seed=cfg["seed"])
    print(report.text())
    report.write_csv(_out_dir(cfg) / "bench_attn.csv")
    return EXIT_OK if report.consistent else EXIT_INTERNAL


def cmd_dump_attn(args) -> int:
    cfg = load_run_config(args)
    model = _load_checkpoint(_require_file(cfg, "checkpoint", "checkpoint"))
    path = Path(args.features)
    if not path.is_file():
        raise CliError(EXIT_USAGE, f"features not found: {path}")
    feats = data.load_features(path).astype(np.float64)
    if feats.shape[1] != model.config.feature_dim:
        raise CliError(EXIT_DIM, f"features are {feats.shape[1]}-d, checkpoint expects {model.config.feature_dim}-d")
    if not 0 <= args.frame < feats.shape[0]:
        raise CliError(EXIT_USAGE, f"anchor frame {args.frame} outside [0, {feats.shape[0]})")
    rows = bench.anchor_rows(model, feats, args.frame)
    for p in bench.write_anchor_rows(_out_dir(cfg), rows):
        print(p)
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    cfg = load_run_config(args)
    spec = data.SyntheticSpec(
        num_classes=args.classes, feature_dim=args.dim, min_len=args.min_seg, max_len=args.max_seg,
        seed=cfg["seed"],
    )
    spec.noise_sigma = args.noise if args.noise is not None else data.calibrate_noise(spec, args.bayes_acc)
    out = _out_dir(cfg)
    train = data.generate_synthetic(spec, args.num_sequences, (args.min_length, args.max_length))
    manifest, cmap = data.write_synthetic(out, train, spec.num_classes)
    print(f"noise_sigma {spec.noise_sigma:.4f}")
    print(f"manifest: {manifest}\nclass map: {cmap}")
    if args.held_out:
        test = data.generate_synthetic(spec, args.held_out, (args.min_length, args.max_length), stream=1)
        test_manifest, _ = data.write_synthetic(out / "test", test, spec.num_classes, prefix="test")
        print(f"held-out manifest: {test_manifest}")
    return EXIT_OK


def cmd_convert(args) -> int:
    values = data.features_from_text(args.src, args.dst)
    print(f"{args.dst}: {values.shape[0]}x{values.shape[1]}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument("--num-blocks", dest="num_blocks", type=int)
    g.add_argument("--num-decoders", dest="num_decoders", type=int)
    g.add_argument("--model-dim", dest="model_dim", type=int)
    g.add_argument("--feature-dim", dest="feature_dim", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--input-dropout", dest="input_dropout", type=float)
    g.add_argument("--alpha-decay", dest="alpha_decay", type=float)
    g.add_argument("--smooth-weight", dest="smooth_weight", type=float)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    g.add_argument("--epochs", type=int)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands must not reset flags given before the subcommand name
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="JSON run config")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asformer", description=__doc__, parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest")
    p.add_argument("--class-map", dest="class_map")
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/model.asfm)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="per-frame labels from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--class-map", dest="class_map")
    p.add_argument("--features", nargs="+")
    p.add_argument("--manifest")
    p.add_argument("--all-stages", action="store_true", help="also write one file per stage")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="accuracy, edit and F1@{10,25,50}")
    p.add_argument("--pred", required=True, help="label file or directory")
    p.add_argument("--gt", required=True, help="label file or directory")
    p.add_argument("--class-map", dest="class_map")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-attn", parents=[common], help="count materialized attention scores")
    p.add_argument("--length", "-T", type=int, default=5000)
    p.add_argument("--blocks", "-J", type=int, default=9)
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("dump-attn", parents=[common], help="export an anchor frame's attention rows")
    p.add_argument("--checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--num-sequences", type=int, default=6)
    p.add_argument("--held-out", type=int, default=0)
    p.add_argument("--min-length", type=int, default=300)
    p.add_argument("--max-length", type=int, default=600)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--min-seg", type=int, default=20)
    p.add_argument("--max-seg", type=int, default=80)
    p.add_argument("--noise", type=float, help="noise sigma (default: calibrated)")
    p.add_argument("--bayes-acc", type=float, default=0.9, help="frame accuracy target for calibration")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("convert-features", parents=[common], help="text rows -> feature file")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (data.FormatError, data.LabelError, DataError, metrics.MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
