"""Command-line entry points.

Subcommands: train, ablate, eval, visualize, verify, gen-data. Every
run is driven by a layered configuration: built-in defaults, then an
optional JSON config file, then flags (including generic
``--set dotted.key=value`` overrides), with flags winning. The final
value and origin of every key is tracked and printed, so a run's exact
configuration is always reconstructible.

Exit codes: 0 success, 1 verification failure, 2 usage or config
error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from .attention import attended_channel_map, sub_attention_map
from .data import (SceneConfig, dump_dataset, generate_dataset, generate_sample,
                   quantize_to_byte, read_pgm, read_ppm, write_pgm)
from .errors import ConfigError, ContractError, DimensionError, DivergenceError
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .train import (TrainConfig, demo_ablation_configs, demo_scene,
                    demo_train_config, evaluate, make_datasets, run_ablation,
                    train, write_ablation_csv)
from .verify import format_report, run_properties

OUT_DIR_ENV = "DUALSEG_OUT_DIR"

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

VARIANT_NAMES = {
    "baseline": "baseline_fcn",
    "pam": "pam_only",
    "cam": "cam_only",
    "dual": "dual",
    "baseline_fcn": "baseline_fcn",
    "pam_only": "pam_only",
    "cam_only": "cam_only",
}

PRECISIONS = {"f32": np.float32, "f64": np.float64}


# -- layered configuration -------------------------------------------------------


@dataclass
class ConfigValue:
    value: object
    source: str  # "default" | "file" | "flag"


class RunConfig:
    """Flat dotted-key store with per-key provenance; flags override files
    override defaults."""

    def __init__(self, defaults: dict):
        self._values = {}
        for key, value in _flatten(defaults):
            self._values[key] = ConfigValue(copy.deepcopy(value), "default")

    def apply_file(self, path):
        try:
            with open(path) as fh:
                tree = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        for key, value in _flatten(tree):
            self._assign(key, value, "file")

    def apply_flag(self, key: str, value):
        self._assign(key, value, "flag")

    def _assign(self, key, value, source):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r} (known: "
                              f"{', '.join(sorted(self._values))})")
        current = self._values[key].value
        self._values[key] = ConfigValue(_coerce(key, value, current), source)

    def get(self, key):
        return self._values[key].value

    def source(self, key) -> str:
        return self._values[key].source

    def keys(self):
        return sorted(self._values)

    def describe(self) -> str:
        width = max(len(k) for k in self._values) if self._values else 0
        return "\n".join(f"  {k:<{width}} = {self._values[k].value!r}"
                         f"  [{self._values[k].source}]" for k in self.keys())


def _flatten(tree: dict, prefix: str = ""):
    for key, value in tree.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, f"{full}.")
        else:
            yield full, value


def _coerce(key, value, template):
    """Shape ``value`` like the default it replaces; reject mismatched kinds."""
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, (int, float)) and float(value) == int(value):
            return int(value)
        raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
    if isinstance(template, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"key {key!r} expects a number, got {value!r}")
    if isinstance(template, (tuple, list)):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"key {key!r} expects a list, got {value!r}")
        inner = template[0] if len(template) else 0
        return tuple(_coerce(key, v, inner) for v in value)
    if template is None or isinstance(template, str):
        if value is None or isinstance(value, str):
            return value
        raise ConfigError(f"key {key!r} expects a string, got {value!r}")
    raise ConfigError(f"key {key!r} has unsupported default type {type(template)}")


def _parse_set_flag(spec: str):
    if "=" not in spec:
        raise ConfigError(f"--set expects dotted.key=value, got {spec!r}")
    key, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _default_out_dir(command: str) -> str:
    root = os.environ.get(OUT_DIR_ENV, "runs")
    return os.path.join(root, command)


# -- config trees ----------------------------------------------------------------


def _scene_defaults(scene: SceneConfig) -> dict:
    return {"image_size": list(scene.image_size),
            "num_classes": scene.num_classes,
            "num_shapes": list(scene.num_shapes),
            "marker_rule": scene.marker_rule,
            "noise_std": scene.noise_std,
            "ambiguous_extent": list(scene.ambiguous_extent)}


def _train_defaults(tc: TrainConfig) -> dict:
    return {"base_lr": tc.base_lr, "poly_power": tc.poly_power,
            "momentum": tc.momentum, "weight_decay": tc.weight_decay,
            "epochs": tc.epochs, "batch_size": tc.batch_size,
            "aux_weight": tc.aux_weight, "seeds": list(tc.seeds),
            "train_samples": tc.train_samples, "val_samples": tc.val_samples,
            "crop": list(tc.crop), "flip_prob": tc.flip_prob,
            "scale_choices": list(tc.scale_choices)}


def _model_defaults(mc: ModelConfig) -> dict:
    return {"variant": mc.variant,
            "backbone_channels": list(mc.backbone_channels),
            "module_channels": mc.module_channels,
            "reduction_ratio": mc.reduction_ratio,
            "multi_grid": list(mc.multi_grid) if mc.multi_grid else None}


def _scene_from(cfg: RunConfig) -> SceneConfig:
    scene = SceneConfig(image_size=tuple(cfg.get("scene.image_size")),
                        num_classes=cfg.get("scene.num_classes"),
                        num_shapes=tuple(cfg.get("scene.num_shapes")),
                        marker_rule=cfg.get("scene.marker_rule"),
                        noise_std=cfg.get("scene.noise_std"),
                        ambiguous_extent=tuple(cfg.get("scene.ambiguous_extent")))
    scene.validate()
    return scene


def _model_from(cfg: RunConfig) -> ModelConfig:
    raw = cfg.get("model.variant")
    if raw not in VARIANT_NAMES:
        raise ConfigError(f"unknown variant {raw!r}; choose from "
                          f"{sorted(set(VARIANT_NAMES))}")
    mg = cfg.get("model.multi_grid")
    mc = ModelConfig(num_classes=cfg.get("scene.num_classes"),
                     backbone_channels=tuple(cfg.get("model.backbone_channels")),
                     module_channels=cfg.get("model.module_channels"),
                     reduction_ratio=cfg.get("model.reduction_ratio"),
                     multi_grid=tuple(mg) if mg else None,
                     variant=VARIANT_NAMES[raw])
    mc.validate()
    return mc


def _train_from(cfg: RunConfig) -> TrainConfig:
    tc = TrainConfig(base_lr=cfg.get("train.base_lr"),
                     poly_power=cfg.get("train.poly_power"),
                     momentum=cfg.get("train.momentum"),
                     weight_decay=cfg.get("train.weight_decay"),
                     epochs=cfg.get("train.epochs"),
                     batch_size=cfg.get("train.batch_size"),
                     aux_weight=cfg.get("train.aux_weight"),
                     seeds=tuple(cfg.get("train.seeds")),
                     train_samples=cfg.get("train.train_samples"),
                     val_samples=cfg.get("train.val_samples"),
                     crop=tuple(cfg.get("train.crop")),
                     flip_prob=cfg.get("train.flip_prob"),
                     scale_choices=tuple(cfg.get("train.scale_choices")))
    tc.validate()
    return tc


def _build_run_config(args, command: str) -> RunConfig:
    defaults = {"seed": 0,
                "precision": "f32",
                "out_dir": _default_out_dir(command),
                "scene": _scene_defaults(demo_scene()),
                "model": _model_defaults(ModelConfig(
                    variant="dual", backbone_channels=(16, 24, 32, 48),
                    module_channels=32, reduction_ratio=4)),
                "train": _train_defaults(demo_train_config()),
                "eval": {"scales": [1.0]}}
    cfg = RunConfig(defaults)
    if getattr(args, "config", None):
        cfg.apply_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.apply_flag("seed", args.seed)
    if getattr(args, "precision", None):
        cfg.apply_flag("precision", args.precision)
    if getattr(args, "out_dir", None):
        cfg.apply_flag("out_dir", args.out_dir)
    if getattr(args, "variant", None):
        cfg.apply_flag("model.variant", args.variant)
    if getattr(args, "scales", None):
        cfg.apply_flag("eval.scales", [float(s) for s in args.scales.split(",")])
    for spec in getattr(args, "set", None) or []:
        key, value = _parse_set_flag(spec)
        cfg.apply_flag(key, value)
    return cfg


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _build_run_config(args, "train")
    scene = _scene_from(cfg)
    model_cfg = _model_from(cfg)
    train_cfg = _train_from(cfg)
    out_dir = cfg.get("out_dir")
    seed = cfg.get("seed")
    dtype = PRECISIONS[cfg.get("precision")]
    print("configuration:")
    print(cfg.describe())
    train_set, val_set = make_datasets(scene, train_cfg)
    model = build_model(model_cfg, seed, dtype=dtype)
    model, history = train(model, train_set, val_set, train_cfg, seed, out_dir=out_dir)
    if not history.epochs:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model,
                        meta={"model": asdict(model_cfg), "epochs": 0,
                              "seed": seed})
    last = history.epochs[-1] if history.epochs else None
    if last is not None:
        print(f"final epoch {last['epoch']}: train_loss={last['train_loss']:.4f} "
              f"val_miou={last['val_miou']:.4f}")
    print(f"wrote {os.path.join(out_dir, 'checkpoint.bin')}")
    if history.epochs:
        print(f"wrote {os.path.join(out_dir, 'metrics.csv')}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _build_run_config(args, "ablate")
    scene = _scene_from(cfg)
    train_cfg = _train_from(cfg)
    out_dir = cfg.get("out_dir")
    os.makedirs(out_dir, exist_ok=True)
    print("configuration:")
    print(cfg.describe())
    variants = args.variants.split(",") if args.variants else [
        "baseline", "pam", "cam", "dual"]
    cfgs = []
    for name in variants:
        if name not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {name!r} in --variants")
        mc = _model_from(cfg)
        mc.variant = VARIANT_NAMES[name]
        cfgs.append((mc, train_cfg))
    path = os.path.join(out_dir, "ablation.csv")
    rows = run_ablation(cfgs, scene, out_path=path,
                        eval_scales=tuple(cfg.get("eval.scales")),
                        log=lambda m: print(m, flush=True))
    width = max(len(r["variant"]) for r in rows)
    for r in rows:
        per_seed = " ".join(f"{s:.4f}" for s in r["per_seed"])
        print(f"{r['variant']:<{width}}  mean={r['mean_miou']:.4f} "
              f"std={r['std_miou']:.4f}  seeds=[{per_seed}]")
    print(f"wrote {path}")
    return EXIT_OK


def _load_model(checkpoint_path, dtype):
    state, meta = load_checkpoint(checkpoint_path)
    desc = meta.get("model")
    if not desc:
        raise ConfigError(f"{checkpoint_path}: header lacks a model description")
    mg = desc.get("multi_grid")
    mc = ModelConfig(num_classes=desc["num_classes"],
                     backbone_channels=tuple(desc["backbone_channels"]),
                     module_channels=desc["module_channels"],
                     reduction_ratio=desc["reduction_ratio"],
                     multi_grid=tuple(mg) if mg else None,
                     variant=desc["variant"])
    model = build_model(mc, seed=0, dtype=dtype)
    model.load_state({k: v.astype(dtype) if v.dtype.kind == "f" else v
                      for k, v in state.items()})
    return model, mc


def cmd_eval(args) -> int:
    cfg = _build_run_config(args, "eval")
    scene = _scene_from(cfg)
    train_cfg = _train_from(cfg)
    dtype = PRECISIONS[cfg.get("precision")]
    model, mc = _load_model(args.checkpoint, dtype)
    _, val_set = make_datasets(scene, train_cfg)
    report = evaluate(model, val_set, mc.num_classes,
                      scales=tuple(cfg.get("eval.scales")))
    print(f"mean_iou={report.mean_iou:.6f} pixel_accuracy={report.pixel_accuracy:.6f}")
    for c, iou in enumerate(report.per_class_iou):
        marker = "" if report.present[c] else " (absent)"
        print(f"  class {c}: iou={iou:.6f}{marker}")
    out_dir = cfg.get("out_dir")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "eval.csv")
    _write_csv(path, ["class", "iou", "present"],
               [[c, float(report.per_class_iou[c]), int(report.present[c])]
                for c in range(mc.num_classes)])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _build_run_config(args, "visualize")
    dtype = PRECISIONS[cfg.get("precision")]
    model, mc = _load_model(args.checkpoint, dtype)
    if mc.variant not in ("dual", "pam_only", "cam_only"):
        raise ConfigError(f"variant {mc.variant!r} has no attention maps to export")

    labels = None
    if args.image:
        image = read_ppm(args.image)
        if args.labels:
            labels = read_pgm(args.labels)
    else:
        scene = _scene_from(cfg)
        sample = generate_sample(scene, cfg.get("seed"))
        image, labels = sample.image, sample.labels

    h, w = image.shape[1:]
    if h % 8 or w % 8:
        raise ConfigError(f"image extents {h}x{w} must be divisible by 8")
    x = Tensor(image[None].astype(dtype))
    out = model(x, training=False, capture_attention=True)
    s_map, x_map = out.attention_maps
    fh, fw = h // 8, w // 8
    out_dir = cfg.get("out_dir")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    pred = np.argmax(out.main_logits.data[0], axis=0).astype(np.int64)
    write_pgm(os.path.join(out_dir, "prediction.pgm"), pred)
    written.append("prediction.pgm")
    if labels is not None:
        write_pgm(os.path.join(out_dir, "ground_truth.pgm"), labels)
        written.append("ground_truth.pgm")

    if s_map is not None:
        row, col = _parse_point(args.point)
        sub = sub_attention_map(s_map, (row, col), fh, fw).data
        write_pgm(os.path.join(out_dir, "sub_attention.pgm"), quantize_to_byte(sub))
        _write_csv(os.path.join(out_dir, "sub_attention.csv"),
                   [f"c{j}" for j in range(fw)],
                   [[float(v) for v in r] for r in sub])
        _write_csv(os.path.join(out_dir, "attention_rows.csv"),
                   [f"p{j}" for j in range(fh * fw)],
                   [[float(v) for v in r] for r in s_map.matrix.data])
        written += ["sub_attention.pgm", "sub_attention.csv", "attention_rows.csv"]

    if x_map is not None:
        _write_csv(os.path.join(out_dir, "channel_attention.csv"),
                   [f"c{j}" for j in range(x_map.extent)],
                   [[float(v) for v in r] for r in x_map.matrix.data])
        written.append("channel_attention.csv")
        channels = [int(c) for c in args.channels.split(",")] if args.channels else []
        if channels:
            feats = model.backbone(x, training=False)
            e_cam, _ = model.cam(model.stem_c(feats, training=False))
            for c in channels:
                cmap = attended_channel_map(e_cam, c).data
                name = f"attended_channel_{c}.pgm"
                write_pgm(os.path.join(out_dir, name), quantize_to_byte(cmap))
                written.append(name)

    for name in written:
        print(f"wrote {os.path.join(out_dir, name)}")
    return EXIT_OK


def _parse_point(spec: str):
    try:
        row, col = (int(p) for p in spec.split(","))
    except ValueError:
        raise ConfigError(f"--point expects R,C integers, got {spec!r}")
    return row, col


def cmd_verify(args) -> int:
    results = run_properties(trials=args.trials, seed=args.seed or 0)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY_FAIL


def cmd_gen_data(args) -> int:
    cfg = _build_run_config(args, "gen-data")
    scene = _scene_from(cfg)
    out_dir = cfg.get("out_dir")
    samples = generate_dataset(scene, args.count, cfg.get("seed"))
    manifest = dump_dataset(out_dir, samples)
    print(f"wrote {args.count} samples to {out_dir} (manifest: {manifest})")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} "
                                       "or ./runs/<command>)")
    sub.add_argument("--seed", type=int, help="master seed")
    sub.add_argument("--precision", choices=sorted(PRECISIONS),
                     help="model/loss precision")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config key by dotted path (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualseg",
        description="Dual-attention segmentation: train, compare variants, "
                    "inspect attention maps.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train one model variant")
    _add_common(p)
    p.add_argument("--variant", choices=sorted(set(VARIANT_NAMES)),
                   help="model variant")
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("ablate", help="train all variants over seeds; compare mIoU")
    _add_common(p)
    p.add_argument("--variants", help="comma list, default baseline,pam,cam,dual")
    p.set_defaults(fn=cmd_ablate)

    p = subs.add_parser("eval", help="evaluate a checkpoint on fresh data")
    _add_common(p)
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("--scales", help="comma list of inference scales, e.g. 0.75,1.0")
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("visualize", help="export attention maps for one image")
    _add_common(p)
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("--image", help="input PPM; omit to generate a scene")
    p.add_argument("--labels", help="ground-truth PGM for --image")
    p.add_argument("--point", default="0,0",
                   help="feature-grid R,C whose attention row to export")
    p.add_argument("--channels", help="comma list of channel indices to export")
    p.set_defaults(fn=cmd_visualize)

    p = subs.add_parser("verify", help="run the invariant/gradient/oracle suite")
    p.add_argument("--trials", type=int, default=20, help="trials per property")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = subs.add_parser("gen-data", help="write a PPM/PGM dataset with manifest")
    _add_common(p)
    p.add_argument("--count", type=int, default=16, help="number of samples")
    p.set_defaults(fn=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ContractError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
