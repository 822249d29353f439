"""Command-line entry point.

    mtbit dataset gen|validate|stats   synthetic data and dataset checks
    mtbit train                         fit a model, write checkpoints and a metric log
    mtbit eval                          metrics of a checkpoint on one split
    mtbit predict                       2D/3D change maps for one tile or image pair
    mtbit gradcheck                     finite-difference check of the gradients
    mtbit export-attn                   tokenizer attention maps as rasters

Every run writes the fully resolved configuration to
``<out>/effective_config.json``.  Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import data_core as dc
from .augment import AugSpec, resize
from .model import ModelConfig, forward, paper_config, tiny_config

log = logging.getLogger("mtbit")

CONFIG_NAME = "effective_config.json"
PRESETS = ("paper", "tiny", "desk")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config


def _model_preset(name: str) -> ModelConfig:
    return paper_config() if name == "paper" else tiny_config()


def _train_preset(name: str):
    from .training import TrainConfig

    return TrainConfig.desk() if name == "desk" else TrainConfig()


def _aug_preset(name: str, size: int) -> AugSpec:
    return AugSpec.disabled(size) if name == "desk" else AugSpec(target_size=size)


def _merge(obj, overrides: dict, where: str):
    if not overrides:
        return obj
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    vals = dict(overrides)
    for k, v in vals.items():
        if isinstance(v, list):
            vals[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    if where == "model" and isinstance(vals.get("backbone"), dict):
        bb = vals["backbone"]
        extra = sorted(set(bb) - {f.name for f in dataclasses.fields(obj.backbone)})
        if extra:
            raise UsageError(f"unknown key(s) in model.backbone: {', '.join(extra)}")
        vals["backbone"] = dataclasses.replace(obj.backbone, **{k: tuple(map(tuple, v)) if k == "stages" else v
                                                                for k, v in bb.items()})
    try:
        return dataclasses.replace(obj, **vals)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {where} config: {e}") from None


@dataclasses.dataclass
class RunConfig:
    preset: str
    model: ModelConfig
    train: object
    augment: AugSpec
    data: str | None
    out: str | None

    def to_json(self) -> str:
        d = {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "augment": dataclasses.asdict(self.augment),
            "data": self.data,
            "out": self.out,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


RUN_KEYS = {"preset", "model", "train", "augment", "data", "out"}


def resolve_config(args) -> RunConfig:
    """File values first, then command-line flags on top."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - RUN_KEYS)
        if unknown:
            raise UsageError(f"unknown key(s) in config: {', '.join(unknown)}")
    preset = getattr(args, "preset", None) or file_cfg.get("preset", "tiny")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    model = _merge(_model_preset(preset), file_cfg.get("model"), "model")
    train = _merge(_train_preset(preset), file_cfg.get("train"), "train")
    aug = _merge(_aug_preset(preset, model.input_size), file_cfg.get("augment"), "augment")

    flags = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("max_steps", "max_steps"),
                      ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag, None) is not None:
            flags[key] = getattr(args, flag)
    if args.seed is not None:
        flags["seed"] = args.seed
    train = _merge(train, flags, "train")
    if args.seed is not None:
        aug = dataclasses.replace(aug, seed=args.seed)
    if aug.target_size != model.input_size:
        aug = dataclasses.replace(aug, target_size=model.input_size)
    data = getattr(args, "data", None) or file_cfg.get("data")
    out = args.out or file_cfg.get("out")
    return RunConfig(preset, model, train, aug, data, out)


def echo_config(rc: RunConfig, out_dir: str | None, extra: dict | None = None) -> str:
    """Write the resolved config; runs without --out echo into the
    working directory."""
    out_dir = out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_NAME)
    text = rc.to_json()
    if extra:
        d = json.loads(text)
        d["command"] = extra
        text = json.dumps(d, indent=2, sort_keys=True) + "\n"
    with open(path, "w") as f:
        f.write(text)
    return path


# ---------------------------------------------------------------- commands


def _need(value, flag):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def cmd_dataset_gen(args, rc: RunConfig) -> int:
    out = _need(rc.out, "--out")
    spec = dc.SynthSpec(
        seed=args.seed if args.seed is not None else 0,
        n_tiles=args.tiles,
        split_fractions=tuple(args.splits),
    )
    m = dc.generate_synthetic(spec, out)
    echo_config(rc, out, {"name": "dataset gen", "synth": dataclasses.asdict(spec)})
    print(f"wrote {args.tiles} tiles to {out} (train {len(m.train)}, val {len(m.val)}, test {len(m.test)}; "
          f"h_scale {m.h_scale:g} m)")
    return 0


def cmd_dataset_validate(args, rc: RunConfig) -> int:
    m = dc.DatasetManifest.load(_need(rc.data, "--data"))
    bad = 0
    for split in ("train", "val", "test"):
        for tid in m.split(split):
            v, warn = dc.validate_tile_report(dc.read_tile(m, tid), strict=not args.lenient)
            for msg in v + warn:
                print(f"{tid}: {msg}")
            bad += bool(v)
    n = len(m.train) + len(m.val) + len(m.test)
    print(f"{n - bad}/{n} tiles valid")
    echo_config(rc, rc.out, {"name": "dataset validate"})
    return 1 if bad else 0


def cmd_dataset_stats(args, rc: RunConfig) -> int:
    m = dc.DatasetManifest.load(_need(rc.data, "--data"))
    stats = dc.split_stats(m)
    for name, s in stats.items():
        print(f"{name:5s} tiles {s.n_tiles:4d}  change {s.change_pct:6.3f}%  no change {s.nochange_pct:7.3f}%")
    if rc.out:
        os.makedirs(rc.out, exist_ok=True)
        with open(os.path.join(rc.out, "dh_histogram.csv"), "w") as f:
            f.write("bin_left,bin_right," + ",".join(stats) + "\n")
            edges = stats["train"].edges
            for k in range(len(edges) - 1):
                f.write(f"{edges[k]},{edges[k + 1]}," + ",".join(str(int(s.dh_counts[k])) for s in stats.values())
                        + "\n")
    echo_config(rc, rc.out, {"name": "dataset stats"})
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    from .training import load_checkpoint, train_loop

    m = dc.DatasetManifest.load(_need(rc.data, "--data"))
    out = _need(rc.out, "--out")
    echo_config(rc, out, {"name": "train"})
    resume = load_checkpoint(args.resume) if args.resume else None
    cfg = resume.model_cfg if resume else rc.model

    def progress(event, ck, info):
        if event == "epoch":
            log.info("epoch %d  total %.5f", info["epoch"], info["total"])

    ck, rows = train_loop(m, cfg, rc.train, rc.augment, callbacks=[progress], out_dir=out, resume=resume)
    last = rows[-1] if rows else {}
    print(f"trained {ck.step} steps; final epoch loss {last.get('total', float('nan')):.5f}; "
          f"checkpoint {os.path.join(out, 'final.mtck')}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    from .metrics import evaluate_split
    from .training import load_checkpoint

    ck = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    m = dc.DatasetManifest.load(_need(rc.data, "--data"))
    _check_h_scale(ck, m.h_scale)
    out = rc.out
    hist = None
    if out:
        os.makedirs(out, exist_ok=True)
        hist = os.path.join(out, "histogram.csv")
    rep = evaluate_split(ck, m, args.split, histogram_path=hist)
    if out:
        with open(os.path.join(out, "report.json"), "w") as f:
            f.write(rep.to_json())
    rc.model = ck.model_cfg
    echo_config(rc, out, {"name": "eval", "split": args.split, "checkpoint": args.checkpoint})
    print(f"{args.split}: {rep.summary()}")
    return 0


def _check_h_scale(ck, h_scale):
    trained = ck.extra.get("h_scale")
    if trained is not None and trained != h_scale:
        log.warning("dataset h_scale %g differs from the training h_scale %g", h_scale, trained)


def _load_pair(args, cfg: ModelConfig):
    """Images (and ground truth when available) for predict/export-attn."""
    gt = None
    if args.tile:
        d = args.tile
        img1 = dc.read_image(os.path.join(d, "t1.img"))
        img2 = dc.read_image(os.path.join(d, "t2.img"))
        if os.path.exists(os.path.join(d, "mask2d.msk")) and os.path.exists(os.path.join(d, "delta3d.r32")):
            gt = (dc.read_raster(os.path.join(d, "mask2d.msk")), dc.read_raster(os.path.join(d, "delta3d.r32")))
    elif args.t1 and args.t2:
        img1, img2 = dc.read_image(args.t1), dc.read_image(args.t2)
    else:
        raise UsageError("give --tile DIR or both --t1 and --t2")
    if img1.shape != img2.shape:
        raise ValueError(f"epoch images differ in shape: {img1.shape} vs {img2.shape}")
    if img1.shape[0] != cfg.bands:
        raise ValueError(f"images have {img1.shape[0]} bands, checkpoint model expects {cfg.bands}")
    x1 = resize(img1, cfg.input_size)
    x2 = resize(img2, cfg.input_size)
    return x1, x2, gt


def cmd_predict(args, rc: RunConfig) -> int:
    from .metrics import binarize, report
    from .model import export_attention_maps
    from .training import load_checkpoint

    ck = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    cfg = ck.model_cfg
    out = _need(rc.out, "--out")
    h_scale = args.h_scale or ck.extra.get("h_scale", dc.DEFAULT_H_SCALE)
    x1, x2, gt = _load_pair(args, cfg)
    pred, tr = forward(x1, x2, ck.params, trace=True)
    mask = binarize(pred.m2d)[0]
    dh = dc.denormalize_delta(pred.m3d[0], h_scale).astype(np.float32)
    os.makedirs(out, exist_ok=True)
    dc.write_raster(mask, os.path.join(out, "m2d.msk"))
    dc.write_raster(dh, os.path.join(out, "m3d.r32"))
    written = ["m2d.msk", "m3d.r32"]
    if args.trace:
        files = export_attention_maps(tr, os.path.join(out, "attention"))
        written += [os.path.relpath(f, out) for f in files]
    if gt is not None:
        gm = resize(gt[0], cfg.input_size, "nearest")
        g3 = resize(gt[1], cfg.input_size, "nearest").astype(np.float64)
        rep = report([(os.path.basename(os.path.normpath(args.tile)), mask, gm, dh.astype(np.float64), g3)])
        with open(os.path.join(out, "report.json"), "w") as f:
            f.write(rep.to_json())
        written.append("report.json")
        print(rep.summary())
    rc.model = cfg
    echo_config(rc, out, {"name": "predict", "checkpoint": args.checkpoint, "h_scale": h_scale})
    print("wrote " + ", ".join(written))
    return 0


def cmd_gradcheck(args, rc: RunConfig) -> int:
    from .gradcheck import run_gradcheck

    seed = args.seed if args.seed is not None else 0
    res = run_gradcheck(seed, tiny_config(), h=args.h, order=args.order)
    echo_config(rc, rc.out, {"name": "gradcheck", "h": args.h, "order": args.order})
    ok = res.max_rel_err < args.tol
    print(f"max relative error {res.max_rel_err:.3e} over {res.n_params} parameters (worst: {res.worst_name}) "
          f"{'PASS' if ok else 'FAIL'} (< {args.tol:g})")
    return 0 if ok else 1


def cmd_export_attn(args, rc: RunConfig) -> int:
    from .model import export_attention_maps
    from .training import load_checkpoint

    ck = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    out = _need(rc.out, "--out")
    x1, x2, _ = _load_pair(args, ck.model_cfg)
    _, tr = forward(x1, x2, ck.params, trace=True)
    files = export_attention_maps(tr, out)
    rc.model = ck.model_cfg
    echo_config(rc, out, {"name": "export-attn", "checkpoint": args.checkpoint})
    print(f"wrote {len(files)} attention rasters to {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="run seed (data generation, init, shuffling, augmentation)")
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mtbit", description="Bitemporal 2D/3D change detection.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    ds = sub.add_parser("dataset", help="generate, validate or summarise a dataset")
    dsub = ds.add_subparsers(dest="action", metavar="action")
    dsub.required = True
    g = dsub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    g.add_argument("--tiles", type=int, default=8)
    g.add_argument("--splits", type=float, nargs=3, default=(0.68, 0.09, 0.23), metavar=("TRAIN", "VAL", "TEST"))
    g.set_defaults(func=cmd_dataset_gen)
    v = dsub.add_parser("validate", parents=[common], help="check every tile against the schema")
    v.add_argument("--data", help="dataset root")
    v.add_argument("--lenient", action="store_true", help="mask/dH consistency is a warning, not a violation")
    v.set_defaults(func=cmd_dataset_validate)
    s = dsub.add_parser("stats", parents=[common], help="change percentages and dH histogram per split")
    s.add_argument("--data", help="dataset root")
    s.set_defaults(func=cmd_dataset_stats)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset root")
    t.add_argument("--preset", choices=PRESETS, help="base configuration (default: tiny)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset root")
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.set_defaults(func=cmd_eval)

    for name, func, hlp in (
        ("predict", cmd_predict, "change maps for one tile or image pair"),
        ("export-attn", cmd_export_attn, "write tokenizer attention maps"),
    ):
        q = sub.add_parser(name, parents=[common], help=hlp)
        q.add_argument("--checkpoint")
        q.add_argument("--tile", help="tile directory (t1.img, t2.img, optional ground truth)")
        q.add_argument("--t1", help="epoch-1 .img file")
        q.add_argument("--t2", help="epoch-2 .img file")
        if name == "predict":
            q.add_argument("--trace", action="store_true", help="also write attention rasters")
            q.add_argument("--h-scale", type=float, help="metres per unit of the 3D output")
        q.set_defaults(func=func)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check on the tiny config")
    gc.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    gc.add_argument("--order", type=int, choices=(2, 4), default=4, help="central stencil order")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = resolve_config(args)
        return args.func(args, rc)
    except UsageError as e:
        print(f"mtbit: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"mtbit: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
