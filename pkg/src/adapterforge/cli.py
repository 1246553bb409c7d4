"""Command-line surface: dataset generation, training, ranking, fusion,
update packaging and evaluation.

Exit codes: 0 success, 2 usage error (bad flags/config), 1 runtime error.
A plain ``key = value`` config file (``--config``) supplies defaults for any
long flag; explicit flags win; unknown keys are rejected.  Every command
writing into an --out directory echoes its effective settings there as
``config.resolved``.  All randomness derives from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import classic, fusion, metrics, ranking, synth, training, update_pack
from .adapters import AdapterDesign, make_adapters
from .errors import ConfigError, PackError
from .synth import SceneSpec, load_scene_dir, make_splits, save_scene_dir
from .training import TrainConfig, layer_sweep, noise_sweep, train
from .unet import build_micro_unet, load_model, save_model


class UsageError(Exception):
    pass


_DESIGNS = {d.value: d for d in AdapterDesign}
_STRATEGY_ALIAS = {"adapters": "adapters_all"}


# --------------------------------------------------------------------------
# config file handling
# --------------------------------------------------------------------------


def parse_config_file(path) -> dict:
    cfg = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected 'key = value'")
            key, _, value = line.partition("=")
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _coerce(value: str, action):
    if action.type is int:
        return int(value)
    if action.type is float:
        return float(value)
    if isinstance(action, argparse._StoreTrueAction):
        return value.lower() in ("1", "true", "yes")
    return value


def write_resolved_config(args: argparse.Namespace, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    skip = {"func", "config", "subparser"}
    lines = []
    for key in sorted(vars(args)):
        if key in skip:
            continue
        lines.append(f"{key} = {getattr(args, key)}")
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# shared loaders
# --------------------------------------------------------------------------


def _load_splits(data_dir):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"dataset directory {data_dir!r} does not exist")
    return load_scene_dir(data_dir)


def _load_model_arg(args):
    if not args.model:
        raise UsageError("this command needs --model")
    return load_model(args.model)


def _load_pack_for(model, path):
    with open(path, "rb") as fh:
        data = fh.read()
    _model, adapters = update_pack.apply(model, data, fuse=False)
    return data, adapters


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr0=args.lr0, lr_floor=args.lr_floor, plateau_patience=args.patience,
        lr_decay=args.lr_decay, max_epochs=args.epochs, batch_size=args.batch_size,
        seed=args.seed, optimizer=args.optimizer, loss=args.loss,
        crop_prob=args.crop_prob, crop_size=(args.crop_size, args.crop_size),
        hflip_prob=args.hflip_prob,
    )


def _emit_eval(report, out_dir, meta=None):
    os.makedirs(out_dir, exist_ok=True)
    _dump_json(report.metrics_dict(), os.path.join(out_dir, "report.json"))
    _dump_json({"sec_per_image": report.sec_per_image},
               os.path.join(out_dir, "timing.json"))
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(report.csv_header() + "\n" + report.csv_row() + "\n")
    if meta:
        _dump_json(meta, os.path.join(out_dir, "meta.json"))


# --------------------------------------------------------------------------
# subcommand handlers
# --------------------------------------------------------------------------


def cmd_gen_data(args):
    template = SceneSpec(
        domain=args.domain, size=(args.size, args.size),
        rock_count_range=(args.rock_min, args.rock_max),
        sky_fraction=args.sky_fraction, seed=0,
        noise_std=args.noise_std, haze=args.haze,
    )
    splits = make_splits(args.n_train, args.n_val, args.n_test, template, args.seed)
    save_scene_dir(args.out, splits, template, args.seed)
    write_resolved_config(args, args.out)
    counts = {k: len(v) for k, v in splits.items()}
    print(f"generated {counts} {args.domain} scenes into {args.out}")
    return 0


def cmd_train(args):
    strategy = _STRATEGY_ALIAS.get(args.strategy, args.strategy)
    splits = _load_splits(args.data)
    cfg = _train_config(args)
    if strategy == "scratch":
        model = build_micro_unet(seed=args.seed)
    else:
        model = _load_model_arg(args)
    adapters = None
    if strategy == "adapters_all":
        adapters = make_adapters(model, _DESIGNS[args.adapters_design],
                                 domain_tag=args.domain_tag)
    result = train(model, adapters, strategy, splits["train"], splits["val"], cfg)

    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.munt")
    save_model(result.model, model_path)
    with open(os.path.join(args.out, "history.csv"), "w") as fh:
        fh.write(result.history_csv())
    _dump_json(result.history, os.path.join(args.out, "history.json"))
    meta = {
        "strategy": strategy,
        "seed": args.seed,
        "best_epoch": result.best_epoch,
        "model_file": "model.munt",
        "update_bytes": os.path.getsize(model_path),
    }
    if result.adapters is not None:
        data = update_pack.pack(result.adapters, result.model.layout_hash())
        with open(os.path.join(args.out, "adapters.adpt"), "wb") as fh:
            fh.write(data)
        meta["adapters_file"] = "adapters.adpt"
        meta["update_bytes"] = len(data)
    _dump_json(meta, os.path.join(args.out, "meta.json"))
    write_resolved_config(args, args.out)
    final_val = [r for r in result.history if r["split"] == "val"][-1]
    print(f"{strategy}: best epoch {result.best_epoch}, "
          f"final val BA {100 * final_val['ba']:.2f}%")
    return 0


def cmd_rank(args):
    model = _load_model_arg(args)
    _, adapters = _load_pack_for(model, args.adapters)
    splits = _load_splits(args.val)
    result = ranking.rank_and_select(
        model, adapters, splits["val"], kind=args.score,
        budget_drop=args.budget / 100.0, include_bn=args.score_include_bn)
    os.makedirs(args.out, exist_ok=True)
    ranking.save_selection(result, os.path.join(args.out, "selection.json"),
                           os.path.join(args.out, "pareto.csv"))
    write_resolved_config(args, args.out)
    print(f"kept {result.chosen_prefix_len}/{len(result.ordered_layer_ids)} adapters "
          f"(layers {result.chosen_ids}) within {args.budget} BA points")
    return 0


def cmd_fuse(args):
    model = _load_model_arg(args)
    _, adapters = _load_pack_for(model, args.adapters)
    if args.selection:
        ids = ranking.load_selection_ids(args.selection)
        adapters = adapters.subset(ids)
    fused = fusion.fuse_model(model, adapters)
    os.makedirs(args.out, exist_ok=True)
    save_model(fused, os.path.join(args.out, "fused.munt"))
    meta = {
        "strategy": "fused",
        "model_file": "fused.munt",
        "update_bytes": update_pack.pack_nbytes(adapters),
        "fused_layers": sorted(lid for lid, f in fused.fused.items() if f),
    }
    _dump_json(meta, os.path.join(args.out, "meta.json"))
    write_resolved_config(args, args.out)
    cost = fused.count_costs(input_hw=(args.size, args.size))
    print(f"fused model: {cost.flops_per_image} FLOPs/image at {args.size}x{args.size}, "
          f"{cost.storage_bytes} bytes")
    return 0


def cmd_pack(args):
    if args.inspect:
        with open(args.inspect, "rb") as fh:
            print(json.dumps(update_pack.inspect(fh.read()), indent=2, sort_keys=True))
        return 0
    model = _load_model_arg(args)
    _, adapters = _load_pack_for(model, args.adapters)
    if args.selection:
        adapters = adapters.subset(ranking.load_selection_ids(args.selection))
    data = update_pack.pack(adapters, model.layout_hash())
    if not args.out:
        raise UsageError("pack needs --out FILE")
    with open(args.out, "wb") as fh:
        fh.write(data)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_resolved_config(args, out_dir)
    print(f"wrote {len(data)} bytes ({len(adapters)} adapters) to {args.out}")
    return 0


def cmd_apply(args):
    model = _load_model_arg(args)
    with open(args.pack, "rb") as fh:
        data = fh.read()
    os.makedirs(args.out, exist_ok=True)
    if args.fuse:
        fused = update_pack.apply(model, data, fuse=True)
        save_model(fused, os.path.join(args.out, "fused.munt"))
        print(f"applied and fused {args.pack} onto {args.model}")
    else:
        applied, adapters = update_pack.apply(model, data, fuse=False)
        save_model(applied, os.path.join(args.out, "model.munt"))
        with open(os.path.join(args.out, "adapters.adpt"), "wb") as fh:
            fh.write(update_pack.pack(adapters, applied.layout_hash()))
        print(f"applied {args.pack} onto {args.model} ({len(adapters)} adapters)")
    write_resolved_config(args, args.out)
    return 0


def cmd_eval(args):
    splits = _load_splits(args.data)
    scenes = splits[args.split]
    if args.classic:
        fn = classic.CLASSIC_METHODS[args.classic]
        report = metrics.evaluate(fn, scenes, name=f"classic-{args.classic}")
        meta = {"strategy": f"classic-{args.classic}"}
    else:
        model = _load_model_arg(args)
        adapters = None
        if args.adapters:
            _, adapters = _load_pack_for(model, args.adapters)
        name = os.path.basename(args.model)
        report = metrics.evaluate_model(model, scenes, adapters=adapters, name=name)
        meta = {"strategy": args.label or name}
    _emit_eval(report, args.out, meta=meta if args.label or args.classic else None)
    write_resolved_config(args, args.out)
    print(report.csv_header())
    print(report.csv_row())
    return 0


def cmd_noise_sweep(args):
    model = _load_model_arg(args)
    adapters = None
    if args.adapters:
        _, adapters = _load_pack_for(model, args.adapters)
    scenes = _load_splits(args.data)[args.split]
    levels = [float(x) for x in args.levels.split(",")]
    rows = noise_sweep(model, adapters, scenes, args.noise, levels, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"noise_{args.noise}.csv")
    with open(path, "w") as fh:
        fh.write("level,ba\n")
        for r in rows:
            fh.write("%g,%.6f\n" % (r["level"], r["ba"]))
    write_resolved_config(args, args.out)
    print(f"wrote {path}")
    return 0


def cmd_layer_sweep(args):
    model = _load_model_arg(args)
    splits = _load_splits(args.data)
    cfg = _train_config(args)
    rows = layer_sweep(model, splits["train"], splits["val"], cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "layer_sweep.csv")
    with open(path, "w") as fh:
        fh.write("layer_id,ba\n")
        for r in rows:
            fh.write("%d,%.6f\n" % (r["layer_id"], r["ba"]))
    write_resolved_config(args, args.out)
    print(f"wrote {path}")
    return 0


def cmd_report(args):
    run_dir = args.run
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory {run_dir!r} does not exist")
    rows = []
    for name in sorted(os.listdir(run_dir)):
        sub = os.path.join(run_dir, name)
        meta_path = os.path.join(sub, "meta.json")
        if not os.path.isfile(meta_path):
            continue
        with open(meta_path) as fh:
            meta = json.load(fh)
        row = {"run": name, "strategy": meta.get("strategy", name),
               "update_bytes": meta.get("update_bytes")}
        report_path = os.path.join(sub, "report.json")
        if os.path.isfile(report_path):
            with open(report_path) as fh:
                rep = json.load(fh)
            row["balanced_accuracy_pct"] = rep.get("balanced_accuracy_pct")
            cost = rep.get("cost") or {}
            row["flops_total"] = cost.get("flops_per_image")
            row["bytes_total"] = cost.get("storage_bytes")
        timing_path = os.path.join(sub, "timing.json")
        if os.path.isfile(timing_path):
            with open(timing_path) as fh:
                row["inference_ms"] = round(1000 * json.load(fh)["sec_per_image"], 3)
        rows.append(row)

    base = next((r for r in rows if r["strategy"] == "baseline"), None)
    for r in rows:
        if base and r.get("flops_total") is not None and base.get("flops_total") is not None:
            r["flops_update"] = r["flops_total"] - base["flops_total"]
        else:
            r["flops_update"] = None

    cols = ["strategy", "balanced_accuracy_pct", "flops_total", "flops_update",
            "bytes_total", "update_bytes", "inference_ms"]
    out_dir = args.out or run_dir
    os.makedirs(out_dir, exist_ok=True)
    csv_lines = [",".join(cols)]
    for r in rows:
        csv_lines.append(",".join("" if r.get(c) is None else str(r.get(c)) for c in cols))
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write("\n".join(csv_lines) + "\n")
    md = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        md.append("| " + " | ".join("-" if r.get(c) is None else str(r.get(c)) for c in cols) + " |")
    with open(os.path.join(out_dir, "report.md"), "w") as fh:
        fh.write("\n".join(md) + "\n")
    print("\n".join(md))
    return 0


# --------------------------------------------------------------------------
# parser assembly
# --------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr0", type=float, default=1e-3)
    p.add_argument("--lr-floor", type=float, default=1e-6)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--optimizer", choices=("adam", "sgdm"), default="adam")
    p.add_argument("--loss", choices=("bcce", "dice", "jaccard"), default="bcce")
    p.add_argument("--crop-prob", type=float, default=0.5)
    p.add_argument("--crop-size", type=int, default=32)
    p.add_argument("--hflip-prob", type=float, default=0.0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="adapterforge",
        description="Residual adapters, ranking, fusion and update packs for a toy "
                    "segmentation U-Net, plus classic CV baselines.")
    parser.add_argument("--config", help="key = value config file; flags override it")
    sub = parser.add_subparsers(dest="subparser", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural scene archive")
    p.add_argument("--domain", choices=("moon", "mars"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=256)
    p.add_argument("--n-val", type=int, default=64)
    p.add_argument("--n-test", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--sky-fraction", type=float, default=0.25)
    p.add_argument("--noise-std", type=float, default=4.0)
    p.add_argument("--haze", type=float, default=0.3)
    p.add_argument("--rock-min", type=int, default=2)
    p.add_argument("--rock-max", type=int, default=5)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a strategy on a scene archive")
    p.add_argument("--strategy", required=True,
                   choices=("baseline", "scratch", "full", "encoder", "decoder",
                            "batchnorm", "adapters"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="pretrained model (all strategies except scratch)")
    p.add_argument("--adapters-design", choices=tuple(_DESIGNS), default="bn_conv")
    p.add_argument("--domain-tag", default="")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="rank adapters and select a budgeted prefix")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", required=True, help="update pack file")
    p.add_argument("--val", required=True, help="scene archive; its val split is used")
    p.add_argument("--score", choices=ranking.SCORE_KINDS, default="sq_norm_per_param")
    p.add_argument("--score-include-bn", action="store_true",
                   help="include BN affine terms in the norm (ablation)")
    p.add_argument("--budget", type=float, default=0.5,
                   help="accepted BA drop in absolute points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("fuse", help="absorb adapters into the backbone convs")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--selection", help="selection.json from rank")
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("pack", help="write (or inspect) an update pack")
    p.add_argument("--model")
    p.add_argument("--adapters")
    p.add_argument("--selection")
    p.add_argument("--out")
    p.add_argument("--inspect", metavar="FILE", help="print a pack's header/records as JSON")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("apply", help="apply an update pack to a model")
    p.add_argument("--model", required=True)
    p.add_argument("--pack", required=True)
    p.add_argument("--fuse", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="evaluate a model or classic method")
    p.add_argument("--model")
    p.add_argument("--adapters")
    p.add_argument("--classic", choices=tuple(classic.CLASSIC_METHODS))
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--label", help="strategy label recorded for the report command")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep", help="BA vs corruption intensity")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--noise", choices=("gauss", "blur", "bad_pxl"), required=True)
    p.add_argument("--levels", required=True, help="comma-separated ascending levels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("layer-sweep", help="per-layer finetuning BA table")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_layer_sweep)

    p = sub.add_parser("report", help="consolidate strategy runs into one table")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def _apply_config_defaults(parser, sub_actions, file_cfg):
    known = {}
    for sp in sub_actions.choices.values():
        for action in sp._actions:
            if action.dest not in ("help",):
                known.setdefault(action.dest, []).append((sp, action))
    unknown = sorted(set(file_cfg) - set(known))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for key, value in file_cfg.items():
        for sp, action in known[key]:
            sp.set_defaults(**{key: _coerce(value, action)})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    sub_actions = next(a for a in parser._actions
                       if isinstance(a, argparse._SubParsersAction))
    try:
        cfg_path = None
        for i, tok in enumerate(argv):
            if tok == "--config" and i + 1 < len(argv):
                cfg_path = argv[i + 1]
            elif tok.startswith("--config="):
                cfg_path = tok.split("=", 1)[1]
        if cfg_path:
            _apply_config_defaults(parser, sub_actions, parse_config_file(cfg_path))
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return exc.code if isinstance(exc.code, int) else 2
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, PackError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
