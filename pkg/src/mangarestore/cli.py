"""Command-line entry point: ``mangarestore <subcommand> ...``.

Primary results go to stdout (``scale=2.034``, output paths); logs go to
stderr.  Exit status is 0 on success, 2 on argument errors and 1 on runtime
failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("mangarestore")

TRAIN_COMMANDS = ("train-se", "train-mr")


class UsageError(Exception):
    """Bad arguments discovered after parsing; reported with exit status 2."""


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mangarestore", description="Manga screentone restoration toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--config", type=Path, help="key=value file overriding option defaults")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render synthetic bitonal pages and region labels")
    s.add_argument("--pages", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--page-size", type=int, default=512)
    s.add_argument("--min-regions", type=int, default=2)
    s.add_argument("--max-regions", type=int, default=6)

    s = sub.add_parser("degrade", help="degrade a synthesized dataset or a single image")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--dataset", type=Path, help="directory holding manifest.jsonl")
    g.add_argument("--input", type=Path, help="single image")
    s.add_argument("--out", type=Path, required=True, help="output directory (dataset) or image path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", type=float, help="fixed scale; sampled per page when omitted")
    s.add_argument("--scale-min", type=float, default=1.0)
    s.add_argument("--scale-max", type=float, default=4.0)
    s.add_argument("--jpeg", type=int, help="JPEG quality for a fixed degradation")
    s.add_argument("--noise", type=float, default=0.0, help="noise sigma (8-bit units) for a fixed degradation")
    s.add_argument("--blur", type=float, default=0.0, help="blur sigma for a fixed degradation")
    s.add_argument("--unpaired-fraction", type=float, default=0.0)

    s = sub.add_parser("embed-fit", help="refit the screentone embedding projection")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)

    for name, what in (("train-se", "scale network"), ("train-mr", "restoration network")):
        s = sub.add_parser(name, help=f"train the {what}")
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--resume", type=Path)
        s.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                       help="training option override")
        if name == "train-mr":
            s.add_argument("--se-model", type=Path, help="frozen scale network for unpaired records")

    s = sub.add_parser("estimate", help="estimate the restorative scale of a page")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--patches", type=int, default=4)
    s.add_argument("--patch-size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("restore", help="restore a degraded page")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--output", type=Path, required=True)
    s.add_argument("--scale", type=float)
    s.add_argument("--se-model", type=Path)
    s.add_argument("--round-scale", type=int, metavar="DIGITS",
                   help="round an estimated scale to this many decimals before use")
    s.add_argument("--patches", type=int, default=4)
    s.add_argument("--patch-size", type=int, default=128)
    s.add_argument("--binarize", action="store_true")
    s.add_argument("--confidence-out", type=Path)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("evaluate", help="score restorations and scale estimates on a paired dataset")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="JSON report path; a CSV table is written beside it")
    s.add_argument("--mr-model", type=Path)
    s.add_argument("--se-model", type=Path)
    s.add_argument("--method", type=_kv, action="append", default=[], metavar="NAME=DIR",
                   help="external restorations stored as DIR/<id>.png")
    s.add_argument("--patches", type=int, default=4)
    s.add_argument("--patch-size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser, argv):
    """Reparse with ``--config`` values as defaults; returns ``(args, train_overrides)``."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, rest = pre.parse_known_args(argv)
    if known.config is None:
        return parser.parse_args(argv), {}
    command = next((a for a in rest if a in COMMANDS), None)
    if command is None:
        return parser.parse_args(argv), {}
    from .trainer import TrainConfig, parse_kv

    try:
        values = parse_kv(known.config.read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {known.config}: {e}") from e
    except ValueError as e:
        raise UsageError(f"{known.config}: {e}") from e
    sub = _subparser(parser, command)
    dests = {a.dest for a in sub._actions}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    defaults, train = {}, {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest in dests:
            action = next(a for a in sub._actions if a.dest == dest)
            try:
                if isinstance(action, argparse._StoreTrueAction):
                    value = value.lower() in ("1", "true", "yes", "on")
                elif action.type is not None and action.type is not _kv:
                    value = action.type(value)
            except (TypeError, ValueError) as e:
                raise UsageError(f"{known.config}: bad value for {key!r}: {e}") from e
            defaults[dest] = value
        elif command in TRAIN_COMMANDS and dest in train_fields:
            train[dest] = value
        else:
            raise UsageError(f"{known.config}: unknown option {key!r} for {command}")
    # required flags satisfied by the config file must not trip argparse
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv), train


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2))
    tmp.replace(path)


# -- subcommands -----------------------------------------------------------


def cmd_synth(args, _):
    from .trainer import synth_pages

    if args.pages < 1:
        raise UsageError("--pages must be >= 1")
    m = synth_pages(args.pages, args.out, args.seed, args.page_size, (args.min_regions, args.max_regions))
    print(m.root / "manifest.jsonl")


def _fixed_params(args):
    from .degradation import DegradationParams

    return DegradationParams(scale=args.scale, blur_sigma=args.blur, jpeg_quality=args.jpeg, noise_sigma=args.noise)


def cmd_degrade(args, _):
    from .degradation import degrade
    from .imaging import load_image, save_image
    from .trainer import DatasetManifest, degrade_dataset

    if args.input is not None:
        if args.scale is None:
            raise UsageError("single-image degradation needs --scale")
        out = degrade(load_image(args.input), _fixed_params(args), rng_seed=args.seed)
        save_image(out, args.out)
        print(args.out)
        return
    manifest = DatasetManifest.load(args.dataset)
    params = _fixed_params(args) if args.scale is not None else None
    m = degrade_dataset(manifest, args.seed, out_dir=args.out, params=params,
                        unpaired_fraction=args.unpaired_fraction, scale_range=(args.scale_min, args.scale_max))
    print(m.root / "manifest.jsonl")


def cmd_embed_fit(args, _):
    from .embedding import fit_projection, save_asset

    save_asset(fit_projection(seed=args.seed), args.out)
    print(args.out)


def _train_config(args, file_overrides):
    from .trainer import TrainConfig

    values = dict(file_overrides)
    values.update(dict(args.set))
    try:
        return TrainConfig.from_mapping(values)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_train_se(args, overrides):
    from .trainer import DatasetManifest, train_se

    cfg = _train_config(args, overrides)
    print(train_se(cfg, DatasetManifest.load(args.data), args.out, resume=args.resume))


def cmd_train_mr(args, overrides):
    from .trainer import DatasetManifest, train_mr

    cfg = _train_config(args, overrides)
    print(train_mr(cfg, DatasetManifest.load(args.data), args.out, se_checkpoint=args.se_model, resume=args.resume))


def _estimate(model_path, img, n_patches, patch_size, seed):
    from .checkpoint import load_model
    from .scale_estimator import estimate_scale_voted

    model, _, _ = load_model(model_path, expect_kind="se")
    size = min(patch_size, *img.shape)
    if size < model.config.min_side:
        raise ValueError(f"image {img.shape} too small for the scale network")
    return estimate_scale_voted(model, img, n_patches, size, rng_seed=seed)


def cmd_estimate(args, _):
    from .imaging import load_image

    est = _estimate(args.model, load_image(args.input), args.patches, args.patch_size, args.seed)
    print(f"scale={est.scale:.3f}")
    print("patch\ty\tx\tscale\tconfidence")
    for i, v in enumerate(est.per_patch):
        print(f"{i}\t{v.origin[0]}\t{v.origin[1]}\t{v.scale:.4f}\t{v.confidence:.4f}")


def cmd_restore(args, _):
    from .checkpoint import load_model
    from .imaging import binarize, load_image, save_image
    from .restorer import mr_forward

    if args.scale is None and args.se_model is None:
        raise UsageError("restore needs --scale or --se-model")
    img = load_image(args.input)
    meta = {"input": str(args.input), "input_size": list(img.shape)}
    if args.scale is not None:
        scale = args.scale
        meta["scale_source"] = "given"
    else:
        est = _estimate(args.se_model, img, args.patches, args.patch_size, args.seed)
        scale = est.scale
        meta["scale_source"] = "estimated"
        meta["estimated_scale"] = est.scale
        if args.round_scale is not None:
            scale = round(scale, args.round_scale)
    model, _, _ = load_model(args.model, expect_kind="mr")
    out = mr_forward(model, img, scale, rng_seed=args.seed)
    restored = binarize(out.restored).astype(np.float64) if args.binarize else out.restored
    save_image(restored, args.output)
    meta.update(scale=scale, effective_scale=out.effective_scale, output_size=list(restored.shape),
                binarized=args.binarize)
    if args.confidence_out is not None:
        save_image(out.confidence, args.confidence_out)
        np.save(args.confidence_out.with_suffix(".npy"), out.confidence.astype(np.float32))
        meta["confidence"] = str(args.confidence_out)
    _write_json(args.output.with_name(args.output.name + ".json"), meta)
    print(f"scale={scale:.3f}")
    print(args.output)


def cmd_evaluate(args, _):
    from .checkpoint import load_model
    from .imaging import load_image, resample
    from .metrics import identifiability_mask, restore_eval, scale_eval
    from .restorer import mr_forward
    from .scale_estimator import estimate_scale_voted
    from .trainer import DatasetManifest, load_labels

    manifest = DatasetManifest.load(args.data)
    records = manifest.paired
    if not records:
        raise ValueError("evaluation needs paired records")
    mr = load_model(args.mr_model, expect_kind="mr")[0] if args.mr_model else None
    se = load_model(args.se_model, expect_kind="se")[0] if args.se_model else None
    external = {}
    for name, d in args.method:
        if not Path(d).is_dir():
            raise UsageError(f"--method {name}: {d} is not a directory")
        external[name] = Path(d)

    methods: dict[str, list] = {"bicubic": []}
    if mr is not None:
        methods["ours"] = []
    methods.update({k: [] for k in external})
    preds, gts, vols = [], [], []
    for rec in records:
        gt = load_image(manifest.path(rec.gt_path))
        low = load_image(manifest.path(rec.degraded_path))
        mask = identifiability_mask(load_labels(manifest.path(rec.labels_path)), rec.regions, rec.scale)
        methods["bicubic"].append((rec.id, resample(low, *gt.shape, filter="bicubic"), gt, mask))
        if mr is not None:
            methods["ours"].append((rec.id, mr_forward(mr, low, rec.scale, args.seed, out_size=gt.shape).restored,
                                    gt, mask))
        for name, d in external.items():
            path = d / f"{rec.id}.png"
            if not path.exists():
                log.warning("%s: missing %s", name, path)
                continue
            out = load_image(path)
            if out.shape != gt.shape:
                log.warning("%s: %s has shape %s, expected %s", name, path, out.shape, gt.shape)
                continue
            methods[name].append((rec.id, out, gt, mask))
        if se is not None:
            size = min(args.patch_size, *low.shape)
            preds.append(estimate_scale_voted(se, low, args.patches, size, args.seed).scale)
            gts.append(rec.scale)
            vols.append(f"{rec.scale:.4f}")

    report = {"n_records": len(records), "restoration": {}}
    rows = []
    for name, pairs in methods.items():
        r = restore_eval(pairs)
        report["restoration"][name] = r.to_dict()
        rows.extend({"method": name, **dataclasses.asdict(s)} for s in r.images)
    if se is not None:
        report["scale"] = scale_eval(preds, gts, vols).to_dict()
    _write_json(args.out, report)
    csv_path = args.out.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "id", "psnr", "ssim", "svae", "coverage"])
        w.writeheader()
        w.writerows(rows)
    for name, r in report["restoration"].items():
        agg = r["aggregate"]
        if agg["n"]:
            print(f"{name}\tpsnr={agg['psnr']:.3f}\tssim={agg['ssim']:.4f}\tsvae={agg['svae']:.4f}")
    if se is not None:
        print(f"scale_accuracy={report['scale']['buckets']['[1,4]']['accuracy']:.4f}")
    print(args.out)


COMMANDS = {
    "synth": cmd_synth,
    "degrade": cmd_degrade,
    "embed-fit": cmd_embed_fit,
    "train-se": cmd_train_se,
    "train-mr": cmd_train_mr,
    "estimate": cmd_estimate,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args, overrides = _apply_config(parser, argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mangarestore: error: {e}", file=sys.stderr)
        return 2
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, overrides)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mangarestore: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"mangarestore: {args.command} failed: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
