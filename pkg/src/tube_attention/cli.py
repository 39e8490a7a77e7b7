"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attention import init_params
from .data import SynthConfig, gen_synthetic, load_boxes, load_manifest
from .errors import ConfigError, DataError, GeometryError, NumericError
from .flops import cost_report, format_table, measure_kernel_flops
from .geometry import GridSpec, TubeIndex, build_tube, default_clip_layout, dump_tube
from .tensor import read_ft1

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
CONFIG_SECTIONS = ("synth", "train", "head")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(text: str, sep: str = "x") -> tuple:
    try:
        a, b = text.lower().split(sep)
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None


def _dims(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N,T,H,W, got {text!r}") from None
    if len(dims) != 4:
        raise argparse.ArgumentTypeError(f"expected four comma-separated dims, got {text!r}")
    return dims


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for key in doc:
        if key not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {key!r} (expected one of {', '.join(CONFIG_SECTIONS)})")
    return doc


def train_config(doc: dict, args):
    from .train import TrainConfig

    section = dict(doc.get("train", {}))
    head = dict(doc.get("head", {}))
    for key in head:
        if key != "hidden":
            raise ConfigError(f"unknown field head.{key} (task and output size come from the manifest)")
    if "hidden" in head:
        section["hidden"] = head["hidden"]
    for key in ("seed", "depth", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            section[key] = val
    try:
        return TrainConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_gen_synth(args) -> int:
    doc = load_config(args.config)
    section = dict(doc.get("synth", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    path = gen_synthetic(cfg, args.out, force=args.force)
    print(path)
    return 0


def _grid_from_args(args, video_length: int) -> GridSpec:
    h, w = args.grid
    fw, fh = args.frame
    layout = default_clip_layout(video_length, args.clips, args.clip_len)
    return GridSpec(frame_size=(fw, fh), grid=(h, w), stride=args.stride, clips=layout, video_length=video_length)


def _tube_from_boxes(args):
    boxes = load_boxes(args.boxes)
    if not boxes:
        raise DataError(f"{args.boxes}: no boxes")
    spec = _grid_from_args(args, boxes[-1].frame_index + 1)
    return build_tube(boxes, spec, args.tau)


def cmd_masks(args) -> int:
    tube = _tube_from_boxes(args)
    dump = dump_tube(tube)
    _write_json(Path(args.out), dump)
    summary = {"total": tube.total, "occupancy": tube.occupancy, "per_slot": tube.counts().tolist()}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _constructed_tube(dims, occupancy: float, rng) -> TubeIndex:
    size = int(np.prod(dims))
    k = int(round(occupancy * size))
    masks = np.zeros(size, dtype=bool)
    masks[rng.choice(size, size=k, replace=False)] = True
    return TubeIndex(masks.reshape(dims))


def cmd_flops(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    if args.manifest:
        manifest = load_manifest(args.manifest)
        if manifest.channels % args.reduction:
            raise ConfigError(f"channels {manifest.channels} not divisible by --reduction {args.reduction}")
        params = init_params(manifest.channels, args.reduction, rng)
        params = type(params)(params.theta, params.phi, params.g, rng.uniform(-0.1, 0.1, params.w_z.shape))
        by_cat: dict = {}
        for rec in manifest.samples:
            tube = build_tube(load_boxes(rec.boxes), manifest.grid, manifest.tau)
            x = read_ft1(rec.features).astype(np.float64)
            by_cat.setdefault(rec.category, []).append(measure_kernel_flops(x, tube, params))
        for cat in sorted(by_cat):
            reps = by_cat[cat]
            first = reps[0]
            first.flops_tsa = int(round(np.mean([r.flops_tsa for r in reps])))
            first.measured_flops_tsa = int(round(np.mean([r.measured_flops_tsa for r in reps])))
            first.pair_count_tsa = int(round(np.mean([r.pair_count_tsa for r in reps])))
            first.positions_tsa = int(round(np.mean([r.positions_tsa for r in reps])))
            first.reduction = float(np.mean([r.reduction for r in reps]))
            first.pair_reduction = float(np.mean([r.pair_reduction for r in reps]))
            rows.append((cat, first))
    else:
        if args.channels is None:
            raise ConfigError("--channels is required with --boxes or --dims")
        if args.boxes:
            tube = _tube_from_boxes(args)
        elif args.dims:
            tube = _constructed_tube(args.dims, args.occupancy, rng)
        else:
            raise ConfigError("one of --boxes, --manifest or --dims is required")
        if args.channels % args.reduction:
            raise ConfigError(f"--channels {args.channels} not divisible by --reduction {args.reduction}")
        params = init_params(args.channels, args.reduction, rng)
        x = rng.normal(size=(*tube.dims, args.channels))
        report = measure_kernel_flops(x, tube, params)
        rows.append(("input", report))
    payload = {name: json.loads(r.to_json()) for name, r in rows}
    print(json.dumps(payload, indent=1, sort_keys=True))
    print(format_table(rows))
    if args.out:
        _write_json(Path(args.out), payload)
    mismatched = [name for name, r in rows if r.measured_flops_tsa != r.flops_tsa]
    if mismatched:
        raise NumericError(f"instrumented count differs from the cost model for {mismatched}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = train_config(load_config(args.config), args)
    out = Path(args.out)
    result = train(cfg, args.manifest, out_dir=out, resume=args.resume)
    print(json.dumps({"final_test": result.final_report["value"], "metric": result.final_report["metric"], "best_test": result.best_metric, "out": str(out)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    if args.config:
        load_config(args.config)
    report = evaluate(args.checkpoint, args.manifest, split=args.split)
    out = Path(args.out)
    _write_json(out / "reports" / f"eval_{args.split}.json", report)
    print(json.dumps({k: report[k] for k in ("task", "split", "n", "metric", "value")}, sort_keys=True))
    return 0


def _add_grid_flags(p) -> None:
    p.add_argument("--grid", type=_pair, default=(14, 14), metavar="HxW", help="feature grid rows x cols (default 14x14)")
    p.add_argument("--frame", type=_pair, default=(320, 240), metavar="WxH", help="frame width x height in pixels (default 320x240)")
    p.add_argument("--stride", type=int, default=4, help="frames per feature time-step (default 4)")
    p.add_argument("--tau", type=float, default=0.5, help="coverage threshold, inclusive (default 0.5)")
    p.add_argument("--clips", type=int, default=10, help="number of clips (default 10)")
    p.add_argument("--clip-len", type=int, default=16, help="frames per clip (default 16)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tube-attention", description="Tube self-attention experiments.", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset", allow_abbrev=False)
    p.add_argument("--config", help="JSON config; the 'synth' section is used")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides synth.seed")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("masks", help="rasterize a box track into a tube dump", allow_abbrev=False)
    p.add_argument("--boxes", required=True, help="boxes.jsonl track")
    _add_grid_flags(p)
    p.add_argument("--out", required=True, help="path of the JSON mask dump")
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("flops", help="dense vs tube attention cost report", allow_abbrev=False)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--boxes", help="boxes.jsonl track (uses the grid flags)")
    src.add_argument("--manifest", help="dataset manifest; one row per category")
    src.add_argument("--dims", type=_dims, metavar="N,T,H,W", help="constructed tube over these dims")
    p.add_argument("--occupancy", type=float, default=0.5, help="tube occupancy for --dims (default 0.5)")
    p.add_argument("--channels", type=int, help="channel count C for --boxes/--dims")
    p.add_argument("--reduction", type=int, default=2, help="channel reduction factor (default 2)")
    p.add_argument("--seed", type=int, default=0, help="seed for random weights and features")
    p.add_argument("--out", help="optional path for the JSON report")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("train", help="train a network", allow_abbrev=False)
    p.add_argument("--config", help="JSON config with 'train' and 'head' sections")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="run directory (logs/, checkpoints/, reports/)")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--depth", type=int, help="overrides train.depth (0 = plain network)")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")
    p.add_argument("--resume", help="checkpoint stem to resume from (e.g. OUT/checkpoints/last)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", allow_abbrev=False)
    p.add_argument("--config", help="optional JSON config (validated only)")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--checkpoint", required=True, help="checkpoint stem or .json path")
    p.add_argument("--split", choices=("train", "test"), default="test", help="which split to score (default test)")
    p.add_argument("--out", required=True, help="run directory; report goes to reports/")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GeometryError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
