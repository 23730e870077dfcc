"""Command-line entry point: ``palettemcm <subcommand> ...``.

Exit codes: 0 success, 2 IO/decode, 3 empty corpus, 4 config/model,
5 bad palette input, 6 resource cap.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .color import Palette, dump_palette, load_palette_file
from .errors import InvalidColor, MissingCondition, PaletteMcmError

log = logging.getLogger("palettemcm")

EXIT_OK, EXIT_IO, EXIT_EMPTY, EXIT_CONFIG, EXIT_PALETTE, EXIT_CAP = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_palette(path, allow_masked: bool):
    try:
        return load_palette_file(path, allow_masked=allow_masked)
    except OSError as exc:
        raise CliError(f"cannot read palette {path}: {exc}", EXIT_IO) from None
    except (json.JSONDecodeError, InvalidColor) as exc:
        raise CliError(f"bad palette file {path}: {exc}", EXIT_PALETTE) from None


def _load_cond(path):
    from .mcm.io import read_pteb

    return None if path is None else read_pteb(path)


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    from .extract import extract_palette, load_image

    palette = extract_palette(load_image(args.image), args.k, seed=args.seed)
    Path(args.out).write_text(dump_palette(palette) + "\n", encoding="utf-8")
    print(" ".join(palette.hex()))
    return EXIT_OK


def _parse_shape(text: str) -> tuple[int, int]:
    try:
        s, d = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(f"bad shape {text!r}; expected e.g. 4x32", EXIT_CONFIG) from None
    if s < 1 or d < 1:
        raise CliError("condition shape must be positive", EXIT_CONFIG)
    return s, d


def cmd_build_dataset(args) -> int:
    from .dataset import SplitSpec, attach_conditions, build_manifest, write_manifest

    try:
        split = SplitSpec.parse(args.split)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    out = Path(args.out)
    root = out.resolve().parent
    report = build_manifest(args.images, args.captions, k=args.k, split=split, seed=args.seed, relative_to=root)
    records = report.records
    if args.stub_cond:
        rows, cols = _parse_shape(args.stub_cond)
        cond_dir = root / f"{out.stem}_cond"
        records = attach_conditions(records, "stub", rows, cols, out_dir=cond_dir, relative_to=root)
    elif args.cond_dir:
        from .mcm.io import read_pteb

        first = next(Path(args.cond_dir).glob("*.pteb"), None)
        if first is None:
            raise CliError(f"no .pteb files in {args.cond_dir}", EXIT_CONFIG)
        cols = read_pteb(first).shape[1]
        records = attach_conditions(records, "external-dir", 0, cols, cond_dir=args.cond_dir, relative_to=root)
    write_manifest(records, out)
    counts = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    print(f"{len(records)} records (train {counts['train']}, val {counts['val']}, test {counts['test']}); "
          f"{len(report.skipped)} skipped")
    return EXIT_OK


def _manifest_examples(manifest_path, records, conditioned: bool):
    from .dataset import resolve
    from .mcm.data import PaletteExample
    from .mcm.io import read_pteb

    out = []
    for r in records:
        cond = None
        if conditioned:
            if r.cond_path is None:
                raise MissingCondition(f"record {r.id!r} has no cond_path; rebuild with --stub-cond or --cond-dir")
            cond = read_pteb(resolve(manifest_path, r.cond_path))
        out.append(PaletteExample(r.palette.to_array(), cond))
    return out


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"bad config {path}: {exc}", EXIT_CONFIG) from None
    if not isinstance(obj, dict) or set(obj) - {"model", "train"}:
        raise CliError("config must be a JSON object with optional 'model' and 'train' sections", EXIT_CONFIG)
    return obj


def cmd_train(args) -> int:
    from .dataset import load_manifest
    from .mcm.io import save_checkpoint
    from .mcm.model import McmConfig
    from .mcm.train import TrainConfig, train

    conf = _read_config(args.config)
    records = load_manifest(args.manifest)
    conditioned = args.variant == "cond"
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs or not val_recs:
        raise CliError("manifest needs non-empty train and val splits", EXIT_CONFIG)
    train_ex = _manifest_examples(args.manifest, train_recs, conditioned)
    val_ex = _manifest_examples(args.manifest, val_recs, conditioned)

    model_conf = dict(conf.get("model", {}))
    if conditioned:
        model_conf["conditioning"] = "cross"
        model_conf["cond_dim"] = int(train_ex[0].cond.shape[1])
    else:
        model_conf["conditioning"] = "none"
        model_conf["cond_dim"] = 0
    train_conf = dict(conf.get("train", {}))
    if args.seed is not None:
        train_conf["seed"] = args.seed
    if args.max_epochs is not None:
        train_conf["max_epochs"] = args.max_epochs
    try:
        cfg = McmConfig.from_dict(model_conf)
        tcfg = TrainConfig.from_dict(train_conf)
    except TypeError as exc:
        raise CliError(f"bad config: {exc}", EXIT_CONFIG) from None
    params, history = train(cfg, tcfg, train_ex, val_ex)
    save_checkpoint(params, cfg, args.out)
    hist_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    history.write_csv(hist_path)
    print(f"trained {history.epochs} epochs (best {history.best_epoch}, "
          f"val loss {history.val_loss[history.best_epoch - 1]:.4f}); wrote {args.out} and {hist_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .mcm.infer import predict_masked
    from .mcm.io import load_checkpoint

    colors = _load_palette(args.palette, allow_masked=True)
    if not any(c is None for c in colors):
        raise CliError("palette has no null slots to predict", EXIT_PALETTE)
    params, cfg = load_checkpoint(args.ckpt)
    completed = predict_masked(params, cfg, colors, _load_cond(args.cond))
    text = dump_palette(completed)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    print(" ".join(completed.hex()))
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"bad seed list {text!r}", EXIT_CONFIG) from None


def cmd_eval_model(args) -> int:
    from .dataset import load_manifest
    from .mcm.infer import evaluate_grid
    from .mcm.io import load_checkpoint

    params, cfg = load_checkpoint(args.ckpt)
    records = [r for r in load_manifest(args.manifest) if r.split == args.split]
    if not records:
        raise CliError(f"manifest has no {args.split!r} records", EXIT_CONFIG)
    examples = _manifest_examples(args.manifest, records, cfg.conditioned)
    grid = evaluate_grid(params, cfg, examples, seeds=_parse_seeds(args.seeds))
    lines = ["n_mask,acc1_pct,dccw"]
    for row in grid:
        lines.append(f"{row.n_mask},{_fmt(100.0 * row.accuracy)},{_fmt(row.dccw)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    for row in grid:
        print(f"{row.n_mask} masked: acc@1 {100 * row.accuracy:6.2f}%  DCCW {row.dccw:8.3f}")
    return EXIT_OK


def cmd_eval_images(args) -> int:
    from .extract import load_image
    from .metrics import image_pair_metrics

    pairs_path = Path(args.pairs)
    try:
        with open(pairs_path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise CliError(f"cannot read pairs file {pairs_path}: {exc}", EXIT_IO) from None
    if rows and not {"gen_path", "ref_path"} <= set(rows[0]):
        raise CliError("pairs CSV needs gen_path and ref_path columns", EXIT_CONFIG)
    base = pairs_path.resolve().parent

    def at(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    results = []
    first_error = None
    for i, row in enumerate(rows, start=1):
        pid = (row.get("id") or "").strip() or str(i)
        try:
            gen = load_image(at(row["gen_path"]))
            ref = load_image(at(row["ref_path"]))
            ref_pal = None
            if (row.get("ref_palette") or "").strip():
                ref_pal = Palette(tuple(_load_palette(at(row["ref_palette"]), allow_masked=False)))
            rec = image_pair_metrics(gen, ref, ref_pal, seed=args.seed)
            results.append((pid, rec, ""))
        except (PaletteMcmError, CliError) as exc:
            first_error = first_error or exc
            results.append((pid, None, str(exc).replace("\n", " ")))
    ok = [r for _, r, _ in results if r is not None]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "hist_bha", "dccw", "psnr", "ssim", "error"])
        for pid, rec, err in results:
            if rec is None:
                w.writerow([pid, "", "", "", "", err])
            else:
                w.writerow([pid, _fmt(rec.hist_bha), _fmt(rec.dccw), _fmt(rec.psnr), _fmt(rec.ssim), ""])
        if ok:
            means = [float(np.mean([getattr(r, f) for r in ok])) for f in ("hist_bha", "dccw", "psnr", "ssim")]
            w.writerow(["mean", *(_fmt(m) for m in means), ""])
    print(f"{len(ok)}/{len(results)} pairs evaluated; wrote {args.out}")
    if not ok:
        if isinstance(first_error, CliError):
            return first_error.code
        return getattr(first_error, "exit_code", EXIT_IO) if first_error else EXIT_CONFIG
    return EXIT_OK


def cmd_embed(args) -> int:
    from .mcm.infer import embed_palette
    from .mcm.io import load_checkpoint, write_pteb

    colors = _load_palette(args.palette, allow_masked=True)
    if any(c is None for c in colors):
        raise CliError("palette embedding needs a complete palette (no null slots)", EXIT_PALETTE)
    params, cfg = load_checkpoint(args.ckpt)
    vec = embed_palette(params, cfg, Palette(tuple(colors)), _load_cond(args.cond))
    write_pteb(args.out, vec[None])
    print(f"wrote 1x{len(vec)} palette embedding to {args.out}")
    return EXIT_OK


def cmd_plot_colors(args) -> int:
    from .dataset import load_manifest, project_colors_2d, write_projection_csv, write_projection_svg

    records = load_manifest(args.manifest)
    pts = project_colors_2d(records, method=args.method, seed=args.seed)
    svg = Path(args.out)
    csv_path = svg.with_suffix(".csv")
    write_projection_svg(pts, svg)
    write_projection_csv(pts, csv_path)
    print(f"{len(pts)} distinct colors; wrote {svg} and {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="palettemcm", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("extract", help="extract a K-means palette from an image", formatter_class=fmt)
    p.add_argument("--image", required=True, help="PNG or JPEG input")
    p.add_argument("--k", type=int, default=5, help="number of palette colors")
    p.add_argument("--seed", type=int, default=0, help="k-means++ seed")
    p.add_argument("--out", required=True, help="palette JSON output")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-dataset", help="build a palette-text-image JSONL manifest", formatter_class=fmt)
    p.add_argument("--images", required=True, help="directory of PNG/JPEG images")
    p.add_argument("--captions", required=True, help="UTF-8 file of 'filename<TAB>caption' lines")
    p.add_argument("--out", required=True, help="manifest JSONL output")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=0, help="split shuffle and k-means seed")
    p.add_argument("--k", type=int, default=5, help="palette size")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--stub-cond", metavar="SxD", default=None, help="attach deterministic stub caption embeddings")
    g.add_argument("--cond-dir", default=None, help="directory of <id>.pteb condition embeddings")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train a masked color model", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest JSONL")
    p.add_argument("--variant", choices=("palette-only", "cond"), default="palette-only", help="model variant")
    p.add_argument("--config", default=None, help='JSON {"model": {...}, "train": {...}} overrides')
    p.add_argument("--out", required=True, help="MCM1 checkpoint output")
    p.add_argument("--history", default=None, help="per-epoch CSV; None writes <out>.history.csv")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed from the config; None keeps it")
    p.add_argument("--max-epochs", type=int, default=None, help="overrides train.max_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="fill null slots of a palette", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="MCM1 checkpoint")
    p.add_argument("--palette", required=True, help="palette JSON; null marks a masked slot")
    p.add_argument("--cond", default=None, help="PTEB condition embedding (conditioned models)")
    p.add_argument("--out", default=None, help="completed palette JSON output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval-model", help="accuracy@1 / DCCW grid for 1..5 masked colors", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="MCM1 checkpoint")
    p.add_argument("--manifest", required=True, help="manifest JSONL")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="manifest split to evaluate")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated masking seeds")
    p.add_argument("--out", default=None, help="grid CSV output")
    p.set_defaults(func=cmd_eval_model)

    p = sub.add_parser("eval-images", help="color-control metrics for image pairs", formatter_class=fmt)
    p.add_argument("--pairs", required=True, help="CSV with gen_path,ref_path[,ref_palette][,id]")
    p.add_argument("--out", required=True, help="metrics CSV output")
    p.add_argument("--seed", type=int, default=0, help="palette extraction seed")
    p.set_defaults(func=cmd_eval_images)

    p = sub.add_parser("embed", help="export a palette embedding as PTEB", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="MCM1 checkpoint")
    p.add_argument("--palette", required=True, help="complete palette JSON")
    p.add_argument("--cond", default=None, help="PTEB condition embedding (conditioned models)")
    p.add_argument("--out", required=True, help="PTEB output")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("plot-colors", help="2-D projection of manifest palette colors", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest JSONL")
    p.add_argument("--method", choices=("pca", "tsne"), default="tsne", help="projection method")
    p.add_argument("--seed", type=int, default=0, help="projection seed")
    p.add_argument("--out", required=True, help="SVG output; a CSV with the same stem is written alongside")
    p.set_defaults(func=cmd_plot_colors)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except PaletteMcmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
