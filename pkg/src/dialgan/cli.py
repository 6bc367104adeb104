"""Command-line interface: ``dialgan <subcommand> ...``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import container, imaging
from .container import ContainerError
from .diffcore import NonFiniteError
from .imaging import ImageFormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dialgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _layers(text: str) -> list[int]:
    try:
        layers = sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from None
    if not layers or layers[0] < 1 or layers[-1] > 5:
        raise argparse.ArgumentTypeError("layers must be within 1..5")
    return layers


def _feature_net(path):
    from .training import default_feature_net

    return default_feature_net(path)


def _resolve_ckpt(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "final.dgw"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    params = imaging.SceneParams(width=args.width, height=args.height, n_lines=args.lines,
                                 looks_input=args.looks, blur_factor=args.blur,
                                 speckle=not args.no_speckle)
    pairs = imaging.make_pairset(args.seed, args.pairs, params, coverage=args.coverage,
                                 test_fraction=args.test_fraction)
    imaging.save_pairset(pairs, args.out)
    print(f"wrote {len(pairs)} pairs ({pairs.splits.count('test')} test) to {args.out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    img = imaging.load_image(args.inp)
    vmax = args.vmax if args.vmax is not None else imaging.choose_vmax(img, args.coverage)
    imaging.store_pgm(args.out, imaging.quantize(img, vmax))
    print(f"vmax={vmax:g}")
    return EXIT_OK


def cmd_tile(args) -> int:
    if not 0 <= args.overlap < 1:
        raise UsageError("--overlap must be in [0, 1)")
    stride = max(1, round(args.size * (1 - args.overlap)))
    img = imaging.load_pgm(args.inp)
    patches, grid = imaging.tile(img, args.size, stride, cover_edges=args.cover_edges)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, p in enumerate(patches):
        imaging.store_pgm(out / f"{k:05d}.pgm", p)
    (out / "grid.json").write_text(json.dumps(grid.to_dict()))
    print(f"{len(patches)} patches -> {out}")
    return EXIT_OK


def cmd_compose(args) -> int:
    src = Path(args.dir)
    grid = imaging.PatchGrid.from_dict(json.loads((src / "grid.json").read_text()))
    patches = [imaging.load_pgm(src / f"{k:05d}.pgm") for k in range(len(grid))]
    imaging.store_pgm(args.out, imaging.compose(patches, grid))
    return EXIT_OK


def cmd_features(args) -> int:
    from .perceptual import LAYER_NAMES, extract_features, layer_similarity
    from .texture import descriptor_dump

    net = _feature_net(args.weights)
    if args.pairs:
        pairs = imaging.load_pairset(args.pairs)
        if args.split != "all":
            pairs = pairs.split(args.split)
        rows = layer_similarity(pairs.inputs, pairs.targets, net, args.layers)
        report = {"pairs": len(pairs), "rows": rows}
        print(f"{'Layers':<10}{'MSE':>10}{'SSIM':>10}")
        for r in rows:
            print(f"{r['layer']:<10}{r['mse']:>10.4f}{r['ssim']:>10.4f}")
    else:
        if not args.inp:
            raise UsageError("features needs --in or --pairs")
        img = imaging.load_pgm(args.inp)
        feats = extract_features(net, img, args.layers)
        report = {"image": args.inp, "layers": []}
        for l, f in feats.items():
            a = f.double().numpy()
            report["layers"].append({"layer": LAYER_NAMES[l], "maps": a.shape[0],
                                     "height": a.shape[1], "width": a.shape[2],
                                     "mean": float(a.mean()), "std": float(a.std()),
                                     "max": float(a.max()), "zero_fraction": float((a == 0).mean())})
        if args.descriptors:
            style = [l for l in (1, 2, 3) if l in feats]
            Path(args.descriptors).write_text(json.dumps(descriptor_dump(feats, style)))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_gatys(args) -> int:
    from .training import gatys_optimize

    content = imaging.load_pgm(args.content)
    style = imaging.load_pgm(args.style)
    out, history = gatys_optimize(content, style, _feature_net(args.weights), args.iters,
                                  args.step_size, args.mode)
    imaging.store_pgm(args.out, out)
    print(f"loss {history[0]:.6g} -> {history[-1]:.6g} in {len(history) - 1} iterations")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    cfg_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.mode:
        cfg_dict["mode"] = args.mode
    if args.steps is not None:
        cfg_dict["steps"] = args.steps
    cfg = TrainConfig.from_dict(cfg_dict)
    pairs = imaging.load_pairset(args.data)
    every = max(1, cfg.steps // 20) if cfg.steps else 1

    def progress(row):
        if row["step"] % every == 0 or row["step"] == cfg.steps:
            log.info("step %d total %.6g content %.6g style %.6g adv %.6g gp %.6g",
                     row["step"], row["total"], row["content"], row["style"],
                     row["adversarial"], row["gp"])

    train(pairs, cfg, args.out, progress=progress)
    print(f"checkpoint: {Path(args.out) / 'final.dgw'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    from .evaluation import translate_scene
    from .models import load_checkpoint

    G, _, _ = load_checkpoint(_resolve_ckpt(args.ckpt))
    scene = imaging.load_pgm(args.inp)
    imaging.store_pgm(args.out, translate_scene(G, scene))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import comparison_grid, evaluate_checkpoints

    paths = [_resolve_ckpt(p) for p in args.ckpt.split(",") if p]
    pairs = imaging.load_pairset(args.data)
    if args.split != "all":
        pairs = pairs.split(args.split)
    report = evaluate_checkpoints(paths, pairs, include_input=args.include_input)
    report.write_csv(args.out)
    print(report.table())
    if args.grid:
        imaging.store_pgm(args.grid, comparison_grid(report, pairs, args.grid_rows))
    return EXIT_OK


def cmd_weights(args) -> int:
    from .perceptual import gen_fixture_weights

    container.save(args.out, gen_fixture_weights(args.seed))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dialgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="build a synthetic paired patch set")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--pairs", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lines", type=int, default=None)
    s.add_argument("--looks", type=float, default=5.0)
    s.add_argument("--blur", type=int, default=4)
    s.add_argument("--no-speckle", action="store_true")
    s.add_argument("--coverage", type=float, default=0.98)
    s.add_argument("--test-fraction", type=float, default=imaging.TEST_FRACTION)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("quantize", help="8-bit quantize an amplitude image")
    s.add_argument("--in", dest="inp", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--vmax", type=float)
    g.add_argument("--coverage", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("tile", help="cut a scene into overlapping patches")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--cover-edges", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("compose", help="reassemble patches written by 'tile'")
    s.add_argument("--dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("features", help="feature statistics or per-layer similarity report")
    s.add_argument("--weights", default=None, help="DGW1 container (default: seed-7 fixture)")
    s.add_argument("--in", dest="inp")
    s.add_argument("--pairs", help="pair directory: emit the per-layer MSE/SSIM table")
    s.add_argument("--split", choices=("train", "test", "all"), default="all")
    s.add_argument("--layers", type=_layers, default=[1, 2, 3, 4, 5])
    s.add_argument("--descriptors", help="also dump spatial-gram blocks as JSON")
    s.add_argument("--out")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("gatys", help="pixel-space optimisation baseline")
    s.add_argument("--content", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--weights", default=None)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--step-size", type=float, default=4.0)
    s.add_argument("--mode", choices=("spatial", "gram"), default="spatial")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gatys)

    s = sub.add_parser("train", help="train a generator")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("dialectical", "texture_net", "l1_wgan_gp"))
    s.add_argument("--config")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="translate a full scene patch by patch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="MSE/SSIM/ENL report for one or more checkpoints")
    s.add_argument("--ckpt", required=True, help="comma-separated checkpoint files or dirs")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--include-input", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--grid")
    s.add_argument("--grid-rows", type=int, default=4)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("weights", help="write fixture feature-net weights")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weights)
    return p


def main(argv=None) -> int:
    from .training import NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dialgan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"dialgan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageFormatError, ContainerError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"dialgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
