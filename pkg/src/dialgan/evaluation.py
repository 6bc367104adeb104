"""Per-pair evaluation reports and full-scene translation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .imaging import PATCH_SIZE, PATCH_STRIDE, PairSet, compose, store_pgm, tile
from .metrics import UndefinedMetric, enl, mse, ssim
from .models import GeneratorNet, generate, load_checkpoint

TEST_SET = "test set"
REPORT_FIELDS = ("pair", "method", "mse", "ssim", "enl")

Translator = Callable[[np.ndarray], np.ndarray]


@dataclass
class MetricRow:
    pair: str
    method: str
    mse: float
    ssim: float
    enl: float  # NaN when undefined (constant output)


@dataclass
class EvalReport:
    rows: list[MetricRow]
    config: dict = field(default_factory=dict)
    outputs: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    scene_paths: list[str] = field(default_factory=list)

    def aggregate(self, method: str) -> MetricRow:
        return next(r for r in self.rows if r.method == method and r.pair == TEST_SET)

    def per_pair(self, method: str) -> list[MetricRow]:
        return [r for r in self.rows if r.method == method and r.pair != TEST_SET]

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([r.pair, r.method, f"{r.mse:.6f}", f"{r.ssim:.6f}",
                            "undefined" if math.isnan(r.enl) else f"{r.enl:.6f}"])

    def table(self) -> str:
        lines = [f"{'pair':>10}  {'method':<14} {'MSE':>8} {'SSIM':>8} {'ENL':>8}"]
        for r in self.rows:
            lines.append(f"{r.pair:>10}  {r.method:<14} {r.mse:8.4f} {r.ssim:8.4f} {r.enl:8.4f}")
        return "\n".join(lines)


def _enl_or_nan(img) -> float:
    try:
        return enl(img)
    except UndefinedMetric:
        return math.nan


def checkpoint_translator(path) -> tuple[str, Translator]:
    G, _, meta = load_checkpoint(path)
    return meta.get("mode", Path(path).stem), lambda x: generate(G, x)


def evaluate(methods: dict[str, Translator], pairs: PairSet, include_input: bool = False) -> EvalReport:
    """Score each method's outputs against the targets of ``pairs``.

    ENL is measured on the produced image. Every method gets one row per
    pair plus a ``test set`` row holding the arithmetic means (ENL over
    pairs where it is defined). With ``include_input`` the untranslated
    inputs are scored as method ``input``.
    """
    if len(pairs) == 0:
        raise ValueError("empty test set")
    todo = dict(methods)
    if include_input:
        todo = {"input": lambda x: np.asarray(x), **todo}
    rows: list[MetricRow] = []
    outputs = {}
    for name in sorted(todo):
        out = np.asarray(todo[name](pairs.inputs))
        if out.shape != pairs.targets.shape:
            raise ValueError(f"method {name!r} produced {out.shape}, expected {pairs.targets.shape}")
        outputs[name] = out
        per = [MetricRow(str(idx), name, mse(o, y), ssim(o, y), _enl_or_nan(o))
               for idx, o, y in zip(pairs.indices, out, pairs.targets)]
        per.sort(key=lambda r: int(r.pair))
        enls = [r.enl for r in per if not math.isnan(r.enl)]
        agg = MetricRow(TEST_SET, name, float(np.mean([r.mse for r in per])),
                        float(np.mean([r.ssim for r in per])),
                        float(np.mean(enls)) if enls else math.nan)
        rows += per + [agg]
    return EvalReport(rows, outputs=outputs)


def evaluate_checkpoints(paths, pairs: PairSet, include_input: bool = False) -> EvalReport:
    methods: dict[str, Translator] = {}
    for p in paths:
        name, fn = checkpoint_translator(p)
        if name in methods:
            name = f"{name}:{Path(p).stem}"
        methods[name] = fn
    report = evaluate(methods, pairs, include_input)
    report.config = {"checkpoints": [str(p) for p in paths]}
    return report


def comparison_grid(report: EvalReport, pairs: PairSet, n: int = 4, gap: int = 4) -> np.ndarray:
    """Rows of ``input | method outputs... | target`` for the first ``n`` pairs."""
    names = [m for m in report.methods() if m != "input"]
    n = min(n, len(pairs))
    ps = pairs.inputs.shape[-1]
    cols = 2 + len(names)
    grid = np.full((n * ps + (n - 1) * gap, cols * ps + (cols - 1) * gap), 255, dtype=np.uint8)
    for i in range(n):
        tiles = [pairs.inputs[i]] + [report.outputs[m][i] for m in names] + [pairs.targets[i]]
        for j, t in enumerate(tiles):
            r, c = i * (ps + gap), j * (ps + gap)
            grid[r:r + ps, c:c + ps] = t
    return grid


def translate_scene(model: GeneratorNet | Translator, scene: np.ndarray,
                    stride: int = PATCH_STRIDE) -> np.ndarray:
    """Tile with edge coverage, translate every patch and blend overlaps by mean."""
    scene = np.asarray(scene)
    if scene.ndim != 2 or min(scene.shape) < PATCH_SIZE:
        raise ValueError(f"scene must be at least {PATCH_SIZE}x{PATCH_SIZE}, got {scene.shape}")
    fn = (lambda x: generate(model, x)) if isinstance(model, GeneratorNet) else model
    patches, grid = tile(scene, PATCH_SIZE, stride, cover_edges=True)
    out = np.asarray(fn(np.stack(patches)))
    return compose(list(out), grid)


def save_grid(path, grid: np.ndarray) -> None:
    store_pgm(path, grid)
