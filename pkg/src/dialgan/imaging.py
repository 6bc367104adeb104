"""Amplitude quantization, patch tiling, file formats and synthetic scenes.

Amplitude images are 2-D ``float32`` arrays (non-negative), quantized
images are 2-D ``uint8`` arrays. Both are indexed ``[row, col]``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PATCH_SIZE = 128
PATCH_STRIDE = 64
# 224 / (1860 + 224): held-out share of the original study's patch split
TEST_FRACTION = 224 / 2084


class ImageFormatError(ValueError):
    """Malformed or truncated image file."""


# ---------------------------------------------------------------- quantization

def quantize(img: np.ndarray, vmax: float) -> np.ndarray:
    """Uniform 8-bit quantization of ``[0, vmax]``; values above vmax saturate."""
    if not vmax > 0:
        raise ValueError(f"vmax must be positive, got {vmax}")
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, vmax)
    return np.clip(np.floor(255.0 * v / vmax), 0, 255).astype(np.uint8)


def choose_vmax(img: np.ndarray, coverage: float = 0.98) -> float:
    """Smallest value covering at least ``coverage`` of the pixels."""
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    values = np.sort(np.asarray(img, dtype=np.float64).ravel())
    if values.size == 0:
        raise ValueError("empty image")
    k = max(math.ceil(coverage * values.size - 1e-9), 1)
    return float(values[k - 1])


# ---------------------------------------------------------------- tiling

@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    height: int
    width: int
    origins: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.origins)

    def to_dict(self) -> dict:
        return {"patch_size": self.patch_size, "stride": self.stride, "height": self.height,
                "width": self.width, "origins": [list(o) for o in self.origins]}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchGrid":
        return cls(d["patch_size"], d["stride"], d["height"], d["width"],
                   tuple(tuple(o) for o in d["origins"]))


def _axis_origins(extent: int, size: int, stride: int, cover_edges: bool) -> list[int]:
    starts = list(range(0, extent - size + 1, stride))
    if cover_edges and starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def make_grid(height: int, width: int, patch_size: int = PATCH_SIZE, stride: int = PATCH_STRIDE,
              cover_edges: bool = False) -> PatchGrid:
    """Row-major patch origins at multiples of ``stride``.

    With ``cover_edges`` an extra edge-flush row/column of origins is added
    when the regular grid would leave a border uncovered.
    """
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    if height < patch_size or width < patch_size:
        raise ValueError(f"image {height}x{width} is smaller than patch size {patch_size}")
    rows = _axis_origins(height, patch_size, stride, cover_edges)
    cols = _axis_origins(width, patch_size, stride, cover_edges)
    return PatchGrid(patch_size, stride, height, width, tuple((r, c) for r in rows for c in cols))


def tile(img: np.ndarray, patch_size: int = PATCH_SIZE, stride: int = PATCH_STRIDE,
         cover_edges: bool = False) -> tuple[list[np.ndarray], PatchGrid]:
    img = np.asarray(img)
    grid = make_grid(img.shape[0], img.shape[1], patch_size, stride, cover_edges)
    patches = [img[r:r + patch_size, c:c + patch_size].copy() for r, c in grid.origins]
    return patches, grid


def compose(patches, grid: PatchGrid) -> np.ndarray:
    """Reassemble patches; overlaps take the mean rounded half-up."""
    if len(patches) != len(grid.origins):
        raise ValueError(f"{len(patches)} patches for a grid of {len(grid.origins)}")
    ps = grid.patch_size
    total = np.zeros((grid.height, grid.width), dtype=np.int64)
    count = np.zeros((grid.height, grid.width), dtype=np.int64)
    for p, (r, c) in zip(patches, grid.origins):
        p = np.asarray(p)
        if p.shape != (ps, ps):
            raise ValueError(f"patch shape {p.shape} != {(ps, ps)}")
        total[r:r + ps, c:c + ps] += p
        count[r:r + ps, c:c + ps] += 1
    out = np.zeros_like(total)
    covered = count > 0
    out[covered] = (2 * total[covered] + count[covered]) // (2 * count[covered])
    return np.clip(out, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- synthetic scenes

@dataclass
class SceneParams:
    width: int = PATCH_SIZE
    height: int = PATCH_SIZE
    n_lines: int | None = None  # default scales with area: 8 per 128x128
    looks_input: float = 5.0
    blur_factor: int = 4
    speckle: bool = True

    def lines(self) -> int:
        if self.n_lines is not None:
            return self.n_lines
        return max(1, round(8 * self.width * self.height / PATCH_SIZE ** 2))


def synth_target(rng: np.random.Generator, p: SceneParams) -> np.ndarray:
    """Dark background with bright axis-aligned segments and building blocks."""
    h, w = p.height, p.width
    img = np.full((h, w), rng.uniform(30.0, 50.0), dtype=np.float64)
    for _ in range(p.lines()):
        horizontal = rng.random() < 0.5
        if rng.random() < 0.6:
            # thin strong scatterer line
            length, thick = rng.integers(16, 81), rng.integers(2, 5)
            level = rng.uniform(400.0, 700.0)
        else:
            # wider block with moderate return
            length, thick = rng.integers(12, 41), rng.integers(6, 17)
            level = rng.uniform(150.0, 300.0)
        rh, rw = (thick, length) if horizontal else (length, thick)
        r0 = rng.integers(0, max(h - rh, 0) + 1)
        c0 = rng.integers(0, max(w - rw, 0) + 1)
        region = img[r0:r0 + rh, c0:c0 + rw]
        np.maximum(region, level, out=region)
    return img


def degrade(target: np.ndarray, rng: np.random.Generator, p: SceneParams) -> np.ndarray:
    """Box blur, decimate, nearest upsample, multiplicative gamma speckle."""
    img = np.asarray(target, dtype=np.float64)
    bf = int(p.blur_factor)
    if bf < 1:
        raise ValueError("blur_factor must be >= 1")
    if bf > 1:
        blurred = ndimage.uniform_filter(img, size=bf, mode="nearest")
        low = blurred[::bf, ::bf]
        img = np.repeat(np.repeat(low, bf, axis=0), bf, axis=1)[:target.shape[0], :target.shape[1]]
    if p.speckle:
        img = img * speckle_field(rng, img.shape, p.looks_input)
    return img


def speckle_field(rng: np.random.Generator, shape, looks: float) -> np.ndarray:
    """Unit-mean gamma speckle with shape ``looks`` (variance 1/looks)."""
    if not looks > 0:
        raise ValueError("looks must be positive")
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def synth_pair(seed: int, params: SceneParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (input-like, target-like) amplitude scene pair."""
    p = params or SceneParams()
    if p.width < PATCH_SIZE or p.height < PATCH_SIZE:
        raise ValueError(f"scene must be at least {PATCH_SIZE}x{PATCH_SIZE}")
    rng = np.random.default_rng(seed)
    target = synth_target(rng, p)
    inp = degrade(target, rng, p)
    return inp.astype(np.float32), target.astype(np.float32)


# ---------------------------------------------------------------- pair sets

@dataclass
class PairSet:
    inputs: np.ndarray  # (N, P, P) uint8
    targets: np.ndarray  # (N, P, P) uint8
    indices: list[int]
    splits: list[str]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.indices)

    def split(self, name: str) -> "PairSet":
        keep = [i for i, s in enumerate(self.splits) if s == name]
        return PairSet(self.inputs[keep], self.targets[keep], [self.indices[i] for i in keep],
                       [name] * len(keep), self.manifest)

    def subset(self, n: int) -> "PairSet":
        return PairSet(self.inputs[:n], self.targets[:n], self.indices[:n], self.splits[:n],
                       self.manifest)


def split_for(indices, seed: int, test_fraction: float = TEST_FRACTION) -> list[str]:
    """Hash-ranked split: the ``round(N * test_fraction)`` lowest hashes are test."""
    n_test = round(len(indices) * test_fraction)
    key = {i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest() for i in indices}
    test = set(sorted(indices, key=key.__getitem__)[:n_test])
    return ["test" if i in test else "train" for i in indices]


def make_pairset(seed: int, n_pairs: int, params: SceneParams | None = None,
                 coverage: float = 0.98, test_fraction: float = TEST_FRACTION) -> PairSet:
    """Synthesize scenes until ``n_pairs`` co-registered patch pairs exist.

    Each sensor is quantized with a single range covering ``coverage`` of
    all its pixels across the scene set, as done for whole acquisitions.
    """
    p = params or SceneParams()
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    per_scene = len(make_grid(p.height, p.width))
    n_scenes = math.ceil(n_pairs / per_scene)
    scenes = [synth_pair(seed * 100003 + k, p) for k in range(n_scenes)]
    vmax_x = choose_vmax(np.stack([s[0] for s in scenes]), coverage)
    vmax_y = choose_vmax(np.stack([s[1] for s in scenes]), coverage)
    xs, ys, origins = [], [], []
    for k, (ax, ay) in enumerate(scenes):
        px, grid = tile(quantize(ax, vmax_x))
        py, _ = tile(quantize(ay, vmax_y))
        xs += px
        ys += py
        origins += [(k, r, c) for r, c in grid.origins]
    xs, ys, origins = xs[:n_pairs], ys[:n_pairs], origins[:n_pairs]
    indices = list(range(n_pairs))
    manifest = {
        "seed": seed,
        "n_pairs": n_pairs,
        "scene": {"width": p.width, "height": p.height, "n_lines": p.lines(),
                  "looks_input": p.looks_input, "blur_factor": p.blur_factor,
                  "speckle": p.speckle},
        "coverage": coverage,
        "vmax_input": vmax_x,
        "vmax_target": vmax_y,
        "test_fraction": test_fraction,
        "grid": {"patch_size": PATCH_SIZE, "stride": PATCH_STRIDE,
                 "origins": [list(o) for o in origins]},
    }
    return PairSet(np.stack(xs), np.stack(ys), indices, split_for(indices, seed, test_fraction),
                   manifest)


def save_pairset(pairs: PairSet, out_dir) -> None:
    out = Path(out_dir)
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
    for x, y, idx, split in zip(pairs.inputs, pairs.targets, pairs.indices, pairs.splits):
        store_pgm(out / split / f"{idx}_x.pgm", x)
        store_pgm(out / split / f"{idx}_y.pgm", y)
    manifest = dict(pairs.manifest)
    manifest["splits"] = {str(i): s for i, s in zip(pairs.indices, pairs.splits)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_pairset(path) -> PairSet:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"pair directory not found: {root}")
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    entries = []
    for split in ("train", "test"):
        for f in (root / split).glob("*_x.pgm"):
            entries.append((int(f.name[:-len("_x.pgm")]), split))
    if not entries:
        raise ImageFormatError(f"no pairs found under {root}")
    entries.sort()
    xs, ys = [], []
    for idx, split in entries:
        x = load_pgm(root / split / f"{idx}_x.pgm")
        y = load_pgm(root / split / f"{idx}_y.pgm")
        if x.shape != y.shape:
            raise ImageFormatError(f"pair {idx}: input {x.shape} vs target {y.shape}")
        xs.append(x)
        ys.append(y)
    return PairSet(np.stack(xs), np.stack(ys), [e[0] for e in entries], [e[1] for e in entries],
                   manifest)


# ---------------------------------------------------------------- file formats

def store_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ValueError("PGM values must lie in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def _pgm_header(data: bytes) -> tuple[list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ImageFormatError(f"bad PGM magic {tokens[0]!r}")
    try:
        values = [int(t) for t in tokens[1:]]
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric PGM header field: {exc}") from None
    # exactly one whitespace byte separates maxval from the raster
    return values, pos + 1


def load_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), offset = _pgm_header(data)
    if w < 1 or h < 1 or w * h > 2 ** 31:
        raise ImageFormatError(f"invalid PGM dimensions {w}x{h}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported PGM maxval {maxval}")
    payload = data[offset:offset + w * h]
    if len(payload) != w * h:
        raise ImageFormatError(f"truncated PGM payload: {len(payload)} of {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def store_f32(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("amplitude images must be 2-D")
    h, w = img.shape
    Path(path).write_bytes(np.ascontiguousarray(img).tobytes())
    _sidecar(path).write_text(json.dumps({"width": w, "height": h, "dtype": "f32le"}))


def load_f32(path) -> np.ndarray:
    try:
        meta = json.loads(_sidecar(path).read_text())
        w, h = int(meta["width"]), int(meta["height"])
    except (OSError, ValueError, KeyError) as exc:
        raise ImageFormatError(f"bad or missing sidecar for {path}: {exc}") from None
    if meta.get("dtype") != "f32le":
        raise ImageFormatError(f"unsupported dtype {meta.get('dtype')!r}")
    if w < 1 or h < 1 or w * h > 2 ** 31:
        raise ImageFormatError(f"invalid dimensions {w}x{h}")
    data = Path(path).read_bytes()
    if len(data) != 4 * w * h:
        raise ImageFormatError(f"payload has {len(data)} bytes, expected {4 * w * h}")
    return np.frombuffer(data, dtype="<f4").reshape(h, w).astype(np.float32)


def load_image(path) -> np.ndarray:
    suffix = os.path.splitext(str(path))[1].lower()
    if suffix == ".pgm":
        return load_pgm(path)
    if suffix == ".f32":
        return load_f32(path)
    raise ImageFormatError(f"unknown image format {suffix!r}")


def store_image(path, img: np.ndarray) -> None:
    suffix = os.path.splitext(str(path))[1].lower()
    if suffix == ".pgm":
        store_pgm(path, img)
    elif suffix == ".f32":
        store_f32(path, img)
    else:
        raise ImageFormatError(f"unknown image format {suffix!r}")
