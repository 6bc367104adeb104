"""Gram and Spatial Gram texture descriptors and the content/style losses.

Feature maps are tensors shaped ``(B, N, H, W)``; an unbatched ``(N, H, W)``
stack is treated as a batch of one. Losses return one value per batch
element (shape ``(B,)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .perceptual import CONTENT_LAYERS, STYLE_LAYERS

AXES = ("row", "col")


@dataclass
class StyleWeights:
    layer_weights: dict[int, float] = field(default_factory=lambda: {l: 1.0 for l in STYLE_LAYERS})
    lam: float = 100.0

    def __post_init__(self):
        if any(w < 0 for w in self.layer_weights.values()) or self.lam < 0:
            raise ValueError("style weights must be non-negative")


def _batched(f: torch.Tensor) -> torch.Tensor:
    if f.dim() == 3:
        return f[None]
    if f.dim() != 4:
        raise ValueError(f"feature maps must be (N,H,W) or (B,N,H,W), got {tuple(f.shape)}")
    return f


def gram(f: torch.Tensor) -> torch.Tensor:
    """``G_ij = <F_i, F_j> / M`` with ``M = H * W``; returns ``(B, N, N)``."""
    f = _batched(f)
    b, n, h, w = f.shape
    flat = f.reshape(b, n, h * w)
    return flat @ flat.transpose(1, 2) / (h * w)


def shift_crop(fmap: torch.Tensor, axis: str, delta: int, sign: int) -> torch.Tensor:
    """Crop of the last two dims: ``+delta`` drops the first rows/cols, ``-delta`` the last."""
    if axis not in AXES:
        raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    dim = -2 if axis == "row" else -1
    extent = fmap.shape[dim]
    if not 0 <= delta < extent:
        raise ValueError(f"shift {delta} invalid for extent {extent}")
    if delta == 0:
        return fmap
    return fmap.narrow(dim, delta, extent - delta) if sign > 0 else fmap.narrow(dim, 0, extent - delta)


def shifted_gram(f: torch.Tensor, axis: str, delta: int) -> torch.Tensor:
    """Cross-correlation of +delta and -delta crops, normalised by the full map size."""
    f = _batched(f)
    b, n, h, w = f.shape
    plus = shift_crop(f, axis, delta, 1).reshape(b, n, -1)
    minus = shift_crop(f, axis, delta, -1).reshape(b, n, -1)
    return plus @ minus.transpose(1, 2) / (h * w)


def spatial_shifts(layer: int, height: int, width: int) -> tuple[list[int], bool]:
    """Shift set ``{2, 4, ..., 2^(7-layer)}`` and whether it is the canonical one.

    The canonical set belongs to 128x128 patches. Other sizes keep the
    shifts that fit within half the smaller map extent.
    """
    if layer not in STYLE_LAYERS:
        raise ValueError(f"spatial grams are defined for layers {STYLE_LAYERS}, got {layer}")
    canonical_extent = 128 // 2 ** (layer - 1)
    limit = min(height, width) // 2
    shifts = [2 ** k for k in range(1, 8 - layer) if 2 ** k <= limit]
    if not shifts:
        raise ValueError(f"feature map {height}x{width} too small for spatial grams")
    return shifts, (height, width) == (canonical_extent, canonical_extent)


def spatial_gram(f: torch.Tensor, layer: int) -> torch.Tensor:
    """Block grid of shifted grams, shaped ``(B, 2, K, N, N)`` (axis, shift, i, j)."""
    f = _batched(f)
    shifts, _ = spatial_shifts(layer, f.shape[-2], f.shape[-1])
    rows = [torch.stack([shifted_gram(f, axis, d) for d in shifts], dim=1) for axis in AXES]
    return torch.stack(rows, dim=1)


def as_block_matrix(s: torch.Tensor) -> torch.Tensor:
    """Lay a ``(2, K, N, N)`` spatial gram out as the ``(2N, K*N)`` block matrix."""
    two, k, n, _ = s.shape
    return s.permute(0, 2, 1, 3).reshape(two * n, k * n)


def style_loss_gram(a: dict, b: dict, weights: StyleWeights | None = None) -> torch.Tensor:
    weights = weights or StyleWeights()
    total = 0
    for l, w in weights.layer_weights.items():
        if a[l].shape != b[l].shape:
            raise ValueError(f"layer {l}: shape mismatch {tuple(a[l].shape)} vs {tuple(b[l].shape)}")
        total = total + w * ((gram(a[l]) - gram(b[l])) ** 2).sum(dim=(1, 2))
    return total


def style_loss_spatial(a: dict, b: dict, weights: StyleWeights | None = None,
                       target_descriptors: dict | None = None) -> torch.Tensor:
    """Weighted squared Frobenius distance between spatial grams.

    ``target_descriptors`` may carry precomputed ``spatial_gram(b[l], l)``
    values so fixed targets are not re-described every step.
    """
    weights = weights or StyleWeights()
    total = 0
    for l, w in weights.layer_weights.items():
        sa = spatial_gram(a[l], l)
        sb = target_descriptors[l] if target_descriptors is not None else spatial_gram(b[l], l)
        if sa.shape != sb.shape:
            raise ValueError(f"layer {l}: descriptor shape mismatch {tuple(sa.shape)} vs {tuple(sb.shape)}")
        total = total + w * ((sa - sb) ** 2).sum(dim=(1, 2, 3, 4))
    return total


def content_loss(a: dict, b: dict, layers=CONTENT_LAYERS) -> torch.Tensor:
    total = 0
    for l in layers:
        if l not in a or l not in b:
            raise KeyError(f"content layer {l} missing from feature stack")
        fa, fb = _batched(a[l]), _batched(b[l])
        total = total + ((fa - fb) ** 2).sum(dim=(1, 2, 3))
    return total


def descriptor_dump(stack: dict, layers=STYLE_LAYERS) -> list[dict]:
    """JSON-ready listing of every shifted-gram block of one image."""
    out = []
    for l in layers:
        f = _batched(stack[l])[:1]
        shifts, canonical = spatial_shifts(l, f.shape[-2], f.shape[-1])
        s = spatial_gram(f, l)[0]
        for ai, axis in enumerate(AXES):
            for di, d in enumerate(shifts):
                out.append({"layer": l, "axis": axis, "delta": d, "canonical": canonical,
                            "size": list(s.shape[-2:]),
                            "values": s[ai, di].reshape(-1).tolist()})
    return out
