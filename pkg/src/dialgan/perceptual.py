"""Fixed VGG-19-style feature extractor and per-layer similarity analysis.

Images enter on the [0, 1] scale (8-bit value / 255), single-channel inputs
are replicated to three channels and the container's per-channel offsets
are subtracted. Taps are the first ReLU of each block (``ReLU{l}_1``).

Pretrained VGG-19 weights expecting 0..255 inputs can be used by storing
them in the same container with first-layer kernels multiplied by 255 and
offsets divided by 255.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from . import container
from .diffcore import activation, conv2d, parameter_checksum
from .metrics import ssim

BLOCK_SIZES = (2, 2, 4, 4, 4)
VGG_WIDTHS = (64, 128, 256, 512, 512)
LAYER_NAMES = {l: f"ReLU{l}_1" for l in range(1, 6)}
CONTENT_LAYERS = (4,)
STYLE_LAYERS = (1, 2, 3)
OFFSETS = "input_offsets"


def conv_names(block: int) -> list[str]:
    return [f"conv{block}_{i}" for i in range(1, BLOCK_SIZES[block - 1] + 1)]


def conv_count(through_block: int) -> int:
    return sum(BLOCK_SIZES[:through_block])


class FeatureNet:
    """Immutable VGG-19 convolutional trunk (blocks 1-5)."""

    def __init__(self, records: dict):
        self.widths = infer_widths(records)
        self._w: dict[str, torch.Tensor] = {}
        self._b: dict[str, torch.Tensor] = {}
        for block in range(1, 6):
            for name in conv_names(block):
                self._w[name] = torch.from_numpy(np.array(records[name + ".weight"]))
                self._b[name] = torch.from_numpy(np.array(records[name + ".bias"]))
        self.offsets = torch.from_numpy(np.array(records[OFFSETS])).view(1, 3, 1, 1)
        for t in (*self._w.values(), *self._b.values(), self.offsets):
            t.requires_grad_(False)

    def n_conv_tensors(self, through_block: int = 5) -> int:
        return conv_count(through_block)

    def checksum(self) -> str:
        names = sorted(self._w)
        return parameter_checksum([self._w[n] for n in names] + [self._b[n] for n in names]
                                  + [self.offsets])

    def tap_shape(self, layer: int, size: int = 128) -> tuple[int, int, int]:
        s = size // 2 ** (layer - 1)
        return self.widths[layer - 1], s, s

    def __call__(self, x: torch.Tensor, layers: Iterable[int]) -> dict[int, torch.Tensor]:
        """Features of a ``(B, 1|3, H, W)`` batch on the [0, 1] scale."""
        wanted = sorted(set(layers))
        if not wanted or wanted[0] < 1 or wanted[-1] > 5:
            raise ValueError(f"layers must be a non-empty subset of 1..5, got {wanted}")
        depth = wanted[-1]
        min_side = 2 ** (depth - 1)
        if min(x.shape[-2:]) < min_side:
            raise ValueError(f"input {tuple(x.shape[-2:])} too small for ReLU{depth}_1 "
                             f"(needs >= {min_side})")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        dtype = x.dtype
        h = x - self.offsets.to(dtype)
        taps: dict[int, torch.Tensor] = {}
        for block in range(1, depth + 1):
            if block > 1:
                h = F.max_pool2d(h, 2)
            for i, name in enumerate(conv_names(block)):
                h = activation(conv2d(h, self._w[name].to(dtype), 1, 1, self._b[name].to(dtype)),
                               "relu")
                if i == 0:
                    if block in wanted:
                        taps[block] = h
                    if block == depth:
                        return taps
        return taps


def infer_widths(records: dict) -> tuple[int, ...]:
    """Validate the conv trunk layout and return per-block channel widths."""
    for block in range(1, 6):
        for name in conv_names(block):
            for suffix in (".weight", ".bias"):
                if name + suffix not in records:
                    raise ValueError(f"weights container is missing tensor {name + suffix!r}")
    if OFFSETS not in records:
        raise ValueError(f"weights container is missing tensor {OFFSETS!r}")
    if np.asarray(records[OFFSETS]).shape != (3,):
        raise ValueError(f"{OFFSETS} must have shape (3,)")
    widths, prev = [], 3
    for block in range(1, 6):
        width = np.asarray(records[f"conv{block}_1.weight"]).shape[0]
        for name in conv_names(block):
            w = np.asarray(records[name + ".weight"])
            if w.shape != (width, prev, 3, 3):
                raise ValueError(f"{name}.weight has shape {w.shape}, expected {(width, prev, 3, 3)}")
            if np.asarray(records[name + ".bias"]).shape != (width,):
                raise ValueError(f"{name}.bias must have shape ({width},)")
            prev = width
        widths.append(width)
    return tuple(widths)


def load_feature_net(weights) -> FeatureNet:
    """Load from a container path, raw bytes or an already-decoded record dict."""
    if isinstance(weights, dict):
        return FeatureNet(weights)
    if isinstance(weights, (bytes, bytearray)):
        return FeatureNet(container.loads(bytes(weights)))
    return FeatureNet(container.load(weights))


def gen_fixture_weights(seed: int, widths=VGG_WIDTHS, probe_size: int = 64) -> "OrderedDict[str, np.ndarray]":
    """Deterministic stand-in weights with unit output scale per layer.

    Kernels are He-initialised and made zero-sum, so a flat input region
    gives no response and no channel is dead on positive inputs (with zero
    biases every channel of a mean-biased kernel would be always-on or
    always-off). Each layer is then rescaled so its
    pre-activation output has standard deviation 1 on a white-noise probe
    (uniform on [0, 1]) propagated through the already-calibrated layers.
    Biases and offsets are zero.
    """
    rng = np.random.default_rng(seed)
    probe = torch.from_numpy(rng.uniform(0.0, 1.0, size=(1, 3, probe_size, probe_size)))
    records: OrderedDict[str, np.ndarray] = OrderedDict()
    h, prev = probe, 3
    for block in range(1, 6):
        width = widths[block - 1]
        if block > 1:
            h = F.max_pool2d(h, 2)
        for name in conv_names(block):
            w = rng.normal(0.0, np.sqrt(2.0 / (prev * 9)), size=(width, prev, 3, 3))
            w -= w.mean(axis=(1, 2, 3), keepdims=True)
            out = F.conv2d(h, torch.from_numpy(w), padding=1)
            scale = float(out.std())
            w = (w / scale).astype(np.float32)
            records[name + ".weight"] = w
            records[name + ".bias"] = np.zeros(width, dtype=np.float32)
            h = F.relu(F.conv2d(h, torch.from_numpy(w.astype(np.float64)), padding=1))
            prev = width
    records[OFFSETS] = np.zeros(3, dtype=np.float32)
    return records


def to_unit(img) -> torch.Tensor:
    """8-bit image(s) ``(H, W)`` or ``(N, H, W)`` to a ``(N, 1, H, W)`` float tensor on [0, 1]."""
    t = torch.as_tensor(np.asarray(img), dtype=torch.get_default_dtype()) / 255.0
    if t.dim() == 2:
        t = t[None]
    return t[:, None]


def extract_features(net: FeatureNet, img, layers: Iterable[int] = (1, 2, 3, 4)) -> dict[int, torch.Tensor]:
    """Feature stack ``{layer: (N_l, H_l, W_l)}`` of one 8-bit image."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("extract_features takes a single 2-D image")
    with torch.no_grad():
        feats = net(to_unit(img), layers)
    return {l: f[0] for l, f in feats.items()}


def _map_range(a: np.ndarray, b: np.ndarray) -> float:
    return float(max(a.max(), b.max()) - min(a.min(), b.min()))


def layer_similarity(inputs, targets, net: FeatureNet, layers=(1, 2, 3, 4, 5)) -> list[dict]:
    """Per-layer MSE and SSIM between input-like and target-like feature maps.

    MSE averages squared differences over all maps of a layer. SSIM is the
    global SSIM of each map pair with ``L`` the dynamic range of that map
    pair, averaged over maps and then over pairs.
    """
    if len(inputs) == 0:
        raise ValueError("empty pair set")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    mse_acc = {l: 0.0 for l in layers}
    ssim_acc = {l: 0.0 for l in layers}
    for x, y in zip(inputs, targets):
        fx = extract_features(net, x, layers)
        fy = extract_features(net, y, layers)
        for l in layers:
            a = fx[l].double().numpy()
            b = fy[l].double().numpy()
            n, hh, ww = a.shape
            mse_acc[l] += float(np.sum((a - b) ** 2)) / (hh * ww * n)
            ssim_acc[l] += float(np.mean([ssim(a[k], b[k], _map_range(a[k], b[k])) for k in range(n)]))
    count = len(inputs)
    return [{"layer": LAYER_NAMES[l], "mse": mse_acc[l] / count, "ssim": ssim_acc[l] / count}
            for l in layers]
