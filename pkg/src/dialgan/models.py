"""U-Net generator and PatchGAN critic.

Both networks work on single-channel images on the [0, 1] scale. The
generator's tanh output is mapped affinely onto [0, 1] (``(v + 1) / 2``),
i.e. ``(v + 1) * 127.5`` in 8-bit units.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import container
from .diffcore import activation, conv2d, conv2d_transpose, instance_norm, parameter_checksum

INIT_STD = 0.02
PATCH = 128


def _normal(gen: torch.Generator, *shape) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen) * INIT_STD)


def _zeros(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape))


class GeneratorNet(nn.Module):
    """Six-stage U-Net: 4x4 stride-2 convs down to a 2x2 bottleneck and back.

    Encoder stage ``k`` feeds decoder stage ``7 - k`` through a skip
    concatenation. Stages listed in ``disabled_skips`` pass zeros instead
    (ablation only).
    """

    def __init__(self, base_channels: int = 64, seed: int = 0):
        super().__init__()
        if base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        self.base_channels = base_channels
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        b = base_channels
        enc = [b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b]
        self.enc_channels = enc
        self.enc_w = nn.ParameterList()
        prev = 1
        for c in enc:
            self.enc_w.append(_normal(gen, c, prev, 4, 4))
            prev = c
        self.enc_b0 = _zeros(enc[0])
        # decoder j outputs dec[j]; its kernel is (in, out, 4, 4) for the transposed conv
        dec = [8 * b, 8 * b, 4 * b, 2 * b, b, 1]
        self.dec_w = nn.ParameterList()
        prev = enc[-1]
        for j, c in enumerate(dec):
            self.dec_w.append(_normal(gen, prev, c, 4, 4))
            prev = 2 * c if j < 5 else c
        self.dec_b_last = _zeros(1)
        self.disabled_skips: set[int] = set()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (PATCH, PATCH) or x.shape[1] != 1:
            raise ValueError(f"generator expects (B, 1, {PATCH}, {PATCH}), got {tuple(x.shape)}")
        h = x * 2 - 1
        skips = []
        for k, w in enumerate(self.enc_w):
            if k == 0:
                h = conv2d(h, w, 2, 1, self.enc_b0)
            else:
                h = instance_norm(conv2d(activation(h, "leaky_relu"), w, 2, 1))
            skips.append(h)
        for j, w in enumerate(self.dec_w):
            h = activation(h, "relu")
            if j < 5:
                h = instance_norm(conv2d_transpose(h, w, 2, 1))
                stage = 5 - j  # encoder stage (1-based) whose skip joins here
                skip = skips[stage - 1]
                if stage in self.disabled_skips:
                    skip = torch.zeros_like(skip)
                h = torch.cat([h, skip], dim=1)
            else:
                h = conv2d_transpose(h, w, 2, 1, self.dec_b_last)
        return (activation(h, "tanh") + 1) / 2

    def checksum(self) -> str:
        return parameter_checksum(self.parameters())


class CriticNet(nn.Module):
    """PatchGAN critic on the channel concatenation of condition and candidate.

    Four 4x4 conv stages (strides 2, 2, 2, 1) with leaky ReLU and no
    normalisation, then a 4x4 stride-1 conv to an unbounded score map.
    """

    strides = (2, 2, 2, 1, 1)

    def __init__(self, base_channels: int = 64, seed: int = 0):
        super().__init__()
        if base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        self.base_channels = base_channels
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        b = base_channels
        chans = [2, b, 2 * b, 4 * b, 8 * b, 1]
        self.w = nn.ParameterList([_normal(gen, chans[i + 1], chans[i], 4, 4) for i in range(5)])
        self.b = nn.ParameterList([_zeros(chans[i + 1]) for i in range(5)])

    def forward(self, x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if x.shape != candidate.shape:
            raise ValueError(f"condition {tuple(x.shape)} and candidate {tuple(candidate.shape)} differ")
        h = torch.cat([x, candidate], dim=1)
        for i, (w, b) in enumerate(zip(self.w, self.b)):
            h = conv2d(h, w, self.strides[i], 1, b)
            if i < 4:
                h = activation(h, "leaky_relu")
        return h

    def checksum(self) -> str:
        return parameter_checksum(self.parameters())


def build_generator(seed: int = 0, base_channels: int = 64) -> GeneratorNet:
    return GeneratorNet(base_channels, seed)


def build_critic(seed: int = 0, base_channels: int = 64) -> CriticNet:
    return CriticNet(base_channels, seed)


def to_uint8(v: torch.Tensor) -> np.ndarray:
    """[0, 1] tensor to 8-bit, rounding half up."""
    return torch.floor(v.detach() * 255 + 0.5).clamp(0, 255).to(torch.uint8).numpy()


def _patch_tensor(img) -> torch.Tensor:
    img = np.asarray(img)
    if img.shape[-2:] != (PATCH, PATCH):
        raise ValueError(f"expected {PATCH}x{PATCH} patch, got {img.shape}")
    t = torch.as_tensor(img, dtype=torch.get_default_dtype()) / 255.0
    return t.reshape(-1, 1, PATCH, PATCH)


def generate(G: GeneratorNet, x) -> np.ndarray:
    """Translate one 8-bit patch (or an ``(N, 128, 128)`` stack)."""
    x = np.asarray(x)
    with torch.no_grad():
        out = to_uint8(G(_patch_tensor(x))[:, 0])
    return out[0] if x.ndim == 2 else out


def criticize(D: CriticNet, x, candidate) -> float:
    """Mean critic score of an 8-bit candidate patch given its 8-bit condition."""
    with torch.no_grad():
        return float(D(_patch_tensor(x), _patch_tensor(candidate)).mean())


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, G: GeneratorNet, D: CriticNet | None = None, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("generator", {"base_channels": G.base_channels, "seed": G.seed})
    if D is not None:
        meta.setdefault("critic", {"base_channels": D.base_channels, "seed": D.seed})
    records = [(f"generator.{k}", v.detach().float().numpy()) for k, v in G.state_dict().items()]
    if D is not None:
        records += [(f"critic.{k}", v.detach().float().numpy()) for k, v in D.state_dict().items()]
    records.append((container.METADATA, container.encode_metadata(meta)))
    container.save(path, records)


def _load_into(module: nn.Module, records: dict, prefix: str) -> None:
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in records.items()
             if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise ValueError(f"checkpoint is missing {sorted(prefix + m for m in missing)}")
    module.load_state_dict(state)


def load_checkpoint(path) -> tuple[GeneratorNet, CriticNet | None, dict]:
    records = container.load(path)
    if container.METADATA not in records:
        raise ValueError("checkpoint has no metadata record")
    meta = container.decode_metadata(records[container.METADATA])
    g_cfg = meta["generator"]
    G = GeneratorNet(g_cfg["base_channels"], g_cfg.get("seed", 0))
    _load_into(G, records, "generator.")
    D = None
    if "critic" in meta and any(k.startswith("critic.") for k in records):
        D = CriticNet(meta["critic"]["base_channels"], meta["critic"].get("seed", 0))
        _load_into(D, records, "critic.")
    return G, D, meta
