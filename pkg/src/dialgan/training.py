"""Loss assembly and optimisation for the generator, critic and baselines.

Modes:

``dialectical``
    generator minimises ``content + lam * spatial_style - lam_gan * E[D(G(x)|x)]``
    while the critic minimises the WGAN-GP objective.
``texture_net``
    generator minimises ``content + lam * spatial_style``; no critic.
``l1_wgan_gp``
    generator minimises ``lam_l1 * mean|y - G(x)| - lam_gan * E[D(G(x)|x)]``.

All losses see images on the [0, 1] scale. The content term compares
ReLU4_1 features of ``G(x)`` with those of the input ``x``; the style term
compares spatial grams of ``G(x)`` with those of the target ``y``.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .diffcore import backward
from .imaging import PairSet
from .models import CriticNet, GeneratorNet, build_critic, build_generator, save_checkpoint
from .perceptual import CONTENT_LAYERS, STYLE_LAYERS, FeatureNet, gen_fixture_weights, load_feature_net, to_unit
from .texture import StyleWeights, content_loss, style_loss_gram, style_loss_spatial

log = logging.getLogger(__name__)

MODES = ("dialectical", "texture_net", "l1_wgan_gp")
LOG_FIELDS = ("step", "mode", "content", "style", "adversarial", "gp", "total", "wall_ms")
FIXTURE_FEATURE_SEED = 7


class NumericError(FloatingPointError):
    """A loss became NaN or infinite during optimisation."""


@dataclass
class TrainConfig:
    mode: str = "dialectical"
    lam: float = 100.0
    lam_gan: float = 1.0
    lam_gp: float = 10.0
    lam_l1: float = 100.0
    style_layer_weights: dict = field(default_factory=lambda: {1: 1.0, 2: 1.0, 3: 1.0})
    n_critic: int = 5
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    base_channels: int = 64
    critic_channels: int = 64
    feature_weights: str | None = None
    checkpoint_every: int = 500

    def __post_init__(self):
        self.style_layer_weights = {int(k): float(v) for k, v in self.style_layer_weights.items()}
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lam_gp > 0:
            raise ValueError("lam_gp must be positive")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if min(self.lam, self.lam_gan, self.lam_l1) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def style_weights(self) -> StyleWeights:
        return StyleWeights(dict(self.style_layer_weights), self.lam)

    @property
    def uses_critic(self) -> bool:
        # with lam_gan == 0 the critic cannot influence the generator, so it is not trained
        return self.mode in ("dialectical", "l1_wgan_gp") and self.lam_gan > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["style_layer_weights"] = {str(k): v for k, v in self.style_layer_weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LossBreakdown:
    """Per-step loss parts.

    ``content`` holds the pixel L1 term in ``l1_wgan_gp`` mode,
    ``adversarial`` is the unweighted ``E[D(G(x)|x)]`` and ``gp`` the last
    critic update's unweighted penalty (informational, not in ``total``).
    """

    content: float = 0.0
    style: float = 0.0
    adversarial: float = 0.0
    gp: float = 0.0
    total: float = 0.0

    def recombine(self, cfg: TrainConfig) -> float:
        adv = cfg.lam_gan * self.adversarial if cfg.uses_critic else 0.0
        if cfg.mode == "l1_wgan_gp":
            return cfg.lam_l1 * self.content - adv
        return self.content + cfg.lam * self.style - adv


# ---------------------------------------------------------------- feature net

@functools.lru_cache(maxsize=4)
def _cached_feature_net(path: str | None) -> FeatureNet:
    if path is None:
        return load_feature_net(gen_fixture_weights(FIXTURE_FEATURE_SEED))
    return load_feature_net(path)


def default_feature_net(path: str | None = None) -> FeatureNet:
    """Feature net from ``path``, or the seed-7 fixture weights."""
    return _cached_feature_net(None if path is None else str(path))


# ---------------------------------------------------------------- loss pieces

def critic_score(D: Callable, x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
    """Per-sample critic score: the mean of the score map."""
    s = D(x, candidate)
    return s.reshape(s.shape[0], -1).mean(dim=1) if s.dim() > 1 else s


def interpolate(y: torch.Tensor, g: torch.Tensor, eps) -> torch.Tensor:
    """``eps * y + (1 - eps) * g`` with ``eps`` a scalar or per-sample tensor."""
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(g.shape)}")
    eps_t = torch.as_tensor(eps, dtype=y.dtype)
    if (eps_t < 0).any() or (eps_t > 1).any():
        raise ValueError("eps must lie in [0, 1]")
    if eps_t.dim() == 1:
        eps_t = eps_t.view(-1, *([1] * (y.dim() - 1)))
    return eps_t * y + (1 - eps_t) * g


def gradient_norms(D: Callable, x: torch.Tensor, xhat: torch.Tensor,
                   create_graph: bool = False) -> torch.Tensor:
    """Per-sample ``||grad_xhat D(xhat|x)||_2``."""
    xhat = xhat.detach().requires_grad_(True)
    score = critic_score(D, x, xhat).sum()
    if not score.requires_grad:
        # critic independent of its candidate: zero gradient everywhere
        return torch.zeros(xhat.shape[0], dtype=xhat.dtype)
    (grad,) = backward(score, [xhat], create_graph=create_graph)
    return grad.reshape(grad.shape[0], -1).norm(dim=1)


def gradient_penalty(D: Callable, x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``(||grad_xhat D(xhat|x)||_2 - 1)^2``, differentiable in D's parameters."""
    return ((gradient_norms(D, x, xhat, create_graph=True) - 1) ** 2).mean()


def critic_loss(D: Callable, G: Callable, x: torch.Tensor, y: torch.Tensor, lam_gp: float = 10.0,
                eps: torch.Tensor | None = None, generator: torch.Generator | None = None):
    """WGAN-GP critic objective (minimised by the critic).

    Returns ``(loss, wasserstein_part, penalty)``; the penalty is unweighted.
    """
    with torch.no_grad():
        fake = G(x)
    if eps is None:
        eps = torch.rand(x.shape[0], generator=generator, dtype=x.dtype)
    wdist = critic_score(D, x, fake).mean() - critic_score(D, x, y).mean()
    gp = gradient_penalty(D, x, interpolate(y, fake, eps))
    return wdist + lam_gp * gp, wdist, gp


class LossTargets:
    """Fixed descriptors of a batch: ReLU4_1 of the inputs, style features of the targets."""

    def __init__(self, net: FeatureNet, x: torch.Tensor, y: torch.Tensor):
        with torch.no_grad():
            fx = net(x, CONTENT_LAYERS)
            fy = net(y, STYLE_LAYERS)
        self.content = {l: fx[l] for l in CONTENT_LAYERS}
        self.style = fy


def perceptual_parts(net: FeatureNet, fake: torch.Tensor, targets: LossTargets,
                     weights: StyleWeights, spatial: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-mean content and (weighted, un-lambda'd) style losses."""
    feats = net(fake, (*STYLE_LAYERS, *CONTENT_LAYERS))
    content = content_loss(feats, targets.content).mean()
    style_fn = style_loss_spatial if spatial else style_loss_gram
    style = style_fn(feats, targets.style, StyleWeights(weights.layer_weights, weights.lam)).mean()
    return content, style


def generator_loss(G: Callable, D: Callable | None, net: FeatureNet | None, x: torch.Tensor,
                   y: torch.Tensor, cfg: TrainConfig) -> tuple[torch.Tensor, LossBreakdown]:
    """Generator objective of ``cfg.mode`` and its parts."""
    fake = G(x)
    zero = fake.new_zeros(())
    style = zero
    if cfg.mode == "l1_wgan_gp":
        content = (y - fake).abs().mean()
        total = cfg.lam_l1 * content
    else:
        content, style = perceptual_parts(net, fake, LossTargets(net, x, y), cfg.style_weights)
        total = content + cfg.lam * style
    adversarial = zero
    if cfg.uses_critic:
        adversarial = critic_score(D, x, fake).mean()
        total = total - cfg.lam_gan * adversarial
    parts = LossBreakdown(float(content.detach()), float(style.detach()), float(adversarial.detach()),
                          0.0, float(total.detach()))
    return total, parts


def generator_dialectical_loss(G, D, net, x, y, cfg: TrainConfig) -> tuple[torch.Tensor, LossBreakdown]:
    if cfg.mode != "dialectical":
        raise ValueError("generator_dialectical_loss needs mode='dialectical'")
    return generator_loss(G, D, net, x, y, cfg)


# ---------------------------------------------------------------- data feed

class BatchStream:
    """Endless shuffled mini-batches of pair indices, reshuffled each epoch."""

    def __init__(self, n: int, batch_size: int, seed: int, stream: int):
        if n < 1:
            raise ValueError("empty dataset")
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng([seed, stream])
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._order.size < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return idx


def pair_tensors(pairs: PairSet) -> tuple[torch.Tensor, torch.Tensor]:
    return to_unit(pairs.inputs), to_unit(pairs.targets)


# ---------------------------------------------------------------- training loop

def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def _check(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{what} became {value} at step {step}")


@dataclass
class TrainResult:
    generator: GeneratorNet
    critic: CriticNet | None
    log: list[dict]
    config: TrainConfig

    def metadata(self) -> dict:
        return {"mode": self.config.mode, "seed": self.config.seed, "step": len(self.log),
                "config": self.config.to_dict(),
                "generator": {"base_channels": self.generator.base_channels,
                              "seed": self.generator.seed}}


def train(pairs: PairSet, cfg: TrainConfig, out_dir=None, net: FeatureNet | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Alternate ``n_critic`` critic updates with one generator update.

    Only the ``train`` split is used. With ``out_dir`` the loss log is
    written as CSV alongside periodic and final checkpoints.
    """
    train_pairs = pairs.split("train") if "train" in pairs.splits else pairs
    if len(train_pairs) == 0:
        raise ValueError("training split is empty")
    X, Y = pair_tensors(train_pairs)
    G = build_generator(cfg.seed, cfg.base_channels)
    D = build_critic(cfg.seed + 1, cfg.critic_channels) if cfg.uses_critic else None
    if cfg.mode != "l1_wgan_gp" and net is None:
        net = default_feature_net(cfg.feature_weights)
    opt_g = _adam(G.parameters(), cfg)
    opt_d = _adam(D.parameters(), cfg) if D is not None else None
    g_stream = BatchStream(len(X), cfg.batch_size, cfg.seed, 1)
    d_stream = BatchStream(len(X), cfg.batch_size, cfg.seed, 2)
    eps_gen = torch.Generator().manual_seed(cfg.seed * 7919 + 3)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        log_file = open(out / "loss_log.csv", "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        writer.writeheader()

    rows: list[dict] = []
    result = TrainResult(G, D, rows, cfg)
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            gp_value = 0.0
            if D is not None:
                for _ in range(cfg.n_critic):
                    idx = d_stream.next()
                    loss_d, _, gp = critic_loss(D, G, X[idx], Y[idx], cfg.lam_gp, generator=eps_gen)
                    opt_d.zero_grad(set_to_none=True)
                    loss_d.backward()
                    opt_d.step()
                    gp_value = float(gp.detach())
                    _check(float(loss_d.detach()), "critic loss", step)
            idx = g_stream.next()
            if D is not None:
                D.requires_grad_(False)
            total, parts = generator_loss(G, D, net, X[idx], Y[idx], cfg)
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()
            if D is not None:
                D.requires_grad_(True)
            parts.gp = gp_value
            _check(parts.total, "generator loss", step)
            row = {"step": step, "mode": cfg.mode, "content": parts.content, "style": parts.style,
                   "adversarial": parts.adversarial, "gp": parts.gp, "total": parts.total,
                   "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if progress is not None:
                progress(row)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step_{step:06d}.dgw", G, D, result.metadata())
    finally:
        if writer is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(out / "final.dgw", G, D, result.metadata())
    return result


def train_baseline(pairs: PairSet, cfg: TrainConfig, out_dir=None, net: FeatureNet | None = None,
                   progress=None) -> TrainResult:
    if cfg.mode not in ("texture_net", "l1_wgan_gp"):
        raise ValueError(f"baseline mode must be texture_net or l1_wgan_gp, got {cfg.mode!r}")
    return train(pairs, cfg, out_dir, net, progress)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["step"] = int(r["step"])
        for k in LOG_FIELDS[2:]:
            r[k] = float(r[k])
    return rows


# ---------------------------------------------------------------- pixel optimisation

def gatys_optimize(content_img, style_img, net: FeatureNet, iters: int = 100,
                   step_size: float = 4.0, mode: str = "spatial",
                   weights: StyleWeights | None = None) -> tuple[np.ndarray, list[float]]:
    """Optimise pixels of an image started at ``content_img``.

    Minimises ``content + lam * style`` where style uses spatial grams
    (``mode='spatial'``) or plain grams (``mode='gram'``). Each iteration
    moves along the sign-normalised negative gradient by ``step_size`` gray
    levels, clamps to the valid range and backtracks (halving the step) until
    the loss does not increase. Returns the 8-bit result and the loss history.
    """
    if mode not in ("spatial", "gram"):
        raise ValueError("mode must be 'spatial' or 'gram'")
    weights = weights or StyleWeights()
    x = to_unit(content_img)
    y = to_unit(style_img)
    if x.shape[-2:] != (128, 128) or y.shape != x.shape:
        raise ValueError("content and style must both be 128x128")
    targets = LossTargets(net, x, y)
    spatial = mode == "spatial"

    def objective(img):
        c, s = perceptual_parts(net, img, targets, weights, spatial)
        return c + weights.lam * s

    img = x.clone()
    with torch.no_grad():
        current = float(objective(img))
    history = [current]
    step = step_size / 255.0
    for _ in range(iters):
        if current == 0.0:
            history.append(current)
            continue
        probe = img.clone().requires_grad_(True)
        (grad,) = backward(objective(probe), [probe])
        direction = grad / grad.abs().max().clamp_min(1e-30)
        trial_step = step
        accepted = False
        with torch.no_grad():
            for _ in range(12):
                cand = (img - trial_step * direction).clamp(0, 1)
                value = float(objective(cand))
                if value <= current:
                    img, current, accepted = cand, value, True
                    break
                trial_step /= 2
        history.append(current)
        if not accepted:
            break
    out = torch.floor(img[0, 0] * 255 + 0.5).clamp(0, 255).to(torch.uint8).numpy()
    return out, history
