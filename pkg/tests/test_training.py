import math

import numpy as np
import pytest
import torch

from dialgan.imaging import make_pairset
from dialgan.models import build_critic, build_generator, load_checkpoint
from dialgan.texture import StyleWeights
from dialgan.training import (
    BatchStream,
    LossBreakdown,
    LossTargets,
    NumericError,
    TrainConfig,
    critic_loss,
    gatys_optimize,
    generator_dialectical_loss,
    generator_loss,
    gradient_norms,
    gradient_penalty,
    interpolate,
    perceptual_parts,
    read_loss_log,
    train,
    train_baseline,
)

K = 16 * 16


def unit_slope(scale=1.0):
    """Critic ``scale * sum(candidate) / sqrt(K)``: gradient norm exactly ``scale``."""
    return lambda x, c: scale * c.reshape(c.shape[0], -1).sum(dim=1) / math.sqrt(c[0].numel())


def constant_critic(x, c):
    return torch.zeros(c.shape[0], dtype=c.dtype)


@pytest.fixture(scope="module")
def tiny_pairs():
    return make_pairset(0, 12)


def small_cfg(**kw):
    base = dict(steps=3, batch_size=2, base_channels=2, critic_channels=2, n_critic=2, checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config

def test_config_validation_and_round_trip(tmp_path):
    cfg = TrainConfig(mode="texture_net", lam=5.0, style_layer_weights={"1": 2.0})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    (tmp_path / "c.json").write_text('{"mode": "l1_wgan_gp", "steps": 7}')
    assert TrainConfig.from_json(tmp_path / "c.json").steps == 7
    for bad in ({"mode": "x"}, {"lam_gp": 0}, {"n_critic": 0}, {"lam": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.lam_gan, cfg.lam_gp, cfg.lam_l1, cfg.n_critic) == (100.0, 1.0, 10.0, 100.0, 5)
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.steps, cfg.batch_size) == (1e-4, 0.0, 0.9, 2000, 4)
    assert cfg.style_layer_weights == {1: 1.0, 2: 1.0, 3: 1.0}


# ---------------------------------------------------------------- interpolation and penalty

def test_interpolate_examples():
    y = torch.full((1, 1, 4, 4), 255.0)
    g = torch.zeros(1, 1, 4, 4)
    assert torch.equal(interpolate(y, g, 1.0), y)
    assert torch.equal(interpolate(y, g, 0.0), g)
    assert torch.all(interpolate(y, g, 0.5) == 127.5)
    mixed = interpolate(torch.ones(2, 1, 2, 2), torch.zeros(2, 1, 2, 2), torch.tensor([0.25, 0.75]))
    assert mixed[:, 0, 0, 0].tolist() == [0.25, 0.75]
    with pytest.raises(ValueError):
        interpolate(y, g, 1.5)
    with pytest.raises(ValueError):
        interpolate(y, torch.zeros(1, 1, 2, 2), 0.5)


@pytest.mark.parametrize("scale,expected", [(1.0, 0.0), (2.0, 1.0), (0.0, 1.0)])
def test_gradient_penalty_analytic(scale, expected):
    x = torch.rand(3, 1, 16, 16)
    xhat = torch.rand(3, 1, 16, 16)
    assert float(gradient_penalty(unit_slope(scale), x, xhat)) == pytest.approx(expected, abs=1e-6)
    assert gradient_norms(unit_slope(scale), x, xhat).tolist() == pytest.approx([scale] * 3, abs=1e-6)


def test_gradient_penalty_constant_critic():
    x = torch.rand(2, 1, 16, 16)
    assert float(gradient_penalty(constant_critic, x, x)) == 1.0


def test_critic_loss_examples():
    x = torch.rand(2, 1, 16, 16)
    loss, wdist, gp = critic_loss(constant_critic, lambda t: t, x, x, 10.0)
    assert float(loss) == 10.0 and float(gp) == 1.0 and float(wdist) == 0.0
    y = torch.rand(2, 1, 16, 16)
    loss, _, _ = critic_loss(unit_slope(), lambda t: y, x, y, 10.0)
    assert float(loss) == pytest.approx(0.0, abs=1e-5)


def test_critic_loss_decreases_on_fixed_batch():
    torch.manual_seed(0)
    D = build_critic(0, 4)
    G = build_generator(1, 2)
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(2, 1, 128, 128, generator=gen)
    y = (x > 0.5).float()
    opt = torch.optim.Adam(D.parameters(), lr=1e-4, betas=(0.0, 0.9))
    losses = []
    for _ in range(200):
        loss, _, _ = critic_loss(D, G, x, y, 10.0, generator=gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


# ---------------------------------------------------------------- generator objective

def test_dialectical_loss_vanishes_at_identity(small_net):
    x = torch.rand(2, 1, 128, 128)
    cfg = TrainConfig()
    total, parts = generator_dialectical_loss(lambda t: t, constant_critic, small_net, x, x, cfg)
    assert float(total.detach()) == 0.0
    assert (parts.content, parts.style, parts.adversarial) == (0.0, 0.0, 0.0)


def test_zero_weights_reduce_to_content(small_net):
    gen = torch.Generator().manual_seed(0)
    x, y = torch.rand(2, 1, 128, 128, generator=gen), torch.rand(2, 1, 128, 128, generator=gen)
    G = build_generator(0, 2)
    cfg = TrainConfig(lam=0.0, lam_gan=0.0)
    total, parts = generator_loss(G, None, small_net, x, y, cfg)
    with torch.no_grad():
        content, _ = perceptual_parts(small_net, G(x), LossTargets(small_net, x, y), StyleWeights())
    assert float(total.detach()) == pytest.approx(float(content), rel=1e-6)
    assert parts.total == pytest.approx(parts.content, rel=1e-6)


@pytest.mark.parametrize("mode", ["dialectical", "texture_net", "l1_wgan_gp"])
def test_parts_recombine(small_net, mode):
    gen = torch.Generator().manual_seed(3)
    x, y = torch.rand(2, 1, 128, 128, generator=gen), torch.rand(2, 1, 128, 128, generator=gen)
    cfg = TrainConfig(mode=mode, lam=3.0, lam_gan=2.0, lam_l1=7.0)
    total, parts = generator_loss(build_generator(1, 2), build_critic(2, 2), small_net, x, y, cfg)
    assert parts.recombine(cfg) == pytest.approx(float(total.detach()), abs=1e-5 * max(1.0, abs(float(total.detach()))))


def test_dialectical_loss_requires_mode(small_net):
    with pytest.raises(ValueError):
        generator_dialectical_loss(None, None, small_net, None, None, TrainConfig(mode="texture_net"))


def test_loss_breakdown_recombine_formula():
    cfg = TrainConfig(lam=10.0, lam_gan=2.0)
    assert LossBreakdown(1.0, 0.5, 3.0).recombine(cfg) == 1.0 + 5.0 - 6.0
    cfg = TrainConfig(mode="l1_wgan_gp", lam_l1=100.0, lam_gan=0.0)
    assert LossBreakdown(0.2, 0.0, 3.0).recombine(cfg) == pytest.approx(20.0)


# ---------------------------------------------------------------- loop

def test_batch_stream_covers_epoch():
    s = BatchStream(10, 4, 0, 1)
    first = np.concatenate([s.next() for _ in range(5)])
    assert sorted(first[:10].tolist()) == list(range(10))
    again = BatchStream(10, 4, 0, 1)
    assert np.array_equal(np.concatenate([again.next(), again.next()]), first[:8])
    with pytest.raises(ValueError):
        BatchStream(0, 4, 0, 1)


def test_zero_steps_returns_initial_generator(tiny_pairs, small_net, tmp_path):
    res = train(tiny_pairs, small_cfg(steps=0), tmp_path, net=small_net)
    assert res.log == []
    assert res.generator.checksum() == build_generator(0, 2).checksum()
    G, _, meta = load_checkpoint(tmp_path / "final.dgw")
    assert G.checksum() == res.generator.checksum() and meta["step"] == 0


def test_same_seed_same_log(tiny_pairs, small_net):
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    a = train(tiny_pairs, small_cfg(), net=small_net)
    b = train(tiny_pairs, small_cfg(), net=small_net)
    assert strip(a.log) == strip(b.log)
    assert a.generator.checksum() == b.generator.checksum()
    c = train(tiny_pairs, small_cfg(seed=1), net=small_net)
    assert strip(c.log) != strip(a.log)


def test_log_and_checkpoints_written(tiny_pairs, small_net, tmp_path):
    res = train(tiny_pairs, small_cfg(checkpoint_every=2, steps=4), tmp_path, net=small_net)
    rows = read_loss_log(tmp_path / "loss_log.csv")
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert (tmp_path / "loss_log.csv").read_text().splitlines()[0] == \
        "step,mode,content,style,adversarial,gp,total,wall_ms"
    assert all(r["total"] == pytest.approx(x["total"]) for r, x in zip(rows, res.log))
    assert (tmp_path / "step_000002.dgw").exists() and (tmp_path / "step_000004.dgw").exists()
    assert TrainConfig.from_json(tmp_path / "config.json") == res.config


@pytest.mark.parametrize("mode", ["dialectical", "texture_net", "l1_wgan_gp"])
def test_mode_round_trips_into_checkpoint(tiny_pairs, small_net, tmp_path, mode):
    train(tiny_pairs, small_cfg(mode=mode, steps=1), tmp_path, net=small_net)
    _, D, meta = load_checkpoint(tmp_path / "final.dgw")
    assert meta["mode"] == mode
    assert TrainConfig.from_dict(meta["config"]).mode == mode
    assert (D is None) == (mode == "texture_net")


def test_train_baseline_rejects_dialectical(tiny_pairs):
    with pytest.raises(ValueError):
        train_baseline(tiny_pairs, small_cfg())


def test_empty_training_split(tiny_pairs, small_net):
    only_test = tiny_pairs.split("test")
    only_test.splits = ["test"] * len(only_test)
    empty = only_test.subset(0)
    with pytest.raises(ValueError):
        train(empty, small_cfg(), net=small_net)


def test_nan_aborts(tiny_pairs, small_net):
    cfg = small_cfg(lam_l1=float("inf"), steps=3, mode="l1_wgan_gp")
    with pytest.raises(NumericError):
        train(tiny_pairs, cfg, net=small_net)


@pytest.mark.slow
def test_texture_net_learns_identity(small_net):
    # identical input and target: the generator only has to reproduce its input
    ps = make_pairset(1, 12)
    ps.inputs = ps.targets.copy()
    cfg = TrainConfig(mode="texture_net", steps=700, batch_size=4, base_channels=8, lr=1e-3,
                      checkpoint_every=0)
    content = [r["content"] for r in train(ps, cfg, net=small_net).log]
    assert np.mean(content[-10:]) < 0.1 * np.mean(content[:10])


# ---------------------------------------------------------------- pixel optimisation

def test_pixel_optimisation_zero_iterations(small_net):
    img = np.random.default_rng(0).integers(0, 256, (128, 128), dtype=np.uint8)
    out, history = gatys_optimize(img, np.zeros_like(img), small_net, iters=0)
    assert np.array_equal(out, img) and len(history) == 1


def test_pixel_optimisation_stationary_when_style_is_content(small_net):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (128, 128), dtype=np.uint8)
    out, history = gatys_optimize(img, img, small_net, iters=100)
    assert np.abs(out.astype(float) - img).mean() < 1
    # any other style target with the same norm starts from a loss at least as large
    other = np.sort(img.ravel()).reshape(128, 128)
    _, other_history = gatys_optimize(img, other, small_net, iters=0)
    assert history[0] <= other_history[0]


@pytest.mark.parametrize("mode", ["spatial", "gram"])
def test_pixel_optimisation_descends(small_net, mode):
    rng = np.random.default_rng(2)
    content = rng.integers(0, 256, (128, 128), dtype=np.uint8)
    style = np.tile((np.arange(128) % 16 < 8).astype(np.uint8) * 255, (128, 1))
    out, history = gatys_optimize(content, style, small_net, iters=15, mode=mode)
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert history[-1] < history[0]
    assert out.dtype == np.uint8
    with pytest.raises(ValueError):
        gatys_optimize(content, style, small_net, mode="other")
