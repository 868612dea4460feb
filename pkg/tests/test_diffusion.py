from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from deshadow.checkpoint import CheckpointError
from deshadow.diffusion.model import Conditioning, TrainBatch, denoise_predict, loss_and_grad
from deshadow.diffusion.sampler import ddim_timesteps, sample
from deshadow.diffusion.schedule import forward_sample, make_schedule
from deshadow.diffusion.train import (DEFAULT_LR, Stage, StageMismatchError, TrainConfig, load_denoiser,
                                      loss_history, save_denoiser, train_stage)
from deshadow.diffusion.unet import NonFiniteError, UNetConfig, init_params

TINY64 = UNetConfig(channels=(3, 4, 5), emb_dim=6, light_res=2, light_hidden=5, dtype="float64")
SMALL = UNetConfig(channels=(8, 12, 16), emb_dim=16, light_res=32, light_hidden=16)


def alpha_bar_oracle(T: int, b0: float, b1: float) -> list[float]:
    out, acc = [], 1.0
    for i in range(T):
        beta = b0 + (b1 - b0) * i / (T - 1) if T > 1 else b0
        acc *= 1.0 - beta
        out.append(acc)
    return out


def tiny_batch(seed: int, n: int = 2, res: int = 8, light_res: int = 2) -> TrainBatch:
    r = np.random.default_rng(seed)
    return TrainBatch(r.uniform(-1, 1, (n, res, res, 3)), r.uniform(-1, 1, (n, res, res, 3)),
                      (r.random((n, res, res, 1)) > 0.5).astype(np.float64),
                      r.random((n, light_res, light_res, 3)))


class ToyData:
    def __init__(self, kind: str, n: int = 16, res: int = 16, seed: int = 0):
        r = np.random.default_rng(seed)
        yy, xx = np.mgrid[:res, :res] / (res - 1)
        base = np.stack([yy, xx, 0.5 * (yy + xx)], -1)
        self.kind = kind
        self.targets = np.clip(base[None] * r.uniform(0.5, 1.0, (n, 1, 1, 3)), 0, 1).astype(np.float32)
        self.inputs = (self.targets * 0.7).astype(np.float32)
        self.masks = np.ones((n, res, res, 1), np.float32)
        self.lighting = r.random((n, 32, 32, 3)).astype(np.float32)

    def __len__(self):
        return len(self.targets)


# --- schedule ---------------------------------------------------------------

def test_schedule_single_step():
    s = make_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


def test_schedule_matches_product_oracle():
    s = make_schedule(1000, 1e-4, 0.02)
    oracle = alpha_bar_oracle(1000, 1e-4, 0.02)
    assert abs(s.alpha_bar[999] - oracle[999]) / oracle[999] <= 1e-12
    assert s.alpha_bar[999] == pytest.approx(4.0358297653756754e-05, rel=1e-12)
    np.testing.assert_allclose(s.alpha_bar, oracle, rtol=1e-12)
    assert 0.99 < s.alpha_bar[0] < 1


@given(T=st.integers(2, 2000), b0=st.floats(1e-6, 0.5), span=st.floats(0, 0.49))
def test_schedule_strictly_decreasing(T, b0, span):
    # keep the final product above float64 underflow
    assume(-T * np.log1p(-(b0 + span)) < 700)
    s = make_schedule(T, b0, b0 + span)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_forward_limits(rng):
    s = make_schedule(10)
    x0, eps = rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4, 3))
    np.testing.assert_array_equal(forward_sample(x0, 3, eps, s.with_alpha_bar(np.ones(10))), x0)
    np.testing.assert_array_equal(forward_sample(x0, 3, eps, s.with_alpha_bar(np.zeros(10))), eps)
    with pytest.raises(IndexError):
        forward_sample(x0, 10, eps, s)


def test_forward_variance_monte_carlo():
    s = make_schedule(10).with_alpha_bar(np.full(10, 0.64))
    eps = np.random.default_rng(0).standard_normal((100_000, 1, 1))
    xt = forward_sample(np.zeros_like(eps), 0, eps, s)
    assert abs(xt.var() - 0.36) <= 0.01


def test_forward_marginal_within_three_sigma():
    s = make_schedule(1000)
    t, n = 400, 200_000
    x0 = np.full((n, 1, 1), 0.3)
    xt = forward_sample(x0, t, np.random.default_rng(1).standard_normal(x0.shape), s)
    ab = s.alpha_bar[t]
    var = 1 - ab
    assert abs(xt.mean() - np.sqrt(ab) * 0.3) <= 3 * np.sqrt(var / n)
    # Var of the sample variance of a Gaussian is 2 var^2 / (n - 1)
    assert abs(xt.var() - var) <= 3 * np.sqrt(2 * var**2 / (n - 1))


# --- network ----------------------------------------------------------------

def test_default_architecture_size():
    assert 1.0e6 <= init_params(UNetConfig()).num_params() <= 2.0e6


def test_zero_weights_give_zero_output(rng):
    p = init_params(SMALL)
    for w in p.weights.values():
        w[...] = 0
    c = Conditioning.build(rng.standard_normal((1, 16, 16, 3)), rng.standard_normal((1, 16, 16, 3)),
                           np.ones((1, 16, 16, 1)), rng.random((1, 32, 32, 3)))
    assert np.all(denoise_predict(p, c, 10) == 0)


def test_predict_deterministic_and_shape(rng):
    p = init_params(SMALL, seed=3)
    c = Conditioning.build(rng.standard_normal((2, 16, 16, 3)), rng.standard_normal((2, 16, 16, 3)),
                           np.ones((2, 16, 16, 1)), rng.random((2, 32, 32, 3)))
    a = denoise_predict(p, c, 100)
    b = denoise_predict(init_params(SMALL, seed=3), c, 100)
    assert a.shape == (2, 16, 16, 3)
    assert a.tobytes() == b.tobytes()


def test_final_bias_shifts_one_channel(rng):
    p = init_params(SMALL, seed=1)
    p.weights["out.b"][:] = [0.1, 0.2, 0.3]
    c = Conditioning.build(rng.standard_normal((1, 16, 16, 3)), rng.standard_normal((1, 16, 16, 3)),
                           np.ones((1, 16, 16, 1)), rng.random((1, 32, 32, 3)))
    a = denoise_predict(p, c, 5)
    p.weights["out.b"][1] *= 2
    b = denoise_predict(p, c, 5)
    d = (b - a).astype(np.float64)
    np.testing.assert_array_equal(d[..., 0], 0)
    np.testing.assert_array_equal(d[..., 2], 0)
    np.testing.assert_allclose(d[..., 1], 0.2, atol=1e-6)


def test_channel_mismatch_rejected(rng):
    p = init_params(SMALL)
    with pytest.raises(ValueError):
        denoise_predict(p, Conditioning(rng.random((1, 16, 16, 5)), rng.random((1, 32, 32, 3))), 0)


def test_conditioning_rejects_bad_mask(rng):
    with pytest.raises(ValueError):
        Conditioning.build(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.full((4, 4, 1), 2.0),
                           np.zeros((32, 32, 3)))


def test_conditioning_sensitivity(rng):
    p = init_params(SMALL, seed=2)
    x = rng.standard_normal((1, 16, 16, 3))
    cond = rng.uniform(-1, 1, (1, 16, 16, 3))
    mask = np.ones((1, 16, 16, 1))
    light = rng.random((1, 32, 32, 3))
    base = denoise_predict(p, Conditioning.build(x, cond, mask, light), 50)
    moved = denoise_predict(p, Conditioning.build(x, cond + 0.05, mask, light), 50)
    relit = denoise_predict(p, Conditioning.build(x, cond, mask, light * 0.5), 50)
    assert np.abs(moved - base).max() > 1e-4
    assert np.abs(relit - base).max() > 1e-4


# --- loss and gradients -----------------------------------------------------

def test_oracle_predictor_has_zero_loss():
    p = init_params(TINY64)
    loss, grads = loss_and_grad(p, tiny_batch(0), make_schedule(100), np.random.default_rng(0),
                                predictor=lambda x_t, b, t, eps: eps)
    assert loss == 0.0 and grads is None


def finite_difference_check(seed: int, h: float = 1e-5) -> float:
    p = init_params(TINY64, seed=seed)
    r = np.random.default_rng(seed)
    for w in p.weights.values():  # non-zero biases so every path is exercised
        w += r.normal(0, 0.05, w.shape)
    batch = tiny_batch(seed)
    sched = make_schedule(100)
    t = np.array([7, 60])
    eps = r.standard_normal(batch.x0.shape)
    _, grads = loss_and_grad(p, batch, sched, t=t, eps=eps)
    worst = 0.0
    for name, w in p.weights.items():
        flat = w.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_and_grad(p, batch, sched, t=t, eps=eps)
            flat[i] = old - h
            lm, _ = loss_and_grad(p, batch, sched, t=t, eps=eps)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            rel = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-6)
            worst = max(worst, rel)
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_central_differences(seed):
    assert init_params(TINY64).num_params() <= 5000
    assert finite_difference_check(seed) <= 1e-4


def test_duplicating_batch_leaves_loss_and_grads(rng):
    p = init_params(TINY64, seed=4)
    b = tiny_batch(4)
    t = np.array([3, 40])
    eps = rng.standard_normal(b.x0.shape)
    sched = make_schedule(100)
    l1, g1 = loss_and_grad(p, b, sched, t=t, eps=eps)
    d = TrainBatch(*(np.concatenate([a, a]) for a in (b.x0, b.cond, b.mask, b.lighting)))
    l2, g2 = loss_and_grad(p, d, sched, t=np.concatenate([t, t]), eps=np.concatenate([eps, eps]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_layer():
    p = init_params(TINY64)
    p.weights["enc1.a.conv.w"][0, 0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError) as e:
        loss_and_grad(p, tiny_batch(0), make_schedule(10), np.random.default_rng(0))
    assert "enc1.a" in e.value.layer


# --- training ---------------------------------------------------------------

def test_default_learning_rates():
    assert DEFAULT_LR[Stage.DESHADOW] < DEFAULT_LR[Stage.HARMONIZE]
    assert TrainConfig(stage="deshadow").lr < TrainConfig(stage="harmonize").lr


def test_zero_steps_returns_init():
    init = init_params(SMALL, seed=9)
    out = train_stage(TrainConfig(steps=0), ToyData("harmonization"), init=init)
    assert out.flat().tobytes() == init.flat().tobytes()


def test_stage_mismatch_errors():
    with pytest.raises(StageMismatchError):
        train_stage(TrainConfig(stage="deshadow", steps=1, allow_scratch=True), ToyData("harmonization"))
    with pytest.raises(StageMismatchError):
        train_stage(TrainConfig(stage="deshadow", steps=1), ToyData("deshadow"), unet=SMALL)
    with pytest.raises(StageMismatchError):
        train_stage(TrainConfig(stage="joint", steps=1), ToyData("deshadow"), unet=SMALL)


def test_training_reduces_loss_and_is_reproducible(tmp_path):
    data = ToyData("harmonization")
    cfg = TrainConfig(steps=500, batch=4, seed=3, augment=False, lr=2e-3)
    a = train_stage(cfg, data, unet=SMALL, log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "a.ckpt")
    hist = loss_history(tmp_path / "log.csv")
    assert len(hist) == 500
    assert hist[-100:].mean() < hist[:100].mean()
    b = train_stage(TrainConfig(steps=20, batch=4, seed=3, augment=False, lr=2e-3), data, unet=SMALL)
    c = train_stage(TrainConfig(steps=20, batch=4, seed=3, augment=False, lr=2e-3), data, unet=SMALL)
    assert b.flat().tobytes() == c.flat().tobytes()
    assert a.history == ("harmonize",)
    d = train_stage(TrainConfig(stage="deshadow", steps=5, batch=2, seed=1), ToyData("deshadow"), init=a)
    assert d.history == ("harmonize", "deshadow")


def test_joint_stage_takes_both_kinds():
    out = train_stage(TrainConfig(stage="joint", steps=2, batch=2),
                      (ToyData("harmonization"), ToyData("deshadow")), unet=SMALL)
    assert out.history == ("joint",)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_params(SMALL, seed=5)
    save_denoiser(tmp_path / "p.ckpt", p)
    q = load_denoiser(tmp_path / "p.ckpt")
    assert q.config == p.config
    for k in p.weights:
        assert q.weights[k].tobytes() == p.weights[k].tobytes()
    buf = (tmp_path / "p.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(CheckpointError):
        load_denoiser(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(buf[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_denoiser(tmp_path / "cut.ckpt")


# --- sampler ----------------------------------------------------------------

def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 999 and ts[-1] == 0 and np.all(np.diff(ts) < 0)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_sample_deterministic(rng):
    p = init_params(SMALL, seed=6)
    cond = rng.random((16, 16, 3)).astype(np.float32)
    mask = np.ones((16, 16, 1), np.float32)
    light = rng.random((32, 32, 3)).astype(np.float32)
    sched = make_schedule()
    a = sample(p, cond, mask, light, sched, steps=5, seed=11)
    b = sample(p, cond, mask, light, sched, steps=5, seed=11)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (16, 16, 3) and a.min() >= 0 and a.max() <= 1


def test_sample_one_step_closed_form(rng):
    p = init_params(SMALL, seed=6)
    cond = rng.random((16, 16, 3)).astype(np.float32)
    mask = np.ones((16, 16, 1), np.float32)
    light = rng.random((32, 32, 3)).astype(np.float32)
    sched = make_schedule()
    out = sample(p, cond, mask, light, sched, steps=1, seed=2)
    x = np.random.default_rng(2).standard_normal((1, 16, 16, 3)).astype(np.float32)
    eps = denoise_predict(p, Conditioning.build(x, cond[None] * 2 - 1, mask[None], light[None]), 999)
    ab = sched.alpha_bar[999]
    x0 = np.clip((x - np.sqrt(1 - ab) * eps) / np.sqrt(ab), -1, 1)
    np.testing.assert_allclose(out, np.clip((x0[0] + 1) / 2, 0, 1), atol=1e-6)
