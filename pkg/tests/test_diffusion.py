import numpy as np
import pytest
from scipy import stats

from mtsdiff import autodiff as ad
from mtsdiff.dataio import toy_manifest
from mtsdiff.diffusion import (
    SamplerConfig,
    cfg_combine,
    draw_labels,
    euler_sample,
    euler_step,
    forward_noise,
    sample,
)
from mtsdiff.schedule import ScheduleParams, numerical_schedule, sigma, sigma_grid
from mtsdiff.state import ModelState

MINI = {"hidden": 8, "layers": 2, "emb_dim": 4, "time_dim": 8, "label_dim": 4}


@pytest.fixture(scope="module")
def state():
    return ModelState.create(toy_manifest(10, 6, 0), MINI, seed=3)


def oracle_schedule(rho=7.0):
    return ScheduleParams.create(1, 1, 80.0, rho)


def run_oracle(n, steps, seed=0, rho=7.0):
    sig = sigma_grid(oracle_schedule(rho), steps)[:, 0, 0]
    x = sig[0] * np.random.default_rng(seed).standard_normal(n)
    return euler_sample(lambda x, s, i: np.tanh(x / s**2), x, sig)


def test_forward_noise_near_identity_at_t0():
    sched = numerical_schedule(2, 3)
    x0 = np.random.default_rng(0).standard_normal((4, 3, 2))
    xt, eps, sig = forward_noise(x0, np.zeros(4), sched, np.random.default_rng(1))
    assert np.allclose(sig.value, 0.002)
    assert np.allclose(xt.value, x0 + 0.002 * eps)


def test_forward_noise_zero_eps_is_exact():
    sched = numerical_schedule(2, 3)
    x0 = np.random.default_rng(0).standard_normal((4, 3, 2))
    xt, _, _ = forward_noise(x0, np.full(4, 0.7), sched, eps=np.zeros_like(x0))
    assert np.array_equal(xt.value, x0)


def test_forward_noise_variance_matches_schedule():
    rng = np.random.default_rng(5)
    sched = numerical_schedule(1, 1)
    sched.rho_global.value = np.array(3.0)
    n = 100_000
    x0 = np.zeros((n, 1, 1))
    xt, _, _ = forward_noise(x0, np.full(n, 0.4), sched, rng)
    want = sigma(sched, 0.4, 0, 0) ** 2
    assert abs(xt.value.var() / want - 1) < 0.02


def test_forward_noise_shape_mismatch():
    with pytest.raises(ValueError):
        forward_noise(np.zeros((2, 3, 4)), np.zeros(2), numerical_schedule(2, 3), np.random.default_rng(0))


def test_euler_step_examples():
    assert euler_step(3.0, 1.0, 4.0, 2.0) == 2.0
    assert euler_step(3.0, 3.0, 4.0, 2.0) == 3.0
    assert euler_step(3.0, 1.0, 4.0, 0.0) == 1.0


@pytest.mark.parametrize("nxt", [4.0, 5.0, -1.0])
def test_euler_step_requires_decreasing_sigma(nxt):
    with pytest.raises(ValueError):
        euler_step(1.0, 0.0, 4.0, nxt)


def test_cfg_combine():
    c = np.random.default_rng(0).standard_normal(5)
    u = np.random.default_rng(1).standard_normal(5)
    assert np.array_equal(cfg_combine(c, u, 0.0), c)
    assert cfg_combine(1.0, 0.4, 2.0) == pytest.approx(2.2)


@pytest.mark.parametrize("steps", [50, 200])
def test_two_point_oracle(steps):
    x = run_oracle(10_000, steps)
    assert np.mean(np.minimum(np.abs(x - 1), np.abs(x + 1)) < 0.05) >= 0.99
    assert abs(np.mean(x > 0) - 0.5) <= 0.02


def test_oracle_symmetry():
    x = run_oracle(4000, 50, seed=7)
    assert stats.ks_2samp(x, -x).pvalue > 0.01
    sig = sigma_grid(oracle_schedule(), 5)[:, 0, 0]
    assert euler_sample(lambda x, s, i: np.tanh(x / s**2), np.zeros(3), sig).tolist() == [0.0, 0.0, 0.0]


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(mode="guided")


def test_draw_labels():
    rng = np.random.default_rng(0)
    assert draw_labels("uncond", 5, 2, None, rng) is None
    bal = draw_labels("cfg-bal", 10, 2, None, rng)
    assert np.bincount(bal).tolist() == [5, 5]
    comb = draw_labels("cfg-comb", 20_000, 2, [0.7, 0.3], rng)
    assert abs(comb.mean() - 0.3) < 0.02


def test_sample_shapes_and_ranges(state):
    out = sample(state, SamplerConfig(steps=5, seed=1), 7)
    assert out.numerical.shape == (7, 6, 3)
    assert out.categorical.shape == (7, 6, 2)
    assert out.labels.shape == (7,)
    assert out.categorical[..., 0].max() < 3 and out.categorical[..., 1].max() < 2
    assert np.all(np.isfinite(out.numerical))


def test_sample_is_deterministic(state):
    a = sample(state, SamplerConfig(steps=4, seed=11, mode="cfg-comb"), 6)
    b = sample(state, SamplerConfig(steps=4, seed=11, mode="cfg-comb"), 6)
    assert np.array_equal(a.numerical, b.numerical) and np.array_equal(a.categorical, b.categorical)
    assert np.array_equal(a.labels, b.labels)


def test_sample_independent_of_chunking(state):
    a = sample(state, SamplerConfig(steps=3, seed=2, chunk=1024), 9)
    b = sample(state, SamplerConfig(steps=3, seed=2, chunk=4), 9)
    assert np.allclose(a.numerical, b.numerical, rtol=1e-5, atol=1e-5)
    assert np.array_equal(a.categorical, b.categorical)


@pytest.mark.parametrize("steps", [10, 50, 200])
def test_step_count_decoupled_from_training(state, steps):
    out = sample(state, SamplerConfig(steps=steps, seed=0), 3)
    assert np.all(np.isfinite(out.numerical))


def test_zero_guidance_matches_conditional_path(state):
    labels = np.array([0, 1, 1, 0])
    a = sample(state, SamplerConfig(steps=4, seed=5, mode="cfg-comb", w_num=0.0, w_cat=0.0), 4, labels)
    b = sample(state, SamplerConfig(steps=4, seed=5, mode="cfg-bal", w_num=0.0, w_cat=0.0), 4, labels)
    assert np.array_equal(a.numerical, b.numerical) and np.array_equal(a.categorical, b.categorical)
    assert np.array_equal(a.labels, labels)


def test_sample_rejects_unknown_label(state):
    with pytest.raises(ValueError):
        sample(state, SamplerConfig(steps=2, mode="cfg-comb"), 2, np.array([0, 2]))
    with pytest.raises(ValueError):
        sample(state, SamplerConfig(steps=2, mode="uncond"), 2, np.array([0, 1]))
