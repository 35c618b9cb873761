import numpy as np
import pytest

from mtsdiff import autodiff as ad
from mtsdiff.autodiff import Tensor
from mtsdiff.denoiser import (
    DenoiserModel,
    GRULayer,
    ModelConfig,
    c_in,
    c_out,
    c_skip,
    expected_parameter_count,
    film,
    loss_weight,
    one_hot,
    precondition_in,
    predict,
    sinusoidal,
    split_logits,
)


def _model(**kw):
    cfg = ModelConfig(n_num=3, cat_cards=[3, 2, 2], n_labels=2, **kw)
    return DenoiserModel(cfg, np.random.default_rng(0), dtype=np.float64)


def test_preconditioning_coefficients():
    s = 0.5
    assert c_in(s) == pytest.approx(1 / np.sqrt(0.5))
    assert c_skip(s) == pytest.approx(0.5)
    assert c_out(s) == pytest.approx(0.25 / np.sqrt(0.5))
    assert loss_weight(0.5) == pytest.approx(8.0)


def test_skip_dominates_at_small_sigma():
    assert c_skip(1e-4) == pytest.approx(1.0, abs=1e-7)
    assert c_out(1e-4) == pytest.approx(1e-4, rel=1e-6)


def test_precondition_in_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        precondition_in(np.ones(3), np.array([1.0, 0.0, 1.0]))


def test_parameter_count_matches_closed_form():
    for kw in ({}, {"hidden": 8, "layers": 2, "time_dim": 8, "emb_dim": 4, "label_dim": 4}):
        m = _model(**kw)
        assert m.num_parameters() == expected_parameter_count(m.cfg)


def test_output_layout():
    m = _model(hidden=8, time_dim=8, emb_dim=4, label_dim=4)
    B, L = 2, 5
    x0, logits = predict(m, np.zeros((B, L, 3)), np.ones((B, L, 3)), np.zeros((B, L, 12)), np.ones((B, L, 12)),
                         np.array([0.1, 0.9]), one_hot(np.array([0, 1]), 2, np.float64))
    assert x0.shape == (B, L, 3)
    assert logits.shape == (B, L, 7)
    assert [p.shape[-1] for p in split_logits(logits.value, m.cfg.cat_cards)] == [3, 2, 2]


def test_shape_errors():
    m = _model(hidden=8, time_dim=8, emb_dim=4, label_dim=4)
    with pytest.raises(ValueError):
        m.forward(Tensor(np.zeros((2, 5, 2))), Tensor(np.zeros((2, 5, 12))), np.zeros(2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        m.forward(Tensor(np.zeros((2, 5, 3))), Tensor(np.zeros((2, 5, 12))), np.zeros(2), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        predict(m, np.zeros((2, 5, 3)), np.ones((2, 5, 3)), np.zeros((2, 5, 12)), np.ones((2, 5, 12)),
                np.array([0.1, 1.5]), np.zeros((2, 2)))


def test_film_starts_as_plain_layer_norm():
    m = _model(hidden=8, time_dim=8)
    temb = m.time_embedding(np.array([0.3]))
    g, s = m.film_params(temb, 0)
    assert not g.value.any() and not s.value.any()
    h = Tensor(np.random.default_rng(1).standard_normal((1, 4, 16)))
    assert np.allclose(film(h, g, s).value, ad.layer_norm(h).value)


def test_film_modulation():
    h = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4)))
    g = Tensor(np.full((2, 4), 0.5))
    s = Tensor(np.full((2, 4), -1.0))
    assert np.allclose(film(h, g, s).value, ad.layer_norm(h).value * 1.5 - 1.0)


def test_gru_is_causal_in_its_direction():
    gru = GRULayer(3, 4, np.random.default_rng(0), np.float64)
    x = np.random.default_rng(1).standard_normal((1, 6, 3))
    y = x.copy()
    y[0, 4:] += 1.0
    fa, fb = gru(Tensor(x)).value, gru(Tensor(y)).value
    assert np.allclose(fa[0, :4], fb[0, :4]) and not np.allclose(fa[0, 4:], fb[0, 4:])
    ra, rb = gru(Tensor(x), reverse=True).value, gru(Tensor(y), reverse=True).value
    assert not np.allclose(ra[0, :4], rb[0, :4])


def test_gru_step_matches_reference_equations():
    H = 3
    gru = GRULayer(2, H, np.random.default_rng(5), np.float64)
    for p in gru.parameters():
        p.value = p.value + 0.1
    x = np.random.default_rng(6).standard_normal((1, 2, 2))
    out = gru(Tensor(x)).value[0]
    sig = lambda v: 1 / (1 + np.exp(-v))
    W, b = gru.w_x.value, gru.bias.value
    h = np.zeros(H)
    for l in range(2):
        xp = x[0, l] @ W + b
        rz = sig(xp[:2 * H] + h @ gru.u_rz.value)
        r, z = rz[:H], rz[H:]
        n = np.tanh(xp[2 * H:] + (r * h) @ gru.u_n.value)
        h = (1 - z) * n + z * h
        assert np.allclose(out[l], h)


def test_sinusoidal_embedding():
    e = sinusoidal(np.array([0.0, 0.5]), 8, np.float64)
    assert e.shape == (2, 8)
    assert np.allclose(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.allclose(np.sum(e[:, :4] ** 2 + e[:, 4:] ** 2, axis=1), 4)


def test_one_hot_bounds():
    assert np.array_equal(one_hot(np.array([1, 0]), 2), [[0, 1], [1, 0]])
    with pytest.raises(ValueError):
        one_hot(np.array([2]), 2)
