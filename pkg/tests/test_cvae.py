import math

import numpy as np
import pytest
from scipy.stats import norm

from crossdomain.cvae import BehaviorCVAE, gaussian_log_density, train_cvae
from crossdomain.datasets import TransitionDataset
from crossdomain.errors import DimensionError, ValidationError
from crossdomain.tensor import Mlp

import gradcheck
from oracles import central_differences

MU, SD = 0.5, 0.1


@pytest.fixture(scope="module")
def gaussian_cvae():
    rng = np.random.default_rng(0)
    S = rng.uniform(-1, 1, (4000, 2))
    A = rng.normal(MU, SD, (4000, 1))
    return BehaviorCVAE(hidden=(64, 64), train_steps=3000, random_state=0).fit(S, A)


def float64_cvae(sd=2, ad=2, latent=3, hidden=(8, 8), seed=0):
    rng = np.random.default_rng(seed)
    enc = Mlp([sd + ad, *hidden, 2 * latent], rng=rng, dtype=np.float64)
    dec = Mlp([sd + latent, *hidden, ad], rng=rng, dtype=np.float64)
    meta = {"latent_dim": latent, "decoder_std": 0.5, "state_dim": sd, "action_dim": ad,
            "s_mean": [0.0] * sd, "s_std": [1.0] * sd, "hidden": list(hidden)}
    return BehaviorCVAE.from_networks(enc, dec, meta)


def test_gaussian_log_density_matches_scipy():
    x, m = np.array([[0.3, -1.0]]), np.array([[0.0, 0.5]])
    assert gaussian_log_density(x, m, 0.7)[0] == pytest.approx(norm.logpdf(x, m, 0.7).sum(), rel=1e-12)


def test_default_latent_dim_and_params():
    m = BehaviorCVAE(hidden=(8,), train_steps=2).fit(np.zeros((30, 3)), np.zeros((30, 6)))
    assert m.latent_ == 8
    m = BehaviorCVAE(hidden=(8,), train_steps=2).fit(np.zeros((30, 3)), np.zeros((30, 1)))
    assert m.latent_ == 2
    assert m.get_params()["decoder_std"] == 0.1


def test_kl_is_zero_for_standard_normal_posterior():
    m = float64_cvae()
    for w in m.encoder_.weights:
        w[:] = 0.0
    for b in m.encoder_.biases:
        b[:] = 0.0
    S, A = np.ones((4, 2)), np.zeros((4, 2))
    eps = np.zeros((4, 3))
    elbo, _ = m._elbo_terms(S, A, eps)
    recon = gaussian_log_density(A, m._decode(S, eps), 0.5)
    np.testing.assert_allclose(elbo, recon, atol=1e-12)


def test_constant_behaviour_is_reconstructed():
    rng = np.random.default_rng(1)
    S = rng.normal(size=(500, 2))
    m = BehaviorCVAE(hidden=(32,), train_steps=1500, random_state=0).fit(S, np.zeros((500, 1)))
    dec = m._decode(m._norm_states(S[:50]), rng.normal(size=(50, m.latent_)))
    assert np.abs(dec).max() < 0.05
    assert m.holdout_history_[-1][1] > m.holdout_history_[0][1]


def test_log_prob_close_to_analytic_at_mode(gaussian_cvae):
    S = np.zeros((1, 2))
    est = gaussian_cvae.log_prob(S, [[MU]], n_samples=256)[0]
    assert abs(est - norm.logpdf(MU, MU, SD)) < 0.2


def test_on_support_beats_off_support(gaussian_cvae):
    rng = np.random.default_rng(3)
    S = rng.uniform(-1, 1, (100, 2))
    on = gaussian_cvae.log_prob(S, np.full((100, 1), MU))
    off = gaussian_cvae.log_prob(S, np.full((100, 1), MU + 3 * SD + 0.5))
    assert (on > off).all()


def test_elbo_is_a_lower_bound(gaussian_cvae):
    rng = np.random.default_rng(4)
    S = rng.uniform(-1, 1, (200, 2))
    A = rng.normal(MU, SD, (200, 1))
    elbo = np.mean([gaussian_cvae.elbo(S, A, seed=s) for s in range(64)], axis=0)
    iw = gaussian_cvae.log_prob(S, A, n_samples=1024, proposal="posterior")
    diff = elbo - iw
    se = diff.std(ddof=1) / math.sqrt(len(diff))
    assert diff.mean() <= 2 * se


def test_iw_bound_is_monotone_in_sample_count(gaussian_cvae):
    S, A = np.zeros((1, 2)), np.array([[MU + SD]])
    one = np.mean([gaussian_cvae.log_prob(S, A, 1, seed=s, proposal="posterior")[0] for s in range(100)])
    many = np.mean([gaussian_cvae.log_prob(S, A, 64, seed=s, proposal="posterior")[0] for s in range(100)])
    assert one <= many


def test_log_prob_is_deterministic_and_validates(gaussian_cvae):
    S, A = np.zeros((3, 2)), np.full((3, 1), 0.4)
    np.testing.assert_array_equal(gaussian_cvae.log_prob(S, A, seed=1), gaussian_cvae.log_prob(S, A, seed=1))
    with pytest.raises(ValidationError):
        gaussian_cvae.log_prob(S, A, n_samples=0)
    with pytest.raises(ValidationError):
        gaussian_cvae.log_prob(S, A, proposal="nope")
    with pytest.raises(DimensionError):
        gaussian_cvae.log_prob(np.zeros((3, 5)), A)
    with pytest.raises(Exception):
        BehaviorCVAE().log_prob(S, A)


def test_action_gradient_matches_finite_differences():
    m = float64_cvae()
    rng = np.random.default_rng(5)
    S, A = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    _, grad = m.log_prob_and_grad(S, A, n_samples=8, seed=7)
    numeric = central_differences(lambda a: m.log_prob(S, a, n_samples=8, seed=7).sum(), A, h=1e-6)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_elbo_parameter_gradients_match_finite_differences():
    m = float64_cvae(seed=2)
    rng = np.random.default_rng(6)
    S, A, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 3))
    _, grads = m._elbo_terms(S, A, eps, grad=True)
    params = m.encoder_.params + m.decoder_.params
    res = gradcheck.check(lambda: -np.mean(m._elbo_terms(S, A, eps)[0]), params, grads, h=1e-5)
    assert res.ok(), (res.pass_fraction, res.n_kink)


def test_save_load_and_train_helper(tmp_path):
    rng = np.random.default_rng(8)
    s = rng.normal(size=(40, 2))
    tar = TransitionDataset(s, rng.uniform(-1, 1, (40, 1)), np.zeros(40), s, np.zeros(40))
    m = train_cvae(tar, steps=5, seed=0, hidden=(8,))
    m.save(tmp_path / "c.dmcw")
    back = BehaviorCVAE.load(tmp_path / "c.dmcw")
    np.testing.assert_array_equal(back.log_prob(s[:5], tar.actions[:5], seed=3),
                                  m.log_prob(s[:5], tar.actions[:5], seed=3))
