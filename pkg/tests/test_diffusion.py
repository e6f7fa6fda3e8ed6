import numpy as np
import pytest

from crossdomain import diffusion
from crossdomain.datasets import SOURCE_GENERATED, TransitionDataset
from crossdomain.diffusion import (GuidanceConfig, GuidedDiffusion, augment_source, generate, guided_sample,
                                   make_schedule, sample_condition, train_denoiser)
from crossdomain.errors import StaleArtifactError, ValidationError
from crossdomain.knn import ScoreTable, score_source
from crossdomain.tensor import Mlp

from oracles import energy_distance

CENTROIDS = np.array([[-3.0, 0.0], [3.0, 0.0]])


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 2000).astype(float)
    X = CENTROIDS[y.astype(int)] + 0.5 * rng.normal(size=(2000, 2))
    model = GuidedDiffusion(hidden=(64, 64), train_steps=5000, batch_size=128, lr=1e-3, random_state=0).fit(X, y)
    return X, y, model


@pytest.fixture(scope="module")
def tiny():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(64, 3))
    return GuidedDiffusion(hidden=(16,), train_steps=20, batch_size=16, random_state=0).fit(X, rng.random(64))


def test_schedule_endpoints_and_monotone():
    s = make_schedule(2, 0.01, 5.0)
    np.testing.assert_allclose(s.sigmas, [0.0, 0.01, 5.0])
    lin = make_schedule(5, 1.0, 5.0, rho=1.0)
    np.testing.assert_allclose(lin.sigmas, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    d = make_schedule()
    assert d.T == 18 and d.sigmas[0] == 0.0 and d.sigmas[-1] == 80.0 and d.sigmas[1] == 0.002
    assert np.all(np.diff(d.sigmas) > 0)


def test_schedule_matches_power_interpolation():
    T, lo, hi, rho = 18, 0.002, 80.0, 7.0
    s = make_schedule(T, lo, hi, rho).sigmas[1:]
    expected = [(lo ** (1 / rho) + (i / (T - 1)) * (hi ** (1 / rho) - lo ** (1 / rho))) ** rho for i in range(T)]
    np.testing.assert_allclose(s, expected, rtol=1e-12)


@pytest.mark.parametrize("args", [(1, 0.1, 1.0), (5, 0.0, 1.0), (5, 2.0, 1.0), (5, 0.1, 1.0, -1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValidationError):
        make_schedule(*args)


def test_guidance_config_validation():
    with pytest.raises(ValidationError):
        GuidanceConfig(n_samples=0)
    with pytest.raises(ValidationError):
        GuidanceConfig(kappa=100)
    assert GuidanceConfig().kappa == 90.0 and GuidanceConfig().n_samples == 10 ** 6


def test_zero_noise_loss_of_identity_denoiser_is_zero():
    d = 3
    model = GuidedDiffusion(preconditioning=False)
    model.schedule_ = make_schedule()
    model.cond_mean_, model.cond_std_ = 0.0, 1.0
    w = np.zeros((d + 3, d))
    w[:d, :d] = np.eye(d)
    model.net_ = Mlp.from_arrays([w], [np.zeros(d)])
    z = np.random.default_rng(0).normal(size=(5, d))
    loss, _ = model._batch_loss(z, np.zeros(5, int), np.zeros(5), np.zeros(5, bool), eps=np.ones((5, d)))
    assert loss == 0.0


def test_preconditioned_denoiser_is_exact_at_zero_noise(tiny):
    z = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_array_equal(tiny.denoise(z, 0.0, 0.5), z)


def test_cfg_algebra_is_exact(tiny):
    rng = np.random.default_rng(3)
    z, sigma, cond = rng.normal(size=(8, 3)), 0.7, 0.4
    eps_u = tiny.noise_estimate(z, sigma, None)
    eps_c = tiny.noise_estimate(z, sigma, cond)
    np.testing.assert_array_equal(tiny.guided_noise(z, sigma, cond, 0.0), eps_u)
    np.testing.assert_array_equal(tiny.guided_noise(z, sigma, cond, 1.0), eps_c)
    for w in (0.0, 0.5, 1.0, 1.5):
        np.testing.assert_allclose(tiny.guided_noise(z, sigma, cond, w), eps_u + w * (eps_c - eps_u),
                                   rtol=1e-12, atol=1e-12)


def test_zero_guidance_sampling_equals_unconditional(tiny):
    a = tiny.sample(50, cond=0.9, guidance=0.0, seed=4)
    b = tiny.sample(50, cond=None, seed=4)
    np.testing.assert_array_equal(a, b)


def test_sampling_is_deterministic(tiny):
    np.testing.assert_array_equal(tiny.sample(20, 0.3, seed=5), tiny.sample(20, 0.3, seed=5))
    assert not np.array_equal(tiny.sample(20, 0.3, seed=5), tiny.sample(20, 0.3, seed=6))


def test_sampling_rejects_bad_input(tiny):
    with pytest.raises(ValidationError):
        tiny.sample(0)
    with pytest.raises(ValidationError):
        tiny.sample(3, cond=np.nan)
    with pytest.raises(Exception):
        GuidedDiffusion().sample(3)


def test_normalization_round_trip(tiny):
    x = tiny.sample(30, 0.5, seed=0)
    z = (x - tiny.x_mean_) / tiny.x_std_
    np.testing.assert_allclose(z * tiny.x_std_ + tiny.x_mean_, x, atol=1e-6)


def test_holdout_loss_decreases(blobs):
    _, _, model = blobs
    first, last = model.holdout_history_[0][1], model.holdout_history_[-1][1]
    assert last < first


def test_unconditional_samples_match_the_data(blobs):
    X, _, model = blobs
    rng = np.random.default_rng(7)
    samples = model.sample(2000, None, seed=1, n_steps=40)
    uniform = rng.uniform(X.min(axis=0), X.max(axis=0), (2000, 2))
    assert energy_distance(uniform, X) >= 5 * energy_distance(samples, X)


@pytest.mark.parametrize("guidance", [1.0, 1.5])
def test_condition_selects_the_blob(blobs, guidance):
    _, _, model = blobs
    for label in (0, 1):
        s = model.sample(2000, float(label), guidance=guidance, seed=2)
        nearest = np.argmin(((s[:, None, :] - CENTROIDS) ** 2).sum(-1), axis=1)
        assert np.mean(nearest == label) >= 0.9


def test_sample_condition_quantiles():
    rng = np.random.default_rng(0)
    w = np.linspace(0.0, 1.0, 101)
    y = sample_condition(w, 90, rng, size=1000)
    assert y.min() >= 0.9 - 1e-12 and y.max() <= 1.0
    y0 = sample_condition(w, 0, rng, size=5000)
    assert y0.min() < 0.05 and y0.max() > 0.95
    np.testing.assert_array_equal(sample_condition(np.full(10, 0.3), 50, rng, size=5), 0.3)
    with pytest.raises(ValidationError):
        sample_condition(w, 100, rng)
    with pytest.raises(ValidationError):
        sample_condition(np.array([]), 10, rng)


def _toy(n, shift, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, 2))
    a = rng.uniform(-1, 1, (n, 1))
    return TransitionDataset(s, a, -np.abs(s).sum(1), s + shift * a, rng.integers(0, 2, n))


def test_pipeline_stale_scores_rejected_and_outputs_tagged():
    src, tar = _toy(200, 0.5, 0), _toy(60, 0.1, 1)
    table = score_source(src, tar)
    with pytest.raises(StaleArtifactError):
        train_denoiser(_toy(200, 0.5, 9), table, steps=5)
    model = train_denoiser(src, table, steps=30, seed=0, hidden=(16,))
    cfg = GuidanceConfig(n_samples=50, batch_size=16)
    gen = generate(model, table, cfg, seed=3)
    assert len(gen) == 50 and (gen.origin == diffusion.SOURCE_GENERATED).all() and (gen.terminals == 0).all()
    gen2 = generate(model, table, cfg, seed=3)
    assert gen.records().tobytes() == gen2.records().tobytes()
    one = guided_sample(model, 0.8, GuidanceConfig(n_samples=7), seed=0)
    assert len(one) == 7 and one.state_dim == 2
    aug, ext, gtab = augment_source(src, tar, table, model, cfg, seed=3)
    assert len(aug) == 250 and len(ext) == 250 and len(gtab) == 50
    assert ext.fingerprint == aug.fingerprint()
    np.testing.assert_array_equal(ext.rho[:200], table.rho)
    assert gtab.rho_min == table.rho_min
    with pytest.raises(StaleArtifactError):
        augment_source(src, tar, ScoreTable(table.rho, table.rho_hat, table.weight, 5, "x"), model, cfg)
    assert SOURCE_GENERATED in np.unique(aug.origin)


def test_save_load_round_trip(tmp_path, tiny):
    tiny.save(tmp_path / "m.dmcw", {"state_dim": 1, "action_dim": 0})
    back = GuidedDiffusion.load(tmp_path / "m.dmcw")
    np.testing.assert_array_equal(back.sample(10, 0.2, seed=1), tiny.sample(10, 0.2, seed=1))
    assert back.get_params() == tiny.get_params()
