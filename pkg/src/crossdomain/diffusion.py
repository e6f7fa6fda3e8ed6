"""Score-conditioned diffusion over transition vectors ``s ⊕ a ⊕ r ⊕ s'``.

The denoiser predicts clean (normalized) vectors from ``x + sigma * eps``
at the levels of a fixed schedule. Its conditioning is the k-NN proximity
weight of the row; with probability ``mask_prob`` the condition is replaced
by a null token (mask feature -1, condition 0), which gives the
unconditional model used by classifier-free guidance.

Network input per row: ``[x_noisy * c_in(sigma), cond, mask, log(sigma) / 4]``
with ``c_in = 1 / sqrt(sigma^2 + 1)``. With ``preconditioning`` (default) the
clean prediction is ``c_skip * x_noisy + c_out * F(...)`` with
``c_skip = 1 / (sigma^2 + 1)``, ``c_out = sigma / sqrt(sigma^2 + 1)`` and the
squared error weighted by ``1 / c_out^2``; without it, ``F`` is the prediction
and the loss is unweighted.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datasets import SOURCE_GENERATED, TransitionDataset, concat, require_nonempty
from .errors import StaleArtifactError, ValidationError
from .knn import ScoreTable, fit_scorer, rescore
from .tensor import Adam, Mlp, load_networks, mean64, save_networks
from .validation import check_features, check_paired

NULL_TOKEN = -1.0
REAL_TOKEN = 1.0
_SIGMA_FLOOR = 1e-12


def sigma_embedding(sigma):
    """``log(sigma) / 4``, floored so the clean level sigma = 0 stays finite."""
    return np.log(np.maximum(sigma, _SIGMA_FLOOR)) / 4.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise levels ``sigmas[0] = 0 < sigmas[1] < ... < sigmas[T] = sigma_max``."""

    sigmas: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def T(self):
        return len(self.sigmas) - 1


def make_schedule(T=18, sigma_min=0.002, sigma_max=80.0, rho=7.0):
    """Power-law interpolation between ``sigma_min`` (t=1) and ``sigma_max`` (t=T), plus sigma_0 = 0."""
    if T < 2:
        raise ValidationError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < sigma_min < sigma_max:
        raise ValidationError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho <= 0:
        raise ValidationError(f"interpolation exponent must be positive, got {rho}")
    t = np.arange(1, T + 1, dtype=np.float64)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    sig = (hi + (t - T) / (T - 1) * (hi - lo)) ** rho
    sig[0], sig[-1] = sigma_min, sigma_max
    sigmas = np.concatenate([[0.0], sig])
    if not np.all(np.diff(sigmas) > 0):
        raise ValidationError("schedule is not strictly increasing")
    return NoiseSchedule(sigmas, float(sigma_min), float(sigma_max), float(rho))


@dataclass(frozen=True)
class GuidanceConfig:
    guidance: float = 1.5
    kappa: float = 90.0
    n_samples: int = 1_000_000
    n_steps: int = 18
    batch_size: int = 4096

    def __post_init__(self):
        if not 0.0 <= self.kappa < 100.0:
            raise ValidationError(f"kappa must be in [0, 100), got {self.kappa}")
        if self.n_samples < 1:
            raise ValidationError(f"samples to generate must be >= 1, got {self.n_samples}")
        if self.n_steps < 2 or self.batch_size < 1:
            raise ValidationError("need n_steps >= 2 and batch_size >= 1")


class GuidedDiffusion(BaseEstimator):
    """Conditional denoiser trained with random condition masking.

    ``fit(X, y)`` takes raw vectors and their conditioning weights;
    ``sample`` runs the deterministic Euler reverse process with
    classifier-free guidance and returns raw vectors.
    """

    def __init__(self, hidden=(256, 256), n_levels=18, sigma_min=0.002, sigma_max=80.0, rho=7.0,
                 mask_prob=0.25, train_steps=10_000, batch_size=256, lr=3e-4, holdout=0.05,
                 eval_every=500, preconditioning=True, random_state=0):
        self.hidden = hidden
        self.n_levels = n_levels
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.rho = rho
        self.mask_prob = mask_prob
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.lr = lr
        self.holdout = holdout
        self.eval_every = eval_every
        self.preconditioning = preconditioning
        self.random_state = random_state

    # -- network plumbing

    def _inputs(self, z, sigma, cond):
        n = z.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        c_in = 1.0 / np.sqrt(sigma ** 2 + 1.0)
        if cond is None:
            c = np.zeros(n)
            m = np.full(n, NULL_TOKEN)
        else:
            c = (np.broadcast_to(np.asarray(cond, dtype=np.float64), (n,)) - self.cond_mean_) / self.cond_std_
            m = np.full(n, REAL_TOKEN)
        return np.column_stack([z * c_in[:, None], c, m, sigma_embedding(sigma)]).astype(self.net_.dtype)

    def _mix(self, sigma):
        """Skip and output scales ``(c_skip, c_out)`` of the clean-vector prediction."""
        if not self.preconditioning:
            return np.zeros_like(sigma), np.ones_like(sigma)
        return 1.0 / (sigma ** 2 + 1.0), sigma / np.sqrt(sigma ** 2 + 1.0)

    def denoise(self, z, sigma, cond=None):
        """Clean-vector prediction in normalized space; ``cond=None`` is the null token."""
        check_is_fitted(self, "net_")
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (z.shape[0],))
        c_skip, c_out = self._mix(sig)
        out = self.net_.forward(self._inputs(z, sigma, cond)).astype(np.float64)
        return c_skip[:, None] * z + c_out[:, None] * out

    def noise_estimate(self, z, sigma, cond=None):
        return (z - self.denoise(z, sigma, cond)) / sigma

    def guided_noise(self, z, sigma, cond, guidance):
        """``guidance * eps_cond + (1 - guidance) * eps_uncond``; plain eps_uncond when ``cond`` is None."""
        eps_u = self.noise_estimate(z, sigma, None)
        if cond is None:
            return eps_u
        eps_c = self.noise_estimate(z, sigma, cond)
        return guidance * eps_c + (1.0 - guidance) * eps_u

    # -- training

    def _batch_loss(self, z, levels, cond, masked, rng=None, eps=None, grad=False):
        sigma = self.schedule_.sigmas[levels]
        if eps is None:
            eps = rng.standard_normal(z.shape)
        noisy = z + sigma[:, None] * eps
        c = np.where(masked, 0.0, (cond - self.cond_mean_) / self.cond_std_)
        m = np.where(masked, NULL_TOKEN, REAL_TOKEN)
        inp = np.column_stack([noisy / np.sqrt(sigma ** 2 + 1.0)[:, None], c, m, sigma_embedding(sigma)])
        out, cache = self.net_.forward_cache(inp.astype(self.net_.dtype))
        c_skip, c_out = (c[:, None].astype(self.net_.dtype) for c in self._mix(sigma))
        err = c_skip * noisy.astype(self.net_.dtype) + c_out * out - z.astype(self.net_.dtype)
        weight = self._loss_weight(sigma)
        loss = float(mean64(weight * np.sum(err.astype(np.float64) ** 2, axis=1)))
        if not grad:
            return loss, None
        g = (2.0 / len(z)) * weight[:, None].astype(self.net_.dtype) * err * c_out
        grads, _ = self.net_.backward(cache, g)
        return loss, grads

    def _loss_weight(self, sigma):
        """Per-level weight ``1 / c_out^2`` (all ones without preconditioning)."""
        if not self.preconditioning:
            return np.ones_like(sigma)
        c_out = self._mix(sigma)[1]
        return np.where(c_out > 0, 1.0 / np.maximum(c_out, 1e-12) ** 2, 1.0)

    def fit(self, X, y):
        X = check_features(X, dtype=np.float64, min_samples=2)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        check_paired(X, y)
        if not np.isfinite(y).all():
            raise ValidationError("conditioning values must be finite")
        rng = np.random.default_rng(self.random_state)
        self.schedule_ = make_schedule(self.n_levels, self.sigma_min, self.sigma_max, self.rho)
        self.x_mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.x_std_ = np.where(std < 1e-8, 1.0, std)
        self.cond_mean_ = float(y.mean())
        self.cond_std_ = float(y.std()) if y.std() > 1e-8 else 1.0
        self.n_features_in_ = X.shape[1]
        Z = (X - self.x_mean_) / self.x_std_
        perm = rng.permutation(len(Z))
        n_hold = int(round(self.holdout * len(Z))) if len(Z) >= 20 else 0
        hold, train = perm[:n_hold], perm[n_hold:]
        self.net_ = Mlp([X.shape[1] + 3, *self.hidden, X.shape[1]], rng=rng)
        opt = Adam(self.net_.params, lr=self.lr)

        # fixed noise draws so holdout losses are comparable across evaluations
        hold_rng = np.random.default_rng(rng.integers(1 << 63))
        if n_hold:
            h_levels = hold_rng.integers(1, self.schedule_.T + 1, n_hold)
            h_eps = hold_rng.standard_normal((n_hold, X.shape[1]))
            h_mask = hold_rng.random(n_hold) < self.mask_prob

        def holdout_loss():
            if not n_hold:
                return float("nan")
            return self._batch_loss(Z[hold], h_levels, y[hold], h_mask, eps=h_eps)[0]

        self.holdout_history_ = [(0, holdout_loss())]
        self.loss_history_ = []
        for it in range(1, self.train_steps + 1):
            idx = train[rng.integers(0, len(train), self.batch_size)]
            levels = rng.integers(1, self.schedule_.T + 1, len(idx))
            masked = rng.random(len(idx)) < self.mask_prob
            loss, grads = self._batch_loss(Z[idx], levels, y[idx], masked, rng=rng, grad=True)
            opt.step(grads)
            self.loss_history_.append(loss)
            if it % self.eval_every == 0 or it == self.train_steps:
                self.holdout_history_.append((it, holdout_loss()))
        return self

    # -- sampling

    def sample(self, n, cond=None, guidance=1.5, seed=0, n_steps=None):
        """Draw ``n`` raw vectors. ``cond`` is a scalar, a per-row array, or None (unconditional)."""
        check_is_fitted(self, "net_")
        if n < 1:
            raise ValidationError("number of samples must be >= 1")
        sched = self.schedule_ if n_steps is None else make_schedule(
            n_steps, self.sigma_min, self.sigma_max, self.rho)
        if cond is not None:
            cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (n,))
            if not np.isfinite(cond).all():
                raise ValidationError("condition must be finite or None")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.n_features_in_)) * sched.sigmas[-1]
        for t in range(sched.T, 0, -1):
            eps = self.guided_noise(z, sched.sigmas[t], cond, guidance)
            z = z + (sched.sigmas[t - 1] - sched.sigmas[t]) * eps
        return z * self.x_std_ + self.x_mean_

    # -- persistence

    def save(self, path, layout=None):
        check_is_fitted(self, "net_")
        meta = {
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "schedule": self.schedule_.sigmas.tolist(),
            "x_mean": self.x_mean_.tolist(), "x_std": self.x_std_.tolist(),
            "cond_mean": self.cond_mean_, "cond_std": self.cond_std_,
            "null_token": {"mask_feature": NULL_TOKEN, "condition_value": 0.0, "real_mask": REAL_TOKEN},
            "input_layout": "x_noisy*c_in, cond, mask, log(sigma)/4",
            "output": "c_skip*x_noisy + c_out*F" if self.preconditioning else "F",
            "layout": layout or {},
        }
        save_networks(path, {"denoiser": self.net_}, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_networks(path)
        params = meta["params"]
        params["hidden"] = tuple(params["hidden"])
        model = cls(**params)
        model.net_ = nets["denoiser"]
        model.schedule_ = make_schedule(model.n_levels, model.sigma_min, model.sigma_max, model.rho)
        model.x_mean_ = np.asarray(meta["x_mean"])
        model.x_std_ = np.asarray(meta["x_std"])
        model.cond_mean_ = meta["cond_mean"]
        model.cond_std_ = meta["cond_std"]
        model.n_features_in_ = len(model.x_mean_)
        model.layout_ = meta.get("layout", {})
        return model


# --------------------------------------------------------------------------- dataset-level operations


def train_denoiser(src, scores, steps=10_000, seed=0, **params):
    """Fit a GuidedDiffusion on ``src`` conditioned on ``scores.weight``."""
    require_nonempty(src, "source dataset")
    if scores.fingerprint != src.fingerprint():
        raise StaleArtifactError("score table fingerprint does not match the source dataset (stale scores)")
    model = GuidedDiffusion(train_steps=steps, random_state=seed, **params)
    model.fit(src.vectors(), scores.weight)
    model.layout_ = {"state_dim": src.state_dim, "action_dim": src.action_dim}
    return model


def guided_sample(model, y, cfg, seed=0, layout=None):
    """Generate ``cfg.n_samples`` transitions conditioned on ``y`` (None = unconditional)."""
    check_is_fitted(model, "net_")
    layout = layout or model.layout_
    x = model.sample(cfg.n_samples, y, cfg.guidance, seed, cfg.n_steps)
    return TransitionDataset.from_vectors(x, layout["state_dim"], layout["action_dim"], origin=SOURCE_GENERATED)


def sample_condition(scores, kappa, rng, size=None):
    """``chi ~ U[kappa, 100]``, then the chi-th percentile of the source weights."""
    if not 0.0 <= kappa < 100.0:
        raise ValidationError(f"kappa must be in [0, 100), got {kappa}")
    w = scores.weight if isinstance(scores, ScoreTable) else np.asarray(scores, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("score table is empty")
    chi = rng.uniform(kappa, 100.0, size)
    return np.percentile(w, chi)


def generate(model, scores, cfg, seed=0):
    """Batches of guided samples, one freshly drawn condition per batch."""
    seqs = np.random.SeedSequence(seed).spawn(-(-cfg.n_samples // cfg.batch_size))
    parts = []
    remaining = cfg.n_samples
    for ss in seqs:
        cond_rng, sample_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        n = min(cfg.batch_size, remaining)
        y = float(sample_condition(scores, cfg.kappa, cond_rng))
        parts.append(model.sample(n, y, cfg.guidance, sample_rng, cfg.n_steps))
        remaining -= n
    layout = model.layout_
    return TransitionDataset.from_vectors(np.concatenate(parts), layout["state_dim"], layout["action_dim"],
                                          origin=SOURCE_GENERATED)


def augment_source(src, tar, scores, model, cfg, k=5, seed=0, scorer=None):
    """Generate, re-score against the target set, and append to the source dataset.

    Returns ``(augmented dataset, extended score table, generated-row table)``.
    """
    if scores.fingerprint != src.fingerprint():
        raise StaleArtifactError("score table fingerprint does not match the source dataset (stale scores)")
    gen = generate(model, scores, cfg, seed)
    scorer = scorer or fit_scorer(src, tar, k)
    gen_table = rescore(gen, scorer)
    augmented = concat(src, gen)
    return augmented, scores.extend(gen_table, augmented.fingerprint()), gen_table
