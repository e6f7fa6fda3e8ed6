"""Conditional VAE over target behaviour actions, ``p(a | s)``.

The encoder maps ``s ⊕ a`` to a diagonal Gaussian posterior (log-variance
clamped to [-4, 4]); the decoder maps ``s ⊕ z`` to the mean of a fixed-variance
Gaussian over actions. ``log_prob`` is an importance-weighted estimate with
either the prior (default, what the policy regulariser uses) or the
posterior as proposal.
"""

import math

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datasets import require_nonempty
from .errors import ValidationError
from .tensor import Adam, Mlp, load_networks, mean64, save_networks
from .validation import check_features, check_paired

LOGVAR_MIN, LOGVAR_MAX = -4.0, 4.0
LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(x, mean, std):
    """Sum over the last axis of log N(x; mean, std^2)."""
    d = np.shape(x)[-1]
    return (-0.5 * np.sum(((x - mean) / std) ** 2, axis=-1)
            - d * math.log(std) - 0.5 * d * LOG_2PI)


class BehaviorCVAE(BaseEstimator):
    def __init__(self, hidden=(256, 256), latent_dim=None, decoder_std=0.1, train_steps=10_000,
                 batch_size=256, lr=1e-3, holdout=0.05, eval_every=500, random_state=0):
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.decoder_std = decoder_std
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.lr = lr
        self.holdout = holdout
        self.eval_every = eval_every
        self.random_state = random_state

    # -- pieces

    def _norm_states(self, S):
        return (S - self.s_mean_) / self.s_std_

    def _encode(self, Sn, A, cache=False):
        out, c = self.encoder_.forward_cache(np.concatenate([Sn, A], axis=1))
        out = out.astype(np.float64)
        mu = out[:, : self.latent_]
        raw = out[:, self.latent_:]
        logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
        return (mu, logvar, raw, c) if cache else (mu, logvar)

    def _decode(self, Sn, Z):
        return self.decoder_.forward(np.concatenate([Sn, Z], axis=1)).astype(np.float64)

    def _elbo_terms(self, Sn, A, eps, grad=False):
        mu, logvar, raw, enc_cache = self._encode(Sn, A, cache=True)
        std = np.exp(0.5 * logvar)
        Z = mu + std * eps
        dec_out, dec_cache = self.decoder_.forward_cache(np.concatenate([Sn, Z], axis=1))
        dec = dec_out.astype(np.float64)
        recon = gaussian_log_density(A, dec, self.decoder_std)
        kl = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar, axis=1)
        elbo = recon - kl
        if not grad:
            return elbo, None
        n = len(A)
        # loss = -mean(elbo)
        g_dec = (dec - A) / self.decoder_std ** 2 / n
        dec_grads, g_in = self.decoder_.backward(dec_cache, g_dec, need_input_grad=True)
        g_z = g_in[:, Sn.shape[1]:].astype(np.float64)
        g_mu = g_z + mu / n
        g_logvar = g_z * 0.5 * std * eps + 0.5 * (np.exp(logvar) - 1.0) / n
        g_logvar = g_logvar * ((raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX))
        enc_grads, _ = self.encoder_.backward(enc_cache, np.concatenate([g_mu, g_logvar], axis=1))
        return elbo, enc_grads + dec_grads

    # -- estimator API

    def fit(self, S, A):
        S = check_features(S)
        A = check_features(A)
        check_paired(S, A, "states", "actions")
        rng = np.random.default_rng(self.random_state)
        self.state_dim_, self.action_dim_ = S.shape[1], A.shape[1]
        self.latent_ = self.latent_dim or min(2 * self.action_dim_, 8)
        self.s_mean_ = S.mean(axis=0)
        std = S.std(axis=0)
        self.s_std_ = np.where(std < 1e-8, 1.0, std)
        self.encoder_ = Mlp([self.state_dim_ + self.action_dim_, *self.hidden, 2 * self.latent_], rng=rng)
        self.decoder_ = Mlp([self.state_dim_ + self.latent_, *self.hidden, self.action_dim_], rng=rng)
        opt = Adam(self.encoder_.params + self.decoder_.params, lr=self.lr)
        Sn = self._norm_states(S)
        perm = rng.permutation(len(S))
        n_hold = int(round(self.holdout * len(S))) if len(S) >= 20 else 0
        hold, train = perm[:n_hold], perm[n_hold:]
        h_eps = np.random.default_rng(rng.integers(1 << 63)).standard_normal((n_hold, self.latent_))

        def holdout_elbo():
            if not n_hold:
                return float("nan")
            return float(mean64(self._elbo_terms(Sn[hold], A[hold], h_eps)[0]))

        self.holdout_history_ = [(0, holdout_elbo())]
        self.loss_history_ = []
        for it in range(1, self.train_steps + 1):
            idx = train[rng.integers(0, len(train), self.batch_size)]
            eps = rng.standard_normal((len(idx), self.latent_))
            elbo, grads = self._elbo_terms(Sn[idx], A[idx], eps, grad=True)
            opt.step(grads)
            self.loss_history_.append(-float(mean64(elbo)))
            if it % self.eval_every == 0 or it == self.train_steps:
                self.holdout_history_.append((it, holdout_elbo()))
        return self

    def _check_query(self, S, A):
        check_is_fitted(self, "decoder_")
        S = check_features(np.atleast_2d(S), n_features=self.state_dim_)
        A = check_features(np.atleast_2d(A), n_features=self.action_dim_)
        check_paired(S, A, "states", "actions")
        return S, A

    def elbo(self, S, A, seed=0):
        """Single-sample ELBO per row."""
        S, A = self._check_query(S, A)
        eps = np.random.default_rng(seed).standard_normal((len(S), self.latent_))
        return self._elbo_terms(self._norm_states(S), A, eps)[0]

    def log_prob(self, S, A, n_samples=8, seed=0, proposal="prior"):
        """Importance-weighted estimate of log p(a|s) per row."""
        return self._log_prob(S, A, n_samples, seed, proposal, want_grad=False)[0]

    def log_prob_and_grad(self, S, A, n_samples=8, seed=0):
        """Prior-proposal estimate and its gradient w.r.t. the queried actions."""
        return self._log_prob(S, A, n_samples, seed, "prior", want_grad=True)

    def _log_prob(self, S, A, n_samples, seed, proposal, want_grad):
        if n_samples < 1:
            raise ValidationError("need at least one latent sample")
        if proposal not in ("prior", "posterior"):
            raise ValidationError(f"unknown proposal {proposal!r}")
        S, A = self._check_query(S, A)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n, L = len(S), n_samples
        Sn = self._norm_states(S)
        eps = rng.standard_normal((L, n, self.latent_))
        if proposal == "prior":
            Z = eps
            log_w_extra = 0.0
        else:
            mu, logvar = self._encode(Sn, A)
            std = np.exp(0.5 * logvar)
            Z = mu + std * eps
            log_q = np.sum(-0.5 * eps ** 2 - 0.5 * logvar - 0.5 * LOG_2PI, axis=-1)
            log_prior = np.sum(-0.5 * Z ** 2 - 0.5 * LOG_2PI, axis=-1)
            log_w_extra = log_prior - log_q
        dec = self._decode(np.tile(Sn, (L, 1)), Z.reshape(L * n, -1)).reshape(L, n, -1)
        log_lik = gaussian_log_density(A[None], dec, self.decoder_std)
        log_w = log_lik + log_w_extra
        est = logsumexp(log_w, axis=0) - math.log(L)
        if not want_grad:
            return est, None
        resp = softmax(log_w, axis=0)
        grad = np.sum(resp[..., None] * (dec - A[None]), axis=0) / self.decoder_std ** 2
        return est, grad

    # -- persistence

    def save(self, path):
        check_is_fitted(self, "decoder_")
        save_networks(path, {"encoder": self.encoder_, "decoder": self.decoder_}, self.meta())

    def meta(self):
        return {"latent_dim": self.latent_, "decoder_std": self.decoder_std,
                "logvar_clamp": [LOGVAR_MIN, LOGVAR_MAX], "state_dim": self.state_dim_,
                "action_dim": self.action_dim_, "s_mean": self.s_mean_.tolist(),
                "s_std": self.s_std_.tolist(), "hidden": list(self.hidden)}

    @classmethod
    def from_networks(cls, encoder, decoder, meta):
        model = cls(hidden=tuple(meta["hidden"]), latent_dim=meta["latent_dim"],
                    decoder_std=meta["decoder_std"])
        model.encoder_, model.decoder_ = encoder, decoder
        model.latent_ = meta["latent_dim"]
        model.state_dim_, model.action_dim_ = meta["state_dim"], meta["action_dim"]
        model.s_mean_ = np.asarray(meta["s_mean"])
        model.s_std_ = np.asarray(meta["s_std"])
        return model

    @classmethod
    def load(cls, path):
        nets, meta = load_networks(path)
        return cls.from_networks(nets["encoder"], nets["decoder"], meta)


def train_cvae(tar, steps=10_000, seed=0, **params):
    """Fit a BehaviorCVAE on the target dataset's (state, action) pairs."""
    require_nonempty(tar, "target dataset")
    return BehaviorCVAE(train_steps=steps, random_state=seed, **params).fit(tar.states, tar.actions)
