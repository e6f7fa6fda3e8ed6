"""Implicit Q-learning with score-weighted source terms and a behaviour-support regulariser.

Per step a batch is drawn from the target set and an equally sized one from
the (possibly augmented) source set, each from its own RNG stream. Target
and source contributions are computed in separate forward/backward passes
and their gradients summed:

* V:  mean_tar L2_tau(Q_t(s,a) - V(s))       + mean_src omega * L2_tau(...)
* Q:  mean_tar (r + g(1-d)V(s') - Q(s,a))^2  + mean_src omega * (...)^2
* pi: -mean_mixed [m * exp(beta * A) log pi(a|s)] - lam * mean_mixed [m * log p_b(mu(s)|s)]

``omega = w * 1(w >= threshold)`` comes from the score table, and ``m`` is
the selection indicator (1 for target rows), so a gated source row
contributes exactly zero gradient to every network. Passing no score table
gives plain IQL on the pooled batch (omega and m all 1, unmultiplied).
"""

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import envsim
from .cvae import BehaviorCVAE, train_cvae
from .datasets import require_nonempty
from .errors import DimensionError, StaleArtifactError, ValidationError
from .knn import selection_weights
from .tensor import Adam, Mlp, load_networks, mean64, polyak_update, save_networks

LOG_2PI = math.log(2.0 * math.pi)
METRIC_COLUMNS = ("step", "loss_v", "loss_q", "loss_pi", "mean_omega", "frac_selected", "eval_return", "eval_ns")


def expectile_loss(u, tau):
    """Elementwise ``|tau - 1(u < 0)| * u^2``."""
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"expectile must be in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * u * u


@dataclass(frozen=True)
class IQLConfig:
    hidden: tuple = (256, 256)
    gamma: float = 0.99
    expectile: float = 0.7
    beta: float = 3.0
    adv_clip: float = 100.0
    lam: float = 0.1
    xi: float = 50.0
    polyak: float = 5e-3
    lr: float = 3e-4
    batch_size: int = 128
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    cvae_samples: int = 8
    cvae_steps: int = 5000
    cvae_hidden: tuple = (256, 256)

    def __post_init__(self):
        if not 0.0 < self.expectile < 1.0:
            raise ValidationError("expectile must be in (0, 1)")
        if not 0.0 < self.polyak < 1.0:
            raise ValidationError("Polyak coefficient must be in (0, 1)")
        if not 0.0 <= self.xi < 100.0:
            raise ValidationError("xi must be in [0, 100)")
        if self.lam < 0 or self.batch_size < 1:
            raise ValidationError("need lam >= 0 and batch_size >= 1")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("hidden", "cvae_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Batch:
    s: np.ndarray        # normalized states
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray       # normalized next states
    done: np.ndarray
    raw_s: np.ndarray    # states in data units (for the behaviour model)

    def __len__(self):
        return len(self.r)

    @staticmethod
    def cat(a, b):
        return Batch(*(np.concatenate([getattr(a, f), getattr(b, f)]) for f in
                       ("s", "a", "r", "s2", "done", "raw_s")))


class PolicyBundle:
    """Twin Q (+ targets), V, Gaussian policy, optimizer states and the behaviour model."""

    def __init__(self, state_dim, action_dim, config=None, seed=0, obs_mean=None, obs_std=None, cvae=None):
        self.config = config or IQLConfig()
        self.state_dim, self.action_dim = state_dim, action_dim
        rng = np.random.default_rng(seed)
        h = self.config.hidden
        self.q1 = Mlp([state_dim + action_dim, *h, 1], rng=rng)
        self.q2 = Mlp([state_dim + action_dim, *h, 1], rng=rng)
        self.v = Mlp([state_dim, *h, 1], rng=rng)
        self.pi = Mlp([state_dim, *h, action_dim], rng=rng)
        self.q1_t, self.q2_t = self.q1.copy(), self.q2.copy()
        self.log_std = np.zeros(action_dim, np.float32)
        self.obs_mean = np.zeros(state_dim) if obs_mean is None else np.asarray(obs_mean, np.float64)
        self.obs_std = np.ones(state_dim) if obs_std is None else np.asarray(obs_std, np.float64)
        self.cvae = cvae
        self._make_optimizers()

    def _make_optimizers(self):
        lr = self.config.lr
        self.opt_q = Adam(self.q1.params + self.q2.params, lr=lr)
        self.opt_v = Adam(self.v.params, lr=lr)
        self.opt_pi = Adam(self.pi.params + [self.log_std], lr=lr)

    def networks(self):
        return {"q1": self.q1, "q2": self.q2, "q1_target": self.q1_t, "q2_target": self.q2_t,
                "v": self.v, "pi": self.pi}

    def normalize(self, states):
        return ((np.asarray(states, np.float64) - self.obs_mean) / self.obs_std).astype(np.float32)

    def act(self, states, rng=None):
        """Deterministic mean action, the policy used for evaluation."""
        s = np.atleast_2d(states)
        if s.shape[1] != self.state_dim:
            raise DimensionError(f"state width {s.shape[1]} != {self.state_dim}")
        return np.tanh(self.pi.forward(self.normalize(s))).astype(np.float64)

    __call__ = act

    def clamped_log_std(self):
        return np.clip(self.log_std, self.config.log_std_min, self.config.log_std_max)

    def sample(self, states, rng):
        mu = self.act(states)
        return mu + np.exp(self.clamped_log_std()) * rng.standard_normal(mu.shape)

    def q_target_min(self, sa):
        return np.minimum(self.q1_t.forward(sa), self.q2_t.forward(sa))[:, 0].astype(np.float64)

    def snapshot(self):
        """Flat copy of every parameter, for equality checks."""
        return [p.copy() for net in self.networks().values() for p in net.params] + [self.log_std.copy()]

    # -- persistence

    def save(self, path, extra=None):
        nets = dict(self.networks())
        meta = {"config": self.config.to_dict(), "state_dim": self.state_dim, "action_dim": self.action_dim,
                "log_std": self.log_std.tolist(), "obs_mean": self.obs_mean.tolist(),
                "obs_std": self.obs_std.tolist(), "cvae": None, "extra": extra or {}}
        if self.cvae is not None:
            nets["cvae_encoder"] = self.cvae.encoder_
            nets["cvae_decoder"] = self.cvae.decoder_
            meta["cvae"] = self.cvae.meta()
        save_networks(path, nets, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_networks(path)
        bundle = cls(meta["state_dim"], meta["action_dim"], IQLConfig.from_dict(meta["config"]),
                     obs_mean=meta["obs_mean"], obs_std=meta["obs_std"])
        bundle.q1, bundle.q2 = nets["q1"], nets["q2"]
        bundle.q1_t, bundle.q2_t = nets["q1_target"], nets["q2_target"]
        bundle.v, bundle.pi = nets["v"], nets["pi"]
        bundle.log_std = np.asarray(meta["log_std"], np.float32)
        if meta.get("cvae"):
            bundle.cvae = BehaviorCVAE.from_networks(nets["cvae_encoder"], nets["cvae_decoder"], meta["cvae"])
        bundle._make_optimizers()
        bundle.meta = meta
        return bundle


# --------------------------------------------------------------------------- losses and updates


def _sa(batch):
    return np.concatenate([batch.s, batch.a], axis=1)


def _add(total, grads):
    if total is None:
        return grads
    return [t + g for t, g in zip(total, grads)]


def _check_weights(batch, weight):
    if weight is not None and np.shape(weight) != (len(batch),):
        raise DimensionError(f"weights of shape {np.shape(weight)} for a batch of {len(batch)} rows")


def _v_terms(bundle, batch, weight):
    tau = bundle.config.expectile
    q_t = bundle.q_target_min(_sa(batch))
    v, cache = bundle.v.forward_cache(batch.s)
    u = q_t - v[:, 0].astype(np.float64)
    scale = np.abs(tau - (u < 0))
    per_row = scale * u * u
    g = -2.0 * scale * u
    if weight is not None:
        per_row = weight * per_row
        g = weight * g
    grads, _ = bundle.v.backward(cache, (g / len(batch))[:, None])
    return float(mean64(per_row)), grads


def _q_terms(bundle, batch, weight):
    cfg = bundle.config
    y = batch.r + cfg.gamma * (1.0 - batch.done) * bundle.v.forward(batch.s2)[:, 0].astype(np.float64)
    sa = _sa(batch)
    loss, grads = 0.0, []
    for net in (bundle.q1, bundle.q2):
        q, cache = net.forward_cache(sa)
        err = q[:, 0].astype(np.float64) - y
        per_row = err * err
        g = 2.0 * err
        if weight is not None:
            per_row = weight * per_row
            g = weight * g
        loss += float(mean64(per_row))
        grads += net.backward(cache, (g / len(batch))[:, None])[0]
    return loss, grads


def update_value(bundle, batch_tar, batch_src=None, omega=None):
    """One V step then one twin-Q step (target + weighted source terms), then Polyak."""
    _check_weights(batch_src, omega) if batch_src is not None else None
    parts = [(batch_tar, None)] + ([(batch_src, omega)] if batch_src is not None else [])
    loss_v, grads = 0.0, None
    for b, w in parts:
        lv, g = _v_terms(bundle, b, w)
        loss_v += lv
        grads = _add(grads, g)
    bundle.opt_v.step(grads)
    loss_q, grads = 0.0, None
    for b, w in parts:
        lq, g = _q_terms(bundle, b, w)
        loss_q += lq
        grads = _add(grads, g)
    bundle.opt_q.step(grads)
    polyak_update(bundle.q1_t, bundle.q1, bundle.config.polyak)
    polyak_update(bundle.q2_t, bundle.q2, bundle.config.polyak)
    return {"loss_v": loss_v, "loss_q": loss_q}


def update_policy(bundle, batch, mask=None, rng=None):
    """Advantage-weighted regression plus the behaviour-support term at the mean action."""
    report, grads = policy_loss_and_grads(bundle, batch, mask, rng)
    bundle.opt_pi.step(grads)
    return report


def policy_loss_and_grads(bundle, batch, mask=None, rng=None):
    """Policy loss report and gradients aligned with ``pi.params + [log_std]``."""
    cfg = bundle.config
    if cfg.lam > 0 and bundle.cvae is None:
        raise ValidationError("policy regularization (lam > 0) needs a behavior CVAE")
    _check_weights(batch, mask)
    n = len(batch)
    adv = bundle.q_target_min(_sa(batch)) - bundle.v.forward(batch.s)[:, 0].astype(np.float64)
    wts = np.minimum(np.exp(np.minimum(cfg.beta * adv, 50.0)), cfg.adv_clip)
    if mask is not None:
        wts = mask * wts
    out, cache = bundle.pi.forward_cache(batch.s)
    mu = np.tanh(out.astype(np.float64))
    log_std = bundle.clamped_log_std().astype(np.float64)
    std = np.exp(log_std)
    diff = batch.a - mu
    logp = np.sum(-0.5 * (diff / std) ** 2 - log_std - 0.5 * LOG_2PI, axis=1)
    loss = -float(mean64(wts * logp))
    g_mu = -(wts[:, None] * diff / std ** 2) / n
    in_range = (bundle.log_std >= cfg.log_std_min) & (bundle.log_std <= cfg.log_std_max)
    g_log_std = (-np.sum(wts[:, None] * ((diff / std) ** 2 - 1.0), axis=0) / n) * in_range
    reg = 0.0
    if cfg.lam > 0:
        logb, g_a = bundle.cvae.log_prob_and_grad(batch.raw_s, mu, cfg.cvae_samples, rng)
        m = np.ones(n) if mask is None else mask
        reg = -cfg.lam * float(mean64(m * logb))
        g_mu = g_mu - cfg.lam * m[:, None] * g_a / n
    g_out = g_mu * (1.0 - mu * mu)
    grads, _ = bundle.pi.backward(cache, g_out)
    return ({"loss_pi": loss + reg, "loss_awr": loss, "loss_reg": reg},
            grads + [g_log_std.astype(bundle.log_std.dtype)])


# --------------------------------------------------------------------------- training loop


class _Sampler:
    """Index-sampled minibatches from one dataset with precomputed normalized arrays."""

    def __init__(self, ds, bundle, rng):
        self.s = bundle.normalize(ds.states)
        self.s2 = bundle.normalize(ds.next_states)
        self.a = ds.actions.astype(np.float64)
        self.r = ds.rewards.astype(np.float64)
        self.done = ds.terminals.astype(np.float64)
        self.raw_s = np.asarray(ds.states, np.float64)
        self.rng = rng

    def draw(self, n):
        idx = self.rng.integers(0, len(self.r), n)
        return idx, Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx], self.raw_s[idx])


def _obs_stats(*datasets):
    s = np.concatenate([np.concatenate([d.states, d.next_states]) for d in datasets if d is not None])
    s = s.astype(np.float64)
    std = s.std(axis=0)
    return s.mean(axis=0), np.where(std < 1e-8, 1.0, std)


@dataclass
class EvalSetup:
    spec: object
    ref: object
    episodes: int = 10
    seed: int = 12345


@dataclass
class TrainResult:
    bundle: PolicyBundle
    metrics: list = field(default_factory=list)
    omega: np.ndarray = None


def train(src, scores, tar, config=None, steps=10_000, seed=0, cvae=None, evaluation=None, log_every=1000):
    """The full loop: ``steps`` x (value update, policy update).

    ``scores=None`` trains naive-mixing IQL on ``src`` and ``tar`` (no weights);
    ``src=None`` trains on the target set alone.
    """
    config = config or IQLConfig()
    require_nonempty(tar, "target dataset")
    omega = None
    if scores is not None:
        if src is None:
            raise ValidationError("a score table was given without a source dataset")
        if scores.fingerprint != src.fingerprint():
            raise StaleArtifactError("score table fingerprint does not match the source dataset (stale scores)")
        omega = selection_weights(scores, config.xi)
    if src is not None and (src.state_dim, src.action_dim) != (tar.state_dim, tar.action_dim):
        raise DimensionError("source and target datasets have different dims")
    ss_init, ss_tar, ss_src, ss_reg, ss_cvae = np.random.SeedSequence(seed).spawn(5)
    if config.lam > 0 and cvae is None:
        cvae = train_cvae(tar, steps=config.cvae_steps, seed=np.random.default_rng(ss_cvae),
                          hidden=config.cvae_hidden)
    obs_mean, obs_std = _obs_stats(tar, src)
    bundle = PolicyBundle(tar.state_dim, tar.action_dim, config, np.random.default_rng(ss_init),
                          obs_mean, obs_std, cvae)
    tar_sampler = _Sampler(tar, bundle, np.random.default_rng(ss_tar))
    src_sampler = _Sampler(src, bundle, np.random.default_rng(ss_src)) if src is not None else None
    reg_rng = np.random.default_rng(ss_reg)
    gate = None if omega is None else (omega > 0).astype(np.float64)
    mean_omega = 1.0 if omega is None else float(omega.mean())
    frac_sel = 1.0 if omega is None else float(gate.mean())
    metrics = []
    for it in range(1, steps + 1):
        _, bt = tar_sampler.draw(config.batch_size)
        if src_sampler is None:
            rep = update_value(bundle, bt)
            rep.update(update_policy(bundle, bt, None, reg_rng))
        else:
            idx, bs = src_sampler.draw(config.batch_size)
            w = None if omega is None else omega[idx]
            rep = update_value(bundle, bt, bs, w)
            mask = None if gate is None else np.concatenate([np.ones(len(bt)), gate[idx]])
            rep.update(update_policy(bundle, Batch.cat(bt, bs), mask, reg_rng))
        if it % log_every == 0 or it == steps:
            row = {"step": it, "loss_v": rep["loss_v"], "loss_q": rep["loss_q"], "loss_pi": rep["loss_pi"],
                   "mean_omega": mean_omega, "frac_selected": frac_sel,
                   "eval_return": float("nan"), "eval_ns": float("nan")}
            if evaluation is not None:
                j, ns = envsim.evaluate(evaluation.spec, bundle.act, evaluation.ref,
                                        evaluation.episodes, evaluation.seed)
                row["eval_return"], row["eval_ns"] = j, ns
            metrics.append(row)
    return TrainResult(bundle, metrics, omega)


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row["step"]] + [f"{row[c]:.9g}" for c in METRIC_COLUMNS[1:]])


class CrossDomainIQL(BaseEstimator):
    """Estimator wrapper: ``fit(tar, src, scores)`` then ``predict(states)`` -> mean actions."""

    def __init__(self, steps=10_000, lam=0.1, xi=50.0, beta=3.0, expectile=0.7, hidden=(256, 256),
                 batch_size=128, cvae_steps=5000, random_state=0):
        self.steps = steps
        self.lam = lam
        self.xi = xi
        self.beta = beta
        self.expectile = expectile
        self.hidden = hidden
        self.batch_size = batch_size
        self.cvae_steps = cvae_steps
        self.random_state = random_state

    def config(self):
        return IQLConfig(hidden=tuple(self.hidden), lam=self.lam, xi=self.xi, beta=self.beta,
                         expectile=self.expectile, batch_size=self.batch_size, cvae_steps=self.cvae_steps)

    def fit(self, tar, src=None, scores=None, evaluation=None):
        result = train(src, scores, tar, self.config(), self.steps, self.random_state, evaluation=evaluation)
        self.bundle_, self.metrics_, self.omega_ = result.bundle, result.metrics, result.omega
        return self

    def predict(self, states):
        check_is_fitted(self, "bundle_")
        return self.bundle_.act(states)
