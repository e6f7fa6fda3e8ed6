"""Domain-classifier gap scores (the reward-penalty style alternative to k-NN).

Two MLP classifiers are trained with binary cross-entropy to tell target
rows (label 1) from source rows (label 0): one on ``s ⊕ a`` and one on
``s ⊕ a ⊕ s'``. The per-row penalty is

    delta_r = logit(p_sa) - logit(p_sas)

i.e. ``log p(src|s,a,s')/p(tar|s,a,s') - log p(src|s,a)/p(tar|s,a)``,
clipped to ``[-10, 10]``. No class rebalancing is applied; under heavy
imbalance the predicted probabilities collapse into a narrow band, which
is the behaviour the diagnostic histogram exists to show.
"""

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datasets import compute_norm_stats, require_nonempty
from .tensor import Adam, Mlp, mean64
from .validation import check_features, check_paired

PENALTY_CLIP = 10.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_with_logits(logits, y):
    """Mean binary cross-entropy, stable for large |logit|."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(mean64(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))))


class DomainClassifier(BaseEstimator):
    """Binary MLP classifier; ``predict_proba`` returns p(target) per row."""

    def __init__(self, hidden=(64, 64), epochs=1, batch_size=256, lr=1e-3, max_steps=None, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.max_steps = max_steps
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        check_paired(X, y)
        rng = np.random.default_rng(self.random_state)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.std_ = np.where(std < 1e-8, 1.0, std)
        self.n_features_in_ = X.shape[1]
        Z = ((X - self.mean_) / self.std_).astype(np.float32)
        self.net_ = Mlp([X.shape[1], *self.hidden, 1], rng=rng)
        opt = Adam(self.net_.params, lr=self.lr)
        steps = self.epochs * -(-len(X) // self.batch_size)
        if self.max_steps is not None:
            steps = min(steps, self.max_steps)
        self.loss_history_ = []
        for _ in range(steps):
            idx = rng.integers(0, len(X), self.batch_size)
            out, cache = self.net_.forward_cache(Z[idx])
            logit = out[:, 0].astype(np.float64)
            self.loss_history_.append(bce_with_logits(logit, y[idx]))
            g = ((_sigmoid(logit) - y[idx]) / len(idx))[:, None]
            grads, _ = self.net_.backward(cache, g)
            opt.step(grads)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_features(X, n_features=self.n_features_in_)
        return self.net_.forward((X - self.mean_) / self.std_)[:, 0].astype(np.float64)

    def predict_proba(self, X):
        return _sigmoid(self.decision_function(X))


@dataclass
class ClassifierScores:
    """Per-source-row target probabilities and clipped penalties."""

    p_sa: np.ndarray
    p_sas: np.ndarray
    penalty: np.ndarray

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "p_sa", "p_sas", "penalty"])
            for i, (a, b, c) in enumerate(zip(self.p_sa, self.p_sas, self.penalty)):
                w.writerow([i, f"{a:.9g}", f"{b:.9g}", f"{c:.9g}"])


def penalty_from_logits(logit_sa, logit_sas, clip=PENALTY_CLIP):
    return np.clip(np.asarray(logit_sa) - np.asarray(logit_sas), -clip, clip)


def classifier_score(src, tar, epochs=1, seed=0, hidden=(64, 64), max_steps=None):
    """Train both classifiers on the (imbalanced) union and score every source row."""
    require_nonempty(src, "source dataset")
    require_nonempty(tar, "target dataset")
    norm = compute_norm_stats(src, tar)
    X_sas = norm.normalize(np.concatenate([src.features(), tar.features()]))
    sd, ad = src.state_dim, src.action_dim
    X_sa = X_sas[:, : sd + ad]
    y = np.concatenate([np.zeros(len(src)), np.ones(len(tar))])
    ss = np.random.SeedSequence(seed).spawn(2)
    clf_sa = DomainClassifier(hidden, epochs, max_steps=max_steps,
                              random_state=np.random.default_rng(ss[0])).fit(X_sa, y)
    clf_sas = DomainClassifier(hidden, epochs, max_steps=max_steps,
                               random_state=np.random.default_rng(ss[1])).fit(X_sas, y)
    n = len(src)
    l_sa = clf_sa.decision_function(X_sa[:n])
    l_sas = clf_sas.decision_function(X_sas[:n])
    return ClassifierScores(_sigmoid(l_sa), _sigmoid(l_sas), penalty_from_logits(l_sa, l_sas))
