import math

import numpy as np
import pytest

from crossdomain.classifier import (ClassifierScores, DomainClassifier, bce_with_logits, classifier_score,
                                    penalty_from_logits)
from crossdomain.datasets import TransitionDataset
from crossdomain.errors import DimensionError


def test_bce_matches_naive_formula_and_is_stable():
    logits = np.array([-2.0, 0.0, 3.0])
    y = np.array([0.0, 1.0, 1.0])
    p = 1 / (1 + np.exp(-logits))
    naive = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bce_with_logits(logits, y) == pytest.approx(naive, rel=1e-12)
    assert math.isfinite(bce_with_logits([1000.0, -1000.0], [0.0, 1.0]))
    assert bce_with_logits([1000.0], [1.0]) == pytest.approx(0.0, abs=1e-12)


def test_penalty_is_clipped_logit_difference():
    np.testing.assert_array_equal(penalty_from_logits([1.0, 30.0, -30.0], [0.5, 0.0, 0.0]), [0.5, 10.0, -10.0])


def test_classifier_separates_easy_blobs():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-2, 1, (500, 2)), rng.normal(2, 1, (500, 2))])
    y = np.r_[np.zeros(500), np.ones(500)]
    clf = DomainClassifier(hidden=(16,), epochs=100, random_state=0).fit(X, y)
    acc = np.mean((clf.predict_proba(X) > 0.5) == y)
    assert acc > 0.95
    assert clf.loss_history_[-1] < clf.loss_history_[0]
    assert clf.get_params()["hidden"] == (16,)
    with pytest.raises(DimensionError):
        clf.predict_proba(np.zeros((1, 3)))


def test_classifier_is_deterministic():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(200, 3)), rng.integers(0, 2, 200)
    a = DomainClassifier(hidden=(8,), random_state=3).fit(X, y).decision_function(X)
    b = DomainClassifier(hidden=(8,), random_state=3).fit(X, y).decision_function(X)
    np.testing.assert_array_equal(a, b)


def test_classifier_score_shapes_and_csv(tmp_path):
    rng = np.random.default_rng(2)

    def ds(n, loc):
        s = rng.normal(loc, 1, (n, 2))
        return TransitionDataset(s, rng.uniform(-1, 1, (n, 1)), np.zeros(n), s + 0.1, np.zeros(n))

    out = classifier_score(ds(300, 0.0), ds(50, 1.0), epochs=2, hidden=(8,))
    assert out.p_sa.shape == out.p_sas.shape == out.penalty.shape == (300,)
    assert ((out.p_sa > 0) & (out.p_sa < 1)).all()
    assert (np.abs(out.penalty) <= 10).all()
    out.save_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "row,p_sa,p_sas,penalty" and len(lines) == 301


def test_scores_container_round_values(tmp_path):
    s = ClassifierScores(np.array([0.25]), np.array([0.5]), np.array([-1.0986]))
    s.save_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "0,0.25,0.5,-1.0986"
