import math

import numpy as np
import pytest

from zsalign.losses import (LossConfig, infonce, infonce_with_grad, jsd_mi, jsd_mi_with_grad,
                            softmax_ce, softmax_ce_with_grad, softplus_infonce_with_grad)

SP1 = math.log1p(math.exp(-1.0))  # softplus(-1) = 0.31326...


def test_infonce_examples():
    assert infonce(0.4, [0.4] * 7) == pytest.approx(math.log(8), abs=1e-12)
    assert infonce(1.0, [0.0]) == pytest.approx(SP1, abs=1e-12)
    assert round(SP1, 5) == 0.31326
    assert infonce(500.0, [0.0, 1.0]) < 1e-200


def test_infonce_shape_checks():
    with pytest.raises(ValueError):
        infonce([1.0, 2.0], [[0.0]])
    with pytest.raises(ValueError):
        infonce(1.0, np.zeros((1, 0)))


def test_softmax_ce_examples():
    assert softmax_ce([2.0, 0.0], 0) == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-12)
    assert round(softmax_ce([2.0, 0.0], 0), 5) == 0.12693
    for T in (0.1, 1.0, 7.0):
        assert softmax_ce(np.full(5, 0.3), 2, T) == pytest.approx(math.log(5), abs=1e-12)
    assert softmax_ce([1.0, 0.5, 0.2], 0, T=1e-3) < 1e-100
    with pytest.raises(IndexError):
        softmax_ce([1.0, 2.0], 2)
    with pytest.raises(ValueError):
        softmax_ce([1.0, 2.0], 0, T=0.0)


def test_jsd_examples():
    assert jsd_mi([0.0], [0.0]) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert jsd_mi([1.0], [-1.0]) == pytest.approx(2 * SP1, abs=1e-12)
    assert jsd_mi([800.0], [-800.0]) == 0.0


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_loss_gradients_match_finite_differences(rng):
    pos, neg = rng.standard_normal(3), rng.standard_normal((3, 4))
    _, gp, gn = infonce_with_grad(pos, neg)
    np.testing.assert_allclose(gp, _fd(lambda p: infonce(p, neg), pos), atol=1e-8)
    np.testing.assert_allclose(gn, _fd(lambda n: infonce(pos, n), neg), atol=1e-8)

    _, gp, gn = softplus_infonce_with_grad(pos, neg)
    sp = lambda z: np.logaddexp(0.0, z)
    np.testing.assert_allclose(gp, _fd(lambda p: infonce(sp(p), sp(neg)), pos), atol=1e-8)
    np.testing.assert_allclose(gn, _fd(lambda n: infonce(sp(pos), sp(n)), neg), atol=1e-8)

    sim = rng.standard_normal((3, 5))
    _, g = softmax_ce_with_grad(sim, [0, 4, 2], T=0.7)
    np.testing.assert_allclose(g, _fd(lambda s: softmax_ce(s, [0, 4, 2], 0.7), sim), atol=1e-8)

    _, gp, gn = jsd_mi_with_grad(pos, neg)
    np.testing.assert_allclose(gp, _fd(lambda p: jsd_mi(p, neg), pos), atol=1e-8)
    np.testing.assert_allclose(gn, _fd(lambda n: jsd_mi(pos, n), neg), atol=1e-8)


def test_loss_config_regimes():
    assert LossConfig("xsample").regime == "xsample"
    assert LossConfig("ysample").regime == "ysample"
    assert LossConfig("jsd").regime == "xsample"
    assert LossConfig("softmax_ce").regime == "all_classes"
    with pytest.raises(ValueError):
        LossConfig("triplet")
    with pytest.raises(ValueError):
        LossConfig(n_neg=0)
