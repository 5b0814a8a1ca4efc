import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from longicausal.estimator import ScoreTriple
from longicausal.inference import bootstrap_se, ci_ate, normal_quantile, sandwich
from longicausal.learners import LearnerSpec
from longicausal.pipeline import run_mase
from longicausal.simulation import DgpSpec, gen_dataset


def _scores(psi, theta, gram):
    z = np.zeros_like(psi)
    return ScoreTriple(psi, z, z.copy(), psi + gram @ theta, np.asarray(theta, float), gram)


def test_normal_quantile_reference_values():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)
    assert normal_quantile(0.5) == 0.0
    assert normal_quantile(0.84) == pytest.approx(0.994457883209753, abs=1e-12)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            normal_quantile(bad)


def test_ci_plug_in_arithmetic():
    lo, hi = ci_ate(2.0, 0.5, 1, 0.05)
    assert lo == pytest.approx(1.0200, abs=1e-4)
    assert hi == pytest.approx(2.9800, abs=1e-4)
    assert hi - 2.0 == pytest.approx(1.959964 * 0.5, abs=1e-6)


def test_ci_degenerate_and_alpha_checks():
    assert ci_ate(1.5, 0.0, 100) == (1.5, 1.5)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            ci_ate(0.0, 1.0, 10, bad)
    with pytest.raises(ValueError):
        ci_ate(0.0, -1.0, 10)


@given(
    st.floats(-10, 10),
    st.floats(0.01, 5),
    st.integers(1, 10_000),
)
def test_ci_narrows_with_alpha(ate, sigma, n):
    wide = ci_ate(ate, sigma, n, 0.05)
    narrow = ci_ate(ate, sigma, n, 0.32)
    assert narrow[1] - narrow[0] < wide[1] - wide[0]
    assert np.mean(narrow) == pytest.approx(ate, abs=1e-9)
    assert np.mean(wide) == pytest.approx(ate, abs=1e-9)


def test_identity_jacobian_gives_v_equal_f():
    rng = np.random.default_rng(1)
    psi = rng.normal(size=(200, 3))
    res = sandwich(_scores(psi, [0.0, 1.0, 2.0], np.eye(3)), jacobian=-np.eye(3))
    assert np.allclose(res.V, res.F, atol=1e-12)
    assert np.allclose(res.F, psi.T @ psi / 200)


def test_default_jacobian_is_negative_gram():
    gram = np.array([[4.0, 2, 2], [2, 2, 1], [2, 1, 2]])
    psi = np.random.default_rng(2).normal(size=(50, 3))
    res = sandwich(_scores(psi, [0.1, 0.2, 0.3], gram))
    assert np.array_equal(res.J, -gram)
    Jinv = np.linalg.inv(-gram)
    assert np.allclose(res.V, Jinv @ res.F @ Jinv.T)
    c = np.array([0.0, 1.0, 1.0])
    assert res.sigma_ate ** 2 == pytest.approx(c @ res.V @ c)
    assert res.ate == pytest.approx(0.5)
    assert res.se_ate == pytest.approx(res.sigma_ate / np.sqrt(50))


def test_sandwich_psd_and_symmetric():
    psi = np.random.default_rng(3).normal(size=(30, 4))
    res = sandwich(_scores(psi, np.zeros(4), 2 * np.eye(4)))
    assert np.allclose(res.F, res.F.T)
    assert np.allclose(res.V, res.V.T)
    assert np.linalg.eigvalsh(res.F).min() > -1e-12
    assert not res.flags["negative_variance"]


def test_singular_jacobian_raises():
    psi = np.ones((5, 2))
    with pytest.raises(np.linalg.LinAlgError):
        sandwich(_scores(psi, np.zeros(2), np.zeros((2, 2))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_variance_invariant_to_subject_order(seed):
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=(40, 3))
    gram = np.array([[4.0, 2, 2], [2, 2, 1], [2, 1, 2]])
    base = sandwich(_scores(psi, [0.0, 1.0, 1.0], gram))
    perm = sandwich(_scores(psi[rng.permutation(40)], [0.0, 1.0, 1.0], gram))
    assert np.allclose(base.V, perm.V, rtol=1e-12, atol=1e-14)


def test_bootstrap_constant_estimator():
    res = bootstrap_se(lambda d: 3.0, make_dataset(), B=100, seed=0)
    assert res.se == 0.0
    assert res.ci == (3.0, 3.0)
    assert res.failures == 0


def test_bootstrap_is_reproducible_per_seed():
    ds = make_dataset(n=80)
    f = lambda d: float(d.outcome(2, 0).mean())
    a = bootstrap_se(f, ds, B=200, seed=7)
    b = bootstrap_se(f, ds, B=200, seed=7)
    c = bootstrap_se(f, ds, B=201, seed=7)
    assert np.array_equal(a.estimates, b.estimates)
    # the first 200 streams are shared, so the estimates are a prefix
    assert np.array_equal(c.estimates[:200], a.estimates)
    assert c.se == pytest.approx(a.se, rel=0.05)
    sd = np.std(ds.outcome(2, 0), ddof=1) / np.sqrt(80)
    assert 0.7 * sd < a.se < 1.3 * sd


def test_bootstrap_rejects_small_b():
    with pytest.raises(ValueError):
        bootstrap_se(lambda d: 0.0, make_dataset(), B=99)


def test_bootstrap_redraws_failed_resamples():
    calls = {"n": 0}

    def flaky(d):
        calls["n"] += 1
        if calls["n"] <= 3:
            raise np.linalg.LinAlgError("singular")
        return 1.0

    res = bootstrap_se(flaky, make_dataset(), B=100, seed=0)
    assert res.failures == 3
    assert calls["n"] == 103

    def broken(d):
        raise ValueError("always")

    with pytest.raises(RuntimeError):
        bootstrap_se(broken, make_dataset(), B=100, max_retries=2)


@pytest.mark.slow
def test_ci_width_scales_as_inverse_root_n():
    # cheap learners keep the n = 16000 fit affordable; the DGP is linear so
    # they are correctly specified
    ps = [[LearnerSpec("logistic")]]
    ice = [[LearnerSpec("linear")]]
    spec = DgpSpec.linear()
    ns = (1000, 4000, 16000)
    widths = []
    for n in ns:
        per_seed = []
        for s in range(3):
            ds = gen_dataset(spec.replace(n=n), s).dataset
            r = run_mase(ds, fold_seed=s, seed=s, ps_specs=ps, ice_specs=ice, tune_folds=2)
            per_seed.append(r.inference.ci[1] - r.inference.ci[0])
        widths.append(np.mean(per_seed))
    slope = np.polyfit(np.log(ns), np.log(widths), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)
