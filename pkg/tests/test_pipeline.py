import numpy as np
import pytest

from longicausal.dataset import split_folds
from longicausal.estimator import compute_scores, crossfit_estimate, solve_linear
from longicausal.learners import LearnerSpec
from longicausal.nuisance import IceStack, PropensityFit
from longicausal.pipeline import run_mase
from longicausal.simulation import DgpSpec, gen_dataset

FAST = dict(ps_specs=[[LearnerSpec("logistic")]], ice_specs=[[LearnerSpec("linear")]], tune_folds=2)


@pytest.fixture(scope="module")
def linear_ds():
    return gen_dataset(DgpSpec.linear(n=600), 3).dataset


def test_run_mase_fields(linear_ds):
    res = run_mase(linear_ds, **FAST)
    assert res.ate == pytest.approx(res.estimate.theta[1:].sum())
    assert res.se == pytest.approx(res.inference.sigma_ate / np.sqrt(600))
    lo, hi = res.inference.ci
    assert lo < res.ate < hi
    assert res.pf.folds == res.folds and res.ice.folds == res.folds


def test_run_mase_deterministic(linear_ds):
    a = run_mase(linear_ds, fold_seed=2, seed=1)
    b = run_mase(linear_ds, fold_seed=2, seed=1)
    assert a.ate == b.ate and a.se == b.se


def test_alpha_moves_interval_only(linear_ds):
    a = run_mase(linear_ds, alpha=0.05, **FAST)
    b = run_mase(linear_ds, alpha=0.32, **FAST)
    assert a.ate == b.ate
    assert b.inference.ci[1] - b.inference.ci[0] < a.inference.ci[1] - a.inference.ci[0]


def test_shared_propensity_reused_across_outcomes():
    ds = gen_dataset(DgpSpec.linear(n=400, q=2), 0).dataset
    first = run_mase(ds, 0, **FAST)
    second = run_mase(ds, 1, pf=first.pf, **FAST)
    assert second.pf is first.pf
    assert second.ate != first.ate


def test_identical_fold_nuisances_reduce_to_pooled_solve(linear_ds):
    # when both fold roles produce the same predictions, cross-fitting is a no-op
    rng = np.random.default_rng(0)
    n = linear_ds.n_subjects
    folds = split_folds(linear_ds, 0)
    p1 = rng.uniform(0.2, 0.8, size=(n, 2))
    cols = {
        1: {k: rng.normal(size=n) for k in [(0, 0), (0, 1), (1, 0), (1, 1)]},
        2: {k: rng.normal(size=n) for k in [(0,), (1,)]},
    }
    ice = IceStack.from_columns(2, cols)
    pf = PropensityFit.from_probabilities(linear_ds, p1)
    pooled = solve_linear(compute_scores(linear_ds, pf, ice))
    ice_f = IceStack(2, ice.columns, 0, folds)
    pf_f = PropensityFit.from_probabilities(linear_ds, p1, folds=folds)
    cross = crossfit_estimate(linear_ds, folds, pf_f, ice_f)
    assert np.allclose(cross.theta, pooled.theta, atol=1e-12)
