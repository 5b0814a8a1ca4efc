import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longicausal.dataset import split_folds
from longicausal.learners import LearnerSpec
from longicausal.nuisance import (
    IceStack,
    PropensityFit,
    cumulative_weights,
    eta_lookup,
    fit_ice,
    fit_propensity,
    write_diagnostics_csv,
)
from longicausal.simulation import DgpSpec, gen_dataset, true_ice_columns

from conftest import make_dataset

LINEAR = [LearnerSpec("linear")]
QUICK = [LearnerSpec("linear"), LearnerSpec("gradient_boosting", {"n_trees": 20})]


def test_ps_calibrated_under_randomization():
    spec = DgpSpec(n=2000, p=10, ps_lin=0, ps_cos=0, ps_int=0, ps_prev=0)
    ds = gen_dataset(spec, 1).dataset
    pf = fit_propensity(ds, split_folds(ds, 1), seed=1)
    assert 0.45 <= pf.raw.mean() <= 0.55
    assert np.all(np.abs(pf.raw.mean(axis=0) - 0.5) < 0.05)


def test_trim_and_complement():
    ds = make_dataset(n=4, T=2)
    A = ds.exposures
    p1 = np.array([[0.001, 0.7]] * 4)
    pf = PropensityFit.from_probabilities(ds, p1)
    assert np.all(pf.prob[:, 0] == 0.01)
    for i in range(4):
        want = 0.7 if A[i, 1] == 1 else 0.3
        assert pf.observed[i, 1] == pytest.approx(want)
    assert pf.trim_hits().tolist() == [4, 0]


def test_cumulative_weights_examples():
    ds = make_dataset(n=6, T=2)
    pf = PropensityFit.from_probabilities(ds, np.full((6, 2), 0.5))
    np.testing.assert_allclose(cumulative_weights(pf, 2), 4.0)
    np.testing.assert_allclose(cumulative_weights(pf, 1), 2.0)
    np.testing.assert_allclose(cumulative_weights(pf, 0), 1.0)
    # raw 0.005 on the observed arm trims to 0.01
    p1 = np.where(ds.exposures[:, :1] == 1, 0.005, 0.995)
    pf = PropensityFit.from_probabilities(ds, np.hstack([p1, np.full((6, 1), 0.5)]))
    np.testing.assert_allclose(cumulative_weights(pf, 2), 200.0)
    with pytest.raises(ValueError):
        cumulative_weights(pf, 3)


@given(st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_trimmed_range_and_weight_bounds(vals, seed):
    ds = make_dataset(n=3, T=2, seed=seed)
    pf = PropensityFit.from_probabilities(ds, np.array(vals).reshape(3, 2))
    assert np.all((pf.prob >= 0.01) & (pf.prob <= 0.99))
    w = cumulative_weights(pf, 2)
    assert np.all((w >= 1 / 0.99**2 - 1e-9) & (w <= 1 / 0.01**2 + 1e-6))


def test_ice_t1_has_two_columns():
    ds = make_dataset(n=60, T=1, seed=2)
    ice = fit_ice(ds, split_folds(ds, 0), LINEAR)
    assert sorted(ice.columns[1]) == [(0,), (1,)]


def test_ice_t2_column_counts_and_lookup():
    ds = make_dataset(n=60, T=2, seed=3)
    ice = fit_ice(ds, split_folds(ds, 0), LINEAR)
    assert len(ice.columns[2]) == 2 and len(ice.columns[1]) == 4
    assert ice.suffixes(1) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    np.testing.assert_array_equal(eta_lookup(ice, 1, (1, 0), [0, 5]), ice.columns[1][(1, 0)][[0, 5]])
    with pytest.raises(ValueError):
        eta_lookup(ice, 1, (1,))
    with pytest.raises(KeyError):
        eta_lookup(ice, 2, (2,))


def test_ice_t3_column_law():
    ds = make_dataset(n=80, T=3, p=2, seed=4)
    ice = fit_ice(ds, split_folds(ds, 0), LINEAR)
    assert [len(ice.columns[t]) for t in (1, 2, 3)] == [8, 4, 2]


def test_fold_hygiene():
    ds = make_dataset(n=80, T=2, seed=5)
    folds = split_folds(ds, 3)
    pf = fit_propensity(ds, folds, QUICK)
    ice = fit_ice(ds, folds, QUICK)
    for fit, stacks in ((pf, pf.stacks), (ice, ice.stacks)):
        for key, st_ in stacks.items():
            role = key[1]
            scored = np.flatnonzero(fit.source_role == role)
            assert np.intersect1d(scored, st_.train_rows).size == 0
            np.testing.assert_array_equal(np.sort(scored), np.sort(st_.meta_rows))
    assert set(pf.source_role[folds.fold_b]) == {"a_trains"}


def test_ice_matches_analytic_composition_on_linear_dgp():
    # residual spread of the step-1 pseudo-outcome scales with y_lin; 0.3 keeps
    # the estimation error of a correctly specified fit well under the band
    spec = DgpSpec.linear(n=4000, y_lin=0.3)
    sim = gen_dataset(spec, 11)
    ds = sim.dataset
    ice = fit_ice(ds, split_folds(ds, 11), LINEAR)
    truth = true_ice_columns(spec, ds)
    for key in ice.suffixes(1):
        assert np.mean(np.abs(ice.columns[1][key] - truth[1][key])) < 0.1


def test_treatment_free_outcome_columns_agree():
    # kappa = 0 also removes the path from A_1 through Z_2 to the outcome
    spec = DgpSpec.linear(n=2000, effect=0.0, kappa=0.0)
    ds = gen_dataset(spec, 12).dataset
    ice = fit_ice(ds, split_folds(ds, 12), QUICK)
    ref = ice.columns[1][(0, 0)]
    for key in ice.suffixes(1):
        diff = ice.columns[1][key] - ref
        assert abs(diff.mean()) < 0.1


def test_fold_too_small():
    ds = make_dataset(n=8, T=1)
    with pytest.raises(ValueError):
        fit_propensity(ds, split_folds(ds, 0), LINEAR, tune_folds=3)


def test_constant_exposure_flagged():
    ds = make_dataset(n=40, T=1)
    from longicausal.dataset import LongitudinalDataset

    const = LongitudinalDataset(np.ones((40, 1), dtype=int), ds.covariates, ds.outcomes)
    pf = fit_propensity(const, split_folds(const, 0), LINEAR)
    assert len(pf.flags["constant_exposure"]) == 2
    assert np.all(pf.prob == 0.99)


def test_from_columns_validates_suffixes():
    with pytest.raises(ValueError):
        IceStack.from_columns(2, {1: {(0, 0): np.zeros(3)}, 2: {(0,): np.zeros(3), (1,): np.zeros(3)}})


def test_diagnostics_csv(tmp_path):
    ds = make_dataset(n=40, T=2)
    folds = split_folds(ds, 0)
    pf = fit_propensity(ds, folds, LINEAR)
    ice = fit_ice(ds, folds, LINEAR)
    path = tmp_path / "diag.csv"
    write_diagnostics_csv(path, pf, ice)
    lines = path.read_text().splitlines()
    assert len(lines) == 41
    assert "weight@2" in lines[0] and "eta@1[11]" in lines[0]
