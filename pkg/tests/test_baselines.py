import numpy as np
import pytest

from conftest import make_dataset
from longicausal.baselines import (
    _msm_fit,
    exposure_marginals,
    ice_lm,
    ice_lm_means,
    logistic_propensity,
    msm_lm,
)
from longicausal.pipeline import run_mase
from longicausal.simulation import DgpSpec, gen_dataset, true_ate


def _ols_ate(ds):
    A = ds.exposures.astype(float)
    D = np.hstack([np.ones((A.shape[0], 1)), A])
    beta, *_ = np.linalg.lstsq(D, ds.outcome(ds.n_timepoints, 0), rcond=None)
    return beta[1:].sum()


def test_known_half_propensity_is_constant_weight_ols():
    ds = make_dataset(n=60, T=3)
    est = msm_lm(ds, propensity=np.full((60, 3), 0.5))
    assert est.ate == pytest.approx(_ols_ate(ds), abs=1e-10)
    assert est.diagnostics["weight_quantiles"][0] == pytest.approx(8.0)
    assert est.diagnostics["weight_quantiles"][-1] == pytest.approx(8.0)


def test_unit_weights_equal_plain_ols():
    ds = make_dataset(n=50)
    assert msm_lm(ds, weights=np.ones(50)).ate == pytest.approx(_ols_ate(ds), abs=1e-12)


def test_injected_propensity_shape_checked():
    with pytest.raises(ValueError):
        msm_lm(make_dataset(), propensity=np.full((3, 2), 0.5))


def test_bootstrap_refuses_injected_propensity():
    ds = make_dataset()
    with pytest.raises(ValueError):
        msm_lm(ds, propensity=np.full((40, 2), 0.5), B=100)


def test_degenerate_msm_design():
    ds = make_dataset()
    A = np.ones_like(ds.exposures)
    from longicausal.dataset import LongitudinalDataset

    flat = LongitudinalDataset(A, ds.covariates, ds.outcomes)
    with pytest.raises(np.linalg.LinAlgError):
        msm_lm(flat, weights=np.ones(40))


def test_logistic_propensity_in_unit_interval():
    p = logistic_propensity(make_dataset(n=80))
    assert p.shape == (80, 2)
    assert np.all((p > 0) & (p < 1))


def test_ice_lm_regime_means_cover_requested_regimes():
    ds = make_dataset(n=60)
    m = ice_lm_means(ds, regimes=[(0, 0), (0, 1), (1, 0), (1, 1)])
    assert set(m) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert ice_lm(ds).ate == pytest.approx(m[(1, 1)] - m[(0, 0)])


def test_ice_lm_reads_only_selected_outcome():
    ds = make_dataset(n=60, q=2)
    a0, a1 = ice_lm(ds, 0).ate, ice_lm(ds, 1).ate
    assert a0 != a1


@pytest.mark.slow
def test_well_specified_linear_dgp_is_unbiased():
    spec = DgpSpec.linear(n=4000)
    truth = true_ate(spec).value
    msm, ice = [], []
    for s in range(10):
        ds = gen_dataset(spec, s).dataset
        msm.append(msm_lm(ds).ate)
        ice.append(ice_lm(ds).ate)
    assert abs(np.mean(msm) - truth) < 0.05 * truth
    assert abs(np.mean(ice) - truth) < 0.05 * truth


def test_treatment_free_outcome_gives_null_effect():
    spec = DgpSpec.linear(n=2000, effect=0.0, kappa=0.0)
    assert abs(true_ate(spec).value) < 0.02
    ates = [ice_lm(gen_dataset(spec, s).dataset).ate for s in range(5)]
    assert abs(np.mean(ates)) < 0.15


@pytest.mark.slow
def test_baselines_more_biased_than_mase_on_nonlinear_dgp():
    spec = DgpSpec(n=1000)
    truth = true_ate(spec).value
    ds = gen_dataset(spec, 0).dataset
    mase = abs(run_mase(ds).ate - truth)
    assert abs(msm_lm(ds).ate - truth) > mase
    assert abs(ice_lm(ds).ate - truth) > mase


@pytest.mark.slow
def test_msm_bootstrap_se_tracks_monte_carlo_sd():
    spec = DgpSpec(n=400, p=10)
    ates, ses = [], []
    for s in range(40):
        est = msm_lm(gen_dataset(spec, s).dataset, B=100, seed=s)
        ates.append(est.ate)
        ses.append(est.se)
    ratio = np.mean(ses) / np.std(ates, ddof=1)
    assert 0.5 <= ratio <= 2.0


def test_stabilization_off_by_default():
    ds = make_dataset(n=80)
    assert msm_lm(ds).ate == msm_lm(ds, stabilized=False).ate


def test_stabilized_weights_average_one_under_true_propensity():
    sim = gen_dataset(DgpSpec.linear(n=20_000), 0)
    est = msm_lm(sim.dataset, propensity=sim.propensity, trim=None, stabilized=True)
    q = est.diagnostics["weight_quantiles"]
    assert q[2] < 1.5  # median stays near one, unlike the raw weights (about 4)
    _, w = _msm_fit(sim.dataset, 0, None, sim.propensity, stabilized=True)
    assert np.mean(w) == pytest.approx(1.0, abs=0.05)


def test_exposure_marginals_first_visit_is_sample_share():
    ds = make_dataset(n=90)
    m = exposure_marginals(ds)
    assert np.allclose(m[:, 0], ds.exposures[:, 0].mean())
    assert np.all((m > 0) & (m < 1))


@pytest.mark.slow
def test_stabilized_msm_unbiased_on_linear_dgp():
    spec = DgpSpec.linear(n=4000)
    truth = true_ate(spec).value
    ates = [msm_lm(gen_dataset(spec, s).dataset, stabilized=True).ate for s in range(10)]
    assert abs(np.mean(ates) - truth) < 0.05 * truth
