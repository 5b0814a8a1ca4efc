"""End-to-end MASE run: folds, nuisances, cross-fit solve, sandwich inference."""

from __future__ import annotations

from dataclasses import dataclass

from .dataset import FoldSplit, LongitudinalDataset, split_folds
from .estimator import MsmSpec, ThetaEstimate, crossfit_estimate
from .inference import SandwichResult, sandwich
from .nuisance import DEFAULT_TRIM, IceStack, PropensityFit, fit_ice, fit_propensity

__all__ = ["MaseResult", "run_mase"]


@dataclass
class MaseResult:
    estimate: ThetaEstimate
    inference: SandwichResult
    pf: PropensityFit
    ice: IceStack
    folds: FoldSplit

    @property
    def ate(self) -> float:
        return self.estimate.ate

    @property
    def se(self) -> float:
        return self.inference.se_ate


def run_mase(
    ds: LongitudinalDataset,
    outcome_j: int = 0,
    *,
    fold_seed: int = 0,
    seed: int = 0,
    ps_specs=None,
    ice_specs=None,
    trim=DEFAULT_TRIM,
    alpha: float = 0.05,
    tune_folds: int = 3,
    retune_per_suffix: bool = False,
    pf: PropensityFit | None = None,
) -> MaseResult:
    """Fit both nuisance sequences on one fold split and solve for theta.

    A previously fitted ``pf`` (same split) can be passed to share the
    propensity models across outcomes.
    """
    folds = split_folds(ds, fold_seed)
    if pf is None:
        pf = fit_propensity(ds, folds, ps_specs, trim, seed=seed, tune_folds=tune_folds)
    ice = fit_ice(
        ds,
        folds,
        ice_specs,
        outcome_j,
        seed=seed,
        tune_folds=tune_folds,
        retune_per_suffix=retune_per_suffix,
    )
    est = crossfit_estimate(ds, folds, pf, ice, MsmSpec(ds.n_timepoints))
    return MaseResult(est, sandwich(est.scores, alpha=alpha), pf, ice, folds)
