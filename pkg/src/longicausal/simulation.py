"""Synthetic longitudinal studies with known counterfactuals, and a Monte Carlo driver.

Data-generating process, visits t = 1..T, p confounders per visit:

    Z_t = zeta Z_{t-1} + kappa a_{t-1} e + sqrt(1 - zeta^2) eps_t,  eps_t ~ N(0, Sigma)
    logit P(A_t = 1) = c_ps + s_ps(Z_t) + ps_prev (A_{t-1} - 1/2)
    Y_t(a) = beta_0 + sum_{k<=t} beta_k a_k + sum_{k<=t} lag^(t-k) s_y(Z_k) + noise

``Sigma`` is AR(1) with parameter ``rho`` and ``e`` marks the first five
coordinates.  Each ``s`` combines three fixed feature maps of one block:

    L(z) = z_1 + ... + z_5
    C(z) = sum_{j=6..10} (cos z_j - exp(-1/2))
    I(z) = z_1 z_2 + z_3 z_4 + z_6 z_7

with weights ``(lin, cos, int)`` per model.  Every map has mean zero when
``zeta = kappa = 0`` except ``I``, whose mean is ``3 rho``.  Counterfactual
covariates share their noise across regimes; outcome noise is drawn once
per distinct treatment prefix, so ``Y_t`` under two regimes agreeing up to
visit t is the same number.  The observed record follows the realized path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import LongitudinalDataset, enumerate_regimes

__all__ = [
    "DgpSpec",
    "SimulatedDataset",
    "gen_dataset",
    "TruthResult",
    "true_ate",
    "true_propensity",
    "true_ice_columns",
    "MethodSummary",
    "MonteCarloReport",
    "run_monte_carlo",
    "METHODS",
    "CSV_HEADER",
]

N_FEATURE_COORDS = 10
METHODS = ("mase", "msm_lm", "ice_lm")
CSV_HEADER = ("method", "estimation", "mc_sd", "relative_bias", "estimated_se", "coverage")
_EXP_HALF = math.exp(-0.5)


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the simulated study; serializable to JSON.

    The defaults put most of both nuisances in the cosine block, so linear
    and logistic models miss it while the stock learners mostly recover it.
    With no lag and no exposure feedback the true contrast is ``effect``.
    ``configs/simulate_default.json`` pins every value.
    """

    n: int = 1000
    T: int = 2
    p: int = 50
    q: int = 1
    rho: float = 0.5
    zeta: float = 0.0
    kappa: float = 0.0
    sigma_y: float = 1.0
    effect: float = 5.0
    betas: tuple | None = None
    beta0: float = 0.0
    ps_intercept: float = 0.0
    ps_lin: float = 0.15
    ps_cos: float = 1.0
    ps_int: float = 0.1
    ps_prev: float = 0.5
    y_lin: float = 0.3
    y_cos: float = 1.5
    y_int: float = 0.1
    y_lag: float = 0.0

    def __post_init__(self):
        if self.n < 1 or self.T < 1 or self.q < 1:
            raise ValueError("n, T and q must be positive")
        if self.p < N_FEATURE_COORDS:
            raise ValueError(f"p must be at least {N_FEATURE_COORDS}")
        if not -1.0 < self.rho < 1.0 or not -1.0 < self.zeta < 1.0:
            raise ValueError("rho and zeta must lie in (-1, 1)")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be non-negative")
        if self.betas is not None:
            b = tuple(float(v) for v in self.betas)
            if len(b) != self.T:
                raise ValueError(f"betas must have length T={self.T}")
            object.__setattr__(self, "betas", b)
        vals = [v for v in dataclasses.asdict(self).values() if isinstance(v, float)]
        if not all(math.isfinite(v) for v in vals + list(self.beta)):
            raise ValueError("non-finite DGP parameter")

    @property
    def beta(self) -> tuple:
        """Per-visit exposure effects; the effect is split equally by default."""
        if self.betas is not None:
            return self.betas
        return tuple(self.effect / self.T for _ in range(self.T))

    @property
    def nominal_ate(self) -> float:
        return float(sum(self.beta))

    def replace(self, **kw) -> "DgpSpec":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = None if self.betas is None else list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d) -> "DgpSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown DGP keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("betas") is not None:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def linear(cls, **kw) -> "DgpSpec":
        """Variant whose nuisances are linear/logistic in the history."""
        base = dict(
            p=10, zeta=0.5, kappa=0.5, ps_cos=0.0, ps_int=0.0, ps_lin=0.25,
            y_cos=0.0, y_int=0.0, y_lin=1.0, y_lag=0.5, effect=3.0,
        )
        base.update(kw)
        return cls(**base)

    def truth_key(self) -> str:
        """Hash of everything that affects the counterfactual contrast."""
        d = self.to_dict()
        d.pop("n")
        d["beta"] = list(self.beta)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def ar1_cov(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _feature_maps(z):
    lin = z[:, 0:5].sum(axis=1)
    cos = (np.cos(z[:, 5:10]) - _EXP_HALF).sum(axis=1)
    inter = z[:, 0] * z[:, 1] + z[:, 2] * z[:, 3] + z[:, 5] * z[:, 6]
    return lin, cos, inter


def _s_ps(spec, z):
    lin, cos, inter = _feature_maps(z)
    return spec.ps_lin * lin + spec.ps_cos * cos + spec.ps_int * inter


def _s_y(spec, z):
    lin, cos, inter = _feature_maps(z)
    return spec.y_lin * lin + spec.y_cos * cos + spec.y_int * inter


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ps_logit(spec, z_t, a_prev):
    out = spec.ps_intercept + _s_ps(spec, z_t)
    if a_prev is not None:
        out = out + spec.ps_prev * (a_prev - 0.5)
    return out


def _mu(spec, t, a_prefix, z_blocks):
    """Outcome mean at visit t; ``a_prefix`` is (n, t) or a length-t tuple."""
    beta = spec.beta
    n = z_blocks[0].shape[0]
    a = np.broadcast_to(np.asarray(a_prefix, dtype=float), (n, t))
    out = spec.beta0 + a @ np.asarray(beta[:t])
    for k in range(1, t + 1):
        out = out + spec.y_lag ** (t - k) * _s_y(spec, z_blocks[k - 1])
    return out


@dataclass
class SimulatedDataset:
    """Observed data plus every counterfactual outcome.

    ``counterfactual[r, t-1]`` is the ``(n, q)`` matrix of ``Y_t`` under
    regime ``regimes[r]`` (which depends only on its first t entries).
    """

    dataset: LongitudinalDataset
    counterfactual: np.ndarray
    regimes: tuple
    propensity: np.ndarray
    covariate_paths: dict = field(repr=False, default_factory=dict)

    def outcome_under(self, regime, t=None, j=0) -> np.ndarray:
        T = self.dataset.n_timepoints
        t = T if t is None else t
        r = self.regimes.index(tuple(int(v) for v in regime))
        return self.counterfactual[r, t - 1, :, j]


def _draw(spec: DgpSpec, n: int, rng: np.random.Generator):
    T, p = spec.T, spec.p
    L = np.linalg.cholesky(ar1_cov(p, spec.rho))
    eps = [rng.standard_normal((n, p)) @ L.T for _ in range(T)]
    unif = rng.random((n, T))
    regimes = [r.values for r in enumerate_regimes(T)]
    noise = rng.standard_normal((len(regimes), T, n, spec.q)) * spec.sigma_y
    return eps, unif, regimes, noise


def _z_path(spec, eps, a_path_cols, t):
    """Covariate blocks Z_1..Z_t along exposures (n, >=t-1)."""
    shrink = math.sqrt(1.0 - spec.zeta**2)
    blocks = [eps[0]]
    for k in range(2, t + 1):
        prev = blocks[-1]
        z = spec.zeta * prev + shrink * eps[k - 1]
        if spec.kappa:
            z = z.copy()
            z[:, 0:5] += spec.kappa * a_path_cols[:, k - 2 : k - 1]
        blocks.append(z)
    return blocks


def gen_dataset(spec: DgpSpec, seed: int, n: int | None = None) -> SimulatedDataset:
    """Draw one study of ``n`` (default ``spec.n``) subjects."""
    n = spec.n if n is None else int(n)
    rng = np.random.default_rng(seed)
    eps, unif, regimes, noise = _draw(spec, n, rng)
    T = spec.T

    A = np.zeros((n, T), dtype=np.int8)
    P = np.zeros((n, T))
    for t in range(1, T + 1):
        z_obs = _z_path(spec, eps, A.astype(float), t)
        a_prev = A[:, t - 2].astype(float) if t >= 2 else None
        P[:, t - 1] = _expit(_ps_logit(spec, z_obs[-1], a_prev))
        A[:, t - 1] = (unif[:, t - 1] < P[:, t - 1]).astype(np.int8)
    Z_obs = _z_path(spec, eps, A.astype(float), T)

    cf = np.empty((len(regimes), T, n, spec.q))
    paths = {}
    for r, reg in enumerate(regimes):
        a_cols = np.broadcast_to(np.asarray(reg, float), (n, T))
        zb = _z_path(spec, eps, a_cols, T)
        paths[reg] = zb
        for t in range(1, T + 1):
            # outcome noise is shared by regimes that agree up to visit t
            r_first = regimes.index(reg[:t] + (0,) * (T - t))
            cf[r, t - 1] = _mu(spec, t, reg[:t], zb[:t])[:, None] + noise[r_first, t - 1]

    obs_idx = np.zeros(n, dtype=np.int64)
    for t in range(T):
        obs_idx = obs_idx * 2 + A[:, t]
    outcomes = tuple(cf[obs_idx, t, np.arange(n)] for t in range(T))
    ds = LongitudinalDataset(A, tuple(Z_obs), outcomes)
    return SimulatedDataset(ds, cf, tuple(regimes), P, paths)


@dataclass
class TruthResult:
    value: float
    se: float
    n_oracle: int


_TRUTH_CACHE: dict = {}


def _cache_dir():
    d = os.environ.get("LONGICAUSAL_CACHE")
    return d if d else os.path.join(os.path.expanduser("~"), ".cache", "longicausal")


def true_ate(
    spec: DgpSpec, n_oracle: int = 200_000, seed: int = 20240917, chunk: int = 50_000,
    use_disk_cache: bool = True,
) -> TruthResult:
    """Monte Carlo mean of Y_T(1,...,1) - Y_T(0,...,0) over fresh subjects."""
    if n_oracle < 100_000:
        raise ValueError("the truth oracle needs at least 1e5 draws")
    key = f"{spec.truth_key()}-{n_oracle}-{seed}-{chunk}"
    if key in _TRUTH_CACHE:
        return _TRUTH_CACHE[key]
    path = os.path.join(_cache_dir(), f"truth-{key}.json")
    if use_disk_cache and os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            res = TruthResult(**json.load(fh))
        _TRUTH_CACHE[key] = res
        return res
    T = spec.T
    ones, zeros = (1,) * T, (0,) * T
    total, total_sq, done, c = 0.0, 0.0, 0, 0
    while done < n_oracle:
        m = min(chunk, n_oracle - done)
        sim = gen_dataset(spec, [seed, c], n=m)
        diff = sim.outcome_under(ones) - sim.outcome_under(zeros)
        total += float(diff.sum())
        total_sq += float((diff**2).sum())
        done += m
        c += 1
    mean = total / done
    var = max(total_sq / done - mean**2, 0.0) * done / (done - 1)
    res = TruthResult(mean, math.sqrt(var / done), done)
    _TRUTH_CACHE[key] = res
    if use_disk_cache:
        try:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(dataclasses.asdict(res), fh)
        except OSError:
            pass
    return res


def true_propensity(spec: DgpSpec, ds: LongitudinalDataset) -> np.ndarray:
    """True P(A_t = 1 | history) evaluated on a generated dataset, shape (n, T)."""
    out = np.empty(ds.exposures.shape)
    for t in range(1, spec.T + 1):
        a_prev = ds.exposures[:, t - 2].astype(float) if t >= 2 else None
        out[:, t - 1] = _expit(_ps_logit(spec, ds.covariates[t - 1], a_prev))
    return out


def _cond_feature_means(spec, z_k, a_cols, k, m):
    """E[(L, C, I)(Z_m) | Z_k = z_k, exposures] for m > k.

    Z_m given Z_k is Gaussian with mean zeta^(m-k) z_k plus the feedback
    shifts and covariance (1 - zeta^(2(m-k))) Sigma.
    """
    s = m - k
    mean = spec.zeta**s * z_k
    if spec.kappa:
        mean = mean.copy()
        for j in range(k, m):  # exposure a_j shifts Z_{j+1}
            mean[:, 0:5] += spec.kappa * spec.zeta ** (m - 1 - j) * a_cols[:, j - 1 : j]
    v = 1.0 - spec.zeta ** (2 * s)
    Sig = ar1_cov(spec.p, spec.rho) * v
    lin = mean[:, 0:5].sum(axis=1)
    cos = (np.cos(mean[:, 5:10]) * np.exp(-0.5 * v) - _EXP_HALF).sum(axis=1)
    inter = (
        mean[:, 0] * mean[:, 1] + Sig[0, 1]
        + mean[:, 2] * mean[:, 3] + Sig[2, 3]
        + mean[:, 5] * mean[:, 6] + Sig[5, 6]
    )
    return lin, cos, inter


def _true_eta(spec, t, a_cols, z_blocks):
    """E[Y_T | history up to t, exposures set to a_cols] (n,)."""
    T = spec.T
    n = z_blocks[0].shape[0]
    out = spec.beta0 + a_cols @ np.asarray(spec.beta)
    for k in range(1, t + 1):
        out = out + spec.y_lag ** (T - k) * _s_y(spec, z_blocks[k - 1])
    for m in range(t + 1, T + 1):
        lin, cos, inter = _cond_feature_means(spec, z_blocks[t - 1], a_cols, t, m)
        out = out + spec.y_lag ** (T - m) * (spec.y_lin * lin + spec.y_cos * cos + spec.y_int * inter)
    assert out.shape == (n,)
    return out


def true_ice_columns(spec: DgpSpec, ds: LongitudinalDataset) -> dict:
    """Exact conditional-mean columns in the layout used by ``IceStack``.

    Step t column for suffix (a_t..a_T) keeps exposures before t observed.
    """
    T = spec.T
    A = ds.exposures.astype(float)
    n = A.shape[0]
    cols = {}
    for t in range(1, T + 1):
        step = {}
        for suf in enumerate_regimes(T - t + 1):
            key = suf.values
            a_cols = np.hstack([A[:, : t - 1], np.broadcast_to(np.asarray(key, float), (n, len(key)))])
            step[key] = _true_eta(spec, t, a_cols, ds.covariates[:t])
        cols[t] = step
    return cols


# ----------------------------------------------------------------------------
# Monte Carlo driver


@dataclass
class MethodSummary:
    method: str
    estimation: float
    mc_sd: float
    relative_bias: float
    bias: float
    estimated_se: float
    coverage: float
    n_ok: int
    n_failed: int


@dataclass
class MonteCarloReport:
    spec: DgpSpec
    truth: TruthResult
    methods: tuple
    R: int
    base_seed: int
    records: list
    summaries: list
    options: dict = field(default_factory=dict)

    def summary(self, method: str) -> MethodSummary:
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)

    def csv_rows(self):
        rows = [["truth", _fmt(self.truth.value), _fmt(self.truth.se), "", "", ""]]
        for s in self.summaries:
            rows.append(
                [s.method, _fmt(s.estimation), _fmt(s.mc_sd), _fmt(s.relative_bias),
                 _fmt(s.estimated_se), _fmt(s.coverage)]
            )
        return rows

    def to_csv(self) -> str:
        lines = [",".join(CSV_HEADER)] + [",".join(r) for r in self.csv_rows()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "format": "longicausal.montecarlo",
            "version": 1,
            "spec": self.spec.to_dict(),
            "truth": dataclasses.asdict(self.truth),
            "methods": list(self.methods),
            "R": self.R,
            "base_seed": self.base_seed,
            "options": self.options,
            "summaries": [dataclasses.asdict(s) for s in self.summaries],
            "records": self.records,
        }
        return json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n"


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "nan" if isinstance(x, float) else ""
    return format(float(x), ".6g")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (np.floating, np.integer)):
        return _jsonable(x.item())
    return x


def run_replication(spec: DgpSpec, methods, seed: int, options: dict) -> list:
    """One simulated study analysed by each method; returns one record per method."""
    from .baselines import ice_lm, msm_lm
    from .pipeline import run_mase

    ds = gen_dataset(spec, seed).dataset
    alpha = options.get("alpha", 0.05)
    B = options.get("bootstrap_B", 200)
    trim = tuple(options.get("trim", (0.01, 0.99)))
    out = []
    for m in methods:
        rec = {"seed": seed, "method": m, "ate": None, "se": None, "ci": None, "error": None}
        try:
            if m == "mase":
                res = run_mase(
                    ds, fold_seed=seed, seed=seed, trim=trim, alpha=alpha,
                    retune_per_suffix=options.get("retune_per_suffix", False),
                )
                rec.update(ate=res.ate, se=res.se, ci=list(res.inference.ci))
            elif m == "msm_lm":
                est = msm_lm(
                    ds, 0, trim, stabilized=options.get("msm_stabilized", False),
                    B=B, seed=seed, alpha=alpha,
                )
                rec.update(ate=est.ate, se=est.se, ci=None if est.ci is None else list(est.ci))
            elif m == "ice_lm":
                est = ice_lm(ds, 0, B=B, seed=seed, alpha=alpha)
                rec.update(ate=est.ate, se=est.se, ci=None if est.ci is None else list(est.ci))
            else:
                raise ValueError(f"unknown method {m!r}")
        except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        out.append(rec)
    return out


def _replication_job(args):
    spec_dict, methods, seed, options = args
    return run_replication(DgpSpec.from_dict(spec_dict), methods, seed, options)


def summarize(method, records, truth) -> MethodSummary:
    ok = [r for r in records if r["method"] == method and r["error"] is None]
    failed = sum(1 for r in records if r["method"] == method and r["error"] is not None)
    est = np.array([r["ate"] for r in ok], dtype=float)
    if est.size == 0:
        nan = float("nan")
        return MethodSummary(method, nan, nan, nan, nan, nan, nan, 0, failed)
    mean = float(est.mean())
    sd = float(est.std(ddof=1)) if est.size > 1 else float("nan")
    bias = mean - truth
    rel = bias / truth if truth != 0 else float("nan")
    ses = [r["se"] for r in ok if r["se"] is not None]
    mean_se = float(np.mean(ses)) if ses else float("nan")
    cis = [r["ci"] for r in ok if r["ci"] is not None]
    cov = float(np.mean([lo <= truth <= hi for lo, hi in cis])) if cis else float("nan")
    return MethodSummary(method, mean, sd, rel, bias, mean_se, cov, int(est.size), failed)


def run_monte_carlo(
    spec: DgpSpec,
    methods=METHODS,
    R: int = 100,
    base_seed: int = 0,
    workers: int = 1,
    options: dict | None = None,
    truth: TruthResult | None = None,
    progress=None,
) -> MonteCarloReport:
    """Replicate ``R`` studies (seed ``base_seed + r``) and summarize each method.

    Output does not depend on ``workers``: replications are independent and
    results are gathered in replication order.
    """
    if R < 2:
        raise ValueError("need at least 2 replications")
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    options = dict(options or {})
    truth = true_ate(spec) if truth is None else truth
    jobs = [(spec.to_dict(), methods, base_seed + r, options) for r in range(R)]
    records = []
    if workers <= 1:
        for i, job in enumerate(jobs):
            records.extend(_replication_job(job))
            if progress:
                progress(i + 1, R)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, recs in enumerate(ex.map(_replication_job, jobs)):
                records.extend(recs)
                if progress:
                    progress(i + 1, R)
    summaries = [summarize(m, records, truth.value) for m in methods]
    return MonteCarloReport(spec, truth, methods, R, base_seed, records, summaries, options)
