"""Online loop: estimate, dispatch, price, observe, record.

All oracle cases and network modes of one experiment consume the same
wholesale-price and disturbance streams, so differences between their traces
come from learning alone.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dro_opf import (NETWORK_MODES, BETA1_FLOOR, DispatchModel, DispatchSolution,
                      MarketScenario, OpfInfeasible, RiskConfig)
from .estimator import (History, InsufficientSamples, MomentEstimate, SensitivityEstimate,
                        empirical_moments, fit_all, residuals)
from .feeder import FeederModel, load_feeder
from .participants import NoiseSpec, ParticipantTruth, load_participants

log = logging.getLogger(__name__)

ORACLE_CASES = ("oracle", "beta_oracle", "omega_oracle", "oblivious")
TRACE_COLUMNS = ("t", "omega", "node", "lambda", "x_star", "x_obs", "expC", "obsC",
                 "zeta_en", "zeta_bal", "zeta_exp_cum", "zeta_obs_cum")
SOLUTION_COLUMNS = ("t", "node", "x_star", "gP", "gQ", "u", "pi_p", "pi_q", "lambda")
DATA_DIR = Path(__file__).resolve().parent / "data"
DEFAULT_FEEDER = DATA_DIR / "feeder15"


class StepFailure(RuntimeError):
    def __init__(self, t: int, case: str, mode: str, cause: Exception):
        super().__init__(f"step {t} ({case}, {mode}) failed: {cause}")
        self.t, self.case, self.mode, self.cause = t, case, mode, cause


@dataclass(frozen=True)
class ExperimentConfig:
    steps: int = 500
    oracle_case: str = "oblivious"
    network_mode: str = "full"
    price_range: tuple[float, float] = (30.0, 200.0)
    price_series: tuple[float, ...] | None = None
    kappa: float = 25.0
    seed: int = 0
    feeder: str = str(DEFAULT_FEEDER)
    participants: str | None = None
    eta_g: float = 0.1
    eta_v: float = 0.1
    eta_f: float = 0.1
    polygon_sides: int = 12
    noise_family: str = "gaussian"
    warmup: int = 4
    prior_beta1: float = 0.005
    prior_beta0: float = 0.0
    prior_sigma_share: float = 0.05
    forgetting: float = 1.0
    sign_fallback: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        lo, hi = self.price_range
        if not (math.isfinite(lo) and math.isfinite(hi) and 0 <= lo < hi):
            raise ValueError(f"price range [{lo}, {hi}] is empty or invalid")
        if self.price_series is not None and len(self.price_series) < self.steps:
            raise ValueError("price series shorter than the number of steps")
        if self.oracle_case not in ORACLE_CASES:
            raise ValueError(f"oracle_case must be one of {ORACLE_CASES}")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.warmup < 3:
            raise ValueError("warmup must be >= 3 so the first fit has two points")
        self.risk()  # validates eta and mode

    def risk(self, mode: str | None = None) -> RiskConfig:
        return RiskConfig(self.eta_g, self.eta_v, self.eta_f, mode or self.network_mode,
                          self.polygon_sides)

    def participants_path(self) -> Path:
        if self.participants:
            return Path(self.participants)
        return Path(self.feeder) / "participants.csv"


@dataclass
class TraceRecord:
    t: int
    omega: float
    lam: np.ndarray
    lam_dual: np.ndarray
    x_star: np.ndarray
    x_obs: np.ndarray
    expC: float
    obsC: float
    beta0_hat: np.ndarray
    beta1_hat: np.ndarray
    fitted: np.ndarray
    mu_hat: np.ndarray
    sigma_diag: np.ndarray
    zeta_en: float
    zeta_bal: float
    solution: DispatchSolution
    solve_time: float
    residual_mean: np.ndarray
    zeta_exp_cum: float = 0.0
    zeta_obs_cum: float = 0.0


@dataclass
class Scenario:
    """Shared exogenous streams: wholesale prices and participant disturbances."""

    omega: np.ndarray
    eps: np.ndarray

    @classmethod
    def draw(cls, config: ExperimentConfig, cov: np.ndarray) -> "Scenario":
        price_seed, noise_seed = np.random.SeedSequence(config.seed).spawn(2)
        if config.price_series is not None:
            omega = np.asarray(config.price_series[: config.steps], dtype=float)
        else:
            omega = np.random.default_rng(price_seed).uniform(*config.price_range, config.steps)
        noise = NoiseSpec(cov, family=config.noise_family)
        eps = noise.sample(np.random.default_rng(noise_seed), config.steps)
        return cls(omega, eps)


@dataclass
class LoopState:
    feeder: FeederModel
    truths: list[ParticipantTruth]
    true_cov: np.ndarray
    model: DispatchModel
    history: History
    prior: SensitivityEstimate
    prior_moments: MomentEstimate
    estimate: SensitivityEstimate
    t: int = 0


def price_from_target(x_star, estimate: SensitivityEstimate, eligible=None) -> np.ndarray:
    """Invert the expected response: lambda = (x* - beta0) / (2 beta1), clipped at 0.

    Nodes with a non-positive slope estimate (or outside ``eligible``) get 0.
    """
    x = np.asarray(x_star, dtype=float)
    b1 = np.asarray(estimate.beta1_hat, dtype=float)
    b0 = np.asarray(estimate.beta0_hat, dtype=float)
    ok = b1 > BETA1_FLOOR
    if eligible is not None:
        ok &= np.asarray(eligible, dtype=bool)
    lam = np.where(ok, (x - b0) / (2.0 * np.where(ok, b1, 1.0)), 0.0)
    return np.maximum(lam, 0.0)


def price_from_duals(pi_p, pi_q, gamma, kappa) -> np.ndarray:
    """lambda* = max(pi_p + gamma pi_q - kappa, 0)."""
    return np.maximum(np.asarray(pi_p) + np.asarray(gamma) * np.asarray(pi_q) - kappa, 0.0)


def regret_components(estimate: SensitivityEstimate, truths, moments: MomentEstimate,
                      true_cov, x_star, alpha, gen_c2) -> tuple[float, float]:
    """Expected energy and balancing regret of one dispatch against the true parameters."""
    b0h = np.asarray(estimate.beta0_hat, dtype=float)
    b1h = np.asarray(estimate.beta1_hat, dtype=float)
    b0 = np.array([t.beta0 for t in truths])
    b1 = np.array([t.beta1 for t in truths])
    x = np.asarray(x_star, dtype=float)
    active = (x != 0) & (b1h > 0) & (b1 > 0)
    safe_h = np.where(active, b1h, 1.0)
    safe = np.where(active, b1, 1.0)
    terms = (0.5 / safe_h - 0.5 / safe) * x**2 - (0.5 * b0h / safe_h - 0.5 * b0 / safe) * x
    zeta_en = float(np.sum(np.where(active, terms, 0.0)))
    e = np.ones(len(x))
    dvar = float(e @ (np.asarray(moments.sigma_hat) - np.asarray(true_cov)) @ e)
    zeta_bal = float(np.sum(np.asarray(gen_c2) * np.asarray(alpha) ** 2) * dvar)
    return zeta_en, zeta_bal


def regret_metrics(trace, oracle_trace) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative squared differences of expected and observed objectives."""
    if len(trace) != len(oracle_trace):
        raise ValueError(f"trace lengths differ: {len(trace)} vs {len(oracle_trace)}")
    d_exp = np.array([a.expC - b.expC for a, b in zip(trace, oracle_trace)])
    d_obs = np.array([a.obsC - b.obsC for a, b in zip(trace, oracle_trace)])
    return np.cumsum(d_exp**2), np.cumsum(d_obs**2)


def observed_cost(feeder: FeederModel, sol: DispatchSolution, lam, x_obs, market: MarketScenario):
    """Cost after the response is observed; generators absorb the deviation by alpha."""
    delta = float(np.sum(np.asarray(x_obs) - sol.x_star))
    g = sol.gP - sol.alpha * delta
    cost = market.omega * g[0]
    for i in feeder.generator_nodes:
        cost += feeder.nodes[i].generator.cost(g[i])
    return float(cost + market.kappa * np.sum(x_obs) + np.dot(lam, x_obs))


def generator_c2(feeder: FeederModel) -> np.ndarray:
    c2 = np.zeros(feeder.m)
    for i in feeder.generator_nodes:
        c2[i] = feeder.nodes[i].generator.c2
    return c2


def init_state(config: ExperimentConfig, mode: str | None = None,
               feeder: FeederModel | None = None, truths=None, true_cov=None,
               model: DispatchModel | None = None) -> LoopState:
    feeder = feeder or load_feeder(config.feeder)
    if truths is None:
        truths, true_cov = load_participants(config.participants_path(), feeder.m)
    m = feeder.m
    prior = SensitivityEstimate(np.full(m, config.prior_beta0), np.full(m, config.prior_beta1), 0)
    prior_mom = MomentEstimate.zero_mean(np.diag((config.prior_sigma_share * feeder.dP) ** 2))
    model = model or DispatchModel(feeder, config.risk(mode))
    return LoopState(feeder, list(truths), np.asarray(true_cov, dtype=float), model,
                     History(m), prior, prior_mom, prior)


def _keep_sign(est: SensitivityEstimate, fitted, previous: SensitivityEstimate):
    """Discard fits with a non-positive slope in favour of the previous estimate.

    A wrong-signed slope would exclude the node, fix its price at zero and so
    stop all further information about it from arriving.
    """
    bad = fitted & (est.beta1_hat <= BETA1_FLOOR) & (previous.beta1_hat > BETA1_FLOOR)
    if not bad.any():
        return est, fitted
    b0 = np.where(bad, previous.beta0_hat, est.beta0_hat)
    b1 = np.where(bad, previous.beta1_hat, est.beta1_hat)
    return SensitivityEstimate(b0, b1, est.count), fitted & ~bad


def _estimates(state: LoopState, config: ExperimentConfig):
    m = state.feeder.m
    t = state.t
    truth_beta = SensitivityEstimate(np.array([p.beta0 for p in state.truths]),
                                     np.array([p.beta1 for p in state.truths]), t - 1)
    fitted = np.zeros(m, dtype=bool)
    if config.oracle_case in ("oracle", "beta_oracle"):
        est = truth_beta
    elif t < config.warmup:
        est = state.prior
    else:
        est, fitted = fit_all(state.history, state.estimate, config.forgetting)
        if config.sign_fallback:
            est, fitted = _keep_sign(est, fitted, state.estimate)
    resid_mean = np.zeros(m)
    if config.oracle_case in ("oracle", "omega_oracle"):
        mom = MomentEstimate.zero_mean(state.true_cov)
        if len(state.history):
            resid_mean = residuals(state.history.prices, state.history.responses, est).mean(0)
    elif t < config.warmup:
        mom = state.prior_moments
    else:
        res = residuals(state.history.prices, state.history.responses, est)
        try:
            mom = empirical_moments(res)
        except InsufficientSamples:
            mom = state.prior_moments
        resid_mean = res.mean(axis=0)
    return est, fitted, mom, resid_mean


def step(state: LoopState, config: ExperimentConfig, scenario: Scenario) -> TraceRecord:
    """Advance one interval. Mutates ``state`` and returns the trace row."""
    state.t += 1
    t = state.t
    fd = state.feeder
    est, fitted, mom, resid_mean = _estimates(state, config)
    state.estimate = est
    market = MarketScenario(float(scenario.omega[t - 1]), config.kappa)
    try:
        sol = state.model.solve(est, mom, market)
    except OpfInfeasible as exc:
        raise StepFailure(t, config.oracle_case, state.model.risk.network_mode, exc) from exc
    lam = price_from_target(sol.x_star, est, sol.dr_eligible)
    lam_dual = price_from_duals(sol.pi_p, sol.pi_q, fd.gamma, config.kappa)
    b0 = np.array([p.beta0 for p in state.truths])
    b1 = np.array([p.beta1 for p in state.truths])
    eps = scenario.eps[t - 1]
    x_obs = 2.0 * b1 * lam + b0 + eps
    state.history.append(t, lam, x_obs)
    zeta_en, zeta_bal = regret_components(est, state.truths, mom, state.true_cov, sol.x_star,
                                          sol.alpha, generator_c2(fd))
    return TraceRecord(
        t=t, omega=market.omega, lam=lam, lam_dual=lam_dual, x_star=sol.x_star, x_obs=x_obs,
        expC=sol.objective, obsC=observed_cost(fd, sol, lam, x_obs, market),
        beta0_hat=np.array(est.beta0_hat), beta1_hat=np.array(est.beta1_hat), fitted=fitted,
        mu_hat=mom.mu_hat, sigma_diag=np.diag(mom.sigma_hat).copy(),
        zeta_en=zeta_en, zeta_bal=zeta_bal, solution=sol, solve_time=sol.solve_time,
        residual_mean=resid_mean,
    )


def run_single(config: ExperimentConfig, scenario: Scenario | None = None, **shared):
    state = init_state(config, **shared)
    if scenario is None:
        scenario = Scenario.draw(config, state.true_cov)
    trace = []
    for _ in range(config.steps):
        trace.append(step(state, config, scenario))
    return trace


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    feeder: FeederModel
    traces: dict[tuple[str, str], list[TraceRecord]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def dr_usage(feeder: FeederModel, trace) -> dict[str, float]:
    """Max/median/min of total desired DR relative to total demand, and median DER use (%)."""
    total = feeder.dP.sum()
    share = np.array([100.0 * r.x_star.sum() / total for r in trace])
    gens = feeder.generator_nodes
    cap = sum(feeder.nodes[i].generator.gP_max for i in gens)
    if gens and cap > 0:
        der = np.array([100.0 * r.solution.gP[gens].sum() / cap for r in trace])
        der_med = float(np.median(der))
    else:
        der_med = float("nan")
    return {"dr_max": float(share.max()), "dr_median": float(np.median(share)),
            "dr_min": float(share.min()), "der_median": der_med}


def run_experiment(config: ExperimentConfig, cases=ORACLE_CASES, modes=NETWORK_MODES,
                   progress=None) -> ExperimentResult:
    """Run every (case, mode) pair on shared streams and attach regret series."""
    feeder = load_feeder(config.feeder)
    truths, cov = load_participants(config.participants_path(), feeder.m)
    scenario = Scenario.draw(config, cov)
    result = ExperimentResult(config, feeder)
    order = ["oracle"] + [c for c in cases if c != "oracle"]
    for mode in modes:
        model = DispatchModel(feeder, config.risk(mode))
        for case in order:
            cfg = replace(config, oracle_case=case, network_mode=mode)
            t0 = time.perf_counter()
            trace = run_single(cfg, scenario, feeder=feeder, truths=truths, true_cov=cov,
                               model=model)
            wall = time.perf_counter() - t0
            if case != "oracle":
                z_exp, z_obs = regret_metrics(trace, result.traces[("oracle", mode)])
                for rec, a, b in zip(trace, z_exp, z_obs):
                    rec.zeta_exp_cum, rec.zeta_obs_cum = float(a), float(b)
            result.traces[(case, mode)] = trace
            times = np.array([r.solve_time for r in trace])
            result.summary[f"{case}/{mode}"] = {
                **dr_usage(feeder, trace),
                "solve_time_mean": float(times.mean()),
                "solve_time_std": float(times.std()),
                "wall_time": wall,
            }
            if progress:
                progress(case, mode, wall)
    if "oracle" not in cases:
        for mode in modes:
            result.traces.pop(("oracle", mode), None)
            result.summary.pop(f"oracle/{mode}", None)
    return result


def _fmt(v) -> str:
    return repr(float(v))


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            for i in range(r.lam.size):
                w.writerow([r.t, _fmt(r.omega), i, _fmt(r.lam[i]), _fmt(r.x_star[i]),
                            _fmt(r.x_obs[i]), _fmt(r.expC), _fmt(r.obsC), _fmt(r.zeta_en),
                            _fmt(r.zeta_bal), _fmt(r.zeta_exp_cum), _fmt(r.zeta_obs_cum)])


def write_solutions(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOLUTION_COLUMNS)
        for r in trace:
            s = r.solution
            for i in range(r.lam.size):
                w.writerow([r.t, i, _fmt(s.x_star[i]), _fmt(s.gP[i]), _fmt(s.gQ[i]), _fmt(s.u[i]),
                            _fmt(s.pi_p[i]), _fmt(s.pi_q[i]), _fmt(r.lam[i])])


def write_summary(result: ExperimentResult, path) -> None:
    cfg = result.config
    doc = {"config": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in cfg.__dict__.items() if k != "price_series"},
           "runs": result.summary}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
