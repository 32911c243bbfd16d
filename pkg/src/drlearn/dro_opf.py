"""Distributionally robust chance-constrained LinDistFlow OPF with DR dispatch.

Each individual chance constraint a^T eps <= s is enforced against every
distribution sharing the learned mean and covariance. For one linear
constraint the worst case is attained by a two-point law and the tightest
back-off is ``mu^T a + sqrt((1 - eta) / eta) * ||Sigma^{1/2} a||``. The
back-off is linear in the participation factors for generator limits and a
second-order cone for voltages and line flows, so the whole program is a
convex QP with SOC constraints.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .estimator import MomentEstimate, SensitivityEstimate
from .feeder import FeederModel
from .participants import psd_sqrt

log = logging.getLogger(__name__)

NETWORK_MODES = ("none", "flows", "voltage", "full")
# tighter than the Clarabel defaults so the balance duals are usable as prices
SOLVER_OPTS = {"tol_gap_abs": 1e-11, "tol_gap_rel": 1e-11, "tol_feas": 1e-10}
# estimates below this are treated as "no sensitivity" to keep 1/(2 beta1) finite
BETA1_FLOOR = 1e-6


class OpfInfeasible(RuntimeError):
    def __init__(self, message: str, constraint_class: str | None = None):
        super().__init__(message)
        self.constraint_class = constraint_class


@dataclass(frozen=True)
class RiskConfig:
    eta_g: float = 0.1
    eta_v: float = 0.1
    eta_f: float = 0.1
    network_mode: str = "full"
    polygon_sides: int = 12

    def __post_init__(self):
        for name in ("eta_g", "eta_v", "eta_f"):
            eta = getattr(self, name)
            if not 0.0 < eta <= 0.5:
                raise ValueError(f"{name} must lie in (0, 0.5], got {eta}")
        if self.network_mode not in NETWORK_MODES:
            raise ValueError(f"network_mode must be one of {NETWORK_MODES}")
        if self.polygon_sides < 4 or self.polygon_sides % 2:
            raise ValueError("polygon_sides must be an even integer >= 4")

    @property
    def voltage(self) -> bool:
        return self.network_mode in ("voltage", "full")

    @property
    def flows(self) -> bool:
        return self.network_mode in ("flows", "full")


@dataclass(frozen=True)
class MarketScenario:
    omega: float
    kappa: float = 25.0

    def __post_init__(self):
        if not (math.isfinite(self.omega) and math.isfinite(self.kappa)):
            raise ValueError("prices must be finite")
        if self.omega < 0 or self.kappa < 0:
            raise ValueError("prices must be nonnegative")


def risk_factor(eta: float) -> float:
    return math.sqrt((1.0 - eta) / eta)


def dro_margin(a, moments: MomentEstimate, eta: float) -> float:
    """Smallest s with inf_P P[a^T eps <= s] >= 1 - eta over the moment ambiguity set."""
    if not 0.0 < eta <= 0.5:
        raise ValueError(f"eta must lie in (0, 0.5], got {eta}")
    a = np.asarray(a, dtype=float)
    var = float(a @ moments.sigma_hat @ a)
    if var < -1e-12 * max(1.0, float(a @ a)):
        raise ValueError(f"a^T Sigma a = {var} < 0; covariance is not PSD")
    return float(moments.mu_hat @ a) + risk_factor(eta) * math.sqrt(max(var, 0.0))


@dataclass
class DispatchSolution:
    x_star: np.ndarray
    gP: np.ndarray
    gQ: np.ndarray
    fP: np.ndarray
    fQ: np.ndarray
    u: np.ndarray
    alpha: np.ndarray
    pi_p: np.ndarray
    pi_q: np.ndarray
    objective: float
    status: str = "optimal"
    solve_time: float = 0.0
    dr_eligible: np.ndarray | None = None


@dataclass
class OpfInstance:
    feeder: FeederModel
    estimate: SensitivityEstimate
    moments: MomentEstimate
    market: MarketScenario
    risk: RiskConfig = field(default_factory=RiskConfig)


def dr_cost_coefficients(estimate: SensitivityEstimate, eligible: np.ndarray):
    """Quadratic/linear coefficients of the DR payment x (x - b0) / (2 b1)."""
    b1 = np.asarray(estimate.beta1_hat, dtype=float)
    b0 = np.asarray(estimate.beta0_hat, dtype=float)
    ok = eligible & (b1 > BETA1_FLOOR)
    quad = np.where(ok, 0.5 / np.where(ok, b1, 1.0), 0.0)
    lin = np.where(ok, b0 * quad, 0.0)
    return quad, lin, ok


class DispatchModel:
    """Parametrised OPF for one feeder and risk configuration.

    The cvxpy problem is compiled once; each call to :meth:`solve` only
    updates parameter values.
    """

    def __init__(self, feeder: FeederModel, risk: RiskConfig = RiskConfig()):
        self.feeder = feeder
        self.risk = risk
        fd = feeder
        m, n = fd.m, fd.n
        self.gens = [0] + fd.generator_nodes
        nG = len(self.gens)
        Gm = np.zeros((m, nG))
        for k, node in enumerate(self.gens):
            Gm[node, k] = 1.0
        self.Gm = Gm
        gamma = fd.gamma
        self.gamma = gamma
        A = fd.A
        Bf = np.zeros((m, n))
        Pm = np.zeros((n, m))
        for i in range(1, m):
            Bf[fd.parent[i], i - 1] += 1.0
            Bf[i, i - 1] -= 1.0
            Pm[i - 1, fd.parent[i]] = 1.0
        r = fd.R / fd.base_mva
        xr = fd.X / fd.base_mva
        self.eligible = np.array([i != 0 and fd.nodes[i].dP_forecast > 0 for i in range(m)])

        x = cp.Variable(m, name="x")
        gP = cp.Variable(nG, name="gP")
        gQ = cp.Variable(nG, name="gQ")
        # a root-only feeder has no lines; keep zero-length placeholders
        fP = cp.Variable(n, name="fP") if n else None
        fQ = cp.Variable(n, name="fQ") if n else None
        u = cp.Variable(m, name="u")
        alpha = cp.Variable(nG, name="alpha")
        self.vars = dict(x=x, gP=gP, gQ=gQ, fP=fP, fQ=fQ, u=u, alpha=alpha)

        p = self.params = {}
        p["xcap"] = cp.Parameter(m, nonneg=True, name="xcap")
        p["dr_quad"] = cp.Parameter(m, nonneg=True, name="dr_quad")
        p["dr_lin"] = cp.Parameter(m, name="dr_lin")
        p["omega"] = cp.Parameter(name="omega")
        p["kappa"] = cp.Parameter(name="kappa")
        p["var_total"] = cp.Parameter(nonneg=True, name="var_total")
        for key in ("gP_up", "gP_lo", "gQ_up", "gQ_lo"):
            p[key] = cp.Parameter(name=key)

        classes: dict[str, list] = {"balance": [], "generator": [], "dr": [], "voltage": [],
                                    "flow": []}
        inflow_p = Bf @ fP if n else 0.0
        inflow_q = Bf @ fQ if n else 0.0
        bal_p = fd.dP - x - Gm @ gP + inflow_p == 0
        bal_q = fd.dQ - cp.multiply(gamma, x) - Gm @ gQ + inflow_q == 0
        self.bal_p, self.bal_q = bal_p, bal_q
        classes["balance"] += [
            bal_p, bal_q,
            u[0] == fd.u_root,
            alpha >= 0, cp.sum(alpha) == 1,
        ]
        if n:
            classes["balance"].append(
                u[1:] == Pm @ u - 2.0 * (cp.multiply(r, fP) + cp.multiply(xr, fQ)))
        classes["dr"] += [x >= 0, x <= p["xcap"]]

        c2 = np.zeros(nG)
        c1 = np.zeros(nG)
        c0 = 0.0
        for k, node in enumerate(self.gens):
            g = fd.nodes[node].generator
            if g is None:
                continue
            if node != 0:
                c2[k], c1[k] = g.c2, g.c1
                c0 += g.c0
            for lim, key, sign, var in ((g.gP_max, "gP_up", 1, gP), (g.gP_min, "gP_lo", -1, gP),
                                        (g.gQ_max, "gQ_up", 1, gQ), (g.gQ_min, "gQ_lo", -1, gQ)):
                if not math.isfinite(lim):
                    continue
                if sign > 0:
                    classes["generator"].append(var[k] + alpha[k] * p[key] <= lim)
                else:
                    classes["generator"].append(var[k] - alpha[k] * p[key] >= lim)
        self.c2, self.c1, self.c0 = c2, c1, c0

        self.has_voltage = risk.voltage and n > 0
        self.flow_sides = []
        self.flow_lines = np.flatnonzero(np.isfinite(fd.S_max))
        if self.has_voltage:
            Ap = A[:, 1:]
            Pv = -2.0 * Ap.T @ np.diag(r) @ A @ Gm
            Qv = -2.0 * Ap.T @ np.diag(xr) @ A @ Gm
            self.T0 = 2.0 * Ap.T @ (np.diag(r) @ A + np.diag(xr) @ A @ np.diag(gamma))
            pv = cp.Variable(n, name="pv")
            qv = cp.Variable(n, name="qv")
            p["v_w1"] = cp.Parameter(m, name="v_w1")
            p["v_w2"] = cp.Parameter(m, name="v_w2")
            p["v_W0"] = cp.Parameter((m, n), name="v_W0")
            p["v_s1"] = cp.Parameter(name="v_s1")
            p["v_s2"] = cp.Parameter(name="v_s2")
            p["v_v0"] = cp.Parameter(n, name="v_v0")
            Z = cp.outer(p["v_w1"], pv) + cp.outer(p["v_w2"], qv) + p["v_W0"]
            zv = cp.Variable(n, name="zv")
            shift = p["v_s1"] * pv + p["v_s2"] * qv + p["v_v0"]
            classes["voltage"] += [
                pv == Pv @ alpha,
                qv == Qv @ alpha,
                cp.SOC(zv, Z, axis=0),
                u[1:] + shift + zv <= fd.u_max[1:],
                u[1:] + shift - zv >= fd.u_min[1:],
            ]

        if risk.flows and self.flow_lines.size:
            K = risk.polygon_sides
            fin = self.flow_lines
            nf = fin.size
            rf = cp.Variable(nf, name="rf")
            classes["flow"].append(rf == (A @ Gm)[fin] @ alpha)
            half = math.cos(math.pi / K)
            for k in range(K):
                th = 2.0 * math.pi * k / K
                ck = math.cos(th) * np.ones(m) + math.sin(th) * gamma
                Dk = (math.cos(th) * A.T + math.sin(th) * np.diag(gamma) @ A.T)[:, fin]
                self.flow_sides.append((ck, Dk))
                w = cp.Parameter(m, name=f"f_w{k}")
                W = cp.Parameter((m, nf), name=f"f_W{k}")
                s = cp.Parameter(name=f"f_s{k}")
                v = cp.Parameter(nf, name=f"f_v{k}")
                p[f"f_w{k}"], p[f"f_W{k}"], p[f"f_s{k}"], p[f"f_v{k}"] = w, W, s, v
                Z = cp.outer(w, rf) - W
                zf = cp.Variable(nf, name=f"zf{k}")
                classes["flow"] += [
                    cp.SOC(zf, Z, axis=0),
                    math.cos(th) * fP[fin] + math.sin(th) * fQ[fin] + s * rf - v + zf
                    <= fd.S_max[fin] * half,
                ]

        gen_cost = p["omega"] * gP[0] + c0
        balancing = 0
        if nG > 1:
            gen_cost += cp.sum(cp.multiply(c2[1:], cp.square(gP[1:]))) + c1[1:] @ gP[1:]
            balancing = p["var_total"] * cp.sum(cp.multiply(c2, cp.square(alpha)))
        # payment at the truncated price max(lambda, 0), matching the broadcast clip
        dr = cp.sum(cp.pos(cp.multiply(p["dr_quad"], cp.square(x)) - cp.multiply(p["dr_lin"], x)))
        sale = p["kappa"] * cp.sum(x)
        self.objective = cp.Minimize(gen_cost + balancing + sale + dr)
        self.classes = classes
        self.problem = cp.Problem(self.objective, [c for cs in classes.values() for c in cs])
        # large feeders carry too many parameter entries for cached compilation
        n_param = sum(int(np.prod(q.shape)) for q in self.problem.parameters())
        self.ignore_dpp = n_param >= 10_000

    # ------------------------------------------------------------------
    def set_parameters(self, estimate: SensitivityEstimate, moments: MomentEstimate,
                       market: MarketScenario) -> np.ndarray:
        fd, risk, p = self.feeder, self.risk, self.params
        m = fd.m
        if moments.mu_hat.shape != (m,) or moments.sigma_hat.shape != (m, m):
            raise ValueError(f"moment estimate dimension does not match feeder size {m}")
        quad, lin, ok = dr_cost_coefficients(estimate, self.eligible)
        dropped = self.eligible & ~ok
        if dropped.any():
            log.warning("beta1 estimate not positive at nodes %s; DR disabled there",
                        np.flatnonzero(dropped).tolist())
        p["xcap"].value = np.where(ok, fd.dP, 0.0)
        p["dr_quad"].value = quad
        p["dr_lin"].value = lin
        p["omega"].value = market.omega
        p["kappa"].value = market.kappa

        mu, S = moments.mu_hat, moments.sigma_hat
        e = np.ones(m)
        g = self.gamma
        p["var_total"].value = max(float(e @ S @ e), 0.0)
        kg = risk_factor(risk.eta_g)
        sd_e = math.sqrt(max(float(e @ S @ e), 0.0))
        sd_g = math.sqrt(max(float(g @ S @ g), 0.0))
        p["gP_up"].value = kg * sd_e - float(mu @ e)
        p["gP_lo"].value = kg * sd_e + float(mu @ e)
        p["gQ_up"].value = kg * sd_g - float(mu @ g)
        p["gQ_lo"].value = kg * sd_g + float(mu @ g)

        root = psd_sqrt(S)
        if self.has_voltage:
            L = risk_factor(risk.eta_v) * root
            p["v_w1"].value = L @ e
            p["v_w2"].value = L @ g
            p["v_W0"].value = L @ self.T0.T
            p["v_s1"].value = float(mu @ e)
            p["v_s2"].value = float(mu @ g)
            p["v_v0"].value = self.T0 @ mu
        if self.flow_sides:
            L = risk_factor(risk.eta_f) * root
            for k, (ck, Dk) in enumerate(self.flow_sides):
                p[f"f_w{k}"].value = L @ ck
                p[f"f_W{k}"].value = L @ Dk
                p[f"f_s{k}"].value = float(mu @ ck)
                p[f"f_v{k}"].value = Dk.T @ mu
        return ok

    def solve(self, estimate: SensitivityEstimate, moments: MomentEstimate,
              market: MarketScenario, diagnose: bool = True) -> DispatchSolution:
        ok = self.set_parameters(estimate, moments, market)
        t0 = time.perf_counter()
        try:
            # without DPP the sparsity pattern can change between steps, which
            # Clarabel's in-place data update rejects
            self.problem.solve(solver=cp.CLARABEL, ignore_dpp=self.ignore_dpp,
                               warm_start=not self.ignore_dpp, **SOLVER_OPTS)
        except cp.SolverError as exc:
            raise OpfInfeasible(f"solver failure: {exc}") from exc
        elapsed = time.perf_counter() - t0
        status = self.problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            cls = self.diagnose_infeasibility() if diagnose else None
            raise OpfInfeasible(f"OPF infeasible (binding class: {cls})", cls)
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            raise RuntimeError("OPF unbounded; DR and generator bounds should prevent this")
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise OpfInfeasible(f"solver returned status {status}")
        v = self.vars
        m = self.feeder.m
        gP = self.Gm @ v["gP"].value
        gQ = self.Gm @ v["gQ"].value
        alpha = self.Gm @ np.clip(v["alpha"].value, 0.0, None)
        return DispatchSolution(
            x_star=np.clip(v["x"].value, 0.0, self.params["xcap"].value),
            gP=gP, gQ=gQ,
            fP=np.array(v["fP"].value) if m > 1 else np.zeros(0),
            fQ=np.array(v["fQ"].value) if m > 1 else np.zeros(0),
            u=np.array(v["u"].value),
            alpha=alpha / alpha.sum(),
            pi_p=np.asarray(self.bal_p.dual_value, dtype=float).reshape(m),
            pi_q=np.asarray(self.bal_q.dual_value, dtype=float).reshape(m),
            objective=float(self.problem.value),
            status=status,
            solve_time=elapsed,
            dr_eligible=ok,
        )

    def diagnose_infeasibility(self) -> str | None:
        """Name the first constraint class whose removal restores feasibility."""
        for name in ("voltage", "flow", "generator", "dr"):
            if not self.classes[name]:
                continue
            rest = [c for k, cs in self.classes.items() if k != name for c in cs]
            probe = cp.Problem(self.objective, rest)
            try:
                probe.solve(solver=cp.CLARABEL)
            except cp.SolverError:
                continue
            if probe.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                return name
        return None

    def dump(self, path) -> None:
        """Write the conic program handed to the solver in a plain-text format.

        Sections: ``objective`` (q vector, then nonzeros of P as i j value),
        ``cones`` (zero / nonneg / soc sizes), ``rows`` (nonzeros of A as
        i j value) and ``rhs`` (b). The program is
        min 1/2 z^T P z + q^T z  s.t.  b - A z in K.
        """
        data, _, _ = self.problem.get_problem_data(cp.CLARABEL)
        Amat = data["A"].tocoo()
        P = data.get("P")
        dims = data["dims"]
        with open(path, "w") as fh:
            fh.write(f"# variables {data['c'].size} rows {Amat.shape[0]}\n")
            fh.write("objective\n")
            fh.write(" ".join(repr(float(c)) for c in data["c"]) + "\n")
            if P is not None:
                P = P.tocoo()
                for i, j, val in zip(P.row, P.col, P.data):
                    fh.write(f"P {i} {j} {float(val)!r}\n")
            fh.write(f"cones zero {dims.zero} nonneg {dims.nonneg} "
                     f"soc {' '.join(str(s) for s in dims.soc)}\n")
            fh.write("rows\n")
            for i, j, val in zip(Amat.row, Amat.col, Amat.data):
                fh.write(f"{i} {j} {float(val)!r}\n")
            fh.write("rhs\n")
            fh.write(" ".join(repr(float(b)) for b in data["b"]) + "\n")


_MODEL_CACHE: dict[tuple[int, RiskConfig], DispatchModel] = {}


def build_instance(instance: OpfInstance) -> DispatchModel:
    """Return a compiled program for ``instance`` with its parameters loaded.

    Programs are cached per (feeder, risk configuration) so repeated calls
    only refresh parameter values.
    """
    key = (id(instance.feeder), instance.risk)
    model = _MODEL_CACHE.get(key)
    if model is None or model.feeder is not instance.feeder:
        model = DispatchModel(instance.feeder, instance.risk)
        _MODEL_CACHE[key] = model
    model.set_parameters(instance.estimate, instance.moments, instance.market)
    model._pending = instance
    return model


def solve(program: DispatchModel) -> DispatchSolution:
    inst = program._pending
    return program.solve(inst.estimate, inst.moments, inst.market)


def expected_cost(feeder: FeederModel, sol: DispatchSolution, estimate: SensitivityEstimate,
                  moments: MomentEstimate, market: MarketScenario) -> dict[str, float]:
    """Expected generation, balancing, lost-sale and DR cost at a dispatch."""
    gen = market.omega * sol.gP[0]
    bal = 0.0
    var_total = float(np.ones(feeder.m) @ moments.sigma_hat @ np.ones(feeder.m))
    for i in feeder.generator_nodes:
        g = feeder.nodes[i].generator
        gen += g.cost(sol.gP[i])
        bal += g.c2 * sol.alpha[i] ** 2 * var_total
    quad, lin, _ = dr_cost_coefficients(estimate, np.ones(feeder.m, dtype=bool))
    x = sol.x_star
    dr = float(np.sum(np.maximum(quad * x**2 - lin * x, 0.0)))
    sale = market.kappa * float(x.sum())
    return {"generation": float(gen), "balancing": float(bal), "sale": sale, "dr": dr,
            "total": float(gen + bal + sale + dr)}


def optimal_dr_from_duals(pi_p, pi_q, gamma, kappa, estimate: SensitivityEstimate):
    """Desired DR implied by nodal duals: beta1 (pi_p + gamma pi_q - kappa) + beta0."""
    signal = np.asarray(pi_p) + np.asarray(gamma) * np.asarray(pi_q) - kappa
    return estimate.beta1_hat * signal + estimate.beta0_hat


def stationary_dr(pi_p, pi_q, gamma, kappa, estimate: SensitivityEstimate):
    """Stationarity of the DR payment x (x - b0) / (2 b1) against nodal duals.

    Differs from :func:`optimal_dr_from_duals` by b0 / 2 in the intercept.
    """
    signal = np.asarray(pi_p) + np.asarray(gamma) * np.asarray(pi_q) - kappa
    return estimate.beta1_hat * signal + 0.5 * estimate.beta0_hat
