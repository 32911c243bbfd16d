"""Online least-squares learning of price sensitivities and residual moments."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class DegenerateHistory(ValueError):
    """Price history has no variance; the slope is not identifiable."""


class InsufficientSamples(ValueError):
    """Too few residual vectors for the (t-2)-denominator covariance."""


@dataclass
class History:
    """Append-only record of broadcast prices and observed responses (all nodes)."""

    m: int
    times: list[int] = field(default_factory=list)
    _prices: list[np.ndarray] = field(default_factory=list, repr=False)
    _responses: list[np.ndarray] = field(default_factory=list, repr=False)

    def append(self, t: int, prices, responses) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError(f"time {t} does not follow {self.times[-1]}")
        prices = np.asarray(prices, dtype=float)
        responses = np.asarray(responses, dtype=float)
        if prices.shape != (self.m,) or responses.shape != (self.m,):
            raise ValueError(f"expected vectors of length {self.m}")
        self.times.append(t)
        self._prices.append(prices.copy())
        self._responses.append(responses.copy())

    def __len__(self) -> int:
        return len(self.times)

    @property
    def prices(self) -> np.ndarray:
        return np.array(self._prices).reshape(len(self), self.m)

    @property
    def responses(self) -> np.ndarray:
        return np.array(self._responses).reshape(len(self), self.m)


@dataclass(frozen=True)
class SensitivityEstimate:
    beta0_hat: np.ndarray
    beta1_hat: np.ndarray
    count: int

    def expected(self, lam):
        return 2.0 * self.beta1_hat * lam + self.beta0_hat


@dataclass(frozen=True)
class MomentEstimate:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray

    @property
    def omega_hat(self) -> np.ndarray:
        mu = self.mu_hat
        m = mu.size
        om = np.empty((m + 1, m + 1))
        om[:m, :m] = self.sigma_hat + np.outer(mu, mu)
        om[:m, m] = mu
        om[m, :m] = mu
        om[m, m] = 1.0
        return om

    @classmethod
    def zero_mean(cls, sigma) -> "MomentEstimate":
        sigma = np.asarray(sigma, dtype=float)
        return cls(np.zeros(sigma.shape[0]), sigma)


@dataclass(frozen=True)
class EstimatorDiagnostics:
    fisher: np.ndarray   # 2x2 Gram of [lambda, 1]
    price_spread: float  # L = sum (lambda - mean)^2
    error: np.ndarray | None = None  # [beta1_hat - beta1, beta0_hat - beta0]

    @property
    def fisher_min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.fisher)[0])


def _weights(k: int, forgetting: float) -> np.ndarray:
    if forgetting == 1.0:
        return np.ones(k)
    if not 0.0 < forgetting <= 1.0:
        raise ValueError("forgetting factor must lie in (0, 1]")
    return forgetting ** np.arange(k - 1, -1, -1, dtype=float)


def fit_lse(prices, responses, forgetting: float = 1.0) -> tuple[float, float]:
    """Least-squares fit of x = 2 b1 lambda + b0 for one node. Returns (b0, b1).

    The intercept is x_bar - 2 b1 lambda_bar, which is what makes the
    residuals sum to zero.
    """
    lam = np.asarray(prices, dtype=float)
    x = np.asarray(responses, dtype=float)
    if lam.size != x.size:
        raise ValueError("prices and responses differ in length")
    if lam.size < 2:
        raise DegenerateHistory("need at least two observations")
    w = _weights(lam.size, forgetting)
    lam_bar = np.dot(w, lam) / w.sum()
    x_bar = np.dot(w, x) / w.sum()
    dl = lam - lam_bar
    spread = np.dot(w, dl * dl)
    if spread <= 1e-12 * max(1.0, np.dot(w, lam * lam)):
        raise DegenerateHistory("all prices are equal")
    b1 = np.dot(w, dl * (x - x_bar)) / (2.0 * spread)
    b0 = x_bar - 2.0 * b1 * lam_bar
    return float(b0), float(b1)


def fit_all(history: History, prior: SensitivityEstimate,
            forgetting: float = 1.0) -> tuple[SensitivityEstimate, np.ndarray]:
    """Fit every node; nodes with a degenerate history keep ``prior``.

    Returns the estimate and a boolean mask of nodes that were actually fitted.
    """
    P, X = history.prices, history.responses
    b0 = np.array(prior.beta0_hat, dtype=float)
    b1 = np.array(prior.beta1_hat, dtype=float)
    fitted = np.zeros(history.m, dtype=bool)
    for i in range(history.m):
        try:
            b0[i], b1[i] = fit_lse(P[:, i], X[:, i], forgetting)
            fitted[i] = True
        except DegenerateHistory:
            pass
    return SensitivityEstimate(b0, b1, len(history)), fitted


def residuals(prices, responses, estimate: SensitivityEstimate) -> np.ndarray:
    """Residuals x - h(lambda, beta_hat) for every past interval (rows) and node (cols)."""
    return np.asarray(responses, dtype=float) - estimate.expected(np.asarray(prices, dtype=float))


def psd_floor(S: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min(initial=0.0) >= -tol:
        return S
    return (V * np.clip(w, 0.0, None)) @ V.T


def empirical_moments(resid) -> MomentEstimate:
    """Residual mean over t-1 samples and covariance with a t-2 denominator."""
    E = np.atleast_2d(np.asarray(resid, dtype=float))
    k = E.shape[0]
    if k < 2:
        raise InsufficientSamples(f"need at least 2 residual vectors, got {k}")
    mu = E.mean(axis=0)
    D = E - mu
    S = D.T @ D / (k - 1)
    return MomentEstimate(mu, psd_floor(S))


def diagnostics(prices, responses=None, truth=None) -> EstimatorDiagnostics:
    """Fisher information, price spread and (with truth) estimation error for one node.

    ``truth`` is a (beta0, beta1) pair. The error is computed from the
    true-model disturbances, B = diag(1/2, 1) F^-1 sum [lambda, 1]^T eps,
    which equals beta_hat - beta for the least-squares fit.
    """
    lam = np.asarray(prices, dtype=float)
    k = lam.size
    if k < 2:
        raise DegenerateHistory("need at least two observations")
    F = np.array([[np.dot(lam, lam), lam.sum()], [lam.sum(), float(k)]])
    spread = float(np.sum((lam - lam.mean()) ** 2))
    err = None
    if truth is not None and responses is not None:
        b0, b1 = truth
        eps = np.asarray(responses, dtype=float) - (2.0 * b1 * lam + b0)
        rhs = np.array([np.dot(lam, eps), eps.sum()])
        sol = np.linalg.solve(F, rhs)
        err = np.array([0.5 * sol[0], sol[1]])
    return EstimatorDiagnostics(F, spread, err)


SNAPSHOT_COLUMNS = ("t", "node", "beta0_hat", "beta1_hat", "residual_mean", "residual_var")


def write_snapshot(rows, path) -> None:
    """Write estimator trajectories; ``rows`` are tuples in SNAPSHOT_COLUMNS order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNAPSHOT_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], *(repr(float(v)) for v in r[2:])])
