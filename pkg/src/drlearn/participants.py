"""Ground-truth demand-response participants.

The DSO never sees these parameters; they drive the simulated responses.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FAMILIES = ("gaussian", "uniform", "two_point")


@dataclass(frozen=True)
class ParticipantTruth:
    node: int
    beta0: float
    beta1: float
    sigma: float

    def __post_init__(self):
        if self.beta1 < 0:
            raise ValueError(f"node {self.node}: beta1 must be >= 0")
        if self.sigma < 0:
            raise ValueError(f"node {self.node}: sigma must be >= 0")


def from_cost_params(nu0: float, nu1: float) -> tuple[float, float]:
    """Map discomfort cost 0.5*nu1*x^2 + nu0*x to (beta0, beta1) of the linear response."""
    if nu1 <= 0:
        raise ValueError(f"nu1 must be positive (convex discomfort), got {nu1}")
    return -nu0 / nu1, 1.0 / (2.0 * nu1)


def expected_response(truth, lam):
    """h(beta, lambda) = 2 beta1 lambda + beta0. Works on scalars or arrays."""
    return 2.0 * truth.beta1 * lam + truth.beta0


def psd_sqrt(cov: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric square root of a PSD matrix; raises if it is materially indefinite."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    w, V = np.linalg.eigh(cov)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise ValueError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


@dataclass
class NoiseSpec:
    """Disturbance law: zero mean, covariance ``covariance``.

    ``two_point`` with a ``direction`` is the Cantelli-extremal law for the
    scalar a^T eps at violation level ``eta``: the projection onto the
    direction takes a high value with probability eta; the orthogonal part is
    Gaussian. Without a direction it is a symmetric +/-1 law per component.
    """

    covariance: np.ndarray
    family: str = "gaussian"
    seed: int | None = None
    direction: np.ndarray | None = None
    eta: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; use one of {FAMILIES}")
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        self._root = psd_sqrt(self.covariance)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw disturbances; shape (m,) when ``size`` is None else (size, m)."""
        k = 1 if size is None else size
        m = self.dim
        if self.family == "gaussian":
            z = rng.standard_normal((k, m))
        elif self.family == "uniform":
            z = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), (k, m))
        elif self.direction is None:
            z = rng.choice(np.array([-1.0, 1.0]), size=(k, m))
        else:
            eps = self._extremal(rng, k)
            return eps[0] if size is None else eps
        eps = z @ self._root.T
        return eps[0] if size is None else eps

    def _extremal(self, rng: np.random.Generator, k: int) -> np.ndarray:
        a = np.asarray(self.direction, dtype=float)
        S = self.covariance
        Sa = S @ a
        v = float(a @ Sa)
        m = self.dim
        if v <= 0:
            return rng.standard_normal((k, m)) @ self._root.T
        eta = self.eta
        hi = math.sqrt(v * (1.0 - eta) / eta)
        lo = -math.sqrt(v * eta / (1.0 - eta))
        y = np.where(rng.random(k) < eta, hi, lo)
        # project Sigma^{1/2} z onto a^T w = 0; covariance is S - Sa Sa^T / v
        P = np.eye(m) - np.outer(Sa, a) / v
        w = rng.standard_normal((k, m)) @ (P @ self._root).T
        return np.outer(y, Sa / v) + w


def respond(truths, lam, noise: NoiseSpec, rng: np.random.Generator):
    """Observed demand reductions x = 2 beta1 lambda + beta0 + eps.

    ``truths`` is a sequence of ParticipantTruth aligned with ``lam``.
    Returns (x, eps).
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("price signals must be nonnegative")
    eps = noise.sample(rng)
    b0 = np.array([t.beta0 for t in truths])
    b1 = np.array([t.beta1 for t in truths])
    return 2.0 * b1 * lam + b0 + eps, eps


def realized_demand(dP_forecast, x_expected, epsilon):
    """Net demand the DSO meters: forecast minus expected response minus noise."""
    return dP_forecast - x_expected - epsilon


def recovered_response(dP_forecast, dP_observed):
    return dP_forecast - dP_observed


def case_study_truths(dP, beta1: float = 1.0 / 150.0, beta0: float = 0.0,
                      sigma_share: float = 0.1) -> list[ParticipantTruth]:
    """Participants at every non-root node with sigma proportional to demand."""
    out = [ParticipantTruth(0, 0.0, 0.0, 0.0)]
    for i in range(1, len(dP)):
        out.append(ParticipantTruth(i, beta0, beta1, sigma_share * float(dP[i])))
    return out


def load_participants(path, m: int) -> tuple[list[ParticipantTruth], np.ndarray]:
    """Read ``participants.csv`` (and ``covariance.csv`` next to it if present).

    Nodes absent from the file get a zero participant (no response, no noise).
    Returns the truth list indexed by node and the m x m covariance.
    """
    path = Path(path)
    file = path / "participants.csv" if path.is_dir() else path
    truths = {i: ParticipantTruth(i, 0.0, 0.0, 0.0) for i in range(m)}
    with file.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("node", "beta0", "beta1", "sigma"):
            raise ValueError(f"{file.name}: header must be node,beta0,beta1,sigma")
        for row in reader:
            node = int(row["node"])
            if not 0 <= node < m:
                raise ValueError(f"{file.name}: node {node} outside feeder")
            truths[node] = ParticipantTruth(node, float(row["beta0"]), float(row["beta1"]),
                                            float(row["sigma"]))
    truth_list = [truths[i] for i in range(m)]
    cov_file = file.parent / "covariance.csv"
    if cov_file.exists():
        cov = np.loadtxt(cov_file, delimiter=",", ndmin=2)
        if cov.shape != (m, m):
            raise ValueError(f"covariance.csv must be {m}x{m}, got {cov.shape}")
        sig = np.array([t.sigma for t in truth_list])
        if not np.allclose(np.diag(cov), sig**2, rtol=1e-9, atol=1e-12):
            raise ValueError("covariance diagonal must equal sigma^2")
    else:
        cov = np.diag([t.sigma**2 for t in truth_list])
    psd_sqrt(cov)
    return truth_list, cov


def write_participants(truths, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "beta0", "beta1", "sigma"])
        for t in truths:
            if t.node == 0 and t.beta1 == 0 and t.sigma == 0:
                continue
            w.writerow([t.node, repr(float(t.beta0)), repr(float(t.beta1)), repr(float(t.sigma))])
