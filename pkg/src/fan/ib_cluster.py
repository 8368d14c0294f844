"""Iterative information-bottleneck clustering with a shared Gaussian model.

Points are rows of an ``(N, d)`` array. Each cluster ``c`` is a Gaussian
``N(mu_c, Sigma)`` with one covariance shared by all clusters and held fixed
during a run. Two assignment conventions are available:

``"standard-ib"``
    ``q(c|i) ~ (n_c / N) * exp(-beta * KL_ic)`` with the reduced divergence
    ``KL_ic = (mu_c - x_i)^T Sigma^-1 (mu_c - x_i) + log det Sigma``.

``"paper-literal"``
    ``q(c|i) = log(n_c / N) / det Sigma * softmax_c(-(mu_c - x_i)^T Sigma^-1 (mu_c - x_i))``,
    the multiplicative log-prior form. Its weights are never positive
    (``n_c <= N``), so renormalized rows use absolute masses and the call
    emits :class:`DegenerateAssignmentWarning`.

With centers normalized so that ``mu_c^T Sigma^-1 mu_c = 1``, one
paper-literal assign + global-scale center update equals a single softmax
attention step (:func:`ib_matrix_step`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ContractError, DecompositionError
from .kernels import softmax

CONVENTIONS = ("standard-ib", "paper-literal")
ATTENTION_TEMPERATURE = 0.5


class DegenerateAssignmentWarning(RuntimeWarning):
    pass


class EmptyClusterWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class IBConfig:
    beta: float = 1.0
    smoothing: float = 1e-2  # width of the observation noise around each point
    convention: str = "standard-ib"
    max_iter: int = 100
    tol: float = 1e-8
    normalized: bool = False
    ridge: float = 1e-3

    def __post_init__(self):
        if self.beta <= 0 or self.smoothing <= 0:
            raise ConfigError("beta and smoothing must be positive")
        if self.convention not in CONVENTIONS:
            raise ConfigError(f"unknown convention {self.convention!r}; expected one of {CONVENTIONS}")


@dataclass
class IBState:
    centers: np.ndarray  # (C, d)
    cov: np.ndarray  # (d, d), shared
    masses: np.ndarray  # (C,), sums to N
    q: np.ndarray | None = None  # (N, C)

    @property
    def n_points(self) -> float:
        return float(self.masses.sum())


@dataclass
class IBResult:
    state: IBState
    converged: bool
    iterations: int
    trajectory: list = field(default_factory=list)

    def labels(self) -> np.ndarray:
        return np.argmax(self.state.q, axis=1)


# ---------------------------------------------------------------- helpers


def pooled_covariance(points: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Data covariance plus ``ridge * I``."""
    points = np.asarray(points, dtype=np.float64)
    d = points.shape[1]
    xc = points - points.mean(axis=0)
    return xc.T @ xc / len(points) + ridge * np.eye(d)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise DecompositionError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DecompositionError("covariance is not positive definite") from None


def _precision(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """``(Sigma^-1, log det Sigma)`` via Cholesky."""
    L = _cholesky(cov)
    eye = np.eye(len(cov))
    linv = np.linalg.solve(L, eye)
    return linv.T @ linv, 2.0 * np.sum(np.log(np.diag(L)))


def mahalanobis_sq(points: np.ndarray, centers: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """``(N, C)`` matrix of ``(mu_c - x_i)^T Sigma^-1 (mu_c - x_i)``."""
    prec, _ = _precision(cov)
    diff = centers[None, :, :] - points[:, None, :]
    return np.einsum("ncd,de,nce->nc", diff, prec, diff)


def normalize_centers(centers: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Scale each center so that ``mu^T Sigma^-1 mu = 1``."""
    prec, _ = _precision(cov)
    norms = np.sqrt(np.einsum("cd,de,ce->c", centers, prec, centers))
    if np.any(norms == 0):
        raise ContractError("cannot normalize a zero center")
    return centers / norms[:, None]


def center_norms(centers: np.ndarray, cov: np.ndarray) -> np.ndarray:
    prec, _ = _precision(cov)
    return np.einsum("cd,de,ce->c", centers, prec, centers)


# ---------------------------------------------------------------- steps


def ib_assign(points, state: IBState, config: IBConfig, renormalize: bool = True) -> np.ndarray:
    """Soft assignments ``q(c|i)`` as an ``(N, C)`` array.

    ``renormalize=False`` (paper-literal only) returns the raw weights
    ``log(n_c/N) / det Sigma * softmax_c(...)`` whose rows need not sum to 1.
    """
    x = np.asarray(points, dtype=np.float64)
    n = state.n_points
    d2 = mahalanobis_sq(x, state.centers, state.cov)
    if config.convention == "standard-ib":
        _, logdet = _precision(state.cov)
        with np.errstate(divide="ignore"):
            logits = np.log(state.masses / n)[None, :] - config.beta * (d2 + logdet)
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    _, logdet = _precision(state.cov)
    with np.errstate(divide="ignore"):
        prior = np.log(state.masses / n)
    if not np.all(np.isfinite(prior)):
        raise ContractError("paper-literal assignment needs every cluster mass > 0")
    w = (prior / np.exp(logdet))[None, :] * softmax(-d2, axis=1)
    if not renormalize:
        return w
    if np.any(prior < 0):
        warnings.warn(
            "paper-literal prefactor log(n_c/N) is negative; rows renormalized by absolute mass",
            DegenerateAssignmentWarning,
            stacklevel=2,
        )
    mass = np.abs(w)
    tot = mass.sum(axis=1, keepdims=True)
    dead = tot[:, 0] == 0
    if np.any(dead):
        # every prefactor vanished (a single cluster holding all points)
        mass[dead] = softmax(-d2[dead], axis=1)
        tot[dead] = 1.0
    return mass / tot


def ib_update_centers(points, q: np.ndarray, state: IBState | None = None, scale: str = "global",
                      normalize: bool = False) -> np.ndarray:
    """New centers from soft assignments.

    ``scale="global"``: ``mu_c = (1/N) sum_i q(c|i) x_i``.
    ``scale="cluster"``: ``mu_c = sum_i q(c|i) x_i / sum_i q(c|i)``, the exact
    minimizer of the q-weighted Mahalanobis loss.
    A cluster with zero total weight keeps its previous center (needs ``state``).
    """
    x = np.asarray(points, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    weighted = q.T @ x
    if scale == "global":
        centers = weighted / len(x)
    elif scale == "cluster":
        mass = q.sum(axis=0)
        safe = np.where(mass == 0, 1.0, mass)
        centers = weighted / safe[:, None]
    else:
        raise ConfigError(f"unknown center scale {scale!r}")
    empty = q.sum(axis=0) == 0
    if np.any(empty):
        if state is None:
            raise ContractError("empty cluster and no previous centers to freeze")
        warnings.warn(f"clusters {np.flatnonzero(empty).tolist()} are empty; centers frozen",
                      EmptyClusterWarning, stacklevel=2)
        centers[empty] = state.centers[empty]
    if normalize:
        if state is None:
            raise ContractError("normalization needs the state covariance")
        centers = normalize_centers(centers, state.cov)
    return centers


def ib_matrix_step(points, state: IBState, atol: float = 1e-9) -> np.ndarray:
    """One IB center update written as softmax attention.

    With ``Q = Sigma^-1 X``, ``K = [mu_1 .. mu_C]`` and temperature 1/2, the
    ``(N, C)`` weights ``softmax(Q^T K / (1/2))`` (rows over clusters) are
    applied to the points and scaled per cluster by
    ``log(n_c/N) / (N det Sigma)``. Returns the new centers, ``(C, d)``.
    """
    x = np.asarray(points, dtype=np.float64)
    norms = center_norms(state.centers, state.cov)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ContractError("ib_matrix_step needs centers normalized w.r.t. Sigma^-1")
    prec, logdet = _precision(state.cov)
    n = state.n_points
    X = x.T  # (d, N)
    Q = prec @ X
    Kmat = state.centers.T  # (d, C)
    attn = softmax(Q.T @ Kmat / ATTENTION_TEMPERATURE, axis=1)  # (N, C)
    with np.errstate(divide="ignore"):
        value_scale = np.log(state.masses / n) / (len(x) * np.exp(logdet))
    return value_scale[:, None] * (attn.T @ X.T)


def ib_objective(points, state: IBState, config: IBConfig) -> float:
    """``I(i; c) + beta * E_q[KL]`` for the current assignments."""
    x = np.asarray(points, dtype=np.float64)
    q = state.q
    n = len(x)
    qc = q.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(q > 0, q * np.log(q / qc[None, :]), 0.0)
    mi = ratio.sum() / n
    _, logdet = _precision(state.cov)
    kl = mahalanobis_sq(x, state.centers, state.cov) + logdet
    return float(mi + config.beta * np.sum(q * kl) / n)


# ---------------------------------------------------------------- driver


def farthest_point_init(points: np.ndarray, C: int, seed: int = 0) -> np.ndarray:
    """Random first center, then repeatedly the point farthest from all chosen."""
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(len(points)))]
    dist = np.sum((points - points[idx[0]]) ** 2, axis=1)
    for _ in range(1, C):
        nxt = int(np.argmax(dist))
        idx.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[idx].copy()


def ib_cluster(points, C: int, config: IBConfig = IBConfig(), seed: int = 0) -> IBResult:
    """Alternate assignment and center updates until the centers stop moving.

    Sigma is estimated once as the pooled covariance plus ``ridge * I``.
    Masses are the soft counts ``sum_i q(c|i)``. Returns the final state
    with ``converged=False`` when ``max_iter`` is exhausted.
    """
    x = np.asarray(points, dtype=np.float64)
    if not 1 <= C <= len(x):
        raise ConfigError(f"need 1 <= C <= N, got C={C}, N={len(x)}")
    cov = pooled_covariance(x, config.ridge)
    centers = farthest_point_init(x, C, seed)
    if config.normalized:
        centers = normalize_centers(centers, cov)
    state = IBState(centers, cov, np.full(C, len(x) / C))
    scale = "cluster" if config.convention == "standard-ib" else "global"
    trajectory = []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        state.q = ib_assign(x, state, config)
        state.masses = state.q.sum(axis=0)
        new = ib_update_centers(x, state.q, state, scale=scale, normalize=config.normalized)
        move = float(np.max(np.linalg.norm(new - state.centers, axis=1)))
        state.centers = new
        trajectory.append({
            "iteration": it,
            "centers": new.tolist(),
            "assignments": state.q.tolist(),
            "objective": ib_objective(x, state, config),
            "movement": move,
        })
        if move < config.tol:
            converged = True
            break
    state.q = ib_assign(x, state, config)
    return IBResult(state, converged, it, trajectory)


def two_blobs(n_per_blob: int = 20, d: int = 2, sigma: float = 0.1, separation: float = 10.0,
              seed: int = 0, blobs: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs with centers ``separation`` apart along successive axes."""
    rng = np.random.default_rng(seed)
    centers = np.zeros((blobs, d))
    for b in range(blobs):
        centers[b, b % d] = separation * (b // d + 1) if b else 0.0
    pts = np.concatenate([c + sigma * rng.standard_normal((n_per_blob, d)) for c in centers])
    labels = np.repeat(np.arange(blobs), n_per_blob)
    return pts, labels
