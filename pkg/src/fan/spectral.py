"""Token-affinity spectra, spectral clustering and the noise-decay probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import ModelConfig, forward_tokens, patchify
from .errors import DegenerateSpectrumError, DimensionError
from .kernels import softmax
from .rng import generator

DEFAULT_TAU = 0.02


def jacobi_eigh(S: np.ndarray, tol: float = 1e-15, max_sweeps: int = 64):
    """Cyclic Jacobi eigendecomposition of a real symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue;
    eigenvectors are columns.
    """
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {A.shape}")
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(n), V
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


@dataclass
class AffinitySpectrum:
    eigenvalues: np.ndarray  # descending
    tau: float
    significant: int
    insignificant: int
    eigenvectors: np.ndarray | None = field(default=None, repr=False)

    @property
    def threshold(self) -> float:
        return self.tau * float(self.eigenvalues[0])


def affinity(Z: np.ndarray, normalize: str | None = "softmax") -> np.ndarray:
    """``S = Z^T Z`` for a ``(d, n)`` token matrix.

    ``normalize="softmax"`` first maps every token through a softmax over
    channels; ``None`` uses raw dot products.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise DimensionError(f"affinity needs a (d, n) token matrix, got {Z.shape}")
    if normalize == "softmax":
        Z = softmax(Z, axis=0)
    elif normalize is not None:
        raise ValueError(f"unknown normalization {normalize!r}")
    S = Z.T @ Z
    return 0.5 * (S + S.T)


def significant_eigencount(S: np.ndarray, tau: float = DEFAULT_TAU,
                           keep_vectors: bool = False) -> AffinitySpectrum:
    """Count eigenvalues above ``tau * lambda_max``."""
    w, V = jacobi_eigh(S)
    if w[0] <= 0:
        raise DegenerateSpectrumError(f"largest eigenvalue {w[0]:.3g} is not positive")
    sig = int(np.sum(w > tau * w[0]))
    return AffinitySpectrum(w, tau, sig, len(w) - sig, V if keep_vectors else None)


def kmeans(Y: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; empty clusters are reseeded
    from the point farthest from its center."""
    Y = np.asarray(Y, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(Y)
    centers = [Y[rng.integers(n)]]
    d2 = np.sum((Y - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(Y[idx])
        d2 = np.minimum(d2, np.sum((Y - Y[idx]) ** 2, axis=1))
    C = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = np.sum((Y[:, None, :] - C[None, :, :]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        for c in range(k):
            if not np.any(new == c):
                far = int(np.argmax(dist[np.arange(n), new]))
                new[far] = c
                dist[far, :] = np.inf
                dist[far, c] = 0.0
        if np.array_equal(new, labels):
            break
        labels = new
        C = np.array([Y[labels == c].mean(axis=0) for c in range(k)])
    return labels


def extract_clusters(S: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Ng-Jordan-Weiss spectral clustering of an affinity matrix."""
    S = np.asarray(S, dtype=np.float64)
    n = len(S)
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    A = S.copy()
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    inv = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    L = inv[:, None] * A * inv[None, :]
    _, V = jacobi_eigh(0.5 * (L + L.T))
    Y = V[:, :k]
    norms = np.linalg.norm(Y, axis=1, keepdims=True)
    Y = Y / np.maximum(norms, 1e-300)
    return kmeans(Y, k, seed)


# ---------------------------------------------------------------- model probes


@dataclass
class NoiseDecayReport:
    rho: list  # relative perturbation per block
    pure_noise: list  # ||f_l(eps)|| / ||eps|| per block
    scale: float
    seed: int
    model_id: str = ""
    absolute: list = field(default_factory=list)  # block indices reported as absolute norms

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "scale": self.scale,
            "seed": self.seed,
            "rho": self.rho,
            "pure_noise": [None if math.isnan(v) else v for v in self.pure_noise],
            "absolute": self.absolute,
        }


def _block_outputs(params, cfg: ModelConfig, image: np.ndarray) -> list:
    return [v.data.astype(np.float64) for v in forward_tokens(image[None], params, cfg)[1:]]


def noise_probe(params: dict, cfg: ModelConfig, image: np.ndarray, scale: float, seed: int = 0,
                model_id: str = "") -> NoiseDecayReport:
    """Per-block response to i.i.d. Gaussian pixel noise of std ``scale``.

    ``rho_l = ||f_l(x + eps) - f_l(x)||_F / ||f_l(x)||_F``; when the clean
    norm vanishes the absolute difference norm is reported and flagged.
    """
    image = np.asarray(image)
    eps = scale * generator(seed, "noise-probe").standard_normal(image.shape)
    eps = eps.astype(image.dtype)
    clean = _block_outputs(params, cfg, image)
    noisy = _block_outputs(params, cfg, image + eps)
    pure = _block_outputs(params, cfg, eps)
    eps_norm = float(np.linalg.norm(eps))
    rho, flags, pn = [], [], []
    for l, (c, z, p) in enumerate(zip(clean, noisy, pure)):
        diff = float(np.linalg.norm(z - c))
        base = float(np.linalg.norm(c))
        if base == 0:
            rho.append(diff)
            flags.append(l)
        else:
            rho.append(diff / base)
        pn.append(float(np.linalg.norm(p)) / eps_norm if eps_norm > 0 else float("nan"))
    return NoiseDecayReport(rho, pn, float(scale), int(seed), model_id, flags)


def token_spectrum(tokens: np.ndarray, tau: float = DEFAULT_TAU,
                   normalize: str | None = "softmax") -> AffinitySpectrum:
    return significant_eigencount(affinity(tokens, normalize), tau)


def input_spectrum(image: np.ndarray, patch: int, tau: float = DEFAULT_TAU,
                   normalize: str | None = "softmax") -> AffinitySpectrum:
    """Spectrum of the raw (un-embedded) patch tokens."""
    return token_spectrum(patchify(np.asarray(image, dtype=np.float64), patch), tau, normalize)


def per_block_spectrum(params: dict, cfg: ModelConfig, image: np.ndarray, tau: float = DEFAULT_TAU,
                       normalize: str | None = "softmax") -> list:
    """Affinity spectrum of every block output (``depth`` entries)."""
    return [token_spectrum(z[0], tau, normalize) for z in _block_outputs(params, cfg, image)]


def block_clusters(params: dict, cfg: ModelConfig, image: np.ndarray, k: int,
                   block: int | None = None, seed: int = 0) -> np.ndarray:
    """Token cluster labels on a ``(grid, grid)`` map; default tap is the
    second-last block."""
    outs = _block_outputs(params, cfg, image)
    if block is None:
        block = max(len(outs) - 2, 0)
    labels = extract_clusters(affinity(outs[block][0]), k, seed)
    g = cfg.image_size // cfg.patch
    return labels.reshape(g, g)
