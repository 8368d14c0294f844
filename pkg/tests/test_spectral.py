import math

import numpy as np
import pytest

from fan.blocks import ModelConfig, init_params
from fan.errors import DegenerateSpectrumError
from fan.spectral import (affinity, extract_clusters, input_spectrum, jacobi_eigh, noise_probe,
                          per_block_spectrum, significant_eigencount)


def block_ones(k, m):
    n = k * m
    S = np.zeros((n, n))
    for b in range(k):
        S[b * m:(b + 1) * m, b * m:(b + 1) * m] = 1.0
    return S


def power_deflation(S, iters=5000):
    """Eigenvalues by power iteration with Hotelling deflation."""
    A = S.copy()
    vals = []
    rng = np.random.default_rng(0)
    for _ in range(len(S)):
        v = rng.standard_normal(len(S))
        lam = 0.0
        for _ in range(iters):
            w = A @ v
            nrm = np.linalg.norm(w)
            if nrm == 0:
                break
            v = w / nrm
            new = float(v @ A @ v)
            if abs(new - lam) < 1e-15 * max(1.0, abs(new)):
                lam = new
                break
            lam = new
        vals.append(lam)
        A = A - lam * np.outer(v, v)
    return np.sort(vals)[::-1]


def purity(labels, truth):
    total = 0
    for c in np.unique(labels):
        total += np.bincount(truth[labels == c]).max()
    return total / len(truth)


class TestEigencount:
    @pytest.mark.parametrize("k,m", [(2, 3), (3, 4), (5, 2)])
    @pytest.mark.parametrize("tau", [0.01, 0.3, 0.9])
    def test_block_diagonal(self, k, m, tau):
        spec = significant_eigencount(block_ones(k, m), tau)
        assert spec.significant == k and spec.insignificant == k * m - k
        np.testing.assert_allclose(spec.eigenvalues[:k], m, atol=1e-12)

    def test_identity(self):
        spec = significant_eigencount(np.eye(7))
        assert spec.significant == 7
        np.testing.assert_allclose(spec.eigenvalues, 1)

    def test_power_iteration_oracle(self):
        # well-separated spectrum so the power method converges cleanly
        rng = np.random.default_rng(1)
        Qm, _ = np.linalg.qr(rng.standard_normal((12, 12)))
        S = Qm @ np.diag(np.geomspace(10, 0.5, 12)) @ Qm.T
        S = 0.5 * (S + S.T)
        w, _ = jacobi_eigh(S)
        assert np.max(np.abs(w - power_deflation(S))) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_residuals(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((10, 6))
        S = A @ A.T
        w, V = jacobi_eigh(S)
        for i in range(10):
            assert np.linalg.norm(S @ V[:, i] - w[i] * V[:, i]) < 1e-8 * np.linalg.norm(S)
        assert np.all(w >= -1e-9)
        assert np.all(np.diff(w) <= 0)

    @pytest.mark.parametrize("rank", [1, 3, 6])
    @pytest.mark.parametrize("tau", [1e-5, 0.1, 0.49])
    def test_rank_k_gram(self, rank, tau):
        rng = np.random.default_rng(rank)
        # controlled singular values keep every nonzero eigenvalue above 0.5 lambda_max
        U, _ = np.linalg.qr(rng.standard_normal((12, rank)))
        S = U @ np.diag(np.linspace(1.0, 0.6, rank)) @ U.T
        assert significant_eigencount(0.5 * (S + S.T), tau).significant == rank

    def test_degenerate(self):
        with pytest.raises(DegenerateSpectrumError):
            significant_eigencount(np.zeros((3, 3)))
        with pytest.raises(DegenerateSpectrumError):
            significant_eigencount(-np.eye(3))


class TestAffinity:
    def test_symmetric_exactly(self):
        Z = np.random.default_rng(0).standard_normal((8, 6))
        S = affinity(Z)
        assert np.array_equal(S, S.T)

    def test_one_hot_tokens(self):
        Z = 20.0 * np.eye(5)
        S = affinity(Z)
        p = math.exp(20) / (math.exp(20) + 4)
        q = 1 / (math.exp(20) + 4)
        diag = p * p + 4 * q * q
        off = 2 * p * q + 3 * q * q
        np.testing.assert_allclose(np.diag(S), diag, rtol=1e-12)
        np.testing.assert_allclose(S[0, 1], off, rtol=1e-9)
        assert off < 1e-8

    def test_duplicate_columns(self):
        Z = np.random.default_rng(1).standard_normal((4, 5))
        Z[:, 3] = Z[:, 1]
        S = affinity(Z)
        np.testing.assert_array_equal(S[1], S[3])
        np.testing.assert_array_equal(S[:, 1], S[:, 3])

    def test_raw_mode(self):
        Z = np.random.default_rng(2).standard_normal((4, 3))
        np.testing.assert_allclose(affinity(Z, normalize=None), Z.T @ Z, atol=1e-14)


def three_blobs(seed, m=10, d=6):
    rng = np.random.default_rng(seed)
    means = 3.0 * np.eye(d)[:3]
    tokens = np.concatenate([mu + 0.3 * rng.standard_normal((m, d)) for mu in means]).T
    return tokens, np.repeat(np.arange(3), m)


class TestClusters:
    def test_two_blocks(self):
        S = block_ones(2, 4) + 1e-3
        labels = extract_clusters(S, 2)
        assert len(set(labels[:4])) == 1 and len(set(labels[4:])) == 1
        assert labels[0] != labels[4]

    def test_k_equals_n(self):
        S = np.eye(5) + 0.1
        assert sorted(extract_clusters(S, 5).tolist()) == list(range(5))

    @pytest.mark.parametrize("seed", range(20))
    def test_three_blob_purity(self, seed):
        Z, truth = three_blobs(seed)
        labels = extract_clusters(affinity(Z, normalize=None) ** 2, 3, seed=seed)
        assert purity(labels, truth) >= 0.95

    def test_permutation_invariance(self):
        Z, _ = three_blobs(0)
        S = affinity(Z)
        perm = np.random.default_rng(3).permutation(S.shape[0])
        a = extract_clusters(S, 3)
        b = extract_clusters(S[np.ix_(perm, perm)], 3)
        # same partition up to relabeling
        pairs = set(zip(a[perm].tolist(), b.tolist()))
        assert len(pairs) == 3

    def test_bad_k(self):
        with pytest.raises(ValueError):
            extract_clusters(np.eye(3), 1)


# ---------------------------------------------------------------- model probes


def small_model(kind="fan-eca", depth=3):
    cfg = ModelConfig(kind=kind, depth=depth, dim=16, heads=2, patch=8)
    return cfg, init_params(cfg, 0, dtype=np.float64)


def test_noise_probe_zero_scale():
    cfg, params = small_model()
    img = np.random.default_rng(0).random((3, 32, 32))
    rep = noise_probe(params, cfg, img, 0.0)
    assert rep.rho == [0.0] * cfg.depth


def test_noise_probe_identity_blocks():
    cfg, params = small_model()
    for k in params:
        if k.startswith("blocks.") and not k.endswith(".g"):
            params[k] = np.zeros_like(params[k])
    img = np.random.default_rng(1).random((3, 32, 32))
    rep = noise_probe(params, cfg, img, 0.1, seed=3)
    np.testing.assert_allclose(rep.rho, rep.rho[0], rtol=1e-12)
    assert rep.rho[0] > 0 and len(rep.pure_noise) == cfg.depth


def test_noise_probe_deterministic():
    cfg, params = small_model()
    img = np.random.default_rng(2).random((3, 32, 32))
    a = noise_probe(params, cfg, img, 0.1, seed=5)
    b = noise_probe(params, cfg, img, 0.1, seed=5)
    assert a.to_dict() == b.to_dict()
    assert a.rho != noise_probe(params, cfg, img, 0.1, seed=6).rho


def test_constant_image_rank_one():
    spec = input_spectrum(np.full((3, 32, 32), 0.4), patch=8)
    assert spec.significant == 1


def test_per_block_report_length():
    cfg, params = small_model(depth=4)
    specs = per_block_spectrum(params, cfg, np.random.default_rng(3).random((3, 32, 32)))
    assert len(specs) == 4
    for s in specs:
        assert s.significant + s.insignificant == cfg.num_tokens
        assert s.eigenvalues.min() >= -1e-9
