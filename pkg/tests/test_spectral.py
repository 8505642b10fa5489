import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casperlab.errors import InsufficientClassesError, InvalidInputError, InvalidParameterError
from casperlab.graph import EmbeddingBatch, LatentGraph, build_knn_graph, edge_topology, normalized_laplacian
from casperlab.spectral import (
    CasperConfig,
    casper_batch_loss,
    casper_loss,
    casper_loss_and_grad,
    eigh,
)

from .oracles import central_difference, frozen_topology_loss, jacobi_eigenvalues, rel_err


def complete_laplacian(n):
    return normalized_laplacian(LatentGraph(np.ones((n, n)) - np.eye(n), np.zeros(n, int)))


def clusters(rng, g, per, d=12, jitter=1e-4):
    """g groups of near-duplicate vectors on disjoint coordinate supports."""
    feats, labels = [], []
    for c in range(g):
        base = np.zeros(d)
        base[c * (d // g):(c + 1) * (d // g)] = rng.uniform(0.5, 1.5, size=d // g)
        for _ in range(per):
            v = base.copy()
            v[c * (d // g):(c + 1) * (d // g)] += jitter * rng.random(d // g)
            feats.append(v)
            labels.append(c)
    return np.array(feats), np.array(labels)


class TestEigh:
    def test_two_node(self):
        dec = eigh(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        np.testing.assert_allclose(dec.eigenvalues, [0, 2], atol=1e-14)
        s = 1 / np.sqrt(2)
        np.testing.assert_allclose(dec.eigenvectors[:, 0], [s, s], atol=1e-14)
        # largest-magnitude entry positive, first one on ties
        np.testing.assert_allclose(dec.eigenvectors[:, 1], [s, -s], atol=1e-14)

    def test_identity(self):
        np.testing.assert_allclose(eigh(np.eye(3)).eigenvalues, [1, 1, 1])

    def test_k4(self):
        lap = complete_laplacian(4)
        expected = [0, 4 / 3, 4 / 3, 4 / 3]
        np.testing.assert_allclose(jacobi_eigenvalues(lap.matrix), expected, atol=1e-12)
        np.testing.assert_allclose(eigh(lap).eigenvalues, expected, atol=1e-12)

    def test_rejects_asymmetric(self):
        with pytest.raises(InvalidInputError):
            eigh(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_round_trip_and_orthonormality(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            n = int(rng.integers(1, 65))
            m = rng.uniform(-2, 2, size=(n, n))
            m = 0.5 * (m + m.T)
            dec = eigh(m)
            u, lam = dec.eigenvectors, dec.eigenvalues
            assert np.all(np.diff(lam) >= 0)
            assert np.linalg.norm(u @ np.diag(lam) @ u.T - m) <= 1e-6
            assert np.linalg.norm(u.T @ u - np.eye(n)) <= 1e-8
            assert np.max(np.linalg.norm(m @ u - u * lam, axis=0)) <= 1e-6

    def test_sign_convention(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(6, 6))
        u = eigh(m + m.T).eigenvectors
        pivots = u[np.argmax(np.abs(u), axis=0), np.arange(6)]
        assert np.all(pivots > 0)


class TestCasperLoss:
    @pytest.mark.parametrize(
        "lam, g, expected",
        [
            ((0, 0, 0.8, 1.2), 2, -0.8),
            ((0, 4 / 3, 4 / 3, 4 / 3), 2, 0.0),
            ((0, 0.1, 0.2, 1.9), 3, -1.6),
        ],
    )
    def test_examples(self, lam, g, expected):
        assert casper_loss(lam, g) == pytest.approx(expected, abs=1e-12)

    def test_k4_from_eigensolver(self):
        assert abs(casper_loss(eigh(complete_laplacian(4)).eigenvalues, 2)) <= 1e-8

    def test_g_too_large(self):
        with pytest.raises(InvalidParameterError):
            casper_loss([0, 1], 2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(6, 20), st.integers(1, 4))
    def test_bounds_and_permutation_invariance(self, seed, n, g):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, 5))
        lam = eigh(normalized_laplacian(build_knn_graph(EmbeddingBatch(z, np.zeros(n, int)), 3))).eigenvalues
        loss = casper_loss(lam, g)
        assert -2 - 1e-9 <= loss <= 2 * g + 1e-9
        perm = rng.permutation(n)
        a = build_knn_graph(EmbeddingBatch(z, np.zeros(n, int)), 3).adjacency
        lam_p = eigh(normalized_laplacian(LatentGraph(a[np.ix_(perm, perm)], np.zeros(n, int)))).eigenvalues
        assert casper_loss(lam_p, g) == pytest.approx(loss, abs=1e-10)


class TestLossAndGrad:
    def test_matches_pipeline(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(10, 4))
        res = casper_loss_and_grad(z, np.zeros(10, int), 3, 2)
        lam = eigh(normalized_laplacian(build_knn_graph(EmbeddingBatch(z, np.zeros(10, int)), 3))).eigenvalues
        assert res.loss == pytest.approx(casper_loss(lam, 2), abs=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1234)
        checked = 0
        while checked < 20:
            n, d = int(rng.integers(8, 25)), int(rng.integers(4, 17))
            k, g = int(rng.integers(2, 6)), int(rng.integers(2, 5))
            z = rng.normal(size=(n, d))
            res = casper_loss_and_grad(z, None, k, g)
            if res.degenerate:
                continue
            mask, _ = edge_topology(z, k)
            fd = central_difference(lambda x: frozen_topology_loss(x, mask, g), z, h=1e-5)
            assert rel_err(res.grad, fd) <= 1e-4
            checked += 1

    def test_separated_clusters(self):
        rng = np.random.default_rng(0)
        for g in (2, 3, 4):
            z, y = clusters(rng, g, per=6)
            res = casper_loss_and_grad(z, y, k=3, g=g)
            assert np.all(res.eigenvalues[:g] <= 1e-6)
            assert res.loss == pytest.approx(-res.eigenvalues[g], abs=g * 1e-6)
            assert res.loss < 0

    def test_scale_homogeneity(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(12, 6))
        a = casper_loss_and_grad(z, None, 3, 2)
        b = casper_loss_and_grad(7.5 * z, None, 3, 2)
        assert b.loss == pytest.approx(a.loss, abs=1e-12)
        np.testing.assert_allclose(b.grad, a.grad / 7.5, atol=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(16, 8))
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        a = casper_loss_and_grad(z, None, 4, 3)
        b = casper_loss_and_grad(z @ q, None, 4, 3)
        assert abs(a.loss - b.loss) <= 1e-8

    def test_degenerate_flag(self):
        # two identical, disconnected 3-cliques: eigenvalues at positions g and g+1 coincide
        z = np.array([[1, 0], [1, 0], [1, 0], [0, 1], [0, 1], [0, 1]], dtype=float)
        res = casper_loss_and_grad(z, None, 2, 1)
        assert res.degenerate
        assert np.all(np.isfinite(res.grad))


class TestBatchLoss:
    def test_degenerate_sampling_equals_full(self):
        rng = np.random.default_rng(4)
        by_class = {c: rng.normal(size=(5, 6)) for c in range(3)}
        cfg = CasperConfig(p=3, t=5, mc_samples=1, k=3)
        res = casper_batch_loss(by_class, cfg, np.random.default_rng(0))
        feats = np.concatenate([by_class[c] for c in range(3)])
        full = casper_loss_and_grad(feats, np.repeat(range(3), 5), 3, 3)
        assert res.loss == pytest.approx(full.loss, abs=1e-10)
        for c in range(3):
            for i in range(5):
                np.testing.assert_allclose(res.grads[(c, i)], full.grad[c * 5 + i], atol=1e-10)

    def test_clustered_buffer_negative(self):
        rng = np.random.default_rng(6)
        z, y = clusters(rng, 4, per=10, d=16)
        by_class = {c: z[y == c] for c in range(4)}
        cfg = CasperConfig(p=4, t=5, mc_samples=3, k=3)
        losses = [casper_batch_loss(by_class, cfg, np.random.default_rng(s)).loss for s in range(5)]
        assert np.mean(losses) < 0

    def test_seeds_and_bounds(self):
        rng = np.random.default_rng(7)
        by_class = {c: rng.normal(size=(10, 5)) for c in range(6)}
        cfg = CasperConfig(p=3, t=4, mc_samples=2, k=3)
        a = casper_batch_loss(by_class, cfg, np.random.default_rng(1)).loss
        b = casper_batch_loss(by_class, cfg, np.random.default_rng(2)).loss
        for v in (a, b):
            assert -2 <= v <= 2 * cfg.p
        assert a != b
        again = casper_batch_loss(by_class, cfg, np.random.default_rng(1)).loss
        assert again == a

    def test_gradient_weighting(self):
        rng = np.random.default_rng(3)
        by_class = {c: rng.normal(size=(6, 4)) for c in range(4)}
        cfg = CasperConfig(p=2, t=3, mc_samples=4, k=2)
        res = casper_batch_loss(by_class, cfg, np.random.default_rng(5))
        # replay the same draws and accumulate by hand
        draw = np.random.default_rng(5)
        acc, total = {}, 0.0
        for _ in range(4):
            classes = draw.choice(sorted(by_class), size=2, replace=False)
            keys = [(c, i) for c in classes.tolist() for i in draw.choice(6, 3, replace=False).tolist()]
            feats = np.stack([by_class[c][i] for c, i in keys])
            one = casper_loss_and_grad(feats, None, 2, 2)
            total += one.loss / 4
            for key, row in zip(keys, one.grad):
                acc[key] = acc.get(key, 0) + row / 4
        assert res.loss == pytest.approx(total, abs=1e-12)
        assert set(acc) == set(res.grads)
        for key in acc:
            np.testing.assert_allclose(res.grads[key], acc[key], atol=1e-12)

    def test_insufficient_classes(self):
        by_class = {0: np.ones((8, 3)), 1: np.ones((8, 3)), 2: np.ones((2, 3))}
        with pytest.raises(InsufficientClassesError):
            casper_batch_loss(by_class, CasperConfig(p=3, t=4, k=3), np.random.default_rng(0))

    def test_config_invariants(self):
        with pytest.raises(InvalidParameterError):
            CasperConfig(p=1)
        with pytest.raises(InvalidParameterError):
            CasperConfig(p=2, t=2, k=4)
        with pytest.raises(InvalidParameterError):
            CasperConfig(rho=-1)
