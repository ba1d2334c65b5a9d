import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from becomenet import betagraph as bg
from becomenet.diffcomp import Tape, Tensor, grad_check
from becomenet.specialfn import BetaParams, reg_inc_beta

finite = st.floats(-10, 10, allow_nan=False)


def lam_of(u, v):
    return bg.sin_sq_angle(Tensor(np.asarray(u, float)), Tensor(np.asarray(v, float))).item()


class TestSinSq:
    def test_orthogonal(self):
        assert lam_of([1, 0, 0], [0, 1, 0]) == 1.0

    def test_parallel(self):
        assert lam_of([2, 2], [1, 1]) == pytest.approx(0.0, abs=1e-15)

    def test_half(self):
        assert lam_of([1, 1, 0], [1, 0, 0]) == pytest.approx(0.5, abs=1e-15)

    def test_degenerate_vector(self):
        u, v = Tensor(np.zeros(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = bg.sin_sq_angle(u, v)
            tape.backward(out)
        assert out.item() == 1.0
        assert not np.any(u.grad) and not np.any(v.grad)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bg.sin_sq_angle(Tensor(np.ones(3)), Tensor(np.ones(4)))

    @settings(max_examples=100, deadline=None)
    @given(arrays(float, 6, elements=finite), arrays(float, 6, elements=finite),
           st.floats(0.1, 100), st.floats(-100, -0.1))
    def test_symmetric_and_scale_invariant(self, u, v, s1, s2):
        if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
            return
        base = lam_of(u, v)
        assert 0.0 <= base <= 1.0
        assert lam_of(v, u) == pytest.approx(base, abs=1e-12)
        assert lam_of(s1 * u, s2 * v) == pytest.approx(base, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        u, v = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
        assert grad_check(lambda: bg.sin_sq_angle(u, v), [u, v]) < 1e-6

    def test_pairwise_matches_scalar_version(self):
        rng = np.random.default_rng(4)
        f = rng.normal(size=(6, 3))
        const = rng.normal(size=(6, 2))
        lam = bg.pairwise_sin_sq(Tensor(f), const).data
        cols = np.column_stack([f, const])
        for i in range(5):
            for j in range(5):
                expected = 0.0 if i == j else lam_of(cols[:, i], cols[:, j])
                assert lam[i, j] == pytest.approx(expected, abs=1e-12)


class TestSignMatrix:
    def test_smallest_case(self):
        expected = np.array([[0, -1, 1], [-1, 0, 0], [1, 0, 0]], dtype=float)
        np.testing.assert_array_equal(bg.build_sign_matrix(1, 1), expected)

    def test_feature_pair_rewarded(self):
        assert bg.build_sign_matrix(2, 1)[0, 1] == 1.0

    @given(st.integers(1, 12), st.integers(1, 6))
    def test_structure(self, p, n_lab):
        s = bg.build_sign_matrix(p, n_lab)
        w = p + n_lab + 1
        assert s.shape == (w, w)
        np.testing.assert_array_equal(s, s.T)
        assert not np.any(np.diag(s))
        labels = slice(p, p + n_lab)
        assert not np.any(s[labels, labels])
        assert not np.any(s[labels, -1])
        assert np.all(s[:p, labels] == -1)
        assert np.all(s[:p, -1] == 1)
        off = s[:p, :p][~np.eye(p, dtype=bool)]
        assert np.all(off == 1)

    @pytest.mark.parametrize("p,n", [(0, 1), (1, 0)])
    def test_zero_counts(self, p, n):
        with pytest.raises(ValueError):
            bg.build_sign_matrix(p, n)


class TestThreshold:
    def test_eta_and_quantile(self):
        w, b = 50, 32
        eta, q = bg.beta_threshold(w, b, 0.05)
        assert eta == pytest.approx(0.05 / (0.5 * w * (w - 1)))
        assert reg_inc_beta(q, BetaParams((b - 1) / 2, 0.5)) == pytest.approx(eta, rel=1e-10)

    def test_config_carries_derived_values(self):
        cfg = bg.ScreeningConfig.for_graph(10, 8, 0.01, 50.0)
        eta, q = bg.beta_threshold(10, 8, 0.01)
        assert (cfg.eta, cfg.q_eta, cfg.m) == (eta, q, 50.0)

    def test_small_batch_rejected(self):
        with pytest.raises(ValueError):
            bg.beta_threshold(5, 2)


def nodes(features, labels, identity):
    return bg.NodeMatrix(Tensor(np.asarray(features, float)), labels, identity)


class TestAdjacency:
    def test_identical_features_saturate_to_one(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(8, 1))
        nm = nodes(np.hstack([f, f]), rng.normal(size=(8, 1)), rng.random(8))
        a = bg.build_adjacency(nm).data
        assert a[0, 1] > 1 - 1e-8

    def test_orthogonal_columns_near_zero(self):
        f = np.eye(4)[:, :2]
        nm = nodes(f, np.eye(4)[:, 2], np.eye(4)[:, 3])
        a = bg.build_adjacency(nm).data
        off = a[~np.eye(4, dtype=bool)]
        assert np.all(off < 1e-8)
        np.testing.assert_array_equal(np.diag(a), 1.0)

    def test_midpoint_at_threshold(self):
        lam = Tensor(np.array([[0.0, 0.3], [0.3, 0.0]]))
        a = bg._smooth_screen(lam, 0.3, 100.0).data
        assert a[0, 1] == 0.5

    def test_symmetric_in_unit_interval(self):
        rng = np.random.default_rng(1)
        a = bg.build_adjacency(nodes(rng.normal(size=(12, 5)), rng.integers(0, 2, (12, 2)), rng.random(12))).data
        np.testing.assert_allclose(a, a.T, atol=0)
        assert np.all((a >= 0) & (a <= 1))

    def test_batch_too_small(self):
        with pytest.raises(ValueError):
            bg.build_adjacency(nodes(np.ones((2, 2)), np.ones(2), np.ones(2)))

    def test_config_shape_mismatch(self):
        nm = nodes(np.random.default_rng(0).normal(size=(6, 2)), np.ones(6), np.arange(1, 7))
        with pytest.raises(ValueError):
            bg.build_adjacency(nm, bg.ScreeningConfig.for_graph(5, 6))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0), st.sampled_from([(50, 32), (1033, 32), (20, 8)]))
    def test_close_to_heaviside_away_from_threshold(self, lam, wb):
        _, q = bg.beta_threshold(*wb)
        if abs(lam - q) <= 0.06:
            return
        a = bg._smooth_screen(Tensor(np.array([[0.0, lam], [lam, 0.0]])), q, 100.0).data[0, 1]
        assert abs(a - (1.0 if lam < q else 0.0)) < 0.01


class TestLoss:
    def test_zero_sign(self):
        a = Tensor(np.random.default_rng(0).random((4, 4)))
        assert bg.bgc_loss(a, np.zeros((4, 4))).item() == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            bg.bgc_loss(Tensor(np.ones((3, 3))), np.zeros((4, 4)))

    def test_feature_tracking_its_label(self):
        # b=8 puts Q_eta near 0.42, so both sigmoids sit at their limits
        f = np.repeat([[1.0], [0.0]], 4, axis=0)
        g = 1.0 - f[:, 0]
        loss = bg.bgc_from_batch(Tensor(f), f[:, 0], g).item()
        assert loss == pytest.approx(-2 / 9, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_sign_flip_invariance(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(10, 4))
        y, g = rng.integers(0, 2, (10, 2)), rng.random(10)
        a = bg.bgc_from_batch(Tensor(f), y, g).item()
        b = bg.bgc_from_batch(Tensor(-f), y, g).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradients_only_reach_features(self):
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
        y = Tensor(rng.integers(0, 2, (8, 2)).astype(float), requires_grad=True)
        g = Tensor(rng.random(8), requires_grad=True)
        with Tape() as tape:
            out = bg.bgc_from_batch(f, y.data, g.data, m=5.0)
            tape.backward(out)
        assert f.grad is not None and np.any(f.grad)
        assert y.grad is None and g.grad is None

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        # soft m keeps the sigmoid away from saturation so the check is informative
        f = Tensor(rng.normal(size=(6, 3)) + 0.5)
        y, g = rng.integers(0, 2, (6, 2)).astype(float), rng.random(6)
        assert grad_check(lambda: bg.bgc_from_batch(f, y, g, m=3.0), [f]) < 1e-3

    def test_finite_differences_at_training_sharpness(self):
        rng = np.random.default_rng(7)
        f = Tensor(rng.normal(size=(8, 4)))
        y, g = rng.integers(0, 2, (8, 2)).astype(float), rng.random(8)
        assert grad_check(lambda: bg.bgc_from_batch(f, y, g, m=100.0), [f]) < 1e-3

    def test_dead_column_has_no_gradient(self):
        f = Tensor(np.column_stack([np.zeros(5), np.arange(1.0, 6.0)]), requires_grad=True)
        with Tape() as tape:
            tape.backward(bg.bgc_from_batch(f, np.array([0, 1, 0, 1, 1.0]), np.arange(5.0) + 1, m=5.0))
        assert not np.any(f.grad[:, 0])


class TestScreening:
    def test_identical_pair_is_an_edge(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 3))
        x[:, 2] = x[:, 0]
        assert (0, 2) in bg.screen_edges(x).edges

    def test_single_node(self):
        g = bg.screen_edges(np.ones((5, 1)))
        assert g.edges == []

    def test_small_batch(self):
        with pytest.raises(ValueError):
            bg.screen_edges(np.ones((2, 3)))

    def test_family_wise_rate_under_null(self):
        n_sim, alpha = 300, 0.05
        hits = sum(bool(bg.screen_edges(np.random.default_rng(10_000 + s).normal(size=(32, 50))).edges)
                   for s in range(n_sim))
        assert hits / n_sim <= alpha + 3 * np.sqrt(alpha / n_sim)

    def test_exports(self, tmp_path):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(8, 2))
        nm = bg.NodeMatrix(Tensor(np.hstack([f, f[:, :1]])), f[:, 1], rng.random(8))
        graph = bg.screen_edges(nm)
        graph.save(tmp_path / "g.json", tmp_path / "g.dot")
        doc = json.loads((tmp_path / "g.json").read_text())
        assert [n["role"] for n in doc["nodes"]] == ["feature"] * 3 + ["label", "identity"]
        pairs = {(e["source"], e["target"]) for e in doc["edges"]}
        assert ("f0", "f2") in pairs and ("f1", "l0") in pairs
        assert all(e["lambda"] < doc["q_eta"] for e in doc["edges"])
        dot = (tmp_path / "g.dot").read_text()
        assert dot.startswith("graph screened {") and '"f0" -- "f2"' in dot and 'role="identity"' in dot


def test_identity_table_is_seeded_and_order_free():
    a = bg.identity_table(["s2", "s1", "s2", "s3"], np.random.default_rng(5))
    b = bg.identity_table(["s3", "s1", "s2"], np.random.default_rng(5))
    assert a == b and set(a) == {"s1", "s2", "s3"}
    assert all(0.0 < v <= 1.0 for v in a.values())
