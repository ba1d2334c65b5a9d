import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from becomenet import network as net
from becomenet import trainer as tr
from becomenet.datapipe import generate_synthetic
from becomenet.losses import LabelWeights
from becomenet.trainer import AdamState, Batch, TrainConfig, adam_step, lr_at

CFG = TrainConfig()


class TestLearningRate:
    def test_examples(self):
        assert lr_at(0, CFG, 100) == pytest.approx(1e-5)
        assert lr_at(100, CFG, 100) == pytest.approx(1e-3)
        assert lr_at(50, CFG, 100) == pytest.approx(5.05e-4)
        assert lr_at(200, CFG, 100) == pytest.approx(1e-5)

    @given(st.integers(0, 10_000), st.integers(1, 500))
    def test_periodic_and_bounded(self, it, step):
        a = lr_at(it, CFG, step)
        assert 1e-5 - 1e-18 <= a <= 1e-3 + 1e-18
        assert lr_at(it + 2 * step, CFG, step) == pytest.approx(a, rel=1e-12, abs=1e-18)

    @given(st.integers(0, 1000), st.integers(2, 50))
    def test_piecewise_linear(self, it, step):
        # inside one half-cycle consecutive differences are constant
        half = it // step
        a, b, c = (lr_at(half * step + j, CFG, step) for j in (0, 1, 2))
        if step >= 2:
            assert (b - a) == pytest.approx(c - b, abs=1e-15) or step == 2

    def test_default_stepsize(self):
        assert CFG.stepsize(10) == 40
        assert TrainConfig(clr_stepsize=7).stepsize(10) == 7

    def test_negative_iteration(self):
        with pytest.raises(ValueError):
            lr_at(-1, CFG, 10)


class TestAdam:
    def test_zero_gradient(self):
        p = {"x": net.Tensor(np.array([1.5, -2.0]))}
        adam_step(p, {"x": np.zeros(2)}, AdamState(), 1e-3)
        np.testing.assert_array_equal(p["x"].data, [1.5, -2.0])

    def test_constant_gradient_step_tends_to_lr_sign(self):
        p = {"x": net.Tensor(np.array([0.0, 0.0]))}
        state = AdamState()
        prev = p["x"].data.copy()
        for _ in range(2000):
            adam_step(p, {"x": np.array([3.0, -0.01])}, state, 1e-3)
            step = p["x"].data - prev
            prev = p["x"].data.copy()
        np.testing.assert_allclose(step, [-1e-3, 1e-3], rtol=1e-4)

    def test_two_step_hand_oracle(self):
        lr, eps = 0.1, 1e-8
        p = {"x": net.Tensor(np.array([1.0]))}
        state = AdamState()
        adam_step(p, {"x": np.array([2.0])}, state, lr)
        # step 1: m=0.2, v=0.004, m_hat=2, v_hat=4
        x1 = 1.0 - lr * 2.0 / (2.0 + eps)
        assert p["x"].data[0] == pytest.approx(x1, abs=1e-15)
        adam_step(p, {"x": np.array([-1.0])}, state, lr)
        m, v = 0.9 * 0.2 - 0.1, 0.999 * 0.004 + 0.001
        x2 = x1 - lr * (m / 0.19) / (math.sqrt(v / (1 - 0.999**2)) + eps)
        assert p["x"].data[0] == pytest.approx(x2, abs=1e-14)

    def test_nonfinite(self):
        from becomenet.diffcomp import NonFiniteError

        with pytest.raises(NonFiniteError):
            adam_step({"x": net.Tensor(np.ones(1))}, {"x": np.array([np.nan])}, AdamState(), 1e-3)

    def test_shape_and_name_checks(self):
        p = {"x": net.Tensor(np.ones(2))}
        with pytest.raises(ValueError):
            adam_step(p, {"x": np.ones(3)}, AdamState(), 1e-3)
        with pytest.raises(KeyError):
            adam_step(p, {"y": np.ones(2)}, AdamState(), 1e-3)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lr_base=1e-2), dict(batch_size=2), dict(threshold=1.0),
                                    dict(patience=-1), dict(clr_stepsize=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_round_trip_and_unknown_keys(self):
        cfg = TrainConfig(seed=4, enable_bgc=False)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"sed": 1})


def tiny_net(ds):
    return net.NetworkConfig(image_h=ds.images.shape[1], image_w=ds.images.shape[2], l=68, c=ds.c, k=ds.k,
                             conv_channels=(2, 2, 2), fc_units=8, lmk_channels=2, dropout_p=0.1)


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(11, n_subjects=6, samples_per_subject=8, c=4, k=3, image_size=16)


def batch_of(ds, idx):
    return Batch.from_dataset(ds, idx)


class TestTrainStep:
    def run(self, ds, cfg, seed=0, steps=2):
        params = net.build(tiny_net(ds), seed)
        state = AdamState.for_params(params)
        identity = {s: (i + 1) / 10 for i, s in enumerate(ds.subjects)}
        weights = LabelWeights.uniform(ds.c, ds.k)
        rng = np.random.default_rng(seed)
        out = []
        for s in range(steps):
            au = batch_of(ds, np.arange(8) * 6 + s)
            ex = batch_of(ds, np.arange(8) * 5 + s)
            out.append(tr.train_step(params, au, ex, weights, cfg, state, identity, 1e-3, rng))
        return params, out

    def test_breakdown_adds_up(self, tiny):
        _, out = self.run(tiny, TrainConfig(batch_size=8))
        for br in out:
            assert np.isfinite(br.total)
            assert br.wmce + br.wcce + br.bgc_au + br.bgc_expr == pytest.approx(br.total, abs=1e-12)
            assert br.bgc_au != 0.0 and br.wcce != 0.0

    def test_deterministic(self, tiny):
        a, la = self.run(tiny, TrainConfig(batch_size=8), seed=3)
        b, lb = self.run(tiny, TrainConfig(batch_size=8), seed=3)
        assert [x.to_dict() for x in la] == [x.to_dict() for x in lb]
        for n in a.names():
            np.testing.assert_array_equal(a[n].data, b[n].data)

    def test_ablation_is_plain_wmce(self, tiny):
        _, out = self.run(tiny, TrainConfig(batch_size=8, enable_bgc=False, enable_multitask=False))
        for br in out:
            assert br.bgc_au == br.bgc_expr == br.wcce == 0.0
            assert br.total == br.wmce

    def test_single_subject_batch_skips_correlation_loss(self, tiny, caplog):
        params = net.build(tiny_net(tiny), 0)
        one = batch_of(tiny, np.arange(8))
        assert len(set(one.subject_ids)) == 1
        with caplog.at_level(logging.WARNING, logger="becomenet.trainer"):
            br = tr.train_step(params, one, one, LabelWeights.uniform(4, 3), TrainConfig(batch_size=8),
                               AdamState.for_params(params), {s: 0.5 for s in tiny.subjects}, 1e-3,
                               np.random.default_rng(0))
        assert br.bgc_au == 0.0 and br.bgc_expr == 0.0
        assert "single subject" in caplog.text


class TestMetrics:
    def test_perfect(self):
        y = np.array([[1, 0], [0, 1], [1, 1]])
        r = tr.metrics_from_predictions(y.astype(float), y, ["a", "b"])
        assert r.f1 == [1.0, 1.0] and r.mean_f1 == 1.0

    def test_tp2_fp1_fn1(self):
        probs = np.array([0.9, 0.8, 0.7, 0.1, 0.2])[:, None]
        labels = np.array([1, 1, 0, 1, 0])[:, None]
        r = tr.metrics_from_predictions(probs, labels, ["a"])
        assert r.precision[0] == pytest.approx(2 / 3)
        assert r.recall[0] == pytest.approx(2 / 3)
        assert r.f1[0] == pytest.approx(2 / 3)

    def test_threshold_inclusive(self):
        r = tr.metrics_from_predictions(np.array([[0.5]]), np.array([[1]]), ["a"])
        assert r.f1 == [1.0]

    def test_absent_and_never_predicted(self):
        r = tr.metrics_from_predictions(np.array([[0.9, 0.1], [0.2, 0.3]]), np.array([[1, 0], [0, 0]]), ["a", "b"])
        assert r.f1[1] == 0.0 and r.degenerate == [False, True]
        assert r.mean_f1 == 0.5

    def test_serializations(self):
        r = tr.metrics_from_predictions(np.array([[0.9], [0.1]]), np.array([[1], [1]]), ["a"],
                                        expr_pred=np.array([0, 1]), expr_true=np.array([0, 0]))
        assert r.expr_accuracy == 0.5
        assert '"mean_f1"' in r.to_json()
        lines = r.to_csv().splitlines()
        assert lines[0] == "au,precision,recall,f1,support,degenerate"
        assert lines[-1].startswith("mean,")


class TestFit:
    def test_early_stopping_semantics(self, tiny):
        for patience in (0, 2):
            cfg = TrainConfig(batch_size=8, max_epochs=6, patience=patience, val_fraction=0.2)
            res = tr.fit(net.build(tiny_net(tiny), 1), tiny, tiny, cfg)
            vals = [h["val_mean_f1"] for h in res.history]
            assert 1 <= len(vals) <= 6
            best, wait, stop = -1.0, 0, None
            for e, v in enumerate(vals, 1):
                if v > best:
                    best, wait = v, 0
                else:
                    wait += 1
                if wait and wait >= patience:
                    stop = e
                    break
            assert len(vals) == (stop or 6)
            assert res.best_val_f1 == max(vals)
            assert vals[res.best_epoch - 1] == max(vals)

    def test_first_epoch_loss_finite(self, tiny):
        res = tr.fit(net.build(tiny_net(tiny), 2), tiny, tiny, TrainConfig(batch_size=8, max_epochs=1))
        assert all(np.isfinite(res.history[0][k]) for k in ("wmce", "wcce", "bgc_au", "bgc_expr", "total"))

    def test_validation_split_is_by_subject(self, tiny):
        train, val = tr.split_validation(tiny, 0.1, np.random.default_rng(0))
        assert len(val) == 1 and not set(train) & set(val) and set(train) | set(val) == set(tiny.subjects)


class TestCrossval:
    def test_k1_rejected(self, tiny):
        with pytest.raises(ValueError):
            tr.crossval(tiny, tiny, tiny_net(tiny), TrainConfig(batch_size=8, max_epochs=1), k=1)

    def test_pooled_scores_recompute(self, tiny):
        cfg = TrainConfig(batch_size=8, max_epochs=2)
        res = tr.crossval(tiny, tiny, tiny_net(tiny), cfg, k=3)
        again = tr.metrics_from_predictions(res.probs, res.labels, tiny.au_names)
        assert again.f1 == res.pooled.f1 and again.mean_f1 == res.pooled.mean_f1
        assert len(res.pooled.folds) == 3 and len(res.labels) == len(tiny)
        for i in range(3):
            _, test = res.split.train_test(i)
            assert set(np.asarray(res.subject_ids)[res.fold_index == i]) == set(test)
        assert all(0.0 <= c <= 1.0 for c in res.identity_corr)
        lines = res.predictions_csv().splitlines()
        assert len(lines) == len(tiny) + 1

    def test_threaded_matches_serial(self, tiny):
        cfg = TrainConfig(batch_size=8, max_epochs=1)
        a = tr.crossval(tiny, tiny, tiny_net(tiny), cfg, k=2)
        b = tr.crossval(tiny, tiny, tiny_net(tiny), cfg, k=2, workers=2)
        assert a.pooled.to_json() == b.pooled.to_json()
        np.testing.assert_array_equal(a.probs, b.probs)
