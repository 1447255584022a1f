import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from mnemonic_unlearn.nn import (MlpModel, ParameterVector, Segment, SgdConfig, ShapeError,
                                 accuracy, forward, load_checkpoint, loss_and_grad,
                                 param_digest, per_sample_losses, predict, save_checkpoint,
                                 sgd_step, softmax, squared_grad_sum)


def hand_forward(model, X):
    """Straight-line loops, no numpy matmul."""
    out = []
    for x in X:
        h = list(x)
        layers = model.weights()
        for li, (W, b) in enumerate(layers):
            nxt = []
            for j in range(W.shape[1]):
                s = b[j]
                for i in range(W.shape[0]):
                    s += h[i] * W[i, j]
                nxt.append(max(s, 0.0) if li < len(layers) - 1 else s)
            h = nxt
        out.append(h)
    return np.array(out)


def numeric_grad(model, X, y, step=1e-5):
    base = model.params.values
    g = np.empty_like(base)
    for k in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[k] += step
        minus[k] -= step
        lp = per_sample_losses(model.with_params(plus), X, y).mean()
        lm = per_sample_losses(model.with_params(minus), X, y).mean()
        g[k] = (lp - lm) / (2 * step)
    return g


def assert_grad_matches(analytic, numeric, rtol=1e-4, floor=1e-7):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = np.max(np.abs(analytic - numeric) / scale)
    assert worst <= rtol, f"worst relative error {worst:.3e}"


class TestParameterVector:
    def test_from_arrays_layout(self):
        pv = ParameterVector.from_arrays([("a", np.ones((2, 3))), ("b", np.zeros(3))])
        assert [s.offset for s in pv.segments] == [0, 6]
        assert pv.view("a").shape == (2, 3)
        assert len(pv) == 9

    def test_view_is_not_a_copy(self):
        pv = ParameterVector.from_arrays([("a", np.ones(4))])
        pv.view("a")[0] = 5.0
        assert pv.values[0] == 5.0

    def test_rejects_gap(self):
        with pytest.raises(ShapeError):
            ParameterVector(np.zeros(4), (Segment("a", 0, 2, (2,)), Segment("b", 3, 1, (1,))))

    def test_rejects_shape_product_mismatch(self):
        with pytest.raises(ShapeError):
            ParameterVector(np.zeros(4), (Segment("a", 0, 4, (3,)),))

    def test_rejects_duplicate_names(self):
        with pytest.raises(ValueError, match="duplicate"):
            ParameterVector(np.zeros(2), (Segment("a", 0, 1, (1,)), Segment("a", 1, 1, (1,))))

    def test_rejects_uncovered_tail(self):
        with pytest.raises(ShapeError):
            ParameterVector(np.zeros(3), (Segment("a", 0, 2, (2,)),))


class TestForward:
    def test_zero_model_gives_zero_logits(self, rng):
        model = MlpModel.zeros((4, 5, 3))
        assert_array_equal(forward(model, rng.normal(size=(6, 4))), np.zeros((6, 3)))

    def test_identity_layer(self, rng):
        model = MlpModel.zeros((3, 3))
        model.params.view("fc0.weight")[:] = np.eye(3)
        x = rng.normal(size=(4, 3))
        assert_array_equal(forward(model, x), x)

    def test_matches_hand_rolled_loops(self, rng):
        model = MlpModel.initialize((2, 4, 3), seed=11)
        X = rng.normal(size=(7, 2))
        assert_allclose(forward(model, X), hand_forward(model, X), rtol=1e-12, atol=0)

    def test_deep_matches_hand_rolled_loops(self, small_model, rng):
        X = rng.normal(size=(5, 5))
        assert_allclose(forward(small_model, X), hand_forward(small_model, X), rtol=1e-12,
                        atol=1e-15)

    def test_wrong_width_rejected(self, small_model):
        with pytest.raises(ShapeError):
            forward(small_model, np.zeros((2, 4)))

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.normal(scale=50, size=(20, 7)))
        assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_softmax_large_logits_stable(self):
        p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
        assert_allclose(p, [[0.5, 0.5, 0.0]])


class TestLoss:
    def test_uniform_logits_give_log_k(self, rng):
        model = MlpModel.zeros((4, 6, 5))
        loss, _ = loss_and_grad(model, rng.normal(size=(3, 4)), [0, 3, 4])
        assert loss == pytest.approx(math.log(5), rel=1e-15)

    def test_duplicated_batch_same_loss_and_grad(self, small_model, rng):
        X, y = rng.normal(size=(6, 5)), rng.integers(0, 3, 6)
        l1, g1 = loss_and_grad(small_model, X, y)
        l2, g2 = loss_and_grad(small_model, np.vstack([X, X]), np.concatenate([y, y]))
        assert l1 == pytest.approx(l2, rel=1e-14)
        assert_allclose(g1.values, g2.values, rtol=1e-12, atol=1e-17)

    def test_repeated_calls_identical(self, small_model, rng):
        X, y = rng.normal(size=(6, 5)), rng.integers(0, 3, 6)
        a = loss_and_grad(small_model, X, y)
        b = loss_and_grad(small_model, X, y)
        assert a[0] == b[0]
        assert_array_equal(a[1].values, b[1].values)

    def test_grad_layout_matches_params(self, small_model, rng):
        _, g = loss_and_grad(small_model, rng.normal(size=(2, 5)), [0, 2])
        assert g.same_layout(small_model.params)

    def test_empty_batch_rejected(self, small_model):
        with pytest.raises(ValueError, match="empty"):
            loss_and_grad(small_model, np.zeros((0, 5)), np.zeros(0, dtype=int))

    def test_nonfinite_input_rejected(self, small_model):
        X = np.zeros((2, 5))
        X[1, 3] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            loss_and_grad(small_model, X, [0, 1])

    def test_label_out_of_range_rejected(self, small_model):
        with pytest.raises(ValueError):
            loss_and_grad(small_model, np.zeros((1, 5)), [3])

    def test_finite_differences_fixed_case(self, small_model, rng):
        X, y = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)
        _, g = loss_and_grad(small_model, X, y)
        assert_grad_matches(g.values, numeric_grad(small_model, X, y))

    @given(seed=st.integers(0, 2**31 - 1),
           dims=st.lists(st.integers(1, 6), min_size=1, max_size=3),
           n=st.integers(1, 6))
    def test_finite_differences_property(self, seed, dims, n):
        layer_dims = (dims[0] + 1, *dims[1:], 3) if len(dims) > 1 else (dims[0] + 1, 3)
        model = MlpModel.initialize(layer_dims, seed=seed)
        assert len(model.params) <= 200
        r = np.random.default_rng(seed)
        X, y = r.normal(size=(n, layer_dims[0])), r.integers(0, 3, n)
        _, g = loss_and_grad(model, X, y)
        assert_grad_matches(g.values, numeric_grad(model, X, y))

    def test_squared_grad_sum_matches_per_sample_loop(self, small_model, rng):
        X, y = rng.normal(size=(9, 5)), rng.integers(0, 3, 9)
        brute = sum(loss_and_grad(small_model, X[i:i + 1], y[i:i + 1])[1].values ** 2
                    for i in range(9))
        assert_allclose(squared_grad_sum(small_model, X, y), brute, rtol=1e-10, atol=1e-18)


class TestSgd:
    def _scalar_model(self, w):
        model = MlpModel.zeros((1, 1))
        model.params.view("fc0.weight")[:] = w
        return model

    def test_zero_grad_no_decay_is_fixed_point(self, small_model):
        cfg = SgdConfig(0.1, 0.0)
        out = sgd_step(small_model, small_model.params.with_values(np.zeros(79)), cfg)
        assert_array_equal(out.params.values, small_model.params.values)

    def test_scalar_arithmetic(self):
        model = self._scalar_model(1.0)
        grad = model.params.with_values(np.array([2.0, 0.0]))
        out = sgd_step(model, grad, SgdConfig(0.1, 0.0))
        assert out.params.view("fc0.weight")[0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_weight_decay_arithmetic(self):
        model = self._scalar_model(1.0)
        grad = model.params.with_values(np.array([0.5, 0.0]))
        out = sgd_step(model, grad, SgdConfig(0.1, 0.01))
        assert out.params.values[0] == pytest.approx(1.0 - 0.1 * (0.5 + 0.01), abs=1e-15)

    def test_cosine_endpoints(self):
        cfg = SgdConfig(0.1, 0.0, "cosine", total_steps=100)
        assert cfg.rate(0) == pytest.approx(0.1)
        assert cfg.rate(50) == pytest.approx(0.05)
        assert abs(cfg.rate(100)) <= 1e-9
        assert cfg.rate(250) >= 0.0

    def test_cosine_needs_total_steps(self):
        with pytest.raises(ValueError):
            SgdConfig(0.1, 0.0, "cosine")

    def test_nonfinite_grad_rejected_model_unchanged(self, small_model):
        before = small_model.params.values.copy()
        bad = np.zeros(79)
        bad[3] = np.inf
        with pytest.raises(ValueError):
            sgd_step(small_model, small_model.params.with_values(bad), SgdConfig())
        assert_array_equal(small_model.params.values, before)

    def test_layout_mismatch_rejected(self, small_model):
        other = MlpModel.initialize((5, 3), seed=0)
        with pytest.raises(ShapeError):
            sgd_step(small_model, other.params, SgdConfig())

    def test_loss_decreases_on_separable_toy(self, rng):
        X = np.vstack([rng.normal(-2, 0.5, (50, 2)), rng.normal(2, 0.5, (50, 2))])
        y = np.repeat([0, 1], 50)
        model = MlpModel.initialize((2, 4, 2), seed=3)
        first, _ = loss_and_grad(model, X, y)
        cfg = SgdConfig(0.05, 0.0)
        for step in range(500):
            _, g = loss_and_grad(model, X, y)
            model = sgd_step(model, g, cfg, step)
        last, _ = loss_and_grad(model, X, y)
        assert last < first

    def test_same_seed_bit_identical_after_steps(self, rng):
        X, y = rng.normal(size=(10, 3)), rng.integers(0, 2, 10)

        def run():
            model = MlpModel.initialize((3, 4, 2), seed=99)
            for step in range(20):
                model = sgd_step(model, loss_and_grad(model, X, y)[1], SgdConfig(0.1), step)
            return model

        assert param_digest(run()) == param_digest(run())


class TestAccuracy:
    def test_all_correct_and_all_wrong(self, small_model, rng):
        X = rng.normal(size=(10, 5))
        pred = predict(small_model, X)
        assert accuracy(small_model, X, pred) == 100.0
        assert accuracy(small_model, X, (pred + 1) % 3) == 0.0

    def test_two_of_three(self):
        model = MlpModel.zeros((3, 3))
        model.params.view("fc0.weight")[:] = np.eye(3)
        X = np.eye(3)
        assert accuracy(model, X, [0, 1, 0]) == pytest.approx(66.67, abs=0.01)

    def test_ties_go_to_lowest_index(self):
        model = MlpModel.zeros((2, 4))
        assert_array_equal(predict(model, np.ones((3, 2))), [0, 0, 0])

    def test_empty_batch_rejected(self, small_model):
        with pytest.raises(ValueError):
            accuracy(small_model, np.zeros((0, 5)), np.zeros(0))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, small_model, tmp_path):
        small_model.meta["note"] = "x"
        path = save_checkpoint(small_model, tmp_path / "m.npz")
        back = load_checkpoint(path)
        assert back.layer_dims == small_model.layer_dims
        assert back.seed == 7
        assert back.meta == {"note": "x"}
        assert_array_equal(back.params.values, small_model.params.values)
        assert param_digest(back) == param_digest(small_model)

    def test_foreign_npz_rejected(self, tmp_path):
        import json
        path = tmp_path / "bad.npz"
        np.savez(path, header=np.array(json.dumps({"format": "other"})), values=np.zeros(3))
        with pytest.raises(ValueError, match="not a model checkpoint"):
            load_checkpoint(path)
