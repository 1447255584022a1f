import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from mnemonic_unlearn import unlearner
from mnemonic_unlearn.datasets import ClassPartition, LabeledDataset, generate_codebook, make_synthetic
from mnemonic_unlearn.nn import MlpModel, Segment, SgdConfig, ShapeError, loss_and_grad, param_digest
from mnemonic_unlearn.trainer import TrainConfig, train_with_codes
from mnemonic_unlearn.unlearner import (FimDiagonal, PerturbationPlan, choose_sign, compute_alpha,
                                        compute_eta, estimate_fim_diagonal, fim_error,
                                        fim_from_codebook, fim_from_data, forget, forget_with_data,
                                        sample_per_class)

SEG2 = (Segment("a", 0, 2, (2,)),)


def fim(values, segments=SEG2, classes=(0,)):
    return FimDiagonal(np.asarray(values, dtype=float), segments, frozenset(classes), "data")


@pytest.fixture(scope="module")
def trained():
    train, test = make_synthetic(num_classes=5, per_class=80, dim=10, cluster_spread=0.8, seed=5)
    cb = generate_codebook(5, 10, seed=2)
    cfg = TrainConfig(t_mix=0.1, epochs=15, batch_size=32, sgd=SgdConfig(0.05, 5e-4), seed=1,
                      hidden=(24, 16))
    model, _ = train_with_codes(train, cb, cfg)
    return model, cb, train, test


class TestFimEstimation:
    def test_logistic_brute_force(self):
        # softmax over 2 classes with class-0 row frozen at zero is logistic regression
        w, b = 0.7, -0.3
        model = MlpModel.zeros((1, 2))
        model.params.view("fc0.weight")[0, 1] = w
        model.params.view("fc0.bias")[1] = b
        xs, ys = [0.5, -1.2, 2.0], [1, 0, 1]
        per_class = {0: [], 1: []}
        for x, y in zip(xs, ys):
            p = 1.0 / (1.0 + math.exp(-(w * x + b)))
            r = p - y
            # layout: W[0,0], W[0,1], b[0], b[1]
            per_class[y].append(np.array([(-r * x) ** 2, (r * x) ** 2, r ** 2, r ** 2]))
        expected = (np.mean(per_class[0], axis=0) + np.mean(per_class[1], axis=0)) / 2
        got = estimate_fim_diagonal(model, np.array(xs)[:, None], ys, {0, 1})
        assert_allclose(got.values, expected, rtol=1e-10, atol=1e-15)

    def test_small_model_exhaustive(self, rng):
        model = MlpModel.initialize((3, 4, 3), seed=8)  # 12 + 4 + 12 + 3 = 31 params
        X, y = rng.normal(size=(20, 3)), rng.integers(0, 3, 20)
        by_class = []
        for c in range(3):
            grads = [loss_and_grad(model, X[i:i + 1], y[i:i + 1])[1].values ** 2
                     for i in np.flatnonzero(y == c)]
            by_class.append(np.mean(grads, axis=0))
        got = estimate_fim_diagonal(model, X, y, {0, 1, 2})
        assert_allclose(got.values, np.mean(by_class, axis=0), rtol=1e-10, atol=1e-16)

    def test_class_balanced(self, rng):
        model = MlpModel.initialize((3, 3), seed=1)
        X, y = rng.normal(size=(11, 3)), np.array([0] * 10 + [1])
        f0 = estimate_fim_diagonal(model, X[:10], y[:10], {0}).values
        f1 = estimate_fim_diagonal(model, X[10:], y[10:], {1}).values
        both = estimate_fim_diagonal(model, X, y, {0, 1}).values
        assert_allclose(both, (f0 + f1) / 2, rtol=1e-12)

    def test_identical_samples(self, rng):
        model = MlpModel.initialize((3, 4, 2), seed=2)
        x = rng.normal(size=(1, 3))
        single = loss_and_grad(model, x, [1])[1].values ** 2
        got = estimate_fim_diagonal(model, np.repeat(x, 4, axis=0), [1] * 4, {1}).values
        assert_allclose(got, single, rtol=1e-14, atol=0)

    def test_nonnegative(self, trained):
        model, _, train, _ = trained
        assert estimate_fim_diagonal(model, train.inputs, train.labels, range(5)).values.min() >= 0

    def test_empty_class_named(self, small_model, rng):
        with pytest.raises(ValueError, match="class 2 has no samples"):
            estimate_fim_diagonal(small_model, rng.normal(size=(2, 5)), [0, 1], {0, 1, 2})

    def test_stray_label_rejected(self, small_model, rng):
        with pytest.raises(ValueError, match="outside class_set"):
            estimate_fim_diagonal(small_model, rng.normal(size=(2, 5)), [0, 1], {0})

    def test_codebook_backprop_count(self, rng):
        model = MlpModel.initialize((6, 5, 10), seed=0)
        cb = generate_codebook(10, 6, seed=4)
        f = fim_from_codebook(model, cb, range(1, 10))
        assert f.backprop_count == 9
        assert f.source == "mnemonic"
        again = fim_from_codebook(model, generate_codebook(10, 6, seed=4), range(1, 10))
        assert_array_equal(f.values, again.values)

    def test_oracle_tag(self, trained):
        model, _, train, _ = trained
        assert fim_from_data(model, train, {0}).source == "oracle"
        assert fim_from_data(model, train, {0}, samples_per_class=5).source == "data"

    def test_full_count_equals_oracle(self, trained):
        model, _, train, _ = trained
        n = train.class_indices(0).size
        assert fim_error(fim_from_data(model, train, {0}, n, seed=3),
                         fim_from_data(model, train, {0})) == 0.0

    def test_sampling_caps_and_seeds(self, trained):
        _, _, train, _ = trained
        X, y, capped = sample_per_class(train, {0, 1}, 1000, seed=0)
        assert capped == {0: 80, 1: 80}
        a = sample_per_class(train, {0, 1}, 5, seed=1)
        b = sample_per_class(train, {0, 1}, 5, seed=1)
        assert_array_equal(a[0], b[0])
        with pytest.raises(ValueError):
            sample_per_class(train, {0}, 0)


class TestEtaAlpha:
    def test_eta_arithmetic(self):
        eta = compute_eta(fim([4, 0]), fim([2, 1]))
        assert_allclose(eta, [2, 0], rtol=1e-11)

    def test_eta_zero_forget(self):
        assert_array_equal(compute_eta(fim([0, 0]), fim([3, 1])), [0, 0])

    def test_eta_zero_remain_finite(self):
        eta = compute_eta(fim([0.5, 1]), fim([0, 1]))
        assert eta[0] == pytest.approx(0.5e12)
        assert np.all(np.isfinite(eta))

    def test_eta_layout_mismatch(self):
        other = (Segment("b", 0, 2, (2,)),)
        with pytest.raises(ShapeError):
            compute_eta(fim([1, 1]), fim([1, 1], segments=other))

    def test_eta_needs_positive_epsilon(self):
        with pytest.raises(ValueError):
            compute_eta(fim([1, 1]), fim([1, 1]), epsilon=0.0)

    @pytest.mark.parametrize("peak,l1,l2,expected", [
        (5.0, 1e-3, 10.0, 1e-3),
        (100.0, 1.0, 10.0, 0.1),
        (0.0, 0.25, 10.0, 0.25),
    ])
    def test_alpha_examples(self, peak, l1, l2, expected):
        alpha = compute_alpha(np.array([0.0, peak]), SEG2, l1, l2)
        assert alpha["a"] == pytest.approx(expected, rel=1e-15)

    def test_alpha_per_tensor(self):
        segs = (Segment("w", 0, 2, (2,)), Segment("b", 2, 1, (1,)))
        alpha = compute_alpha(np.array([1.0, 50.0, 2.0]), segs, 1.0, 10.0)
        assert alpha == {"w": 0.2, "b": 1.0}

    def test_alpha_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            compute_alpha(np.ones(2), SEG2, 0.0, 1.0)

    @given(ff=arrays(np.float64, 6, elements=st.floats(0, 1e3)),
           fr=arrays(np.float64, 6, elements=st.floats(0, 1e3)),
           l1=st.floats(1e-6, 1.0), l2=st.floats(1e-1, 1e5))
    def test_step_bounded_by_lambdas(self, ff, fr, l1, l2):
        segs = (Segment("w", 0, 4, (2, 2)), Segment("b", 4, 2, (2,)))
        plan = PerturbationPlan.build(fim(ff, segs), fim(fr, segs), l1, l2)
        assert np.all(plan.eta >= 0) and np.all(np.isfinite(plan.eta))
        delta = plan.delta()
        for seg in segs:
            sl = slice(seg.offset, seg.offset + seg.length)
            peak = plan.eta[sl].max()
            assert delta[sl].max() <= l2 * (1 + 1e-12)
            assert delta[sl].max() <= l1 * peak * (1 + 1e-12)


class TestPlan:
    def test_apply_signs(self, small_model):
        segs = small_model.params.segments
        n = len(small_model.params)
        plan = PerturbationPlan.build(
            FimDiagonal(np.full(n, 2.0), segs, frozenset({0}), "data"),
            FimDiagonal(np.ones(n), segs, frozenset({1, 2}), "data"), 0.5, 1e3)
        w = small_model.params.values
        assert_allclose(plan.apply(small_model, 1).params.values, w + 1.0, rtol=1e-11)
        assert_allclose(plan.apply(small_model, -1).params.values, w - 1.0, rtol=1e-11)
        with pytest.raises(ValueError):
            plan.apply(small_model, 0)

    def test_midpoint_exact_for_representable_steps(self):
        # power-of-two parameters and steps add without rounding
        model = MlpModel.zeros((1, 2))
        model = model.with_params(np.array([1.0, 0.5, 0.25, 2.0]))
        segs = model.params.segments
        plan = PerturbationPlan(np.array([0.5, 0.25, 0.125, 1.0]), {s.name: 1.0 for s in segs},
                                segs, 1.0, 1.0)
        w1, w2 = plan.apply(model, 1).params.values, plan.apply(model, -1).params.values
        assert_array_equal((w1 + w2) / 2, model.params.values)

    def test_midpoint_within_one_rounding(self, trained):
        model, cb, _, _ = trained
        p = ClassPartition.from_forget(0, 5)
        plan = PerturbationPlan.build(fim_from_codebook(model, cb, p.forget),
                                      fim_from_codebook(model, cb, p.remain), 1e-3, 10.0)
        w = model.params.values
        w1, w2 = plan.apply(model, 1).params.values, plan.apply(model, -1).params.values
        bound = np.spacing(np.maximum(np.abs(w1), np.abs(w2)))
        assert np.all(np.abs((w1 + w2) / 2 - w) <= bound)


class TestSignSelection:
    def test_choose_sign(self):
        assert choose_sign(150, 90) == 1
        assert choose_sign(90, 150) == -1
        assert choose_sign(120, 120) == 1

    @pytest.mark.parametrize("scores,sign", [((150.0, 90.0), 1), ((90.0, 150.0), -1)])
    def test_branch_returns_higher_scoring_candidate(self, trained, monkeypatch, scores, sign):
        model, cb, _, _ = trained
        it = iter(scores)
        monkeypatch.setattr(unlearner, "score_candidate", lambda *a: next(it))
        p = ClassPartition.from_forget(0, 5)
        out, report = forget(model, cb, p)
        plan = PerturbationPlan.build(fim_from_codebook(model, cb, p.forget),
                                      fim_from_codebook(model, cb, p.remain), 1e-3, 10.0)
        assert report.chosen_sign == sign
        assert_array_equal(out.params.values, plan.apply(model, sign).params.values)


class TestForget:
    def test_tiny_lambdas_leave_model(self, trained):
        model, cb, _, _ = trained
        out, _ = forget(model, cb, ClassPartition.from_forget(0, 5), 1e-30, 1e-30)
        assert np.max(np.abs(out.params.values - model.params.values)) <= 1e-20

    def test_input_untouched(self, trained):
        model, cb, _, _ = trained
        digest = param_digest(model)
        forget(model, cb, ClassPartition.from_forget(2, 5))
        assert param_digest(model) == digest

    def test_backprop_count_independent_of_data(self, trained):
        model, cb, _, _ = trained
        _, report = forget(model, cb, ClassPartition.from_forget(1, 5))
        assert report.backprop_count == 5
        assert report.forward_passes == 2

    def test_report_json(self, trained, tmp_path):
        model, cb, _, _ = trained
        _, report = forget(model, cb, ClassPartition.from_forget(1, 5))
        report.write_json(tmp_path / "r.json")
        d = json.loads((tmp_path / "r.json").read_text())
        assert d["chosen_sign"] in "+-"
        assert set(d["alpha_per_layer"]) == set(model.params.layer_names)
        assert d["lambda1"] == 1e-3 and d["lambda2"] == 10.0

    def test_nan_model_rejected(self, trained):
        model, cb, _, _ = trained
        bad = model.params.values.copy()
        bad[0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            forget(model.with_params(bad), cb, ClassPartition.from_forget(0, 5))

    def test_codebook_must_cover(self, trained):
        model, _, _, _ = trained
        with pytest.raises(ValueError):
            forget(model, generate_codebook(3, 10), ClassPartition.from_forget(0, 5))

    def test_codebook_dim_mismatch(self, trained):
        model, _, _, _ = trained
        with pytest.raises(ShapeError):
            forget(model, generate_codebook(5, 9), ClassPartition.from_forget(0, 5))

    def test_partition_must_match_model(self, trained):
        model, cb, _, _ = trained
        with pytest.raises(ValueError):
            forget(model, cb, ClassPartition.from_forget(0, 4))


class TestForgetWithData:
    def test_deterministic(self, trained):
        model, _, train, _ = trained
        p = ClassPartition.from_forget(0, 5)
        a, _ = forget_with_data(model, train, p, samples_per_class=7, seed=3)
        b, _ = forget_with_data(model, train, p, samples_per_class=7, seed=3)
        assert_array_equal(a.params.values, b.params.values)

    def test_capped_classes_recorded(self, trained):
        model, _, train, _ = trained
        _, report = forget_with_data(model, train, ClassPartition.from_forget(0, 5),
                                     samples_per_class=500)
        assert report.notes["capped_classes"] == {c: 80 for c in range(5)}
        assert report.backprop_count == 400

    def test_all_rows(self, trained):
        model, _, train, _ = trained
        _, report = forget_with_data(model, train, ClassPartition.from_forget(0, 5))
        assert report.notes["samples_per_class"] == "all"
        assert report.backprop_count == len(train)


class TestFimError:
    def test_arithmetic(self):
        assert fim_error(fim([1, 0]), fim([0, 0])) == 0.5

    def test_identity_and_symmetry(self):
        a, b = fim([3, 1]), fim([0.5, 2])
        assert fim_error(a, a) == 0.0
        assert fim_error(a, b) == fim_error(b, a)

    def test_layout_mismatch(self):
        with pytest.raises(ShapeError):
            fim_error(fim([1, 0]), fim([1, 0], segments=(Segment("z", 0, 2, (2,)),)))

    def test_rejects_negative_values(self):
        with pytest.raises(ValueError):
            fim([-1, 0])
