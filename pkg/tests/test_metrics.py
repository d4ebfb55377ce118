import itertools

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from cladapt import metrics, model
from cladapt.metrics import EvalRow, UndefinedMetricError


def pair_auroc(scores, labels):
    """Brute force: share of (positive, negative) pairs ordered correctly, ties one half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def f1_oracle(pred, true):
    """Per-class counts by direct loops, macro mean over classes in ``true``."""
    out = []
    for c in sorted(set(true)):
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, true) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, true) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn)
        out.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(out) / len(out)


def tie_patterns(n):
    """Every weak ordering of n sorted positions: one score per block of a composition of n."""
    for cuts in itertools.product((0, 1), repeat=n - 1):
        scores = [0]
        for c in cuts:
            scores.append(scores[-1] + c)
        yield scores


class TestAUROC:
    def test_worked_example(self):
        assert metrics.auroc_ovr_macro([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_separated(self):
        assert metrics.auroc_ovr_macro([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_constant_scores(self):
        assert metrics.auroc_ovr_macro(np.full((6, 3), 1 / 3), [0, 1, 2, 0, 1, 2]) == 0.5

    def test_exhaustive_up_to_eight(self):
        # sorted scores cover every weak ordering; labels range over every assignment
        count = 0
        for n in range(2, 9):
            for scores in tie_patterns(n):
                for labels in itertools.product((0, 1), repeat=n):
                    if 0 < sum(labels) < n:
                        assert metrics.auroc_ovr_macro(scores, labels) == pytest.approx(
                            pair_auroc(scores, labels), abs=1e-12)
                        count += 1
        assert count > 30000

    def test_unsorted_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n = int(rng.integers(2, 9))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                continue
            scores = rng.integers(0, 4, n).astype(float)
            assert metrics.auroc_ovr_macro(scores, labels) == pytest.approx(pair_auroc(scores, labels))

    def test_undefined(self):
        with pytest.raises(UndefinedMetricError):
            metrics.auroc_ovr_macro([0.1, 0.5], [1, 1])
        with pytest.raises(UndefinedMetricError):
            metrics.auroc_ovr_macro(np.ones((3, 3)), [2, 2, 2])

    def test_absent_class_excluded(self):
        s = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
        # class 2 has no positives, so only classes 0 and 1 count
        y = [0, 1, 0]
        expected = (pair_auroc(s[:, 0], [1, 0, 1]) + pair_auroc(s[:, 1], [0, 1, 0])) / 2
        assert metrics.auroc_ovr_macro(s, y) == pytest.approx(expected)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 2)), min_size=4, max_size=30))
    def test_monotone_transform_invariance(self, rows):
        # grid scores keep the cube strictly increasing in floating point
        y = np.array([r[1] for r in rows])
        if len(set(y.tolist())) < 2:
            return
        rng = np.random.default_rng(len(rows))
        s = np.array([[r[0] / 1000, *rng.integers(0, 1001, 2) / 1000] for r in rows])
        cubed = s ** 3 / 2 + 0.25
        assert metrics.auroc_ovr_macro(cubed, y) == pytest.approx(metrics.auroc_ovr_macro(s, y), abs=1e-12)


class TestF1:
    def test_perfect(self):
        assert metrics.f1_macro([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0

    def test_hand_counts(self):
        assert metrics.f1_macro([0, 0, 1], [0, 1, 1]) == pytest.approx(2 / 3)

    def test_all_one_class(self):
        assert metrics.f1_macro([0] * 6, [0, 1, 2] * 2, 3) == pytest.approx(1 / 6)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            k = int(rng.integers(2, 5))
            pred = rng.integers(0, k, n).tolist()
            true = rng.integers(0, k, n).tolist()
            assert metrics.f1_macro(pred, true, k) == pytest.approx(f1_oracle(pred, true), abs=1e-12)

    def test_argmax_tie_break(self):
        np.testing.assert_array_equal(metrics.argmax_predictions([[0.5, 0.5, 0.0], [0.2, 0.4, 0.4]]), [0, 1])


class TestCheckpointEvaluation:
    arch = {"input_shape": [4], "body": [{"kind": "dense", "out": 6}, {"kind": "relu"}]}

    def sets(self):
        rng = np.random.default_rng(0)
        return {"a": (rng.uniform(size=(30, 4)).astype(np.float32), rng.integers(0, 3, 30)),
                "b": (rng.uniform(size=(20, 4)).astype(np.float32), rng.integers(0, 3, 20))}

    def test_zero_head_half(self):
        net = model.build_model(self.arch, seed=1)
        p = net.params.copy()
        p.get(net.head_index, "weight")[:] = 0
        row = metrics.evaluate_checkpoint(net.with_params(p), self.sets(), "x")
        assert row.auroc == [0.5, 0.5]

    def test_duplicates_invariant_and_pure(self):
        net = model.build_model(self.arch, seed=2)
        sets = self.sets()
        doubled = {k: (np.concatenate([x, x]), np.concatenate([y, y])) for k, (x, y) in sets.items()}
        a = metrics.evaluate_checkpoint(net, sets)
        b = metrics.evaluate_checkpoint(net, doubled)
        np.testing.assert_allclose(a.auroc, b.auroc, atol=1e-12)
        np.testing.assert_allclose(a.f1, b.f1, atol=1e-12)
        assert metrics.evaluate_checkpoint(net, sets) == a

    def test_undefined_cell_flagged(self):
        net = model.build_model(self.arch, seed=3)
        sets = {"one_class": (np.ones((3, 4), np.float32), np.zeros(3, np.int64))}
        row = metrics.evaluate_checkpoint(net, sets)
        assert row.flagged == [True]
        assert row.f1[0] == 1.0 or row.f1[0] == 0.0
        assert EvalRow.from_dict(row.to_dict()).flagged == [True]


class TestTrend:
    def make(self, every=1):
        rng = np.random.default_rng(0)
        net = model.build_model({"input_shape": [3], "body": [{"kind": "dense", "out": 4}]})
        rec = metrics.TrendRecorder(rng.uniform(size=(12, 3)), np.arange(12) % 3, every)
        return net, rec

    def test_boundaries_and_ordering(self):
        net, rec = self.make()
        for exp in (0, 0, 0, 1, 1, 2):
            rec(net, exp)
        assert [p.epoch for p in rec.points] == [1, 2, 3, 4, 5, 6]
        assert [p.boundary for p in rec.points] == [False, False, False, True, False, True]

    def test_single_experience_has_no_boundaries(self):
        net, _ = self.make()
        x = np.random.default_rng(1).uniform(size=(9, 3))
        pts = metrics.union_trend([(0, net)] * 5, x, np.arange(9) % 3)
        assert len(pts) == 5 and not any(p.boundary for p in pts)

    def test_cadence_keeps_boundaries(self):
        net, rec = self.make(every=2)
        for exp in (0, 0, 0, 1, 1):
            rec(net, exp)
        assert [p.epoch for p in rec.points] == [2, 4]
        net, rec = self.make(every=3)
        for exp in (0, 0, 0, 0, 1, 1):
            rec(net, exp)
        assert [(p.epoch, p.boundary) for p in rec.points] == [(3, False), (5, True), (6, False)]


class TestDelta:
    def row(self, auroc, f1=None):
        return EvalRow("r", ["first", "second", "third"], auroc, f1 or auroc)

    def test_reference_values(self):
        joint = self.row([0.9852, 0.6353, 0.9848])
        naive = self.row([0.5972, 0.5, 0.9995])
        lfl = self.row([0.9774, 0.5, 0.9])
        d = metrics.delta_vs_joint(naive, joint)
        assert d.d_auroc[0] == pytest.approx(0.3880, abs=1e-9)
        assert d.d_auroc[2] == pytest.approx(-0.0147, abs=1e-9)
        assert metrics.delta_vs_joint(lfl, joint).d_auroc[0] == pytest.approx(0.0078, abs=1e-9)

    def test_self_and_antisymmetry(self):
        a, b = self.row([0.8, 0.7, 0.6]), self.row([0.5, 0.9, 0.65])
        assert metrics.delta_vs_joint(a, a).d_auroc == [0.0, 0.0, 0.0]
        ab, ba = metrics.delta_vs_joint(a, b), metrics.delta_vs_joint(b, a)
        assert [x + y for x, y in zip(ab.d_f1, ba.d_f1)] == [0.0, 0.0, 0.0]

    def test_column_mismatch(self):
        with pytest.raises(ValueError, match="columns"):
            metrics.delta_vs_joint(EvalRow("a", ["x"], [1.0], [1.0]), EvalRow("b", ["y"], [1.0], [1.0]))

    def test_forgetting(self):
        assert metrics.forgetting([0.99, 0.75, 0.6]) == pytest.approx(0.39)
        assert metrics.forgetting([0.9]) == 0.0
