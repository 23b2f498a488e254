import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cephaloscope.metrics import (
    GROUP_ORDER,
    accuracy,
    curve_area,
    error_stats,
    group_report,
    roc_auc,
    roc_curve,
)
from oracles import brute_error_stats, pair_count_auc


class TestErrorStats:
    def test_perfect_predictions(self):
        s = error_stats([5.0, 9.5, 30.25], [5.0, 9.5, 30.25])
        assert (s.e_med, s.mean, s.std, s.ae_med, s.iqr) == (0, 0, 0, 0, 0)

    def test_hand_example(self):
        s = error_stats([10, 20], [12, 18])
        assert (s.e_med, s.mean, s.std, s.ae_med, s.iqr, s.count) == (0.0, 2.0, 0.0, 2.0, 0.0, 2)

    def test_sign_is_true_minus_pred(self):
        assert error_stats([10.0], [12.5]).e_med == -2.5

    def test_empty_and_mismatch(self):
        with pytest.raises(ValueError):
            error_stats([], [])
        with pytest.raises(ValueError):
            error_stats([1.0, 2.0], [1.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_against_sort_and_scan_oracle(self, seed):
        r = np.random.default_rng(seed)
        t = r.uniform(4, 40, 101)
        p = t + r.normal(0, 3, 101)
        got = error_stats(t, p)
        want = brute_error_stats(t, p)
        for k, v in want.items():
            assert abs(getattr(got, k) - v) <= 1e-12, k

    def test_even_count_against_oracle(self, rng):
        t = rng.uniform(4, 40, 64)
        p = rng.uniform(4, 40, 64)
        got = error_stats(t, p)
        for k, v in brute_error_stats(t, p).items():
            assert abs(getattr(got, k) - v) <= 1e-12, k

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(4, 40), st.floats(-10, 60)), min_size=1, max_size=60), st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = error_stats(*zip(*pairs))
        b = error_stats(*zip(*shuffled))
        assert a == b
        assert a.std >= 0 and a.iqr >= 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(4, 40), st.floats(0, 50)), min_size=1, max_size=60), st.floats(-5, 5))
    def test_prediction_shift(self, pairs, c):
        t, p = (np.array(x) for x in zip(*pairs))
        base = error_stats(t, p)
        moved = error_stats(t, p + c)
        assert moved.e_med == pytest.approx(base.e_med - c, abs=1e-9)
        assert np.std(t - (p + c)) == pytest.approx(np.std(t - p), abs=1e-9)


class TestGroupReport:
    def test_single_group(self):
        rep = group_report([12.0, 12.5, 12.99], [11.0, 13.0, 12.0])
        populated = [k for k, v in rep.rows.items() if v is not None]
        assert populated == ["11-15", "4-25", "All"]

    def test_boundary_floor(self):
        rep = group_report([10.99, 11.0], [10.0, 10.0])
        assert rep.rows["4-10"].count == 1 and rep.rows["11-15"].count == 1

    def test_partition(self, rng):
        t = rng.integers(400, 4001, 500) / 100
        rep = group_report(t, t + rng.normal(0, 2, 500))
        c = rep.counts()
        assert sum(c[k] for k in GROUP_ORDER[:7]) == 500 == c["All"]
        assert c["4-25"] + c["26-40"] == 500

    def test_exports(self, rng):
        t = rng.uniform(4, 40, 50)
        p = (rng.random(50) > 0.5).astype(float)
        y = (rng.random(50) > 0.5).astype(int)
        rep = group_report(t, t + 1, label="EFFI.", gender_probs=p, gender_labels=y)
        data = json.loads(rep.to_json())
        assert set(data["rows"]) == set(GROUP_ORDER)
        assert 0 <= data["gender"]["accuracy"] <= 1
        table = rep.to_table()
        assert table.splitlines()[0] == "EFFI."
        assert "AE.Med" in table and "gender accuracy" in table


class TestClassification:
    def test_accuracy(self):
        assert accuracy([0.1, 0.9], [0, 1]) == 1.0
        assert accuracy([0.9, 0.1], [0, 1]) == 0.0
        assert accuracy([0.4, 0.6, 0.5], [0, 1, 0]) == 2 / 3

    def test_auc_trivial(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_auc_single_class(self):
        with pytest.raises(ValueError):
            roc_auc([0.2, 0.3], [1, 1])

    @pytest.mark.parametrize("seed", range(10))
    def test_auc_equals_pair_count(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 201))
        y = r.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(r.random(n), 2)  # coarse grid forces ties
        assert roc_auc(s, y) == pair_count_auc(s.tolist(), y.tolist())

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=200))
    def test_auc_pair_count_property(self, rows):
        scores = [s / 20 for s, _ in rows]
        labels = [y for _, y in rows]
        if len(set(labels)) < 2:
            return
        assert roc_auc(scores, labels) == pair_count_auc(scores, labels)
        assert curve_area(roc_curve(scores, labels)) == pytest.approx(roc_auc(scores, labels), abs=1e-12)

    def test_curve_shapes(self):
        pts = roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert (0.0, 1.0) in pts
        assert roc_curve([0.3] * 4, [0, 1, 0, 1]) == [(0.0, 0.0), (1.0, 1.0)]

    def test_curve_monotone(self, rng):
        s = rng.random(80)
        y = rng.integers(0, 2, 80)
        pts = roc_curve(s, y)
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
        assert len(pts) == len(set(s.tolist())) + 1
        for (a, b), (c, d) in zip(pts, pts[1:]):
            assert c >= a and d >= b
        assert math.isclose(curve_area(pts), roc_auc(s, y), abs_tol=1e-12)
