import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramid_distill import load_teacher
from pyramid_distill.backbone import student_from_parameters
from pyramid_distill.errors import DimensionError, MetricUndefinedError, UsageError
from pyramid_distill.metrics import (CategoryResult, EvalReport, ablation_table,
                                     connected_components, evaluate_category, pixel_roc_auc,
                                     pro_curve, pro_score, roc_auc, truncated_trapezoid)

from .oracles import exhaustive_pro, flood_fill_components, pairwise_auc, random_mask


class TestRocAuc:
    def test_perfect_ranking(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_inverted_ranking(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_ties(self):
        assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_matches_pairwise_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 120))
            labels = rng.random(n) < 0.4
            labels[0], labels[1] = True, False
            scores = rng.integers(0, 15, n) / 3.0  # coarse values force ties
            assert roc_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)

    @pytest.mark.parametrize("labels", [[0, 0, 0], [1, 1]])
    def test_single_class(self, labels):
        with pytest.raises(MetricUndefinedError):
            roc_auc(np.arange(len(labels), dtype=float), labels)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            roc_auc([0.1, 0.2], [0, 1, 1])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=60))
    def test_invariances(self, pairs):
        scores = np.array([p[0] for p in pairs], dtype=float)
        labels = np.array([p[1] for p in pairs])
        if labels.all() or not labels.any():
            return
        base = roc_auc(scores, labels)
        assert 0.0 <= base <= 1.0
        assert roc_auc(np.exp(scores / 5.0) * 3 + 1, labels) == pytest.approx(base, abs=1e-12)
        assert base + roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


class TestPixelAuc:
    def test_equals_pooled(self, rng):
        maps = [rng.random((6, 6)) for _ in range(4)]
        masks = [random_mask(rng, (6, 6)) for _ in range(4)]
        pooled = roc_auc(np.concatenate([m.ravel() for m in maps]),
                         np.concatenate([m.ravel() for m in masks]))
        assert pixel_roc_auc(maps, masks) == pooled

    def test_no_anomalous_pixels(self, rng):
        with pytest.raises(MetricUndefinedError):
            pixel_roc_auc([rng.random((4, 4))], [np.zeros((4, 4), bool)])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            pixel_roc_auc([np.zeros((4, 4))], [np.zeros((4, 5), bool)])


class TestComponents:
    def test_diagonal_pixels_connect(self):
        mask = np.zeros((4, 4), bool)
        mask[0, 0] = mask[1, 1] = mask[3, 3] = True
        comps = connected_components(mask)
        assert sorted(int(c.sum()) for c in comps) == [1, 2]

    def test_empty(self):
        assert connected_components(np.zeros((5, 5), bool)) == []

    def test_matches_flood_fill(self, rng):
        for _ in range(30):
            mask = rng.random((16, 16)) < 0.35
            got = {frozenset(map(tuple, np.argwhere(c))) for c in connected_components(mask)}
            want = {frozenset(c) for c in flood_fill_components(mask)}
            assert got == want


def _random_instance(rng, n_images=None):
    n_images = n_images or int(rng.integers(1, 4))
    maps, masks = [], []
    for _ in range(n_images):
        masks.append(random_mask(rng, (8, 8), density=rng.uniform(0.1, 0.5)))
        noise = rng.random((8, 8))
        # mix signal and noise so scores are informative but imperfect
        maps.append(np.round(0.6 * masks[-1] + noise, 2))
    return maps, masks


class TestPro:
    def test_identity_map_is_perfect(self, rng):
        masks = [random_mask(rng, (8, 8)) for _ in range(3)]
        assert pro_score([m.astype(float) for m in masks], masks) == 1.0

    def test_inverted_map_is_zero(self, rng):
        masks = [random_mask(rng, (8, 8)) for _ in range(3)]
        assert pro_score([(~m).astype(float) for m in masks], masks) == 0.0

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(25):
            maps, masks = _random_instance(rng)
            assert pro_score(maps, masks) == pytest.approx(exhaustive_pro(maps, masks), abs=0.01)

    def test_step_count_converges(self, rng):
        for _ in range(10):
            maps, masks = _random_instance(rng, n_images=4)
            a = pro_score(maps, masks, steps=200)
            b = pro_score(maps, masks, steps=10_000)
            assert a == pytest.approx(b, abs=0.01)

    def test_monotone_transform_invariance(self, rng):
        maps, masks = _random_instance(rng, n_images=3)
        base = pro_score(maps, masks, steps=10_000)
        assert pro_score([np.exp(3 * m) for m in maps], masks, steps=10_000) == pytest.approx(base, abs=1e-12)

    def test_single_region_is_mean_recall(self, rng):
        # one region: PRO at each threshold is plain recall of that region
        mask = np.zeros((8, 8), bool)
        mask[2:5, 2:5] = True
        grid = rng.random((8, 8))
        score, curve = pro_score([grid], [mask], steps=10_000, return_curve=True)
        recall = [(grid[mask] >= t).mean() for t in curve.thresholds[1:]]
        np.testing.assert_allclose(curve.pro[1:], recall)
        assert score == pytest.approx(exhaustive_pro([grid], [mask]), abs=1e-12)

    def test_curve_is_monotone_from_origin(self, rng):
        maps, masks = _random_instance(rng, n_images=2)
        curve = pro_curve(maps, masks)
        assert curve.fpr[0] == 0 and curve.pro[0] == 0
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.pro) >= 0)
        assert np.all(np.diff(curve.thresholds) < 0)

    def test_per_image_mode(self, rng):
        maps, masks = _random_instance(rng, n_images=1)
        assert pro_score(maps, masks, fpr_mode="per_image") == pro_score(maps, masks)
        with pytest.raises(UsageError):
            pro_score(maps, masks, fpr_mode="bogus")

    def test_no_regions(self, rng):
        with pytest.raises(MetricUndefinedError):
            pro_score([rng.random((4, 4))], [np.zeros((4, 4), bool)])

    @pytest.mark.parametrize("limit", [0.0, -0.1, 1.5])
    def test_bad_limit(self, rng, limit):
        maps, masks = _random_instance(rng, 1)
        with pytest.raises(UsageError):
            pro_score(maps, masks, fpr_limit=limit)


def test_truncated_trapezoid_interpolates_cut():
    x = np.array([0.0, 0.2, 0.4])
    y = np.array([0.0, 0.5, 1.0])
    # area of y = 2.5x on [0, 0.3]
    assert truncated_trapezoid(x, y, 0.3) == pytest.approx(0.5 * 0.3 * 0.75)
    assert truncated_trapezoid(x, y, 0.4) == pytest.approx(0.2)


class TestReport:
    def _report(self):
        return EvalReport({"a": CategoryResult(0.9, 0.8, 0.7), "b": CategoryResult(0.7, 1.0, 0.5)})

    def test_means_are_unweighted(self):
        r = self._report()
        assert r.image_auc == pytest.approx(0.8)
        assert r.pixel_auc == pytest.approx(0.9)
        assert r.pro == pytest.approx(0.6)

    def test_text_layout(self, tmp_path):
        r = self._report()
        text = r.to_text()
        lines = text.splitlines()
        assert lines[1].split() == ["a", "PRO", "0.700"]
        assert lines[2].split() == ["AUC-ROC", "0.800"]
        assert lines[-3].split() == ["Mean", "PRO", "0.600"]
        assert len(lines) == 1 + 3 * 3
        assert json.loads(json.dumps(r.to_dict()))["mean"]["pro"] == pytest.approx(0.6)
        r.write(tmp_path / "r.txt")
        assert (tmp_path / "r.txt").read_text() == text

    def test_ablation_table_rows(self):
        table = ablation_table({"[2]": self._report(), "[2,3]": self._report()}, "Blocks")
        rows = [line.split()[0] for line in table.splitlines()]
        assert rows == ["Blocks", "AR_I", "AR_P", "PRO"]


def test_trained_student_separates_synthetic_defects(trained, synth_category):
    teacher, student, ckpt = trained
    report = evaluate_category(synth_category, teacher, student, ckpt.pyramid)
    res = report.categories["synthetic"]
    assert res.image_auc >= 0.9 and res.pixel_auc >= 0.9
    assert res.n_good == 20 and res.n_defective == 20


def test_teacher_copy_scores_are_uninformative(toy_archive, pyramid, synth_category):
    teacher = load_teacher(toy_archive, pyramid)
    student = student_from_parameters(teacher, teacher.parameters())
    res = evaluate_category(synth_category, teacher, student, pyramid).categories["synthetic"]
    # every map is (numerically) zero, so rankings are ties or float noise
    assert abs(res.image_auc - 0.5) <= 0.25


def test_single_class_test_set_is_rejected(trained, synth_category):
    from dataclasses import replace

    teacher, student, ckpt = trained
    good_only = replace(synth_category, test=[s for s in synth_category.test if not s.is_defective])
    with pytest.raises(MetricUndefinedError):
        evaluate_category(good_only, teacher, student, ckpt.pyramid)
