import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdet.detect import BBox, Detection
from spdet.errors import ProtocolError
from spdet.metrics import (
    MAP_THRESHOLDS,
    average_precision,
    evaluate_detections,
    iou,
    map_40_95,
    match_detections,
)

from oracles import average_precision_bruteforce


def det(box, score, cls=0, tok=0):
    return Detection(box=box, class_id=cls, score=score, token_index=tok)


class TestIou:
    def test_identical(self):
        b = BBox(0.5, 0.5, 0.2, 0.3)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0.2, 0.2, 0.1, 0.1), BBox(0.8, 0.8, 0.1, 0.1)) == 0.0

    def test_corner_overlap_one_seventh(self):
        # the classic (0,0)-(2,2) vs (1,1)-(3,3) corner-form case, scaled by
        # 1/10 to stay in the unit square: intersection 1 vs union 7
        a = BBox(0.1, 0.1, 0.2, 0.2)
        b = BBox(0.2, 0.2, 0.2, 0.2)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-15)


class TestMatchDetections:
    def test_single_match(self):
        gt = [BBox(0.5, 0.5, 0.2, 0.2)]
        d = [det(BBox(0.52, 0.5, 0.2, 0.2), 0.9)]
        flags, n_gt = match_detections(d, gt, 0.5)
        assert flags == [(0.9, True)]
        assert n_gt == 1

    def test_one_to_one(self):
        gt = [BBox(0.5, 0.5, 0.2, 0.2)]
        dets = [det(BBox(0.5, 0.5, 0.2, 0.2), 0.8), det(BBox(0.5, 0.5, 0.2, 0.2), 0.9)]
        flags, _ = match_detections(dets, gt, 0.5)
        assert flags == [(0.9, True), (0.8, False)]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_independent_greedy_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gts = []
        for _ in range(2):
            w, h = rng.uniform(0.1, 0.4, 2)
            gts.append(BBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h))
        dets = []
        for tok in range(3):
            w, h = rng.uniform(0.1, 0.4, 2)
            dets.append(
                det(
                    BBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h),
                    float(rng.uniform(0, 1)), 0, tok,
                )
            )
        flags, _ = match_detections(dets, gts, 0.4)

        # independent re-derivation of the greedy rule
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        free = set(range(len(gts)))
        expected = []
        for i in order:
            cands = [
                (iou(dets[i].box, gts[j]), -j) for j in free if iou(dets[i].box, gts[j]) >= 0.4
            ]
            if cands:
                best = max(cands)
                free.discard(-best[1])
                expected.append((dets[i].score, True))
            else:
                expected.append((dets[i].score, False))
        assert flags == expected

    def test_no_gt_matched_twice_no_det_matched_twice(self):
        gt = [BBox(0.5, 0.5, 0.3, 0.3), BBox(0.52, 0.52, 0.3, 0.3)]
        dets = [det(BBox(0.5, 0.5, 0.3, 0.3), s, 0, i) for i, s in enumerate((0.9, 0.8, 0.7))]
        flags, _ = match_detections(dets, gt, 0.3)
        assert sum(1 for _, tp in flags if tp) == 2  # two gts, three dets


class TestAveragePrecision:
    def test_perfect(self):
        flags = [(0.9, True), (0.8, True), (0.7, True)]
        assert average_precision(flags, 3) == 1.0

    def test_no_detections(self):
        assert average_precision([], 5) == 0.0

    def test_absent_class_excluded(self):
        assert average_precision([], 0) is None

    def test_five_detection_curve_matches_envelope_oracle(self):
        flags = [(0.9, True), (0.8, False), (0.7, True), (0.6, False), (0.5, True)]
        got = average_precision(flags, 4)
        expected = average_precision_bruteforce([True, False, True, False, True], 4)
        assert got == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_bruteforce_random(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 7))
        scores = rng.uniform(0, 1, n)
        tps = rng.random(n) < 0.5
        n_gt = int(tps.sum() + rng.integers(0, 3))
        if n_gt == 0:
            n_gt = 1
        flags = sorted(zip(scores.tolist(), tps.tolist()), key=lambda p: -p[0])
        got = average_precision(flags, n_gt)
        expected = average_precision_bruteforce([tp for _, tp in flags], n_gt)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_top_tp(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            n = int(rng.integers(1, 6))
            flags = [(float(s), bool(t)) for s, t in zip(rng.uniform(0, 0.8, n), rng.random(n) < 0.5)]
            n_gt = max(1, sum(t for _, t in flags))
            base = average_precision(flags, n_gt + 1)
            boosted = average_precision(flags + [(0.99, True)], n_gt + 1)
            assert boosted >= base - 1e-12


class TestMap4095:
    def test_all_ones(self):
        table = {t: [1.0, 1.0] for t in MAP_THRESHOLDS}
        assert map_40_95(table) == 1.0

    def test_half(self):
        table = {t: [1.0] if t <= 0.651 else [0.0] for t in MAP_THRESHOLDS}
        assert map_40_95(table) == pytest.approx(0.5)

    def test_random_matches_arithmetic(self):
        rng = np.random.default_rng(2)
        table = {t: rng.uniform(0, 1, 3).tolist() for t in MAP_THRESHOLDS}
        expected = np.mean([np.mean(v) for v in table.values()])
        assert map_40_95(table) == pytest.approx(expected, abs=1e-12)

    def test_missing_threshold_rejected(self):
        table = {t: [1.0] for t in MAP_THRESHOLDS[:-1]}
        with pytest.raises(ProtocolError):
            map_40_95(table)
        bad = dict(table)
        bad[0.99] = [1.0]
        with pytest.raises(ProtocolError):
            map_40_95(bad)

    def test_threshold_set_is_forty_to_ninety_five(self):
        assert MAP_THRESHOLDS == tuple(np.round(np.arange(0.40, 0.951, 0.05), 2))


class TestEvaluateDetections:
    def _self_eval(self, seed):
        rng = np.random.default_rng(seed)
        gts_per_image, dets_per_image = [], []
        for _ in range(3):
            gts, dets = [], []
            for tok in range(int(rng.integers(1, 4))):
                w, h = rng.uniform(0.1, 0.3, 2)
                box = BBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)
                cls = int(rng.integers(0, 3))
                gts.append((box, cls))
                dets.append(det(box, 1.0, cls, tok))
            gts_per_image.append(gts)
            dets_per_image.append(dets)
        return dets_per_image, gts_per_image

    def test_detections_against_themselves_score_one(self):
        dets, gts = self._self_eval(3)
        report = evaluate_detections(dets, gts, 3)
        assert report.map_40_95 == 1.0
        assert report.precision == 1.0
        assert report.recall == 1.0

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(4)
        gts, dets = [], []
        for tok in range(4):
            w, h = rng.uniform(0.1, 0.3, 2)
            box = BBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)
            gts.append((box, 0))
            jitter = BBox(
                min(max(box.cx + rng.uniform(-0.03, 0.03), box.w / 2), 1 - box.w / 2),
                min(max(box.cy + rng.uniform(-0.03, 0.03), box.h / 2), 1 - box.h / 2),
                box.w, box.h,
            )
            dets.append(det(jitter, float(rng.uniform(0.5, 1)), 0, tok))
        report = evaluate_detections([dets], [gts], 1)
        aps = [report.ap_at(t) for t in MAP_THRESHOLDS]
        for lo, hi in zip(aps, aps[1:]):
            assert lo >= hi - 1e-12

    def test_empty_dataset(self):
        report = evaluate_detections([[]], [[]], 2)
        assert report.no_ground_truth
        assert report.map_40_95 == 0.0

    def test_table_shape(self):
        dets, gts = self._self_eval(5)
        table = evaluate_detections(dets, gts, 3).table()
        lines = table.splitlines()
        assert len(lines) == 2
        assert lines[0].split() == [
            "Precision", "Recall", "AP40", "AP50", "AP60", "AP70", "AP80", "AP90", "mAP40:95",
        ]
