import logging
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import car
from roadside3d import evaluation
from roadside3d.evaluation import EvalConfig
from roadside3d.model import Box3D, Clip, DataError, Detection, InvariantError, Sample

CLASSES = ("car", "van", "truck")


def det(x, y, score, yaw=0.0, size=(4.5, 1.8, 1.5), cls="car", z=0.75):
    return Detection((x, y, z), size, yaw, cls, score=score)


class TestMatching:
    def test_perfect(self):
        gts = [car(0, 0), car(10, 0)]
        res = evaluation.match_detections(gts, [Detection.from_box(g, 0.9) for g in gts], 2.0)
        assert len(res.matches) == 2 and not res.false_positives and not res.missed

    def test_beyond_threshold(self):
        res = evaluation.match_detections([car(0, 0)], [det(3, 0, 0.9)], 2.0)
        assert not res.matches and len(res.false_positives) == 1 and len(res.missed) == 1

    def test_higher_score_wins(self):
        res = evaluation.match_detections([car(0, 0)], [det(0.5, 0, 0.3), det(1.0, 0, 0.8)], 2.0)
        assert res.matches[0].det.score == 0.8
        assert res.false_positives[0].score == 0.3

    def test_nearest_unmatched_gt(self):
        res = evaluation.match_detections([car(0, 0), car(1, 0)], [det(0.9, 0, 0.9), det(0.1, 0, 0.5)], 2.0)
        assert [m.gt.center[0] for m in res.matches] == [1.0, 0.0]

    def test_distance_tie_goes_to_lower_index(self):
        res = evaluation.match_detections([car(-1, 0), car(1, 0)], [det(0, 0, 0.9)], 2.0)
        assert res.matches[0].gt.center[0] == -1.0

    def test_bev_distance_ignores_height(self):
        res = evaluation.match_detections([car(0, 0)], [det(0, 0, 0.9, z=10)], 0.5)
        assert len(res.matches) == 1

    def test_unknown_sample(self):
        with pytest.raises(DataError):
            evaluation.match_detections({"a": []}, {"b": [det(0, 0, 1)]}, 1.0)


def random_instance(rng, n_gt=5, n_det=7, classes=("car",), spread=8.0):
    keys = ["s0", "s1"]
    gts = {k: [] for k in keys}
    for _ in range(n_gt):
        gts[rng.choice(keys)].append(Box3D((*rng.uniform(0, spread, 2), 1.0), rng.uniform(1, 5, 3),
                                           rng.uniform(-3, 3), rng.choice(classes)))
    dets = {k: [] for k in keys}
    for s in rng.permutation(np.linspace(0.1, 1.0, n_det)):
        dets[rng.choice(keys)].append(Detection((*rng.uniform(0, spread, 2), 1.0), rng.uniform(1, 5, 3),
                                                rng.uniform(-3, 3), rng.choice(classes), score=float(s)))
    return gts, dets


def flat(gts, dets, cls):
    g = {k: [b.center[:2] for b in v if b.cls == cls] for k, v in gts.items()}
    d = [(x.score, k, x.center[:2]) for k, v in dets.items() for x in v if x.cls == cls]
    return g, d


class TestAveragePrecision:
    def test_single_exact(self):
        assert evaluation.average_precision([car(0, 0)], [det(0, 0, 0.5)], "car", 0.5) == 1.0

    def test_no_detections(self):
        assert evaluation.average_precision([car(0, 0)], [], "car", 0.5) == 0.0

    def test_no_ground_truth_is_nan(self):
        assert math.isnan(evaluation.average_precision([car(0, 0)], [], "bus", 0.5))

    def test_five_gt_seven_det_oracle(self):
        rng = np.random.default_rng(50)
        for _ in range(20):
            gts, dets = random_instance(rng)
            g, d = flat(gts, dets, "car")
            for th in (0.5, 1.0, 2.0, 4.0):
                got = evaluation.average_precision(gts, dets, "car", th)
                assert abs(got - oracles.nuscenes_ap(g, d, th)) <= 1e-12

    def test_precision_floor(self):
        # one TP ranked after nine FPs: precision 0.1 everywhere, which the floor removes
        gts = [car(0, 0)]
        dets = [det(50 + i, 0, 0.9 - 0.01 * i) for i in range(9)] + [det(0, 0, 0.1)]
        assert evaluation.average_precision(gts, dets, "car", 1.0) == 0.0

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12), st.integers(1, 16))
    def test_monotone_in_threshold(self, seed, n_gt, n_det):
        rng = np.random.default_rng(seed)
        gts, dets = random_instance(rng, n_gt, n_det, spread=6.0)
        aps = [evaluation.average_precision(gts, dets, "car", th) for th in (0.5, 1.0, 2.0, 4.0)]
        assert all(b >= a - 1e-12 for a, b in zip(aps, aps[1:])), aps


class TestTpErrors:
    def match(self, gt, d):
        return evaluation.match_detections([gt], [d], 2.0).matches

    def test_exact(self):
        g = car(1, 2, 0.3)
        errs = evaluation.tp_errors(self.match(g, Detection.from_box(g, 0.5)))
        assert (errs["ate"], errs["ase"], errs["aoe"]) == (0.0, 0.0, 0.0)

    def test_translation(self):
        errs = evaluation.tp_errors(self.match(car(0, 0), det(1, 0, 0.5)))
        assert errs["ate"] == 1.0 and errs["ase"] == 0.0

    def test_scale(self):
        g = Box3D((0, 0, 1), (4, 2, 1.5), 0.0, "car")
        d = Detection((0, 0, 1), (2, 2, 1.5), 0.0, "car", score=0.5)
        assert evaluation.tp_errors(self.match(g, d))["ase"] == pytest.approx(0.5, abs=1e-15)

    def test_orientation_wraps(self):
        errs = evaluation.tp_errors(self.match(car(0, 0, yaw=3.0), det(0, 0, 0.5, yaw=-3.0)))
        assert errs["aoe"] == pytest.approx(2 * math.pi - 6.0, abs=1e-12)

    def test_orientation_ignores_full_turns(self):
        for k in (-2, -1, 1, 3):
            assert evaluation.yaw_difference(0.4 + 2 * math.pi * k, -0.2) == pytest.approx(0.6, abs=1e-12)

    def test_no_matches(self):
        assert evaluation.tp_errors([]) == {m: 1.0 for m in evaluation.TP_METRICS}

    def test_velocity_and_attribute_only_when_present(self):
        g = Box3D((0, 0, 1), (4, 2, 1.5), 0.0, "car", velocity=(3.0, 4.0), attribute="moving")
        d = Detection((0, 0, 1), (4, 2, 1.5), 0.0, "car", score=0.5, velocity=(0.0, 0.0), attribute="stopped")
        errs = evaluation.tp_errors(self.match(g, d))
        assert errs["ave"] == 5.0 and errs["aae"] == 1.0
        plain = evaluation.tp_errors(self.match(car(0, 0), det(0, 0, 0.5)))
        assert plain["ave"] == 1.0 and plain["aae"] == 1.0

    @given(st.floats(0.5, 5), st.floats(0.5, 5), st.floats(0.5, 5))
    def test_ase_zero_iff_equal_dims(self, l, w, h):
        g = Box3D((0, 0, 1), (l, w, h), 0.0, "car")
        assert 1 - evaluation.aligned_iou(g, g) == 0.0
        other = Box3D((0, 0, 1), (l * 1.1, w, h), 0.0, "car")
        assert 1 - evaluation.aligned_iou(g, other) > 0


class TestNds:
    def test_perfect(self):
        assert evaluation.nds(1.0, dict.fromkeys(evaluation.TP_METRICS, 0.0)) == 1.0

    def test_worst(self):
        assert evaluation.nds(0.0, dict(ate=1.0, ase=2.0, aoe=3.0, ave=1.0, aae=1.0)) == 0.0

    def test_mixed(self):
        tp = dict(ate=0.5, ase=0.5, aoe=0.5, ave=1.0, aae=1.0)
        assert evaluation.nds(0.5, tp) == pytest.approx(0.4, abs=1e-15)

    def test_reduced_metric_set(self):
        cfg = EvalConfig(tp_metrics=("ate", "ase", "aoe"))
        tp = dict(ate=0.5, ase=0.5, aoe=0.5, ave=1.0, aae=1.0)
        assert evaluation.nds(0.5, tp, cfg) == pytest.approx((2.5 + 1.5) / 8)

    @given(st.floats(0, 1), st.lists(st.floats(0, 10), min_size=5, max_size=5))
    def test_bounded(self, m, errs):
        v = evaluation.nds(m, dict(zip(evaluation.TP_METRICS, errs)))
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == (m == 1.0 and all(e == 0 for e in errs))


class TestConfig:
    def test_thresholds_ascending(self):
        with pytest.raises(InvariantError):
            EvalConfig(dist_thresholds=(1.0, 0.5))

    def test_tp_threshold_member(self):
        with pytest.raises(InvariantError):
            EvalConfig(tp_threshold=3.0)

    def test_unknown_metric(self):
        with pytest.raises(InvariantError):
            EvalConfig(tp_metrics=("ate", "xyz"))


def oracle_evaluate(gts, dets, classes, thresholds=(0.5, 1.0, 2.0, 4.0), tp_th=2.0):
    """Protocol recomputed from the oracle matcher; returns (mAP, class-mean TP errors, NDS)."""
    aps, tps = [], []
    for cls in classes:
        g, d = flat(gts, dets, cls)
        if not sum(len(v) for v in g.values()):
            continue
        aps.append(np.mean([oracles.nuscenes_ap(g, d, th) for th in thresholds]))
        boxes = [x for v in dets.values() for x in v if x.cls == cls]
        gboxes = {k: [b for b in v if b.cls == cls] for k, v in gts.items()}
        _, pairs = oracles.greedy_center_match(g, d, tp_th)
        if not pairs:
            tps.append([1.0, 1.0, 1.0])
            continue
        ate, ase, aoe = [], [], []
        for i, k, j in pairs:
            a, b = boxes[i], gboxes[k][j]
            ate.append(math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))
            inter = np.prod([min(p, q) for p, q in zip(a.size, b.size)])
            ase.append(1 - inter / (np.prod(a.size) + np.prod(b.size) - inter))
            dy = abs(a.yaw - b.yaw) % (2 * math.pi)
            aoe.append(min(dy, 2 * math.pi - dy))
        tps.append([np.mean(ate), np.mean(ase), np.mean(aoe)])
    m = float(np.mean(aps))
    mtp = np.mean(tps, axis=0)
    # velocity and attribute are absent, so both score the maximum error
    nds = (5 * m + sum(1 - min(1.0, e) for e in mtp)) / 10
    return m, mtp, nds


class TestEvaluate:
    def clips(self, gts, dets):
        g = [Clip(k, [Sample(0.0, v)], 2.0) for k, v in gts.items()]
        d = [Clip(k, [Sample(0.0, dets[k])], 2.0) for k in gts]
        return g, d

    def test_ground_truth_as_detections(self):
        gts = {"a": [Box3D((i * 10.0, 0, 1), (4, 2, 1.5), 0.1 * i, c, velocity=(1.0, 0.0), attribute="moving")
                     for i, c in enumerate(CLASSES * 3)]}
        dets = {"a": [Detection.from_box(b, 1.0) for b in gts["a"]]}
        res = evaluation.evaluate(*self.clips(gts, dets))
        assert res.mean_ap == 1.0 and res.nds == 1.0
        assert all(v == 0.0 for v in res.tp_errors.values())
        assert res.skipped_classes == ["bus"]

    def test_empty_detections(self):
        gts = {"a": [car(0, 0)]}
        res = evaluation.evaluate(*self.clips(gts, {"a": []}))
        assert res.mean_ap == 0.0
        assert res.nds == 0.0

    def test_three_class_oracle(self):
        rng = np.random.default_rng(51)
        for _ in range(10):
            gts, dets = random_instance(rng, 20, 24, CLASSES, spread=12.0)
            res = evaluation.evaluate_samples(gts, dets)
            classes = [c for c in CLASSES if any(b.cls == c for v in gts.values() for b in v)]
            m, mtp, nds = oracle_evaluate(gts, dets, classes)
            assert res.mean_ap == pytest.approx(m, abs=1e-12)
            assert [res.tp_errors[k] for k in ("ate", "ase", "aoe")] == pytest.approx(mtp, abs=1e-12)
            assert res.nds == pytest.approx(nds, abs=1e-12)

    def test_order_invariant(self):
        rng = np.random.default_rng(52)
        gts, dets = random_instance(rng, 15, 20, CLASSES)
        base = evaluation.evaluate_samples(gts, dets).as_dict()
        shuffled = {k: random.Random(3).sample(v, len(v)) for k, v in reversed(dets.items())}
        assert evaluation.evaluate_samples(gts, shuffled).as_dict() == base

    def test_key_mismatch(self):
        with pytest.raises(DataError):
            evaluation.evaluate_samples({"a": [car(0, 0)]}, {"b": []})

    def test_no_ground_truth(self):
        with pytest.raises(DataError):
            evaluation.evaluate_samples({"a": []}, {"a": []})

    def test_detection_cap(self, caplog):
        gts = {"a": [car(0, 0)]}
        dets = {"a": [det(0, 0, 0.9)] + [det(100, 0, 0.1 + 0.001 * i) for i in range(10)]}
        with caplog.at_level(logging.WARNING):
            res = evaluation.evaluate_samples(gts, dets, EvalConfig(max_boxes_per_sample=1))
        assert "keeping the top 1" in caplog.text
        assert res.mean_ap == 1.0

    def test_output_schema(self):
        d = evaluation.evaluate_samples({"a": [car(0, 0)]}, {"a": [det(0, 0, 0.9)]}).as_dict()
        assert {"nds", "map", "mate", "mase", "maoe", "per_class", "config"} <= set(d)
        assert set(d["per_class"]["car"]["ap"]) == {"0.5", "1", "2", "4"}


class TestAp40:
    def test_perfect(self):
        gts = [car(0, 0), car(10, 0, 0.4)]
        assert evaluation.ap40(gts, [Detection.from_box(g, 0.9) for g in gts], 0.5) == 1.0

    def test_all_below_threshold(self):
        assert evaluation.ap40([car(0, 0)], [det(3.5, 0, 0.9)], 0.3) == 0.0

    def test_score_floor_and_cap(self):
        assert evaluation.ap40([car(0, 0)], [det(0, 0, 0.05)], 0.5) == 0.0
        cfg = evaluation.Mono3DConfig(max_dets_per_image=2)
        dets = [det(50, 0, 0.9), det(60, 0, 0.8), det(0, 0, 0.7)]
        assert evaluation.ap40([car(0, 0)], dets, 0.5, config=cfg) == 0.0

    def test_small_instance_oracle(self):
        gts = [car(0, 0), car(8, 0), car(16, 0)]
        dets = [det(0.2, 0, 0.9), det(30, 0, 0.8), det(8.1, 0.1, 0.7), det(16, 3, 0.6)]
        # flags 1, 0, 1, 0 with 3 positives
        assert evaluation.ap40(gts, dets, 0.5) == pytest.approx(oracles.r40_ap([1, 0, 1, 0], 3), abs=1e-12)

    def test_ignored_boxes_neutral(self):
        gts = [car(0, 0)]
        ignored = [car(10, 0)]
        dets = [det(10, 0, 0.9), det(0, 0, 0.8)]
        assert evaluation.ap40(gts, dets, 0.5) < 1.0
        assert evaluation.ap40(gts, dets, 0.5, ignored=ignored) == 1.0

    def test_class_must_agree(self):
        assert evaluation.ap40([car(0, 0)], [det(0, 0, 0.9, cls="van")], 0.5) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_looser_iou_never_lower(self, seed):
        rng = np.random.default_rng(seed)
        gts = [car(*rng.uniform(0, 4, 2), yaw=rng.uniform(-1, 1)) for _ in range(int(rng.integers(1, 8)))]
        dets = [Detection.from_box(car(*rng.uniform(0, 4, 2), yaw=rng.uniform(-1, 1)), float(s))
                for s in rng.uniform(0.1, 1, int(rng.integers(1, 10)))]
        assert evaluation.ap40(gts, dets, 0.3) >= evaluation.ap40(gts, dets, 0.5) - 1e-12
