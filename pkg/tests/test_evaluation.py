import json
import math

import numpy as np
import pytest

from boxreplay.evaluation import (
    ALLOWED_THRESHOLDS,
    DetectionResult,
    EvaluationError,
    GroundTruthBox,
    average_precision,
    background_fp_count,
    manifest_groundtruths,
    map_report,
    plot_forgetting_curves,
    plot_memory_curve,
)
from boxreplay.geometry import Annotation, BoundingBox
from boxreplay.manifest import DatasetManifest, ManifestEntry


def _det(img, cid, u, v, w, h, conf):
    return DetectionResult(image_id=img, class_id=cid,
                           box=BoundingBox(u=u, v=v, w=w, h=h), confidence=conf)


def _gt(img, cid, u, v, w, h, difficult=False):
    return GroundTruthBox(image_id=img, class_id=cid,
                          box=BoundingBox(u=u, v=v, w=w, h=h),
                          difficult=difficult)


def test_ap_five_sixths_by_hand():
    # curve: TP (p=1, r=1/2), FP (p=1/2, r=1/2), TP (p=2/3, r=1)
    # envelope area = 1/2 * 1 + 1/2 * 2/3 = 5/6
    gts = [_gt("a", 1, 0, 0, 10, 10), _gt("a", 1, 20, 20, 10, 10)]
    dets = [
        _det("a", 1, 0, 0, 10, 10, 0.9),
        _det("a", 1, 40, 40, 5, 5, 0.8),
        _det("a", 1, 20, 20, 10, 10, 0.7),
    ]
    assert average_precision(dets, gts) == pytest.approx(5 / 6, abs=1e-12)
    # eleven-point variant of the same curve: 6 grid points at 1, 5 at 2/3
    assert average_precision(dets, gts, eleven_point=True) \
        == pytest.approx(28 / 33, abs=1e-12)


def test_ap_duplicate_claim_is_false_positive():
    gts = [_gt("a", 1, 0, 0, 10, 10), _gt("a", 1, 20, 20, 10, 10)]
    dets = [
        _det("a", 1, 0, 0, 10, 10, 0.9),
        _det("a", 1, 0, 1, 10, 10, 0.8),   # second claim on the first object
        _det("a", 1, 20, 20, 10, 10, 0.7),
    ]
    assert average_precision(dets, gts) == pytest.approx(5 / 6, abs=1e-12)


def test_ap_trivial_cases():
    gt = [_gt("a", 1, 0, 0, 10, 10)]
    hit = [_det("a", 1, 0, 0, 10, 10, 0.9)]
    miss = [_det("a", 1, 50, 50, 10, 10, 0.9)]
    assert average_precision(hit, gt) == 1.0
    assert average_precision([], []) is None
    assert average_precision(miss, []) == 0.0
    assert average_precision([], gt) == 0.0
    assert average_precision(miss, gt) == 0.0


def test_ap_threshold_is_inclusive():
    gt = [_gt("a", 1, 0, 0, 10, 10)]
    det = [_det("a", 1, 0, 0, 10, 5, 0.9)]  # IoU exactly 0.5
    assert average_precision(det, gt, iou_threshold=0.5) == 1.0
    assert average_precision(det, gt, iou_threshold=0.55) == 0.0


def test_ap_matching_is_per_image():
    gt = [_gt("a", 1, 0, 0, 10, 10)]
    det = [_det("b", 1, 0, 0, 10, 10, 0.9)]  # right box, wrong image
    assert average_precision(det, gt) == 0.0


def test_ap_difficult_groundtruth_rules():
    gts = [_gt("a", 1, 0, 0, 10, 10), _gt("a", 1, 30, 30, 10, 10, difficult=True)]
    dets = [
        _det("a", 1, 30, 30, 10, 10, 0.9),  # hits the difficult object: ignored
        _det("a", 1, 0, 0, 10, 10, 0.8),
    ]
    assert average_precision(dets, gts) == 1.0
    only_difficult = [_gt("a", 1, 0, 0, 10, 10, difficult=True)]
    assert average_precision(dets[:1], only_difficult) == 0.0
    assert average_precision([], only_difficult) is None


def _random_fixture(rng):
    gts, dets = [], []
    for img in ("i0", "i1", "i2"):
        for _ in range(int(rng.integers(1, 4))):
            u, v = rng.uniform(0, 80, 2)
            gts.append(_gt(img, 1, float(u), float(v), 12, 12))
    n = int(rng.integers(4, 10))
    confs = rng.permutation(np.linspace(0.05, 0.95, n))
    for c in confs:
        img = ("i0", "i1", "i2")[int(rng.integers(0, 3))]
        u, v = rng.uniform(0, 80, 2)
        dets.append(_det(img, 1, float(u), float(v), 12, 12, float(c)))
    return dets, gts


def test_ap_invariant_under_monotone_score_remapping():
    rng = np.random.default_rng(12)
    maps = [lambda x: 2 * x + 3, lambda x: x ** 3, math.exp,
            lambda x: x / (1 + x)]
    for _ in range(10):
        dets, gts = _random_fixture(rng)
        base = average_precision(dets, gts)
        for fn in maps:
            remapped = [DetectionResult(d.image_id, d.class_id, d.box,
                                        float(fn(d.confidence))) for d in dets]
            assert average_precision(remapped, gts) == base


def test_allowed_thresholds_grid():
    assert ALLOWED_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8,
                                  0.85, 0.9, 0.95)


def test_map_report_groups_and_none_handling():
    gts = [_gt("a", 1, 0, 0, 10, 10)]
    dets = [_det("a", 1, 0, 0, 10, 10, 0.9)]
    groups = {"old": [1], "new": [2], "all": [1, 2], "empty": []}
    report = map_report(dets, gts, groups)
    assert report.per_class[1][0.5] == 1.0
    assert report.per_class[2][0.5] is None
    assert report.group_map["old"][0.5] == 1.0
    assert report.group_map["new"][0.5] is None   # every member undefined
    assert report.group_map["all"][0.5] == 1.0    # None members excluded
    assert "empty" not in report.group_map
    assert "empty" not in report.background_fp


def test_map_report_threshold_grid_and_range_mean():
    gts = [_gt("a", 1, 0, 0, 10, 10)]
    dets = [_det("a", 1, 0, 0, 10, 6, 0.9)]  # IoU 0.6
    report = map_report(dets, gts, {"all": [1]}, iou_thresholds=(0.5, 0.75))
    assert report.per_class[1][0.5] == 1.0
    assert report.per_class[1][0.75] == 0.0
    assert report.group_map_range["all"] == pytest.approx(0.5)
    with pytest.raises(EvaluationError, match="0.50..0.95"):
        map_report(dets, gts, {"all": [1]}, iou_thresholds=(0.42,))


def test_map_report_serialization():
    gts = [_gt("a", 1, 0, 0, 10, 10)]
    dets = [_det("a", 1, 0, 0, 10, 10, 0.9)]
    report = map_report(dets, gts, {"all": [1]})
    payload = json.loads(report.to_json())
    assert payload["group_map"]["all"]["0.5"] == 1.0
    kinds = {r["kind"] for r in report.to_records()}
    assert kinds == {"class_ap", "group_map", "group_map_range"}


def test_background_fp_count_rules():
    gts = [_gt("a", 1, 0, 0, 10, 10)]
    dets = [
        _det("a", 1, 50, 50, 10, 10, 0.9),   # confident, off-object: counts
        _det("a", 1, 60, 60, 10, 10, 0.4),   # below the confidence floor
        _det("a", 1, 0, 0, 10, 10, 0.9),     # on the object
        _det("a", 1, 0, 0, 10, 30, 0.9),     # IoU 1/3, still on the object
        _det("a", 2, 0, 0, 10, 10, 0.9),     # class 2 has no objects: counts
        _det("b", 1, 0, 0, 10, 10, 0.9),     # image without class-1 objects
    ]
    counts = background_fp_count(dets, gts, {"old": [1], "new": [2],
                                             "all": [1, 2]})
    assert counts == {"old": 2, "new": 1, "all": 3}


def test_manifest_groundtruths_flattening():
    entries = (
        ManifestEntry(image="im0.png", width=64, height=64,
                      objects=(Annotation(box=BoundingBox(u=1, v=2, w=5, h=6),
                                          class_id=1),
                               Annotation(box=BoundingBox(u=8, v=8, w=4, h=4),
                                          class_id=2)),
                      difficult=(False, True)),
        ManifestEntry(image="im1.png", width=64, height=64,
                      objects=(Annotation(box=BoundingBox(u=0, v=0, w=3, h=3),
                                          class_id=1),),
                      difficult=None),
    )
    manifest = DatasetManifest(entries=entries,
                               class_names={"a": 1, "b": 2}, root=".")
    gts = manifest_groundtruths(manifest)
    assert len(gts) == 3
    assert gts[0].image_id == "im0.png" and not gts[0].difficult
    assert gts[1].class_id == 2 and gts[1].difficult
    assert not gts[2].difficult


def test_plots_write_files(tmp_path):
    mem = tmp_path / "memory.png"
    forget = tmp_path / "forgetting.png"
    plot_memory_curve([0, 40, 120], [0.2, 0.45, 0.5], mem)
    plot_forgetting_curves({"task1 classes": [(1, 0.6), (2, 0.4)],
                            "task2 classes": [(2, 0.5)]}, forget)
    assert mem.stat().st_size > 0
    assert forget.stat().st_size > 0
