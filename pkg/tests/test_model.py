import numpy as np
import pytest
import torch

from oracles import attention_map_oracle

from boxreplay.evaluation import DetectionResult
from boxreplay.geometry import BoundingBox
from boxreplay.model import (
    CHECKPOINT_FORMAT,
    NEW_CLASS_BIAS,
    TwoStageDetector,
    attention_map,
    decode_boxes,
    encode_boxes,
    load_checkpoint,
    new_row_parameters,
    roi_align_features,
    save_checkpoint,
    to_tensor,
)


def _pixels(h=64, w=64, value=0.3):
    return np.full((h, w, 3), np.float32(value), dtype=np.float32)


def test_to_tensor_layout():
    px = np.zeros((5, 7, 3), dtype=np.float32)
    px[2, 3, 1] = 0.5
    t = to_tensor(px)
    assert t.shape == (1, 3, 5, 7)
    assert t.dtype == torch.float32
    assert t[0, 1, 2, 3] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        to_tensor(np.zeros((5, 7), dtype=np.float32))


def test_attention_map_hand_example():
    f = torch.tensor([[[1.0, -2.0]], [[3.0, 0.5]]])  # 2 x 1 x 2
    a = attention_map(f, p=2.0)
    assert a.shape == (1, 2)
    assert a[0, 0] == pytest.approx(1.0 + 9.0)
    assert a[0, 1] == pytest.approx(4.0 + 0.25)


def test_attention_map_matches_oracle_and_batches():
    rng = np.random.default_rng(0)
    for p in (1.0, 2.0, 3.0):
        f = rng.normal(size=(4, 3, 3))
        got = attention_map(torch.from_numpy(f), p=p).numpy()
        want = np.array(attention_map_oracle(f.tolist(), p))
        assert np.allclose(got, want, rtol=1e-12)
    batched = attention_map(torch.from_numpy(rng.normal(size=(5, 4, 3, 3))))
    assert batched.shape == (5, 3, 3)
    assert (batched >= 0).all()
    with pytest.raises(ValueError):
        attention_map(torch.zeros(3, 3))
    with pytest.raises(ValueError):
        attention_map(torch.zeros(2, 3, 3), p=0.0)


def test_roi_align_constant_field_is_exact():
    features = torch.full((3, 8, 8), 1.75)
    boxes = torch.tensor([[3.0, 5.0, 40.0, 21.0], [0.0, 0.0, 64.0, 64.0],
                          [10.0, 10.0, 10.0, 10.0]])  # last one degenerate
    pooled = roi_align_features(features, boxes, stride=8, output_size=7)
    assert pooled.shape == (3, 3, 7, 7)
    assert torch.equal(pooled, torch.full_like(pooled, 1.75))


def test_roi_align_linear_ramp():
    # f(y, x) = x on the feature grid; bilinear sampling reproduces the bin
    # center coordinates exactly for an interior box
    ramp = torch.arange(8, dtype=torch.float32).repeat(8, 1).unsqueeze(0)
    box = torch.tensor([[0.0, 0.0, 64.0, 64.0]])
    pooled = roi_align_features(ramp, box, stride=8, output_size=4)
    centers = (torch.arange(4) + 0.5) * 16.0 / 8.0 - 0.5  # 1.5 3.5 5.5 7.5
    expected = centers.clamp(0, 7)
    assert torch.allclose(pooled[0, 0, 0], expected, atol=1e-6)
    # rows identical since the field has no y dependence
    assert torch.allclose(pooled[0, 0], expected.expand(4, 4))


def test_roi_align_backpropagates():
    features = torch.randn(2, 6, 6, requires_grad=True)
    boxes = torch.tensor([[4.0, 4.0, 30.0, 30.0]])
    pooled = roi_align_features(features, boxes, stride=8, output_size=3)
    pooled.sum().backward()
    assert features.grad is not None
    assert torch.isfinite(features.grad).all()
    assert features.grad.abs().sum() > 0


def test_roi_align_empty_boxes():
    out = roi_align_features(torch.zeros(2, 4, 4), torch.zeros(0, 4), 8, 7)
    assert out.shape == (0, 2, 7, 7)


def test_encode_decode_roundtrip():
    torch.manual_seed(1)
    anchors = torch.rand(20, 2) * 40
    anchors = torch.cat([anchors, anchors + 8 + torch.rand(20, 2) * 30], dim=1)
    targets = torch.rand(20, 2) * 40
    targets = torch.cat([targets, targets + 6 + torch.rand(20, 2) * 40], dim=1)
    for weights in ((1.0, 1.0, 1.0, 1.0), TwoStageDetector.BOX_WEIGHTS):
        deltas = encode_boxes(anchors, targets, weights)
        back = decode_boxes(anchors, deltas, weights)
        assert torch.allclose(back, targets, atol=1e-4)


def test_decode_caps_scale_growth():
    anchors = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    deltas = torch.tensor([[0.0, 0.0, 50.0, 50.0]])
    out = decode_boxes(anchors, deltas)
    assert (out[0, 2] - out[0, 0]) == pytest.approx(10.0 * np.exp(4.0), rel=1e-5)


def test_anchor_grid_geometry():
    model = TwoStageDetector([1, 2])
    anchors = model._anchors(2, 3, torch.device("cpu"))
    assert anchors.shape == (2 * 3 * 3, 4)
    w = anchors[:, 2] - anchors[:, 0]
    h = anchors[:, 3] - anchors[:, 1]
    assert torch.allclose(w * h, torch.full_like(w, model.anchor_size ** 2),
                          rtol=1e-5)
    ratios = (h / w)[:3]
    assert torch.allclose(ratios, torch.tensor([0.5, 1.0, 2.0]), rtol=1e-5)
    cx = (anchors[:, 0] + anchors[:, 2]) / 2
    cy = (anchors[:, 1] + anchors[:, 3]) / 2
    assert cx[0] == pytest.approx(4.0) and cy[0] == pytest.approx(4.0)
    # next anchor trio shifts one stride right
    assert cx[3] == pytest.approx(12.0) and cy[3] == pytest.approx(4.0)


def test_new_row_parameters_deterministic():
    a = new_row_parameters(3, 16, 16, seed=7)
    b = new_row_parameters(3, 16, 16, seed=7)
    c = new_row_parameters(3, 16, 16, seed=8)
    for x, y in zip(a, b):
        assert torch.equal(x, y)
    assert not torch.equal(a[0], c[0])
    assert torch.equal(a[1], torch.full((3,), NEW_CLASS_BIAS))
    assert a[0].shape == (3, 16) and a[2].shape == (12, 16)
    assert torch.equal(a[3], torch.zeros(12))


def test_construction_is_seeded_and_rng_isolated():
    m1 = TwoStageDetector([1, 2, 3], seed=11)
    m2 = TwoStageDetector([1, 2, 3], seed=11)
    for k, v in m1.state_dict().items():
        assert torch.equal(v, m2.state_dict()[k]), k
    m3 = TwoStageDetector([1, 2, 3], seed=12)
    assert not torch.equal(m1.cls_head.weight, m3.cls_head.weight)
    # building a model must not consume from the ambient torch stream
    torch.manual_seed(99)
    before = torch.rand(4)
    torch.manual_seed(99)
    TwoStageDetector([1], seed=5)
    after = torch.rand(4)
    assert torch.equal(before, after)


def test_feature_map_pads_to_stride():
    model = TwoStageDetector([1])
    images = torch.zeros(1, 3, 50, 70)
    features, (pad_b, pad_r) = model.feature_map(images)
    assert (pad_b, pad_r) == (6, 2)
    assert features.shape == (1, model.feature_channels, 7, 9)


def test_forward_contract():
    model = TwoStageDetector([1, 2], seed=3).eval()
    px = _pixels()
    px[20:40, 20:40] = 0.9
    features, proposals = model(px, top_k=5)
    assert features.shape[1] == model.feature_channels
    assert len(proposals) <= 5
    scores = [p.score for p in proposals]
    assert scores == sorted(scores, reverse=True)
    for p in proposals:
        assert p.box.u >= 0 and p.box.v >= 0
        assert p.box.u2 <= 64 + 1e-3 and p.box.v2 <= 64 + 1e-3
    _, again = model(px, top_k=5)
    assert [(p.box.as_xyxy(), p.score) for p in again] \
        == [(p.box.as_xyxy(), p.score) for p in proposals]


def test_slot_mapping_and_grow_head():
    model = TwoStageDetector([3, 7], seed=0)
    assert model.num_slots == 3
    assert model.slot_of(3) == 1 and model.slot_of(7) == 2
    pooled = torch.randn(2, model.feature_channels, model.roi_size, model.roi_size)
    logits_before, deltas_before = model.head(pooled)
    model.grow_head([9, 2], seed=4)
    assert model.seen_classes == (3, 7, 9, 2)
    assert model.slot_of(9) == 3 and model.slot_of(2) == 4
    logits_after, deltas_after = model.head(pooled)
    assert torch.equal(logits_after[:, :3], logits_before)
    assert torch.equal(deltas_after[:, :3], deltas_before)
    # fresh rows reproduce the seeded initializer
    cls_w, cls_b, reg_w, reg_b = new_row_parameters(
        2, model.cls_head.in_features, model.reg_head.in_features, seed=4)
    assert torch.equal(model.cls_head.weight[3:], cls_w)
    assert torch.equal(model.cls_head.bias[3:], cls_b)
    assert torch.equal(model.reg_head.weight[12:], reg_w)
    assert torch.equal(model.reg_head.bias[12:], reg_b)


def test_grow_head_rejects_duplicates_and_ignores_empty():
    model = TwoStageDetector([1, 2])
    head = model.cls_head
    model.grow_head([])
    assert model.cls_head is head
    with pytest.raises(ValueError):
        model.grow_head([2, 5])


def test_rpn_targets_rules():
    model = TwoStageDetector([1])
    anchors = torch.tensor([
        [10.0, 10.0, 26.0, 26.0],   # exactly the gt
        [12.0, 12.0, 28.0, 28.0],   # heavy overlap
        [50.0, 50.0, 60.0, 60.0],   # far away
    ])
    gt = torch.tensor([[10.0, 10.0, 26.0, 26.0]])
    labels, best = model.rpn_targets(anchors, gt)
    assert labels[0] == 1       # best anchor always positive
    assert labels[2] == 0
    assert best[0] == 0
    labels, _ = model.rpn_targets(anchors, torch.zeros(0, 4))
    assert (labels == 0).all()


def test_rpn_losses_finite_and_differentiable():
    model = TwoStageDetector([1], seed=2)
    images = torch.rand(2, 3, 64, 64)
    features, _ = model.feature_map(images)
    gt = [torch.tensor([[8.0, 8.0, 30.0, 30.0]]), torch.zeros(0, 4)]
    torch.manual_seed(0)
    cls_loss, reg_loss = model.rpn_losses(features, [(64, 64)] * 2, gt)
    assert torch.isfinite(cls_loss) and torch.isfinite(reg_loss)
    (cls_loss + reg_loss).backward()
    assert model.rpn.objectness.weight.grad is not None


def test_sample_head_targets_matches_groundtruth():
    model = TwoStageDetector([4, 6], seed=1)
    proposals = torch.tensor([[0.0, 0.0, 10.0, 10.0], [40.0, 40.0, 60.0, 60.0]])
    gt = torch.tensor([[40.0, 40.0, 60.0, 60.0]])
    slots = torch.tensor([2])
    torch.manual_seed(3)
    boxes, labels, regs = model.sample_head_targets(proposals, gt, slots,
                                                    batch_size=8)
    assert boxes.shape[0] == labels.shape[0] == regs.shape[0]
    assert (labels == 2).sum() >= 1           # gt box joins and matches itself
    assert torch.equal(regs[labels == 2][0], torch.zeros(4))
    assert (labels == 0).sum() >= 1


def test_head_regression_loss_zero_on_exact_match():
    model = TwoStageDetector([1])
    deltas = torch.zeros(3, model.num_slots, 4)
    deltas[0, 1] = torch.tensor([0.5, -0.25, 0.1, 0.2])
    labels = torch.tensor([1, 0, 0])
    targets = torch.zeros(3, 4)
    targets[0] = deltas[0, 1]
    assert model.head_regression_loss(deltas, labels, targets) == 0.0
    none_pos = model.head_regression_loss(deltas, torch.zeros(3, dtype=torch.int64),
                                          targets)
    assert none_pos == 0.0


def test_detect_contract():
    model = TwoStageDetector([1, 2], seed=6)
    model.train()
    px = _pixels()
    px[10:30, 10:30] = 0.95
    results = model.detect(px, image_id="im0", score_threshold=0.0)
    assert model.training  # mode restored
    assert len(results) <= 100
    for r in results:
        assert isinstance(r, DetectionResult)
        assert r.image_id == "im0"
        assert r.class_id in (1, 2)
        assert 0.0 <= r.confidence <= 1.0
        assert r.box.u2 <= 64 + 1e-3 and r.box.v2 <= 64 + 1e-3
    confs = [r.confidence for r in results]
    assert confs == sorted(confs, reverse=True)


def test_pool_boxes_shape():
    model = TwoStageDetector([1])
    boxes = [BoundingBox(u=4, v=4, w=16, h=16), BoundingBox(u=0, v=0, w=64, h=64)]
    pooled = model.pool_boxes(_pixels(), boxes)
    assert pooled.shape == (2, model.feature_channels, model.roi_size,
                            model.roi_size)


def test_checkpoint_roundtrip(tmp_path):
    model = TwoStageDetector([5, 1, 9], seed=13)
    path = tmp_path / "model.pt"
    save_checkpoint(model, path, step=42, extra={"task": 2})
    loaded, payload = load_checkpoint(path)
    assert payload["format"] == CHECKPOINT_FORMAT
    assert payload["step"] == 42 and payload["extra"] == {"task": 2}
    assert loaded.seen_classes == (5, 1, 9)
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k]), k


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"format": "something-else"}, path)
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(path)


def test_snapshot_is_frozen_copy():
    model = TwoStageDetector([1, 2], seed=0)
    frozen = model.snapshot()
    assert not frozen.training
    assert all(not p.requires_grad for p in frozen.parameters())
    assert torch.equal(frozen.cls_head.weight, model.cls_head.weight)
    with torch.no_grad():
        model.cls_head.weight += 1.0
    assert not torch.equal(frozen.cls_head.weight, model.cls_head.weight)
