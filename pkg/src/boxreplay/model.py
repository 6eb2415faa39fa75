"""Desk-scale two-stage detector with a growable classification head.

Structure: a small strided conv backbone produces one shared feature tensor,
a proposal stage scores dense single-scale anchors at three aspect ratios,
and a two-layer head classifies bilinearly pooled proposal features with
per-class box regression. The head widens as tasks introduce classes: old
rows are copied bit-exactly, new rows get small random weights and a low
initial class probability, so a grown model scores old classes identically
to its predecessor until training moves it.

Images are float32 H x W x 3 in [0, 1]; internally everything runs on
3 x H x W torch tensors, zero-padded on the bottom/right to a stride
multiple (the pad offset is carried alongside the features).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as torch_fn
from torch import nn
from torchvision.ops import box_iou, nms

from .evaluation import DetectionResult
from .geometry import BoundingBox

CHECKPOINT_FORMAT = "boxreplay-checkpoint-v1"

NEW_CLASS_BIAS = -4.0


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    score: float


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """H x W x 3 float array -> 1 x 3 x H x W float32 tensor."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected HxWx3 pixels, got shape {pixels.shape}")
    t = torch.from_numpy(np.array(pixels, dtype=np.float32, copy=True))
    return t.permute(2, 0, 1).unsqueeze(0)


def attention_map(features: torch.Tensor, p: float = 2.0) -> torch.Tensor:
    """Spatial saliency of a pooled feature map: sum over channels of |F|^p.

    Accepts C x S x S (one proposal) or N x C x S x S (a batch); the channel
    axis is reduced either way. Entries are always >= 0.
    """
    if p <= 0:
        raise ValueError(f"attention exponent must be > 0, got {p}")
    if features.dim() == 3:
        return features.abs().pow(p).sum(dim=0)
    if features.dim() == 4:
        return features.abs().pow(p).sum(dim=1)
    raise ValueError(f"expected CxSxS or NxCxSxS features, got {tuple(features.shape)}")


def roi_align_features(features: torch.Tensor, boxes: torch.Tensor,
                       stride: int, output_size: int) -> torch.Tensor:
    """Bilinearly pool each box to output_size^2 from a C x H x W tensor.

    Boxes are (x1, y1, x2, y2) in image coordinates. Each output cell samples
    one bilinear point at its bin center; sample coordinates clamp to the
    feature grid, so pooling any box from a spatially constant tensor returns
    that constant exactly. Degenerate boxes collapse to their center point.
    Differentiable with respect to `features`.
    """
    channels, fh, fw = features.shape
    n = boxes.shape[0]
    if n == 0:
        return features.new_zeros((0, channels, output_size, output_size))
    x1, y1, x2, y2 = boxes.unbind(dim=1)
    bw = (x2 - x1).clamp(min=1e-6)
    bh = (y2 - y1).clamp(min=1e-6)
    steps = torch.arange(output_size, dtype=features.dtype, device=features.device)
    # bin centers in image coordinates, then shifted onto the feature grid
    cx = x1[:, None] + (steps[None, :] + 0.5) * bw[:, None] / output_size
    cy = y1[:, None] + (steps[None, :] + 0.5) * bh[:, None] / output_size
    gx = (cx / stride - 0.5).clamp(0, fw - 1)
    gy = (cy / stride - 0.5).clamp(0, fh - 1)

    x0 = gx.floor().clamp(0, fw - 1)
    y0 = gy.floor().clamp(0, fh - 1)
    x1i = (x0 + 1).clamp(max=fw - 1)
    y1i = (y0 + 1).clamp(max=fh - 1)
    ax = (gx - x0).view(n, 1, output_size)
    ay = (gy - y0).view(n, output_size, 1)

    def gather(yy, xx):
        # yy: N x S (rows), xx: N x S (cols) -> N x C x S x S
        yi = yy.long().view(n, output_size, 1).expand(n, output_size, output_size)
        xi = xx.long().view(n, 1, output_size).expand(n, output_size, output_size)
        flat = (yi * fw + xi).reshape(n, -1)
        out = features.reshape(channels, -1)[:, flat]
        return out.reshape(channels, n, output_size, output_size).permute(1, 0, 2, 3)

    top = gather(y0, x0) * (1 - ax.unsqueeze(1)) + gather(y0, x1i) * ax.unsqueeze(1)
    bot = gather(y1i, x0) * (1 - ax.unsqueeze(1)) + gather(y1i, x1i) * ax.unsqueeze(1)
    return top * (1 - ay.unsqueeze(1)) + bot * ay.unsqueeze(1)


def encode_boxes(anchors: torch.Tensor, targets: torch.Tensor,
                 weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Standard (dx, dy, dw, dh) parameterization of targets against anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + tw / 2
    ty = targets[:, 1] + th / 2
    wx, wy, ww, wh = weights
    return torch.stack([
        wx * (tx - ax) / aw,
        wy * (ty - ay) / ah,
        ww * torch.log(tw / aw),
        wh * torch.log(th / ah),
    ], dim=1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor,
                 weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    wx, wy, ww, wh = weights
    dx, dy, dw, dh = deltas.unbind(dim=1)
    # cap growth so untrained deltas cannot overflow exp
    dw = (dw / ww).clamp(max=4.0)
    dh = (dh / wh).clamp(max=4.0)
    cx = ax + dx / wx * aw
    cy = ay + dy / wy * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def new_row_parameters(num_new: int, cls_in: int, reg_in: int, seed: int):
    """Initial parameters for freshly grown head rows.

    Classification rows: weights ~ N(0, 0.01), bias NEW_CLASS_BIAS so the
    untrained class draws little probability. Regression rows (4 per class):
    weights ~ N(0, 0.001), bias 0. The draw order is fixed so the same seed
    always reproduces the same rows.
    """
    gen = torch.Generator().manual_seed(seed)
    cls_w = torch.empty(num_new, cls_in).normal_(0.0, 0.01, generator=gen)
    cls_b = torch.full((num_new,), NEW_CLASS_BIAS)
    reg_w = torch.empty(4 * num_new, reg_in).normal_(0.0, 0.001, generator=gen)
    reg_b = torch.zeros(4 * num_new)
    return cls_w, cls_b, reg_w, reg_b


class _Backbone(nn.Module):
    """Four conv blocks, overall stride 8. Group norm keeps small batches stable."""

    def __init__(self, channels: int):
        super().__init__()
        widths = (32, 48, channels, channels)
        strides = (2, 2, 2, 1)
        layers = []
        prev = 3
        for width, stride in zip(widths, strides):
            layers += [
                nn.Conv2d(prev, width, 3, stride=stride, padding=1),
                nn.GroupNorm(8, width),
                nn.ReLU(inplace=True),
            ]
            prev = width
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class _ProposalHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, 1)

    def forward(self, x):
        x = torch_fn.relu(self.conv(x))
        return self.objectness(x), self.deltas(x)


class TwoStageDetector(nn.Module):
    """Backbone + proposal stage + pooled-feature head over `seen_classes`.

    `seen_classes` lists dataset class ids in introduction order; head slot 0
    is background and slot k scores seen_classes[k-1].
    """

    STRIDE = 8
    BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)

    def __init__(self, seen_classes, feature_channels: int = 64,
                 anchor_size: float = 16.0, aspect_ratios=(0.5, 1.0, 2.0),
                 roi_size: int = 7, proposals_per_image: int = 64,
                 seed: int = 0):
        super().__init__()
        self.seen_classes = tuple(int(c) for c in seen_classes)
        if len(set(self.seen_classes)) != len(self.seen_classes):
            raise ValueError("seen_classes must be distinct")
        self.feature_channels = feature_channels
        self.anchor_size = float(anchor_size)
        self.aspect_ratios = tuple(float(r) for r in aspect_ratios)
        self.roi_size = roi_size
        self.proposals_per_image = proposals_per_image
        self.init_seed = seed

        # deterministic construction without touching the caller's RNG stream
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = _Backbone(feature_channels)
            self.rpn = _ProposalHead(feature_channels, len(self.aspect_ratios))
            head_in = feature_channels * roi_size * roi_size
            self.head_fc = nn.Linear(head_in, 256)
            width = len(self.seen_classes) + 1
            self.cls_head = nn.Linear(256, width)
            self.reg_head = nn.Linear(256, 4 * width)
            nn.init.normal_(self.cls_head.weight, std=0.01)
            nn.init.zeros_(self.cls_head.bias)
            nn.init.normal_(self.reg_head.weight, std=0.001)
            nn.init.zeros_(self.reg_head.bias)

    # ------------------------------------------------------------------ slots

    @property
    def num_slots(self) -> int:
        return len(self.seen_classes) + 1

    def slot_of(self, class_id: int) -> int:
        return self.seen_classes.index(class_id) + 1

    # ------------------------------------------------------------- feature map

    def feature_map(self, images: torch.Tensor):
        """Backbone features for a batch, zero-padding to a stride multiple.

        Returns (features B x C x h x w, (pad_bottom, pad_right)).
        """
        _, _, h, w = images.shape
        pad_b = (-h) % self.STRIDE
        pad_r = (-w) % self.STRIDE
        if pad_b or pad_r:
            images = torch_fn.pad(images, (0, pad_r, 0, pad_b))
        return self.backbone(images), (pad_b, pad_r)

    def _anchors(self, fh: int, fw: int, device) -> torch.Tensor:
        """All anchors for an fh x fw feature grid, (A*fh*fw) x 4 xyxy."""
        shifts_x = (torch.arange(fw, device=device) + 0.5) * self.STRIDE
        shifts_y = (torch.arange(fh, device=device) + 0.5) * self.STRIDE
        sizes = []
        for ratio in self.aspect_ratios:
            w = self.anchor_size / math.sqrt(ratio)
            h = self.anchor_size * math.sqrt(ratio)
            sizes.append((w, h))
        sizes = torch.tensor(sizes, device=device)
        cy, cx = torch.meshgrid(shifts_y, shifts_x, indexing="ij")
        centers = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2)
        half = sizes.reshape(1, -1, 2) / 2
        lo = centers - half
        hi = centers + half
        return torch.cat([lo, hi], dim=-1).reshape(-1, 4)

    def _flatten_rpn(self, objectness, deltas):
        """B x A x h x w maps -> B x (h*w*A) aligned with _anchors order."""
        b, a, fh, fw = objectness.shape
        obj = objectness.permute(0, 2, 3, 1).reshape(b, -1)
        del_ = deltas.reshape(b, a, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
        return obj, del_

    def propose(self, features: torch.Tensor, image_sizes, top_k=None):
        """Score anchors and return per-image proposal boxes and scores.

        image_sizes is a list of (height, width) before padding; boxes are
        clipped to those bounds. Proposals come back sorted by descending
        objectness after 0.7-IoU suppression, truncated to top_k.
        """
        if top_k is None:
            top_k = self.proposals_per_image
        objectness, deltas = self.rpn(features)
        obj, del_ = self._flatten_rpn(objectness, deltas)
        anchors = self._anchors(features.shape[2], features.shape[3], features.device)
        out = []
        for i, (h, w) in enumerate(image_sizes):
            scores = obj[i].detach()
            boxes = decode_boxes(anchors, del_[i].detach())
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
            keep = (boxes[:, 2] - boxes[:, 0] >= 2) & (boxes[:, 3] - boxes[:, 1] >= 2)
            boxes, scores = boxes[keep], scores[keep]
            if boxes.shape[0] > 256:
                scores, order = scores.topk(256)
                boxes = boxes[order]
            keep = nms(boxes, scores, 0.7)[:top_k]
            out.append((boxes[keep], scores[keep]))
        return out

    def forward(self, pixels: np.ndarray, top_k=None):
        """Single-image pass: (shared feature tensor, proposals).

        Proposals are sorted by descending objectness and lie inside the
        image. Deterministic in evaluation mode.
        """
        images = to_tensor(pixels)
        features, _ = self.feature_map(images)
        (boxes, scores), = self.propose(
            features, [pixels.shape[:2]], top_k=top_k)
        proposals = []
        for box, score in zip(boxes.tolist(), scores.tolist()):
            x1, y1, x2, y2 = box
            proposals.append(Proposal(
                box=BoundingBox(u=x1, v=y1, w=max(x2 - x1, 1e-3), h=max(y2 - y1, 1e-3)),
                score=float(score)))
        return features, proposals

    def roi_pool(self, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """Pool boxes (xyxy, image coords) from one image's C x h x w features."""
        if features.dim() == 4:
            features = features[0]
        return roi_align_features(features, boxes, self.STRIDE, self.roi_size)

    def head(self, pooled: torch.Tensor):
        """Pooled N x C x S x S features -> (class logits N x slots, deltas N x slots x 4)."""
        x = torch_fn.relu(self.head_fc(pooled.flatten(1)))
        logits = self.cls_head(x)
        deltas = self.reg_head(x).reshape(-1, self.num_slots, 4)
        return logits, deltas

    # ------------------------------------------------------------ target rules

    def rpn_targets(self, anchors: torch.Tensor, gt: torch.Tensor):
        """Anchor labels (1 pos, 0 neg, -1 ignore) and matched gt index."""
        labels = torch.full((anchors.shape[0],), -1, dtype=torch.int64)
        if gt.shape[0] == 0:
            labels[:] = 0
            return labels, torch.zeros_like(labels)
        ious = box_iou(anchors, gt)
        best_iou, best_gt = ious.max(dim=1)
        labels[best_iou <= 0.3] = 0
        labels[best_iou >= 0.7] = 1
        # with a single anchor scale the best anchor per object must count
        labels[ious.argmax(dim=0)] = 1
        return labels, best_gt

    def rpn_losses(self, features: torch.Tensor, image_sizes, gt_boxes,
                   sample_size: int = 64):
        """Objectness + box losses over sampled anchors, meaned over the batch."""
        objectness, deltas = self.rpn(features)
        obj, del_ = self._flatten_rpn(objectness, deltas)
        anchors = self._anchors(features.shape[2], features.shape[3], features.device)
        cls_terms, reg_terms = [], []
        for i in range(obj.shape[0]):
            gt = gt_boxes[i]
            labels, best_gt = self.rpn_targets(anchors, gt)
            pos = torch.nonzero(labels == 1).squeeze(1)
            neg = torch.nonzero(labels == 0).squeeze(1)
            pos = pos[torch.randperm(pos.numel())[:sample_size // 2]]
            neg = neg[torch.randperm(neg.numel())[:sample_size - pos.numel()]]
            chosen = torch.cat([pos, neg])
            targets = torch.zeros(chosen.numel(), device=obj.device)
            targets[:pos.numel()] = 1.0
            cls_terms.append(torch_fn.binary_cross_entropy_with_logits(
                obj[i][chosen], targets))
            if pos.numel():
                enc = encode_boxes(anchors[pos], gt[best_gt[pos]])
                reg_terms.append(torch_fn.smooth_l1_loss(del_[i][pos], enc))
        cls_loss = torch.stack(cls_terms).mean()
        reg_loss = (torch.stack(reg_terms).mean() if reg_terms
                    else obj.sum() * 0.0)
        return cls_loss, reg_loss

    def sample_head_targets(self, proposals: torch.Tensor, gt_boxes: torch.Tensor,
                            gt_slots: torch.Tensor, batch_size: int = 32,
                            positive_fraction: float = 0.25):
        """Match proposals (gt appended) to targets and subsample for the head.

        Returns (boxes N x 4, label slots N, regression targets N x 4 valid
        where label > 0). Proposals with IoU >= 0.5 take the matched object's
        slot; the rest are background.
        """
        boxes = torch.cat([proposals, gt_boxes]) if gt_boxes.numel() else proposals
        labels = torch.zeros(boxes.shape[0], dtype=torch.int64)
        reg_targets = torch.zeros(boxes.shape[0], 4)
        if gt_boxes.shape[0]:
            ious = box_iou(boxes, gt_boxes)
            best_iou, best_gt = ious.max(dim=1)
            pos_mask = best_iou >= 0.5
            labels[pos_mask] = gt_slots[best_gt[pos_mask]]
            reg_targets[pos_mask] = encode_boxes(
                boxes[pos_mask], gt_boxes[best_gt[pos_mask]], self.BOX_WEIGHTS)
        pos = torch.nonzero(labels > 0).squeeze(1)
        neg = torch.nonzero(labels == 0).squeeze(1)
        num_pos = min(pos.numel(), int(batch_size * positive_fraction))
        pos = pos[torch.randperm(pos.numel())[:num_pos]]
        neg = neg[torch.randperm(neg.numel())[:batch_size - num_pos]]
        chosen = torch.cat([pos, neg])
        return boxes[chosen], labels[chosen], reg_targets[chosen]

    def head_regression_loss(self, deltas: torch.Tensor, labels: torch.Tensor,
                             reg_targets: torch.Tensor) -> torch.Tensor:
        """Smooth L1 on the matched class's delta row, positives only."""
        pos = torch.nonzero(labels > 0).squeeze(1)
        if pos.numel() == 0:
            return deltas.sum() * 0.0
        picked = deltas[pos, labels[pos]]
        return torch_fn.smooth_l1_loss(picked, reg_targets[pos])

    # --------------------------------------------------------------- inference

    @torch.no_grad()
    def detect(self, pixels: np.ndarray, image_id: str = "",
               score_threshold: float = 0.05, nms_threshold: float = 0.5,
               max_detections: int = 100):
        """Full eval-mode inference on one image, list of DetectionResult."""
        was_training = self.training
        self.eval()
        try:
            images = to_tensor(pixels)
            h, w = pixels.shape[:2]
            features, _ = self.feature_map(images)
            (boxes, _), = self.propose(features, [(h, w)])
            if boxes.shape[0] == 0:
                return []
            pooled = self.roi_pool(features, boxes)
            logits, deltas = self.head(pooled)
            probs = torch_fn.softmax(logits, dim=1)
            results = []
            for slot in range(1, self.num_slots):
                refined = decode_boxes(boxes, deltas[:, slot], self.BOX_WEIGHTS)
                refined[:, 0::2] = refined[:, 0::2].clamp(0, w)
                refined[:, 1::2] = refined[:, 1::2].clamp(0, h)
                scores = probs[:, slot]
                keep = (scores >= score_threshold) \
                    & (refined[:, 2] - refined[:, 0] >= 1) \
                    & (refined[:, 3] - refined[:, 1] >= 1)
                rb, rs = refined[keep], scores[keep]
                for j in nms(rb, rs, nms_threshold).tolist():
                    x1, y1, x2, y2 = rb[j].tolist()
                    results.append(DetectionResult(
                        image_id=image_id,
                        class_id=self.seen_classes[slot - 1],
                        box=BoundingBox(u=x1, v=y1, w=x2 - x1, h=y2 - y1),
                        confidence=float(rs[j])))
            results.sort(key=lambda r: -r.confidence)
            return results[:max_detections]
        finally:
            self.train(was_training)

    @torch.no_grad()
    def pool_boxes(self, pixels: np.ndarray, boxes) -> torch.Tensor:
        """Pooled features of given BoundingBoxes; used for exemplar scoring."""
        was_training = self.training
        self.eval()
        try:
            images = to_tensor(pixels)
            features, _ = self.feature_map(images)
            t = torch.tensor([b.as_xyxy() for b in boxes], dtype=torch.float32)
            return self.roi_pool(features, t)
        finally:
            self.train(was_training)

    # ------------------------------------------------------- growth / snapshot

    def grow_head(self, new_class_ids, seed: int = 0) -> None:
        """Widen both head layers for new classes; old rows stay bit-identical."""
        new_ids = [int(c) for c in new_class_ids]
        if not new_ids:
            return
        overlap = set(new_ids) & set(self.seen_classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} already present")
        cls_w, cls_b, reg_w, reg_b = new_row_parameters(
            len(new_ids), self.cls_head.in_features, self.reg_head.in_features, seed)
        new_cls = nn.Linear(self.cls_head.in_features,
                            self.cls_head.out_features + len(new_ids))
        new_reg = nn.Linear(self.reg_head.in_features,
                            self.reg_head.out_features + 4 * len(new_ids))
        with torch.no_grad():
            new_cls.weight[:self.cls_head.out_features] = self.cls_head.weight
            new_cls.bias[:self.cls_head.out_features] = self.cls_head.bias
            new_cls.weight[self.cls_head.out_features:] = cls_w
            new_cls.bias[self.cls_head.out_features:] = cls_b
            new_reg.weight[:self.reg_head.out_features] = self.reg_head.weight
            new_reg.bias[:self.reg_head.out_features] = self.reg_head.bias
            new_reg.weight[self.reg_head.out_features:] = reg_w
            new_reg.bias[self.reg_head.out_features:] = reg_b
        self.cls_head = new_cls
        self.reg_head = new_reg
        self.seen_classes = self.seen_classes + tuple(new_ids)

    def snapshot(self) -> "TwoStageDetector":
        """Frozen eval-mode deep copy for use as a distillation teacher."""
        frozen = copy.deepcopy(self)
        frozen.eval()
        for p in frozen.parameters():
            p.requires_grad_(False)
        return frozen

    def config(self) -> dict:
        return {
            "feature_channels": self.feature_channels,
            "anchor_size": self.anchor_size,
            "aspect_ratios": list(self.aspect_ratios),
            "roi_size": self.roi_size,
            "proposals_per_image": self.proposals_per_image,
        }


def save_checkpoint(model: TwoStageDetector, path, step: int = 0,
                    extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "seen_classes": list(model.seen_classes),
        "head_width": model.num_slots,
        "step": int(step),
        "config": model.config(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[TwoStageDetector, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    fmt = payload.get("format")
    if fmt != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {fmt!r}, "
                         f"expected {CHECKPOINT_FORMAT!r}")
    model = TwoStageDetector(payload["seen_classes"], **payload["config"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
