"""Training objective for incremental detection.

Two ingredient families on top of the standard detector losses:

* Pooled-feature distillation: per proposal, the student's pooled features
  and their spatial attention are pulled toward a frozen teacher's, with the
  squared feature error weighted by the teacher's attention so informative
  regions dominate.
* Inclusive classification/distillation: probability mass on old classes is
  absorbed into background where labels carry no old-class information, so
  unlabeled old objects are neither punished (classification) nor forgotten
  (distillation).

All functions reduce with a mean over proposals, are dtype-preserving (so
float64 finite-difference checks apply directly), and return 0 on empty
batches. Probability vectors are laid out [background, old classes in
introduction order, new classes in introduction order].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

# keeps log() finite if a probability underflows during training; far below
# any real probability so oracle comparisons are unaffected
_LOG_FLOOR = 1e-10

_ROW_SUM_TOLERANCE = 1e-5


class LossInputError(ValueError):
    """Raised for malformed loss inputs (shape or normalization)."""


@dataclass(frozen=True)
class LossWeights:
    """alpha scales inclusive distillation, beta the pooled-feature term,
    gamma the attention norm inside the pooled-feature term."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise LossInputError(f"{name} must be >= 0")


@dataclass(frozen=True)
class SeenClassPartition:
    """How many head slots belong to old vs newly introduced classes."""

    num_old: int
    num_new: int

    def __post_init__(self):
        if self.num_old < 0 or self.num_new < 0:
            raise LossInputError("class counts must be >= 0")

    @property
    def student_width(self) -> int:
        return 1 + self.num_old + self.num_new

    @property
    def teacher_width(self) -> int:
        return 1 + self.num_old

    @property
    def old_slots(self) -> tuple:
        return tuple(range(1, 1 + self.num_old))

    @property
    def new_slots(self) -> tuple:
        return tuple(range(1 + self.num_old, self.student_width))


@dataclass
class ProposalPairBatch:
    """Per-proposal pooled features and attentions for student and teacher.

    Teacher entries must be pooled at the student's proposal boxes (shared
    coordinates make the elementwise differences meaningful) under no-grad.
    """

    student_features: torch.Tensor  # P x C x S x S
    teacher_features: torch.Tensor  # P x C x S x S
    student_attention: torch.Tensor  # P x S x S
    teacher_attention: torch.Tensor  # P x S x S

    def __post_init__(self):
        sf, tf = self.student_features, self.teacher_features
        sa, ta = self.student_attention, self.teacher_attention
        if sf.shape != tf.shape:
            raise LossInputError(
                f"feature shapes differ: {tuple(sf.shape)} vs {tuple(tf.shape)}")
        if sa.shape != ta.shape:
            raise LossInputError(
                f"attention shapes differ: {tuple(sa.shape)} vs {tuple(ta.shape)}")
        if len(sf) != len(sa):
            raise LossInputError(
                f"{len(sf)} feature rows vs {len(sa)} attention rows")
        if sf.dim() != 4 or sa.dim() != 3 or sf.shape[-2:] != sa.shape[-2:]:
            raise LossInputError("expected PxCxSxS features with PxSxS attentions")

    def __len__(self) -> int:
        return self.student_features.shape[0]

    @classmethod
    def from_features(cls, student_features: torch.Tensor,
                      teacher_features: torch.Tensor,
                      p: float = 2.0) -> "ProposalPairBatch":
        from .model import attention_map
        return cls(
            student_features=student_features,
            teacher_features=teacher_features,
            student_attention=attention_map(student_features, p),
            teacher_attention=attention_map(teacher_features, p),
        )


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.sum() * 0.0 if like.numel() else torch.zeros((), dtype=like.dtype)


def pad_loss(batch: ProposalPairBatch) -> torch.Tensor:
    """Mean over proposals of the Frobenius norm of the attention gap."""
    if len(batch) == 0:
        return _zero(batch.student_attention)
    gap = batch.teacher_attention - batch.student_attention
    return torch.linalg.vector_norm(gap.flatten(1), dim=1).mean()


def afd_loss(batch: ProposalPairBatch) -> torch.Tensor:
    """Teacher-attention-weighted squared feature error.

    Per proposal: mean over (channel, s1, s2) of (F_teacher - F_student)^2
    times the teacher attention at (s1, s2); then mean over proposals. Zero
    teacher attention silences the feature gap entirely.
    """
    if len(batch) == 0:
        return _zero(batch.student_features)
    gap2 = (batch.teacher_features - batch.student_features) ** 2
    weighted = gap2 * batch.teacher_attention.unsqueeze(1)
    return weighted.mean(dim=(1, 2, 3)).mean()


def ard_loss(batch: ProposalPairBatch, gamma: float = 1.0) -> torch.Tensor:
    """Feature term plus gamma times the attention-norm term."""
    if gamma < 0:
        raise LossInputError(f"gamma must be >= 0, got {gamma}")
    return afd_loss(batch) + gamma * pad_loss(batch)


def _check_rows(name: str, probs: torch.Tensor) -> None:
    sums = probs.sum(dim=1)
    worst = (sums - 1.0).abs().max().item() if probs.numel() else 0.0
    if worst > _ROW_SUM_TOLERANCE:
        raise LossInputError(
            f"{name} rows must sum to 1 (worst deviation {worst:.2e})")


def inclusive_classification_loss(probabilities: torch.Tensor,
                                  labels: torch.Tensor,
                                  partition: SeenClassPartition,
                                  check_rows: bool = True) -> torch.Tensor:
    """Cross-entropy that lets background proposals park mass on old classes.

    `probabilities` is P x (1 + old + new), rows summing to 1; `labels` holds
    head slot indices with 0 for background. A background-labeled proposal
    pays -log(p_background + sum of old-class p): old-class mass is free
    there, because an unlabeled region may well be an old object. A labeled
    proposal pays the usual -log p[label]. Mean over proposals.
    """
    if probabilities.dim() != 2 or probabilities.shape[1] != partition.student_width:
        raise LossInputError(
            f"expected P x {partition.student_width} probabilities, "
            f"got {tuple(probabilities.shape)}")
    if len(labels) != len(probabilities):
        raise LossInputError(f"{len(labels)} labels for {len(probabilities)} rows")
    if probabilities.shape[0] == 0:
        return _zero(probabilities)
    if labels.numel() and (labels.min() < 0 or labels.max() >= partition.student_width):
        raise LossInputError("labels must be head slot indices")
    if check_rows:
        _check_rows("probability", probabilities)

    old = list(partition.old_slots)
    background_mass = probabilities[:, 0]
    if old:
        background_mass = background_mass + probabilities[:, old].sum(dim=1)
    labeled_mass = probabilities.gather(1, labels.view(-1, 1)).squeeze(1)
    per_proposal = torch.where(
        labels == 0,
        -torch.log(background_mass.clamp(min=_LOG_FLOOR)),
        -torch.log(labeled_mass.clamp(min=_LOG_FLOOR)),
    )
    return per_proposal.mean()


def inclusive_distillation_loss(teacher_probabilities: torch.Tensor,
                                student_probabilities: torch.Tensor,
                                partition: SeenClassPartition,
                                check_rows: bool = True) -> torch.Tensor:
    """Keep the student's old-class beliefs matching the teacher's.

    Teacher rows span [background, old]; student rows span [background, old,
    new]. Per proposal the teacher's background mass scores the student's
    background PLUS new-class mass (a new object was background to the
    teacher), and each old class scores the student's same class. The summed
    cross terms are negated and normalized by the teacher width, then meaned
    over proposals.
    """
    if teacher_probabilities.dim() != 2 \
            or teacher_probabilities.shape[1] != partition.teacher_width:
        raise LossInputError(
            f"expected P x {partition.teacher_width} teacher probabilities, "
            f"got {tuple(teacher_probabilities.shape)}")
    if student_probabilities.dim() != 2 \
            or student_probabilities.shape[1] != partition.student_width:
        raise LossInputError(
            f"expected P x {partition.student_width} student probabilities, "
            f"got {tuple(student_probabilities.shape)}")
    if len(teacher_probabilities) != len(student_probabilities):
        raise LossInputError("teacher and student row counts differ")
    if teacher_probabilities.shape[0] == 0:
        return _zero(student_probabilities)
    if check_rows:
        _check_rows("teacher probability", teacher_probabilities)
        _check_rows("student probability", student_probabilities)

    new = list(partition.new_slots)
    absorbed = student_probabilities[:, 0]
    if new:
        absorbed = absorbed + student_probabilities[:, new].sum(dim=1)
    cross = teacher_probabilities[:, 0] * torch.log(absorbed.clamp(min=_LOG_FLOOR))
    for k, slot in enumerate(partition.old_slots, start=1):
        cross = cross + teacher_probabilities[:, k] * torch.log(
            student_probabilities[:, slot].clamp(min=_LOG_FLOOR))
    omega = partition.teacher_width
    return -(cross.mean()) / omega


def total_loss(detection_loss: torch.Tensor, id_loss_value: torch.Tensor,
               ard_loss_value: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """detection + alpha * inclusive distillation + beta * pooled distillation."""
    return detection_loss + weights.alpha * id_loss_value + weights.beta * ard_loss_value
