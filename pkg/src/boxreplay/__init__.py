"""Incremental object detection with a box-exemplar replay memory."""

__version__ = "0.1.0"

from .buffer import BUFFER_FORMAT, BoxBuffer, BoxExemplar, select_exemplars
from .estimator import BoxReplayDetector
from .evaluation import DetectionResult, GroundTruthBox, average_precision, \
    map_report
from .geometry import AnnotatedImage, Annotation, BoundingBox, iou
from .manifest import DatasetManifest, load_manifest, save_manifest
from .model import CHECKPOINT_FORMAT, TwoStageDetector, load_checkpoint, \
    save_checkpoint
from .protocol import ProtocolPlan, TaskSpec, parse_plan, split_tasks
from .trainer import TaskRunRecord, TrainConfig, run_protocol, train_task

__all__ = [
    "BUFFER_FORMAT",
    "CHECKPOINT_FORMAT",
    "AnnotatedImage",
    "Annotation",
    "BoundingBox",
    "BoxBuffer",
    "BoxExemplar",
    "BoxReplayDetector",
    "DatasetManifest",
    "DetectionResult",
    "GroundTruthBox",
    "ProtocolPlan",
    "TaskRunRecord",
    "TaskSpec",
    "TrainConfig",
    "TwoStageDetector",
    "average_precision",
    "iou",
    "load_checkpoint",
    "load_manifest",
    "map_report",
    "parse_plan",
    "run_protocol",
    "save_checkpoint",
    "save_manifest",
    "select_exemplars",
    "split_tasks",
    "train_task",
]
