"""Estimator-style wrapper: fit a task sequence, predict boxes, score mAP.

`BoxReplayDetector` follows the scikit-learn parameter conventions
(constructor stores hyperparameters verbatim, `fit` returns self, fitted
state lives in trailing-underscore attributes), so it composes with
sklearn model-selection utilities that only need fit/score.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .evaluation import manifest_groundtruths, map_report
from .losses import LossWeights
from .manifest import DatasetManifest
from .model import load_checkpoint
from .trainer import TrainConfig, run_protocol


class BoxReplayDetector(BaseEstimator):
    """Incremental detector trained over a class-incremental task plan.

    Parameters mirror the flat config keys; `plan` takes the same forms as
    protocol.resolve_plan ("A-B" counts, a plan file path, or a ProtocolPlan).
    """

    def __init__(self, plan="4-4", iterations=300, lr_initial=5e-3,
                 lr_subsequent=2e-3, batch_size=4, capacity=120,
                 selection="prototype", alpha=1.0, beta=1.0, gamma=1.0,
                 classification="inclusive", score_threshold=0.05,
                 seed=0, run_dir=None):
        self.plan = plan
        self.iterations = iterations
        self.lr_initial = lr_initial
        self.lr_subsequent = lr_subsequent
        self.batch_size = batch_size
        self.capacity = capacity
        self.selection = selection
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.classification = classification
        self.score_threshold = score_threshold
        self.seed = seed
        self.run_dir = run_dir

    def _config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, lr_initial=self.lr_initial,
            lr_subsequent=self.lr_subsequent, batch_size=self.batch_size,
            capacity=self.capacity, selection=self.selection,
            weights=LossWeights(alpha=self.alpha, beta=self.beta,
                                gamma=self.gamma),
            classification=self.classification,
            score_threshold=self.score_threshold, seed=self.seed)

    def fit(self, X: DatasetManifest, y=None, test_manifest=None):
        """Run the full task protocol over the manifest `X`."""
        run_dir = self.run_dir or tempfile.mkdtemp(prefix="boxreplay-fit-")
        records = run_protocol(X, self.plan, self._config(), run_dir,
                               test_manifest=test_manifest)
        self.records_ = records
        self.run_dir_ = str(run_dir)
        self.model_, _ = load_checkpoint(Path(run_dir) / records[-1].checkpoint)
        self.classes_ = np.asarray(self.model_.seen_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict(self, X):
        """Detections per input image.

        `X` may be a DatasetManifest or an iterable of HxWx3 float arrays;
        returns one list of DetectionResult per image.
        """
        self._check_fitted()
        out = []
        if isinstance(X, DatasetManifest):
            for entry in X.entries:
                image = X.load_image(entry)
                out.append(self.model_.detect(
                    image.pixels, image_id=entry.image,
                    score_threshold=self.score_threshold))
        else:
            for i, pixels in enumerate(X):
                out.append(self.model_.detect(
                    np.asarray(pixels), image_id=str(i),
                    score_threshold=self.score_threshold))
        return out

    def score(self, X: DatasetManifest, y=None) -> float:
        """Mean AP at IoU 0.5 over every class the model has seen."""
        self._check_fitted()
        seen = set(self.model_.seen_classes)
        detections = []
        for dets in self.predict(X):
            detections.extend(dets)
        groundtruths = [g for g in manifest_groundtruths(X)
                        if g.class_id in seen]
        report = map_report(detections, groundtruths,
                            {"all": sorted(seen)})
        value = report.group_map["all"][0.5]
        return float(value) if value is not None else 0.0
