"""Target-domain metrics and embedding export."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .data import DomainDataset
from .nets import ModelBundle, classify, encode_all


@dataclass
class MetricsReport:
    overall_acc: float
    per_class_acc: list  # None where the class has no instances
    cluster_acc: float
    confusion: np.ndarray
    iter: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = np.asarray(self.confusion).tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["overall_acc"], list(d["per_class_acc"]), d["cluster_acc"],
                   np.asarray(d["confusion"], dtype=np.int64), d.get("iter", 0))


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    """Rows index the true class, columns the predicted class."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def report_from_predictions(labels, predictions, num_classes: int, iteration: int = 0) -> MetricsReport:
    cm = confusion_matrix(labels, predictions, num_classes)
    total = cm.sum()
    rows = cm.sum(axis=1)
    per_class = [float(cm[k, k] / rows[k]) if rows[k] else None for k in range(num_classes)]
    overall = float(np.trace(cm) / total) if total else 0.0
    return MetricsReport(overall, per_class, cluster_accuracy(predictions, labels), cm, iteration)


@torch.no_grad()
def predict(bundle: ModelBundle, instances: np.ndarray, which: str = "target") -> np.ndarray:
    """Argmax class predictions; ties resolve to the lowest class index."""
    if len(instances) == 0:
        return np.zeros(0, dtype=np.int64)
    probs = classify(bundle, encode_all(bundle, which, instances)).numpy()
    return probs.argmax(axis=1)


def evaluate(bundle: ModelBundle, target: DomainDataset, iteration: int = 0,
             which: str = "target") -> MetricsReport:
    if not target.is_labeled:
        raise ValueError("evaluation requires a labeled target dataset")
    preds = predict(bundle, target.instances, which)
    return report_from_predictions(target.labels, preds, bundle.num_classes, iteration)


def cluster_accuracy(assignments: Sequence[int], labels: Sequence[int]) -> float:
    """Best one-to-one cluster/class matching accuracy (Hungarian on counts)."""
    a = np.asarray(assignments, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if a.shape != y.shape:
        raise ValueError(f"length mismatch: {a.size} assignments vs {y.size} labels")
    if a.size == 0:
        return 0.0
    k = int(max(a.max(), y.max())) + 1
    counts = confusion_matrix(a, y, k)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return float(counts[rows, cols].sum() / a.size)


def export_embeddings(bundle: ModelBundle, datasets, path, centroids=None) -> int:
    """Write ``domain_tag,label,f0..`` rows; returns the number of data rows.

    ``datasets`` is a list of ``(tag, DomainDataset)``; "source" rows go
    through the source encoder, everything else through the target encoder.
    Unlabeled rows carry label -1 and centroid rows carry their class index.
    """
    fdim = bundle.feature_dim
    rows = 0
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_tag", "label"] + [f"f{j}" for j in range(fdim)])
        for tag, ds in datasets:
            feats = encode_all(bundle, "source" if tag == "source" else "target", ds.instances).numpy()
            labels = ds.labels if ds.labels is not None else np.full(len(ds), -1)
            for lab, z in zip(labels, feats):
                w.writerow([tag, int(lab), *(repr(float(v)) for v in z)])
                rows += 1
        if centroids is not None:
            for c, z in enumerate(np.asarray(centroids.detach() if hasattr(centroids, "detach") else centroids)):
                w.writerow(["centroid", c, *(repr(float(v)) for v in z)])
                rows += 1
    os.replace(tmp, path)
    return rows


def write_metrics(path, report: MetricsReport, extra: Optional[dict] = None):
    with open(path, "w") as fh:
        json.dump({**report.to_dict(), **(extra or {})}, fh, indent=2)
