"""Per-class precision/recall/F-score and the defect-prediction evaluation
where simulated grids are classified by the frozen quantity classifier."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import MetadataParse, TypeMismatch
from .nets import Classifier, Simulator, predict_class
from .synth import NUM_CLASSES, GridStore

ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX")
PREDICTION_CLASSES = (4, 5, 6, 7, 8)  # classes V..IX


@dataclass
class ConfusionMatrix:
    """9x9 integer counts; rows are true classes, columns predicted."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion matrix must be 9x9, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0

    @classmethod
    def from_predictions(cls, true, pred):
        counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        np.add.at(counts, (np.asarray(true, dtype=np.int64),
                           np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts)


@dataclass
class MetricReport:
    label: str
    classes: tuple
    precision: np.ndarray
    recall: np.ndarray
    fscore: np.ndarray

    def _mean(self, values, classes):
        sel = [i for i, c in enumerate(self.classes) if c in classes]
        return float(np.mean([values[i] for i in sel])) if sel else 0.0

    @property
    def mean_v_ix(self):
        return self._mean(self.fscore, PREDICTION_CLASSES)

    @property
    def mean_all(self):
        return float(np.mean(self.fscore)) if len(self.fscore) else 0.0

    def mean_of(self, metric, classes=None):
        values = getattr(self, metric)
        return self._mean(values, classes if classes is not None else self.classes)


def prf(confusion: ConfusionMatrix, classes=None, label="") -> MetricReport:
    """Precision, recall and F per class; zero denominators give 0."""
    counts = confusion.counts
    classes = tuple(classes) if classes is not None else tuple(range(NUM_CLASSES))
    tp = np.diag(counts).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    pr = precision + recall
    fscore = np.divide(2.0 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    sel = list(classes)
    return MetricReport(label, classes, precision[sel], recall[sel], fscore[sel])


def eval_classifier(model: Classifier, store: GridStore, batch_size=64,
                    dtype=np.float32, label=None):
    """Classify every grid in the store in inference mode."""
    ptype = model.config.placeholder_type
    types = store.types()
    if ptype is not None and types and types != [ptype]:
        raise TypeMismatch(f"classifier is for type {ptype}, store holds {types}")
    true = store.labels()
    pred = np.empty(len(store), dtype=np.int64)
    for start in range(0, len(store), batch_size):
        idx = range(start, min(start + batch_size, len(store)))
        x = store.dense_batch(list(idx), dtype=dtype)
        scores = model.forward(ad.Tensor(x), training=False)
        pred[list(idx)] = predict_class(scores)
    confusion = ConfusionMatrix.from_predictions(true, pred)
    return prf(confusion, label=label or (ptype or "all")), confusion


def eval_simulation(simulator: Simulator, classifier: Classifier,
                    store: GridStore, windows, batch_size=16,
                    dtype=np.float32, binarize=True, label=None):
    """Simulate each window's next grid, classify it and score against the
    target triplet's class. Only classes V..IX can appear as targets.

    The simulated volume is thresholded at 0.5 by default so the classifier
    sees the same binary occupancy statistics it was trained on; pass
    ``binarize=False`` to classify the raw continuous volume instead."""
    stype = simulator.config.placeholder_type
    ctype = classifier.config.placeholder_type
    if stype is not None and ctype is not None and stype != ctype:
        raise TypeMismatch(f"simulator type {stype} vs classifier type {ctype}")
    n_in = simulator.config.n_inputs
    true, pred = [], []
    for start in range(0, len(windows), batch_size):
        batch = windows[start:start + batch_size]
        history = [ad.Tensor(store.dense_batch([w.input_indices[j] for w in batch],
                                               dtype=dtype))
                   for j in range(n_in)]
        sim = simulator.forward(history, training=False)
        grids = sim.data
        if binarize:
            grids = (grids >= 0.5).astype(dtype)
        scores = classifier.forward(ad.Tensor(grids), training=False)
        pred.extend(np.atleast_1d(predict_class(scores)))
        true.extend(w.target_class for w in batch)
    bad = sorted({c for c in true if c not in PREDICTION_CLASSES})
    if bad:
        raise ValueError(f"simulation targets outside classes V-IX: {bad}")
    confusion = ConfusionMatrix.from_predictions(true, pred)
    return prf(confusion, classes=PREDICTION_CLASSES,
               label=label or (stype or "all")), confusion


# --- report rendering --------------------------------------------------------

_METRICS = ("precision", "recall", "fscore")
_METRIC_TITLES = {"precision": "Precision", "recall": "Recall", "fscore": "F-score"}


def report_render(reports):
    """Render MetricReports as a fixed-width table and a comma-separated
    machine form; both deterministic."""
    classes = tuple(range(NUM_CLASSES))
    widths = max((len(r.label) for r in reports), default=4)
    head = ["Label".ljust(widths), "Metric   "] + [c.rjust(5) for c in ROMAN]
    head += ["  Mean V-IX", "  Mean"]
    lines = ["  ".join(head)]
    lines.append("-" * len(lines[0]))
    csv_lines = ["label,metric,class,value"]
    for r in reports:
        for metric in _METRICS:
            values = dict(zip(r.classes, getattr(r, metric)))
            cells = ["     " if c not in values else f"{values[c]:5.2f}" for c in classes]
            mean_v = r.mean_of(metric, PREDICTION_CLASSES)
            mean_a = r.mean_of(metric)
            lines.append("  ".join(
                [r.label.ljust(widths), _METRIC_TITLES[metric].ljust(9)] + cells
                + [f"{mean_v:11.2f}", f"{mean_a:6.2f}"]))
            for c in r.classes:
                csv_lines.append(f"{r.label},{metric},{ROMAN[c]},{values[c]:.6f}")
            csv_lines.append(f"{r.label},{metric},mean_v_ix,{mean_v:.6f}")
            csv_lines.append(f"{r.label},{metric},mean,{mean_a:.6f}")
    return "\n".join(lines) + "\n", "\n".join(csv_lines) + "\n"


def parse_report_csv(text):
    """Parse the machine-readable form back into MetricReports."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "label,metric,class,value":
        raise MetadataParse("missing report CSV header")
    per_label = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise MetadataParse(f"bad report row: {ln!r}")
        label, metric, cls, value = parts
        if cls in ("mean_v_ix", "mean"):
            continue
        if cls not in ROMAN:
            raise MetadataParse(f"unknown class {cls!r}")
        per_label.setdefault(label, {}).setdefault(metric, {})[ROMAN.index(cls)] = float(value)
    reports = []
    for label, metrics in per_label.items():
        classes = tuple(sorted(metrics["precision"]))
        reports.append(MetricReport(
            label, classes,
            np.array([metrics["precision"][c] for c in classes]),
            np.array([metrics["recall"][c] for c in classes]),
            np.array([metrics["fscore"][c] for c in classes])))
    return reports
