"""Utility metrics: workload error and a downstream logistic-regression check."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import Dataset, one_hot

LR_EPOCHS = 500
LR_STEP = 0.1
LR_L2 = 1e-4


def workload_error(real: Dataset, synth: Dataset, workload) -> float:
    """Mean over cliques of the L1 distance between frequency-normalised marginals."""
    if real.schema.sizes != synth.schema.sizes or real.schema.names != synth.schema.names:
        raise ValueError("schema mismatch")
    cliques = [tuple(getattr(c, "attrs", c)) for c in getattr(workload, "cliques", workload)]
    total = 0.0
    for attrs in cliques:
        p = real.project(attrs) / real.N
        q = synth.project(attrs) / synth.N
        total += float(np.abs(p - q).sum())
    return total / len(cliques)


def _features(ds: Dataset, target: int) -> tuple[np.ndarray, np.ndarray]:
    X = one_hot(ds).astype(np.float64)
    sizes = ds.schema.sizes
    off = ds.schema.offsets()[target]
    keep = np.ones(X.shape[1], dtype=bool)
    keep[off:off + sizes[target]] = False
    return X[:, keep], ds.rows[:, target]


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, labels=(0, 1)) -> float:
    scores = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


@dataclass
class ClassifierResult:
    accuracy: float
    f1: float
    single_class: bool = False


def train_eval_classifier(train: Dataset, test: Dataset, target: int, seed: int = 42) -> ClassifierResult:
    """Full-batch gradient descent on the logistic loss over one-hot features."""
    if train.schema.sizes[target] != 2:
        raise ValueError("target attribute must be binary")
    Xtr, ytr = _features(train, target)
    Xte, yte = _features(test, target)
    if np.unique(ytr).size < 2:
        majority = int(ytr[0])
        pred = np.full_like(yte, majority)
        return ClassifierResult(float(np.mean(pred == yte)), macro_f1(yte, pred), single_class=True)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, Xtr.shape[1])
    b = 0.0
    n = Xtr.shape[0]
    y = ytr.astype(np.float64)
    for _ in range(LR_EPOCHS):
        z = Xtr @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        g = p - y
        w -= LR_STEP * (Xtr.T @ g / n + LR_L2 * w)
        b -= LR_STEP * float(g.mean())
    pred = ((Xte @ w + b) > 0).astype(np.int64)
    return ClassifierResult(float(np.mean(pred == yte)), macro_f1(yte, pred))


@dataclass
class MetricsReport:
    delta: float
    accuracy: float
    f1: float
    phase_ops: dict
    phase_seconds: dict
    config: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("workload error must be non-negative")
        for v in (self.accuracy, self.f1):
            if not 0.0 <= v <= 1.0:
                raise ValueError("accuracy and F1 must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = {
            "delta": self.delta,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "phase_ops": self.phase_ops,
            "phase_seconds": self.phase_seconds,
            "config": self.config,
        }
        out.update(self.extra)
        return out


def build_report(art, target_index: int | None = None) -> MetricsReport:
    """Metrics for a finished run (see :class:`fhaim.workflow.RunArtifacts`)."""
    schema = art.train.schema
    target = schema.d - 1 if target_index is None else target_index
    clf = train_eval_classifier(art.synthetic, art.test, target, seed=42)
    real = train_eval_classifier(art.train, art.test, target, seed=42)
    meter = art.result.meter
    return MetricsReport(
        delta=workload_error(art.train, art.synthetic, art.workload),
        accuracy=clf.accuracy,
        f1=clf.f1,
        phase_ops={p: dict(meter.ops[p]) for p in ("compute", "select", "measure")},
        phase_seconds=dict(meter.seconds),
        config=art.config.to_dict(),
        extra={
            "workload_error_norm": "mean L1 over frequency-normalised marginals",
            "f1_average": "macro",
            "target": schema.names[target],
            "single_class_training": clf.single_class,
            "real_data": {"accuracy": real.accuracy, "f1": real.f1},
            "op_total": art.op_counts,
        },
    )
