"""Per-class rejection radii and open-set nearest-prototype inference.

A class's base radius is a percentile of its training samples' distances to
the class prototype. It is scaled by ``gamma = 1 - alpha * tanh(z)``, where
``z`` is the class's z-scored confusion ratio (intra / inter distance) over
all classes: confusable classes get a tighter radius, easy ones a looser one.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyClass, NoPrototypes

UNKNOWN = "Unknown"
DEFAULT_PERCENTILE = 95.0
DEFAULT_ALPHA = 0.2


@dataclass(frozen=True)
class ClassThreshold:
    theta_base: float
    s_score: float
    z: float
    gamma: float
    theta: float


@dataclass
class ThresholdTable:
    entries: dict  # class id -> ClassThreshold
    percentile: float = DEFAULT_PERCENTILE
    alpha: float = DEFAULT_ALPHA

    def theta(self, class_id) -> float:
        return self.entries[class_id].theta

    @property
    def class_ids(self) -> list:
        return sorted(self.entries)

    def to_dict(self) -> dict:
        return {
            "percentile": float(self.percentile),
            "alpha": float(self.alpha),
            "classes": {str(c): asdict(e) for c, e in sorted(self.entries.items())},
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ThresholdTable":
        entries = {c: ClassThreshold(**e) for c, e in obj["classes"].items()}
        return cls(entries, obj["percentile"], obj["alpha"])

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Prediction:
    trace_id: str
    decision: str
    nearest_class: str
    d_min: float
    threshold_used: float


def _as_prototype_map(prototypes, class_ids=None) -> tuple[list, np.ndarray]:
    if isinstance(prototypes, Mapping):
        ids = sorted(prototypes)
        return ids, np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in ids])
    arr = np.asarray(prototypes, dtype=np.float64)
    if class_ids is None:
        raise ValueError("class_ids required when prototypes is an array")
    return list(class_ids), arr


def base_thresholds(
    train_embeddings: np.ndarray,
    train_labels: Sequence,
    prototypes,
    percentile_p: float = DEFAULT_PERCENTILE,
    class_ids: Sequence | None = None,
) -> dict:
    """Linear-interpolation percentile of each class's distances to its prototype."""
    if not 0 < percentile_p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile_p}")
    ids, protos = _as_prototype_map(prototypes, class_ids)
    emb = np.asarray(train_embeddings, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=object)
    out = {}
    for i, c in enumerate(ids):
        members = emb[labels == c]
        if len(members) == 0:
            raise EmptyClass(f"class {c!r} has no training samples")
        dist = np.sqrt(((members - protos[i]) ** 2).sum(axis=1))
        out[c] = float(np.percentile(dist, percentile_p, method="linear"))
    return out


def confusion_z_scores(s_scores: Mapping) -> dict:
    """Population z-scores; all zero when the scores have no spread."""
    ids = sorted(s_scores)
    vals = np.array([s_scores[c] for c in ids], dtype=np.float64)
    mu = float(vals.mean())
    sd = float(vals.std())
    if len(ids) < 2 or sd <= 1e-12 * max(1.0, abs(mu)):
        return {c: 0.0 for c in ids}
    return {c: float((s_scores[c] - mu) / sd) for c in ids}


def adaptive_thresholds(stats, base: Mapping, alpha: float = DEFAULT_ALPHA, percentile: float = DEFAULT_PERCENTILE) -> ThresholdTable:
    """Scale each base radius by ``1 - alpha * tanh(z(intra / inter))``."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    ids = sorted(base)
    if len(ids) >= 2:
        s = {c: stats.d_intra[c] / stats.d_inter[c] for c in ids}
    else:
        s = {c: 0.0 for c in ids}
    z = confusion_z_scores(s)
    entries = {}
    for c in ids:
        gamma = 1.0 - alpha * math.tanh(z[c])
        entries[c] = ClassThreshold(
            theta_base=float(base[c]), s_score=float(s[c]), z=z[c], gamma=gamma, theta=float(base[c]) * gamma
        )
    return ThresholdTable(entries, percentile, alpha)


def calibrate(
    model,
    train_seqs,
    percentile: float = DEFAULT_PERCENTILE,
    alpha: float = DEFAULT_ALPHA,
    k_nearest: int = 5,
    workers: int = 1,
) -> ThresholdTable:
    """Fit the threshold table on the training set with the model's global prototypes."""
    from .encoder import embed
    from .proto import distance_stats

    emb = embed(list(train_seqs), model.params, model.encoder_config, workers=workers)
    labels = [s.label for s in train_seqs]
    unknown_labels = sorted(set(labels) - set(model.class_ids), key=str)
    if unknown_labels:
        raise EmptyClass(f"calibration labels not in the model: {unknown_labels}")
    stats = distance_stats(emb, labels, k_nearest, prototypes=(model.class_ids, model.prototypes))
    base = base_thresholds(emb, labels, model.prototypes, percentile, class_ids=model.class_ids)
    table = adaptive_thresholds(stats, base, alpha, percentile)
    model.thresholds = table
    return table


def _nearest(h: np.ndarray, ids: Sequence, protos: np.ndarray) -> tuple[str, float]:
    dist = np.sqrt(((protos - h[None, :]) ** 2).sum(axis=1))
    d_min = float(dist.min())
    tied = [ids[i] for i in np.flatnonzero(dist == d_min)]
    return min(tied), d_min


def classify(
    h_test: np.ndarray,
    prototypes,
    table: ThresholdTable | None,
    class_ids: Sequence | None = None,
    trace_id: str = "",
    reject: bool = True,
) -> Prediction:
    """Nearest prototype, accepted only when within that class's threshold (inclusive).

    ``reject=False`` (or no table) uses infinite thresholds: pure closed-set output.
    """
    if class_ids is None and table is not None and not isinstance(prototypes, Mapping):
        class_ids = table.class_ids
    ids, protos = _as_prototype_map(prototypes, class_ids)
    if len(ids) == 0:
        raise NoPrototypes("no prototypes to classify against")
    h = np.asarray(h_test, dtype=np.float64).reshape(-1)
    c_star, d_min = _nearest(h, ids, protos)
    theta = table.theta(c_star) if (reject and table is not None) else math.inf
    decision = c_star if d_min <= theta else UNKNOWN
    return Prediction(trace_id, decision, c_star, d_min, theta)


def classify_embeddings(embeddings: np.ndarray, trace_ids: Sequence, model, reject: bool = True) -> list[Prediction]:
    if len(model.class_ids) == 0:
        raise NoPrototypes("model has no prototypes")
    return [
        classify(h, model.prototypes, model.thresholds, model.class_ids, tid, reject)
        for h, tid in zip(embeddings, trace_ids)
    ]


def classify_batch(seqs, model, reject: bool = True, workers: int = 1) -> list[Prediction]:
    from .encoder import embed

    seqs = list(seqs)
    if not seqs:
        return []
    emb = embed(seqs, model.params, model.encoder_config, workers=workers)
    return classify_embeddings(emb, [s.trace_id for s in seqs], model, reject)


PREDICTION_COLUMNS = ("trace_id", "decision", "nearest_class", "d_min", "threshold_used")


def write_predictions(preds: Sequence[Prediction], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for p in preds:
            writer.writerow([p.trace_id, p.decision, p.nearest_class, repr(p.d_min), repr(p.threshold_used)])


def read_predictions(path: str | Path) -> list[Prediction]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            Prediction(r["trace_id"], r["decision"], r["nearest_class"], float(r["d_min"]), float(r["threshold_used"]))
            for r in reader
        ]
