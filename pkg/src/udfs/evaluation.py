"""Scoring and end-to-end scenario runs (closed-set, concept drift, open world)."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import RunConfig
from .engine import Rng
from .errors import DataError, IdMismatch
from .ingest import Trace, parse_flow_records, time_split
from .proto import train, write_training_log
from .representation import extract_udfs
from .thresholds import UNKNOWN, Prediction, calibrate, classify_batch, write_predictions

logger = logging.getLogger(__name__)

CLOSED, DRIFT, OPEN_WORLD = "closed", "drift", "open_world"
SCENARIOS = (CLOSED, DRIFT, OPEN_WORLD)


@dataclass
class EvalReport:
    scenario: str
    labels: list
    confusion: np.ndarray  # rows = truth, columns = prediction, ordered by ``labels``
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "labels": list(self.labels),
            "confusion": self.confusion.astype(int).tolist(),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> dict:
        return {
            "scenario": self.scenario,
            "ACC": self.accuracy,
            "P": self.macro_precision,
            "R": self.macro_recall,
            "F1": self.macro_f1,
        }


def _truth_map(ground_truth) -> dict:
    if isinstance(ground_truth, Mapping):
        return dict(ground_truth)
    out = {}
    for item in ground_truth:
        if isinstance(item, tuple):
            tid, label = item
        else:
            tid, label = item.trace_id, item.label
        if tid in out:
            raise IdMismatch(f"duplicate trace_id {tid!r} in ground truth")
        out[tid] = label
    return out


def _align(predictions: Sequence[Prediction], ground_truth) -> tuple[list, list]:
    truth = _truth_map(ground_truth)
    pred = {}
    for p in predictions:
        if p.trace_id in pred:
            raise IdMismatch(f"duplicate trace_id {p.trace_id!r} in predictions")
        pred[p.trace_id] = p.decision
    if set(pred) != set(truth):
        only_p = sorted(set(pred) - set(truth))[:5]
        only_t = sorted(set(truth) - set(pred))[:5]
        raise IdMismatch(f"trace ids differ: only in predictions {only_p}, only in truth {only_t}")
    ids = sorted(truth)
    return [truth[i] for i in ids], [pred[i] for i in ids]


def confusion_matrix(y_true: Sequence, y_pred: Sequence, labels: Sequence) -> np.ndarray:
    index = {c: i for i, c in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[index[t], index[p]] += 1
    return cm


def per_class_metrics(cm: np.ndarray, labels: Sequence) -> dict:
    """Precision/recall/F1/support per class; any 0/0 ratio is 0."""
    out = {}
    for i, c in enumerate(labels):
        tp = int(cm[i, i])
        predicted = int(cm[:, i].sum())
        support = int(cm[i, :].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[str(c)] = {"precision": precision, "recall": recall, "f1": f1, "support": support}
    return out


def _macro(per_class: dict, classes: Iterable) -> tuple[float, float, float]:
    rows = [per_class[str(c)] for c in classes]
    if not rows:
        return 0.0, 0.0, 0.0
    return tuple(float(np.mean([r[k] for r in rows])) for k in ("precision", "recall", "f1"))


def score_closed(predictions: Sequence[Prediction], ground_truth, scenario: str = CLOSED) -> EvalReport:
    """Macro metrics over known classes; an Unknown output is wrong for every class."""
    y_true, y_pred = _align(predictions, ground_truth)
    if UNKNOWN in y_true:
        raise DataError("closed-set ground truth contains Unknown labels; use score_open_world")
    known = sorted(set(y_true) | (set(y_pred) - {UNKNOWN}))
    labels = known + ([UNKNOWN] if UNKNOWN in y_pred else [])
    cm = confusion_matrix(y_true, y_pred, labels)
    per_class = per_class_metrics(cm, labels)
    p, r, f = _macro(per_class, known)
    acc = float(np.trace(cm)) / len(y_true) if y_true else 0.0
    extra = {"rejected": int(sum(1 for x in y_pred if x == UNKNOWN))}
    return EvalReport(scenario, labels, cm, acc, p, r, f, per_class, extra)


def score_open_world(predictions: Sequence[Prediction], ground_truth, include_unknown: bool = True) -> EvalReport:
    """Unknown is one more class; headline macros include it unless ``include_unknown`` is False.

    Both conventions are always reported, plus Unknown-detection precision/recall.
    """
    y_true, y_pred = _align(predictions, ground_truth)
    known = sorted((set(y_true) | set(y_pred)) - {UNKNOWN})
    labels = known + [UNKNOWN]
    cm = confusion_matrix(y_true, y_pred, labels)
    per_class = per_class_metrics(cm, labels)
    with_unknown = _macro(per_class, labels)
    known_only = _macro(per_class, known)
    p, r, f = with_unknown if include_unknown else known_only
    acc = float(np.trace(cm)) / len(y_true) if y_true else 0.0
    extra = {
        "include_unknown": include_unknown,
        "macro_precision_with_unknown": with_unknown[0],
        "macro_recall_with_unknown": with_unknown[1],
        "macro_f1_with_unknown": with_unknown[2],
        "macro_precision_known": known_only[0],
        "macro_recall_known": known_only[1],
        "macro_f1_known": known_only[2],
        "unknown_precision": per_class[UNKNOWN]["precision"],
        "unknown_recall": per_class[UNKNOWN]["recall"],
    }
    return EvalReport(OPEN_WORLD, labels, cm, acc, p, r, f, per_class, extra)


def write_report(report: EvalReport, json_path: str | Path) -> None:
    """Write the report JSON and a one-row CSV with the same stem."""
    json_path = Path(json_path)
    json_path.write_text(report.to_json(), encoding="utf-8")
    row = report.csv_row()
    with open(json_path.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- scenarios


@dataclass
class ScenarioConfig:
    scenario: str
    out_dir: str | Path
    data_dir: str | Path | None = None
    train_path: str | Path | None = None
    test_path: str | Path | None = None
    unknown_path: str | Path | None = None
    boundary: int | None = None
    test_fraction: float = 0.3
    no_reject: bool = False
    include_unknown: bool = True
    run: RunConfig = field(default_factory=RunConfig)
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")


def stratified_split(traces: Sequence[Trace], test_fraction: float, seed: int) -> tuple[list, list]:
    """Per class, a seeded ``test_fraction`` share goes to test; both keep input order."""
    by_class: dict = {}
    for t in traces:
        by_class.setdefault(t.label, []).append(t.trace_id)
    test_ids = set()
    for ci, label in enumerate(sorted(by_class, key=str)):
        ids = sorted(by_class[label])
        n_test = int(math.ceil(len(ids) * test_fraction)) if len(ids) > 1 else 0
        perm = Rng(seed, (0x5B117, ci)).permutation(len(ids))
        test_ids.update(ids[i] for i in perm[:n_test])
    return [t for t in traces if t.trace_id not in test_ids], [t for t in traces if t.trace_id in test_ids]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_sources(cfg: ScenarioConfig) -> tuple[list[Trace], list[Trace], list[Path]]:
    used: list[Path] = []

    def load(path) -> list[Trace]:
        p = Path(path)
        used.append(p)
        return parse_flow_records(p)

    data = Path(cfg.data_dir) if cfg.data_dir is not None else None
    seed = cfg.run.seed
    if cfg.scenario == DRIFT:
        if cfg.train_path and cfg.test_path:
            train_set, test_set = load(cfg.train_path), load(cfg.test_path)
        else:
            if data is None:
                raise DataError("drift scenario needs --data or both --train and --test")
            traces = load(data / "early.jsonl") + load(data / "late.jsonl")
            boundary = cfg.boundary
            if boundary is None:
                boundary = json.loads((data / "profiles.json").read_text())["drift_boundary"]
            train_set, test_set = time_split(traces, boundary)
    else:
        if cfg.train_path and cfg.test_path:
            train_set, test_set = load(cfg.train_path), load(cfg.test_path)
        elif cfg.train_path or data is not None:
            source = cfg.train_path or data / "early.jsonl"
            train_set, test_set = stratified_split(load(source), cfg.test_fraction, seed)
        else:
            raise DataError(f"{cfg.scenario} scenario needs --data or --train")
        if cfg.scenario == OPEN_WORLD:
            unk = cfg.unknown_path or (data / "unknown.jsonl" if data is not None else None)
            if unk is None:
                raise DataError("open_world scenario needs an unknown pool (--unknown or data/unknown.jsonl)")
            test_set = test_set + load(unk)
    if not train_set or not test_set:
        raise DataError(f"empty split: {len(train_set)} train / {len(test_set)} test traces")
    return train_set, test_set, used


def run_scenario(cfg: ScenarioConfig) -> EvalReport:
    """ingest -> extract -> train -> calibrate -> classify -> score, persisted under ``cfg.out_dir``."""
    started = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = cfg.run
    train_traces, test_traces, sources = _load_sources(cfg)
    n_max = run.n_max
    train_seqs = [extract_udfs(t, n_max) for t in train_traces]
    test_seqs = [extract_udfs(t, n_max) for t in test_traces]

    model = train(train_seqs, run.train_config(), Rng(run.seed), run.encoder_config(), workers=cfg.workers)
    table = calibrate(model, train_seqs, run.percentile, run.alpha, run.k_nearest, workers=cfg.workers)
    model.seeds["run"] = run.seed
    model.save(out / "model.bin")
    table.dump(out / "thresholds.json")
    write_training_log(model.history, model.class_ids, out / "train_log.csv")

    preds = classify_batch(test_seqs, model, reject=not cfg.no_reject, workers=cfg.workers)
    write_predictions(preds, out / "predictions.csv")

    known = set(model.class_ids)
    if cfg.scenario == OPEN_WORLD:
        truth = {t.trace_id: (t.label if t.label in known else UNKNOWN) for t in test_traces}
        report = score_open_world(preds, truth, include_unknown=cfg.include_unknown)
    else:
        truth = {t.trace_id: t.label for t in test_traces}
        report = score_closed(preds, truth, scenario=cfg.scenario)
    report.extra.update(
        {
            "config_digest": run.digest(),
            "no_reject": cfg.no_reject,
            "n_train": len(train_seqs),
            "n_test": len(test_seqs),
        }
    )
    write_report(report, out / "report.json")

    manifest = {
        "scenario": cfg.scenario,
        "seed": run.seed,
        "config": run.to_dict(),
        "config_digest": run.digest(),
        "datasets": {str(p): _sha256(p) for p in sources},
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "udfs": _package_version()},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("scenario %s macro_f1 %.4f", cfg.scenario, report.macro_f1)
    return report


def _package_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"
