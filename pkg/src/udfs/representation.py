"""Up-Down Flow Sequence: one (ln(1+up), ln(1+down)) row per flow."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyBatch, EmptyTrace, HeterogeneousLength
from .ingest import Trace

DEFAULT_N_MAX = 256


@dataclass(frozen=True)
class UdfsSequence:
    values: np.ndarray  # (n_max, 2) float64, column 0 = up, column 1 = down
    mask: np.ndarray  # (n_max,) bool, True on real flows (a prefix)
    true_length: int
    trace_id: str
    label: str | None = None

    @property
    def n_max(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, UdfsSequence):
            return NotImplemented
        return (
            self.trace_id == other.trace_id
            and self.label == other.label
            and self.true_length == other.true_length
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class SequenceBatch:
    values: np.ndarray  # (B, n_max, 2)
    mask: np.ndarray  # (B, n_max)
    labels: tuple
    trace_ids: tuple

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_max(self) -> int:
        return self.values.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def extract_udfs(trace: Trace, n_max: int = DEFAULT_N_MAX) -> UdfsSequence:
    """Log-smoothed byte totals of the first ``n_max`` flows, zero padded."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    if not trace.flows:
        raise EmptyTrace(f"trace {trace.trace_id!r} has no flows")
    kept = trace.flows[:n_max]
    n = len(kept)
    values = np.zeros((n_max, 2), dtype=np.float64)
    raw = np.array([(f.bytes_up, f.bytes_down) for f in kept], dtype=np.float64)
    values[:n] = np.log1p(raw)
    mask = np.zeros(n_max, dtype=bool)
    mask[:n] = True
    return UdfsSequence(values=values, mask=mask, true_length=n, trace_id=trace.trace_id, label=trace.label)


def batch_sequences(seqs: Sequence[UdfsSequence]) -> SequenceBatch:
    if len(seqs) == 0:
        raise EmptyBatch("cannot batch an empty list of sequences")
    lengths = {s.n_max for s in seqs}
    if len(lengths) > 1:
        raise HeterogeneousLength(f"sequences have differing n_max: {sorted(lengths)}")
    return SequenceBatch(
        values=np.stack([s.values for s in seqs]),
        mask=np.stack([s.mask for s in seqs]),
        labels=tuple(s.label for s in seqs),
        trace_ids=tuple(s.trace_id for s in seqs),
    )


def udfs_dump_lines(seqs: Iterable[UdfsSequence]) -> Iterable[str]:
    for s in seqs:
        rows = s.values[: s.true_length].tolist()
        yield json.dumps({"trace_id": s.trace_id, "label": s.label, "values": rows}, separators=(",", ":"))


def write_udfs_dump(seqs: Iterable[UdfsSequence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in udfs_dump_lines(seqs):
            fh.write(line + "\n")


def read_udfs_dump(path: str | Path, n_max: int = DEFAULT_N_MAX) -> list[UdfsSequence]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            rows = np.asarray(obj["values"], dtype=np.float64).reshape(-1, 2)[:n_max]
            n = rows.shape[0]
            values = np.zeros((n_max, 2))
            values[:n] = rows
            mask = np.zeros(n_max, dtype=bool)
            mask[:n] = True
            out.append(UdfsSequence(values, mask, n, obj["trace_id"], obj.get("label")))
    return out
