"""Seeded synthetic traces with controllable separation, drift and unknown classes.

Each class is a template of per-flow log-byte means. A generated flow's byte
count is ``round(exp(mu + drift + noise) - 1)`` with Gaussian noise in log
space, so after ``log1p`` the UDFS row is the template plus noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import Rng
from .errors import ExhaustedRejectionSampling
from .ingest import Flow, Trace, write_flow_records
from .thresholds import UNKNOWN

EARLY, LATE = "early", "late"
PERIOD_START = {EARLY: 1_600_000_000, LATE: 1_700_000_000}
DRIFT_BOUNDARY = 1_650_000_000
MTU_PAYLOAD = 1448


@dataclass(frozen=True)
class ClassProfile:
    class_id: str
    n_flows_range: tuple[int, int]
    mu: tuple  # per flow position: (mu_up, mu_down), length n_flows_range[1]
    noise_sigma: float
    drift_delta: float = 0.0
    drift_positions: tuple | None = None  # None: every position drifts

    def __post_init__(self):
        lo, hi = self.n_flows_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad n_flows_range {self.n_flows_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.mu) < hi:
            raise ValueError(f"profile {self.class_id}: {len(self.mu)} flow means for up to {hi} flows")

    def mean_matrix(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=np.float64).reshape(-1, 2)

    def drift_vector(self) -> np.ndarray:
        n = len(self.mu)
        if self.drift_positions is None:
            return np.full(n, self.drift_delta)
        v = np.zeros(n)
        v[list(self.drift_positions)] = self.drift_delta
        return v

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mu"] = [list(map(float, row)) for row in self.mu]
        d["n_flows_range"] = list(self.n_flows_range)
        d["drift_positions"] = list(self.drift_positions) if self.drift_positions is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassProfile":
        return cls(
            class_id=d["class_id"],
            n_flows_range=tuple(d["n_flows_range"]),
            mu=tuple(tuple(r) for r in d["mu"]),
            noise_sigma=d["noise_sigma"],
            drift_delta=d.get("drift_delta", 0.0),
            drift_positions=tuple(d["drift_positions"]) if d.get("drift_positions") is not None else None,
        )


def profile_distance(a: ClassProfile, b: ClassProfile) -> float:
    """RMS log-space gap between two templates over the flows both always emit."""
    n = min(a.n_flows_range[0], b.n_flows_range[0])
    diff = a.mean_matrix()[:n] - b.mean_matrix()[:n]
    return float(np.sqrt(np.mean(diff**2)))


def make_profiles(
    n_classes: int,
    seed: int,
    sigma: float = 0.3,
    separation: float = 4.0,
    drift_delta: float = 0.0,
    drift_fraction: float = 0.5,
    flows_low: tuple[int, int] = (6, 14),
    flows_spread: int = 4,
    mu_range: tuple[float, float] = (3.0, 11.0),
    max_attempts: int = 1000,
) -> list[ClassProfile]:
    """Random known-class templates, pairwise at least ``separation * sigma`` apart."""
    rng = Rng(seed, (0xC1A55,))
    profiles: list[ClassProfile] = []
    for ci in range(n_classes):
        for _ in range(max_attempts):
            lo = int(rng.integers(flows_low[0], flows_low[1] + 1))
            hi = lo + flows_spread
            mu = rng.uniform(mu_range[0], mu_range[1], (hi, 2))
            k = int(round(drift_fraction * hi))
            drift_pos = tuple(sorted(rng.choice(hi, size=k, replace=False).tolist()))
            cand = ClassProfile(
                class_id=f"c{ci:02d}",
                n_flows_range=(lo, hi),
                mu=tuple(map(tuple, mu.tolist())),
                noise_sigma=sigma,
                drift_delta=drift_delta,
                drift_positions=drift_pos,
            )
            if all(profile_distance(cand, p) >= separation * sigma for p in profiles):
                profiles.append(cand)
                break
        else:
            raise ExhaustedRejectionSampling(f"could not place class {ci} after {max_attempts} attempts")
    return profiles


def _flow_key(class_index: int, sample: int, position: int) -> str:
    return f"tcp:10.{class_index % 256}.{sample // 256 % 256}.{sample % 256}:{40000 + position}-198.51.100.{position % 254 + 1}:443"


def _sample_trace(
    profile: ClassProfile,
    rng: Rng,
    trace_id: str,
    label: str | None,
    class_index: int,
    sample: int,
    collected_at: int,
    drifted: bool,
) -> Trace:
    lo, hi = profile.n_flows_range
    n = int(rng.integers(lo, hi + 1))
    mu = profile.mean_matrix()[:n]
    if drifted:
        mu = mu + profile.drift_vector()[:n, None]
    noise = rng.normal(0.0, 1.0, (n, 2)) * profile.noise_sigma
    counts = np.maximum(np.rint(np.exp(mu + noise) - 1.0), 0).astype(np.int64)
    flows = []
    base_us = collected_at * 1_000_000
    for i, (up, down) in enumerate(counts.tolist()):
        flows.append(
            Flow(
                key=_flow_key(class_index, sample, i),
                first_ts=base_us + 1000 * i,
                bytes_up=up,
                bytes_down=down,
                packet_count_up=max(1, math.ceil(up / MTU_PAYLOAD)),
                packet_count_down=math.ceil(down / MTU_PAYLOAD),
            )
        )
    return Trace(trace_id=trace_id, flows=tuple(flows), label=label, collected_at=collected_at)


def generate(
    profiles: Sequence[ClassProfile],
    samples_per_class: int,
    period: str = EARLY,
    seed: int = 0,
) -> list[Trace]:
    """``samples_per_class`` traces per profile; the late period applies each profile's drift."""
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    if period not in PERIOD_START:
        raise ValueError(f"period must be 'early' or 'late', got {period!r}")
    period_code = 0 if period == EARLY else 1
    traces = []
    for ci, prof in enumerate(profiles):
        rng = Rng(seed, (ci, period_code))
        for j in range(samples_per_class):
            collected_at = PERIOD_START[period] + ci * 100_000 + j * 60
            traces.append(
                _sample_trace(
                    prof, rng, f"{prof.class_id}-{period}-{j:04d}", prof.class_id, ci, j, collected_at, period == LATE
                )
            )
    return traces


def generate_unknown_pool(
    n_classes: int,
    traces_per_class: int,
    seed: int,
    known_profiles: Sequence[ClassProfile] = (),
    min_distance: float | None = None,
    sigma: float = 0.3,
    flows_range: tuple[int, int] = (3, 24),
    mu_range: tuple[float, float] = (1.0, 13.0),
    max_attempts: int = 1000,
) -> list[Trace]:
    """Traces of ``n_classes`` unseen classes, labelled Unknown.

    Profiles come from a broader prior than the known classes and are
    rejection-sampled to sit at least ``min_distance`` (default 4 sigma) from
    every known profile.
    """
    profiles = unknown_profiles(
        n_classes, seed, known_profiles, min_distance, sigma, flows_range, mu_range, max_attempts
    )
    traces = []
    for k, prof in enumerate(profiles):
        rng = Rng(seed, (0x0A0A, k))
        for j in range(traces_per_class):
            collected_at = PERIOD_START[EARLY] + 50_000 + k * 1_000 + j * 60
            traces.append(_sample_trace(prof, rng, f"unk{k:03d}-{j:04d}", UNKNOWN, 200 + k % 50, j, collected_at, False))
    return traces


def unknown_profiles(
    n_classes: int,
    seed: int,
    known_profiles: Sequence[ClassProfile] = (),
    min_distance: float | None = None,
    sigma: float = 0.3,
    flows_range: tuple[int, int] = (3, 24),
    mu_range: tuple[float, float] = (1.0, 13.0),
    max_attempts: int = 1000,
) -> list[ClassProfile]:
    if n_classes < 0:
        raise ValueError("n_classes must be >= 0")
    min_distance = 4.0 * sigma if min_distance is None else min_distance
    rng = Rng(seed, (0x0A0A,))
    out = []
    for k in range(n_classes):
        for _ in range(max_attempts):
            lo = int(rng.integers(flows_range[0], flows_range[1] + 1))
            hi = int(rng.integers(lo, flows_range[1] + 1))
            mu = rng.uniform(mu_range[0], mu_range[1], (hi, 2))
            cand = ClassProfile(f"unknown{k:03d}", (lo, hi), tuple(map(tuple, mu.tolist())), sigma)
            if all(profile_distance(cand, p) >= min_distance for p in known_profiles):
                out.append(cand)
                break
        else:
            raise ExhaustedRejectionSampling(f"unknown class {k}: no profile {min_distance} away after {max_attempts} tries")
    return out


@dataclass
class SynthSpec:
    classes: int = 10
    per_class: int = 50
    late_per_class: int | None = None
    unknown_classes: int = 50
    unknown_per_class: int = 10
    sigma: float = 0.3
    separation: float = 4.0
    drift_delta: float = 0.15
    seed: int = 0


def write_dataset(out_dir: str | Path, spec: SynthSpec) -> dict:
    """Write early/late/unknown FlowRecord files plus profiles.json; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles = make_profiles(
        spec.classes, spec.seed, sigma=spec.sigma, separation=spec.separation, drift_delta=spec.drift_delta
    )
    late_n = spec.late_per_class if spec.late_per_class is not None else spec.per_class
    write_flow_records(generate(profiles, spec.per_class, EARLY, spec.seed), out / "early.jsonl")
    write_flow_records(generate(profiles, late_n, LATE, spec.seed), out / "late.jsonl")
    unknown = generate_unknown_pool(
        spec.unknown_classes, spec.unknown_per_class, spec.seed + 1, profiles, sigma=spec.sigma
    ) if spec.unknown_classes else []
    write_flow_records(unknown, out / "unknown.jsonl")
    manifest = {
        "spec": asdict(spec),
        "drift_boundary": DRIFT_BOUNDARY,
        "profiles": [p.to_dict() for p in profiles],
    }
    (out / "profiles.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
