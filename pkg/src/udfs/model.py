"""Deployable model container and its binary file format.

Layout: the 8-byte magic ``UDFSMDL1``, an unsigned 64-bit little-endian
header length, a canonical JSON header (sorted keys, compact separators),
then little-endian float32 blobs in the order listed in ``header["blobs"]``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .encoder import EncoderConfig, param_shapes
from .engine import Tensor
from .errors import ModelFormatError
from .thresholds import ThresholdTable

MAGIC = b"UDFSMDL1"
FORMAT_VERSION = 1


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass
class TrainedModel:
    encoder_config: EncoderConfig
    params: "OrderedDict[str, Tensor]"
    class_ids: list
    prototypes: np.ndarray  # (C, d_model) float32, rows follow class_ids
    train_config: Any = None
    thresholds: ThresholdTable | None = None
    seeds: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    class_weights: dict = field(default_factory=dict)

    def header(self) -> dict:
        tc = self.train_config
        blobs = [{"name": n, "shape": list(t.shape)} for n, t in self.params.items()]
        blobs.append({"name": "prototypes", "shape": list(self.prototypes.shape)})
        return {
            "format_version": FORMAT_VERSION,
            "encoder_config": self.encoder_config.to_dict(),
            "train_config": tc.to_dict() if hasattr(tc, "to_dict") else tc,
            "class_ids": list(self.class_ids),
            "thresholds": self.thresholds.to_dict() if self.thresholds is not None else None,
            "seeds": self.seeds,
            "class_weights": {str(k): float(v) for k, v in self.class_weights.items()},
            "loss_curve": [float(r["mean_loss"]) for r in self.history],
            "blobs": blobs,
        }

    def to_bytes(self) -> bytes:
        header = canonical_json(self.header()).encode("utf-8")
        parts = [MAGIC, struct.pack("<Q", len(header)), header]
        for t in self.params.values():
            parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(self.prototypes, dtype="<f4").tobytes())
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TrainedModel":
        if raw[:8] != MAGIC:
            raise ModelFormatError("bad magic: not a UDFS model file")
        if len(raw) < 16:
            raise ModelFormatError("truncated model header")
        (n,) = struct.unpack("<Q", raw[8:16])
        try:
            header = json.loads(raw[16 : 16 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"unreadable header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format_version {header.get('format_version')}")
        enc = EncoderConfig(**header["encoder_config"])
        expected = param_shapes(enc)
        offset = 16 + n
        arrays = OrderedDict()
        for blob in header["blobs"]:
            shape = tuple(blob["shape"])
            size = int(np.prod(shape)) * 4
            chunk = raw[offset : offset + size]
            if len(chunk) != size:
                raise ModelFormatError(f"truncated blob {blob['name']}")
            arrays[blob["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
            offset += size
        if offset != len(raw):
            raise ModelFormatError("trailing bytes after parameter blobs")
        params = OrderedDict()
        for name, shape in expected.items():
            if name not in arrays or arrays[name].shape != shape:
                raise ModelFormatError(f"missing or misshapen parameter {name}")
            params[name] = Tensor(arrays[name], requires_grad=True, name=name)
        from .proto import TrainConfig

        tc = header.get("train_config")
        thresholds = header.get("thresholds")
        return cls(
            encoder_config=enc,
            params=params,
            class_ids=list(header["class_ids"]),
            prototypes=arrays["prototypes"],
            train_config=TrainConfig(**tc) if tc else None,
            thresholds=ThresholdTable.from_dict(thresholds) if thresholds else None,
            seeds=header.get("seeds", {}),
            history=[{"epoch": i, "mean_loss": v, "weights": None} for i, v in enumerate(header.get("loss_curve", []))],
            class_weights=header.get("class_weights", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        return cls.from_bytes(Path(path).read_bytes())
