"""Prototypical training with per-class difficulty reweighting.

Each episode samples ``c_way`` classes x ``k_shot`` traces, builds one
prototype per class from the episode's own embeddings and minimises the
softmax-over-negative-distances loss. Every ``recompute_period`` epochs the
whole training set is re-embedded and each class's loss weight is set to its
confusion score (intra-class spread over distance to the nearest other
prototypes), so hard classes get larger gradients.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import engine as E
from .encoder import EncoderConfig, embed, encode, init_params
from .engine import Rng, Tensor
from .errors import (
    DivergedTraining,
    EmptyBatch,
    InsufficientSamples,
    MissingPrototype,
    NonFiniteActivation,
)
from .model import TrainedModel
from .optim import Adam
from .representation import UdfsSequence, batch_sequences
from .thresholds import UNKNOWN

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchPrototypes:
    class_ids: tuple
    prototypes: Tensor  # (C, d_model)

    def index(self, label) -> int:
        try:
            return self.class_ids.index(label)
        except ValueError:
            raise MissingPrototype(f"no prototype for class {label!r}") from None


@dataclass
class ClassWeights:
    weights: dict
    epsilon: float = 1e-6
    k_nearest: int = 5
    recompute_period: int = 5
    raw: dict = field(default_factory=dict)

    def __getitem__(self, label) -> float:
        return self.weights.get(label, 1.0)


@dataclass
class DistanceStats:
    class_ids: tuple
    d_intra: dict
    d_inter: dict
    prototypes: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    c_way: int = 10
    k_shot: int = 5
    k_nearest: int = 5
    epsilon: float = 1e-6
    recompute_period: int = 5
    min_weight: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def batch_prototypes(embeddings, labels: Sequence) -> BatchPrototypes:
    """Per-class mean embedding; classes in sorted order. Differentiable."""
    emb = E.as_tensor(embeddings)
    if emb.shape[0] == 0 or len(labels) == 0:
        raise EmptyBatch("no embeddings to build prototypes from")
    if len(labels) != emb.shape[0]:
        raise ValueError(f"{len(labels)} labels for {emb.shape[0]} embeddings")
    labels = np.asarray(labels, dtype=object)
    class_ids = tuple(sorted(set(labels.tolist())))
    rows = [E.mean(emb[np.flatnonzero(labels == c)], axis=0, keepdims=True) for c in class_ids]
    return BatchPrototypes(class_ids, E.concat(rows, axis=0))


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances between rows of ``a`` (N, D) and ``b`` (M, D) -> (N, M)."""
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    return E.sqrt(E.sum_(diff * diff, axis=-1))


def proto_loss(embeddings, labels: Sequence, prototypes: BatchPrototypes, weights=None) -> Tensor:
    """Weighted mean over samples of ``d(h, p_y) + logsumexp_j(-d(h, p_j))``."""
    emb = E.as_tensor(embeddings)
    targets = np.array([prototypes.index(y) for y in labels], dtype=np.int64)
    dist = pairwise_distance(emb, prototypes.prototypes)
    own = dist[np.arange(len(targets)), targets]
    per_sample = own + E.logsumexp(-dist, axis=1)
    if weights is None:
        w = np.ones(len(targets))
    else:
        w = np.array([weights[y] for y in labels], dtype=np.float64)
    w = Tensor(w.astype(emb.dtype))
    return E.sum_(per_sample * w) * (1.0 / len(targets))


def _pairwise_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def class_means(embeddings: np.ndarray, labels: Sequence) -> tuple[tuple, np.ndarray]:
    labels = np.asarray(labels, dtype=object)
    class_ids = tuple(sorted(set(labels.tolist())))
    emb = np.asarray(embeddings, dtype=np.float64)
    protos = np.stack([emb[labels == c].mean(axis=0) for c in class_ids])
    return class_ids, protos


def distance_stats(
    embeddings: np.ndarray,
    labels: Sequence,
    k_nearest: int = 5,
    prototypes: tuple[Sequence, np.ndarray] | None = None,
) -> DistanceStats:
    """Mean sample-to-own-prototype distance and mean distance to the K nearest other prototypes.

    ``prototypes`` defaults to the class means of ``embeddings``.
    """
    labels_arr = np.asarray(labels, dtype=object)
    emb = np.asarray(embeddings, dtype=np.float64)
    if prototypes is None:
        class_ids, protos = class_means(emb, labels_arr)
    else:
        class_ids, protos = tuple(prototypes[0]), np.asarray(prototypes[1], dtype=np.float64)
    d_intra, d_inter = {}, {}
    proto_dist = _pairwise_np(protos, protos)
    k = min(k_nearest, len(class_ids) - 1)
    for i, c in enumerate(class_ids):
        members = emb[labels_arr == c]
        if len(members) == 0:
            raise InsufficientSamples(f"class {c!r} has no samples")
        d_intra[c] = float(_pairwise_np(members, protos[i : i + 1]).mean())
        if k >= 1:
            others = np.sort(np.delete(proto_dist[i], i))[:k]
            d_inter[c] = float(others.mean())
        else:
            d_inter[c] = float("nan")
    return DistanceStats(class_ids, d_intra, d_inter, protos)


def weights_from_stats(stats: DistanceStats, epsilon: float = 1e-6, min_weight: float = 0.1) -> tuple[dict, dict]:
    raw = {c: stats.d_intra[c] / (stats.d_inter[c] + epsilon) for c in stats.class_ids}
    floored = {c: max(v, min_weight) for c, v in raw.items()}
    avg = sum(floored.values()) / len(floored)
    return {c: v / avg for c, v in floored.items()}, raw


def recompute_class_weights(
    all_embeddings: np.ndarray,
    all_labels: Sequence,
    k_nearest: int = 5,
    epsilon: float = 1e-6,
    min_weight: float = 0.1,
) -> ClassWeights:
    """Confusion-score weights over the full training set, normalised to mean 1."""
    class_ids = sorted(set(all_labels))
    if len(class_ids) < 2:
        warnings.warn("single class: confusion weights are all 1", RuntimeWarning, stacklevel=2)
        return ClassWeights({c: 1.0 for c in class_ids}, epsilon, k_nearest)
    stats = distance_stats(all_embeddings, all_labels, k_nearest)
    weights, raw = weights_from_stats(stats, epsilon, min_weight)
    return ClassWeights(weights, epsilon, k_nearest, raw=raw)


def _check_dataset(dataset: Sequence[UdfsSequence]) -> dict:
    by_class: dict = {}
    for i, seq in enumerate(dataset):
        if seq.label is None:
            raise InsufficientSamples(f"trace {seq.trace_id!r} has no label")
        if seq.label == UNKNOWN:
            raise InsufficientSamples(f"training trace {seq.trace_id!r} uses the reserved label {UNKNOWN!r}")
        by_class.setdefault(seq.label, []).append(i)
    if len(by_class) < 2:
        raise InsufficientSamples(f"training needs >= 2 classes, got {len(by_class)}")
    small = sorted(c for c, idx in by_class.items() if len(idx) < 2)
    if small:
        raise InsufficientSamples(f"classes with fewer than 2 samples: {small}")
    return {c: by_class[c] for c in sorted(by_class)}


def train(
    dataset: Sequence[UdfsSequence],
    config: TrainConfig = TrainConfig(),
    rng: Rng | None = None,
    encoder_config: EncoderConfig = EncoderConfig(),
    workers: int = 1,
) -> TrainedModel:
    """Episodic prototypical training; returns encoder params and global prototypes."""
    rng = rng if rng is not None else Rng(0)
    by_class = _check_dataset(dataset)
    classes = list(by_class)
    c_way = min(config.c_way, len(classes))
    n_episodes = max(1, math.ceil(len(dataset) / (c_way * config.k_shot)))
    all_labels = [s.label for s in dataset]

    params = init_params(encoder_config, rng.spawn(1))
    sampler, dropout_rng = rng.spawn(2), rng.spawn(3)
    opt = Adam(list(params.values()), config.lr, config.beta1, config.beta2, config.adam_eps)
    weights = ClassWeights({c: 1.0 for c in classes}, config.epsilon, config.k_nearest, config.recompute_period)
    history = []

    for epoch in range(config.epochs):
        snapshot = None
        if epoch > 0 and config.recompute_period > 0 and epoch % config.recompute_period == 0:
            emb = embed(list(dataset), params, encoder_config, workers=workers)
            weights = recompute_class_weights(emb, all_labels, config.k_nearest, config.epsilon, config.min_weight)
            weights.recompute_period = config.recompute_period
            snapshot = dict(weights.weights)
        losses = []
        for _ in range(n_episodes):
            chosen = sorted(sampler.choice(len(classes), size=c_way, replace=False).tolist())
            idx = []
            for ci in chosen:
                pool = by_class[classes[ci]]
                take = min(config.k_shot, len(pool))
                idx.extend(pool[j] for j in sampler.choice(len(pool), size=take, replace=False))
            episode = [dataset[i] for i in idx]
            labels = [s.label for s in episode]
            try:
                h = encode(batch_sequences(episode), params, encoder_config, training=True, rng=dropout_rng)
            except NonFiniteActivation as exc:
                raise DivergedTraining(f"epoch {epoch}: {exc}") from exc
            loss = proto_loss(h, labels, batch_prototypes(h, labels), weights)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedTraining(f"epoch {epoch}: non-finite loss")
            opt.zero_grad()
            E.backward(loss)
            opt.step()
            losses.append(value)
        mean_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "mean_loss": mean_loss, "weights": snapshot})
        logger.info("epoch %d loss %.6f", epoch, mean_loss)

    emb = embed(list(dataset), params, encoder_config, workers=workers)
    class_ids, protos = class_means(emb, all_labels)
    for p in params.values():
        p.grad = None
    return TrainedModel(
        encoder_config=encoder_config,
        params=params,
        class_ids=list(class_ids),
        prototypes=protos.astype(np.float32),
        train_config=config,
        seeds={"train": rng.seed, "rng_algorithm": Rng.algorithm},
        history=history,
        class_weights=dict(weights.weights),
    )


def write_training_log(history: Sequence[Mapping], class_ids: Sequence, path) -> None:
    """CSV with epoch, mean_loss and one ``w_<class>`` column filled on recompute epochs."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"] + [f"w_{c}" for c in class_ids])
        for row in history:
            w = row.get("weights")
            cells = [repr(w[c]) if w else "" for c in class_ids]
            writer.writerow([row["epoch"], repr(row["mean_loss"])] + cells)
