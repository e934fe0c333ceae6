"""Weighted-sum linear probing of a frozen backbone.

The probe learns one logit per hidden state of the backbone; the softmax of
those logits mixes the layers, the mixture is mean-pooled over time and a
linear classifier maps it to class logits. Prediction heads play no part:
only ``hidden_states`` of the feature source is consulted.

Mean pooling is linear, so pooling each layer first and mixing afterwards
gives the same features as mixing full sequences; training uses the pooled
form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .optim import Adam
from .synth import DatasetSplit, labels_of, waves_of
from .tensor import Tensor

REPORT_VERSION = 1
CONDITIONS = ("clean", "seen_noise", "unseen_noise")


class FeatureSource(Protocol):
    def hidden_states(self, waves: np.ndarray) -> list[Tensor]: ...

    def backbone_hash(self) -> str: ...

    def backbone_params(self) -> int: ...


class ConcatenatedStudents:
    """Several independently distilled students used side by side.

    Hidden state ``l`` is the feature-axis concatenation of every student's
    hidden state ``l``; the backbone parameter count is the sum.
    """

    def __init__(self, students: Sequence):
        if not students:
            raise ConfigError("need at least one student")
        depths = {len(s.encoder.params) for s in students}
        if len(depths) != 1:
            raise ConfigError("concatenated students must share an architecture")
        self.students = list(students)

    def hidden_states(self, waves):
        per_student = [s.hidden_states(waves) for s in self.students]
        return [T.concat(list(layer), axis=-1) for layer in zip(*per_student)]

    def backbone_hash(self) -> str:
        return "+".join(s.backbone_hash() for s in self.students)

    def backbone_params(self) -> int:
        return sum(s.backbone_params() for s in self.students)

    def head_params(self) -> int:
        return sum(s.head_params() for s in self.students)


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 2000
    lr: float = 0.1
    seed: int = 0
    init_std: float = 0.01

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0:
            raise ConfigError("probe steps must be >= 0 and lr > 0")


@dataclass
class ProbeModel:
    layer_logits: Tensor
    weight: Tensor
    bias: Tensor

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]

    def layer_weights(self) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.layer_logits).data

    def parameters(self) -> dict[str, Tensor]:
        return {"layer_logits": self.layer_logits, "weight": self.weight, "bias": self.bias}

    def logits(self, pooled: np.ndarray) -> Tensor:
        mixed = weighted_sum_features([pooled[:, l] for l in range(pooled.shape[1])], self.layer_logits)
        return T.linear(mixed, self.weight, self.bias)

    def predict(self, pooled: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return np.argmax(self.logits(pooled).data, axis=-1)


def weighted_sum_features(hidden_states: Sequence, logits: Tensor) -> Tensor:
    """``sum_l softmax(logits)_l * state_l`` with gradients blocked into the states."""
    arrays = [s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64) for s in hidden_states]
    if not arrays:
        raise DimensionError("no hidden states to mix")
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise DimensionError(f"hidden states disagree in shape: {shape} vs {a.shape}")
    if logits.shape != (len(arrays),):
        raise DimensionError(f"expected {len(arrays)} layer logits, got shape {logits.shape}")
    stacked = Tensor(np.stack(arrays).reshape(len(arrays), -1))
    weights = T.reshape(T.softmax(logits), (1, len(arrays)))
    return T.reshape(T.matmul(weights, stacked), shape)


def pooled_hidden_states(source: FeatureSource, waves: np.ndarray) -> np.ndarray:
    """Time-averaged hidden states, shape ``(N, n_states, D)``."""
    with T.no_grad():
        states = source.hidden_states(np.asarray(waves, dtype=np.float64))
    return np.stack([s.data.mean(axis=1) for s in states], axis=1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take(logp, (np.arange(len(labels)), np.asarray(labels)))
    return -T.mean(picked)


def fit_probe(pooled: np.ndarray, labels: np.ndarray, n_classes: int, config: ProbeConfig) -> ProbeModel:
    """Full-batch Adam on cross-entropy over pooled ``(N, L, D)`` features."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ConfigError("probe training data must contain at least two classes")
    if n_classes <= labels.max():
        raise ConfigError(f"label {labels.max()} out of range for {n_classes} classes")
    _, n_states, width = pooled.shape
    rng = np.random.default_rng([config.seed, 4242])
    probe = ProbeModel(
        layer_logits=Tensor(np.zeros(n_states), requires_grad=True),
        weight=Tensor(rng.normal(0.0, config.init_std, size=(width, n_classes)), requires_grad=True),
        bias=Tensor(np.zeros(n_classes), requires_grad=True),
    )
    params = probe.parameters()
    opt = Adam(list(params), [p.shape for p in params.values()], lr=config.lr)
    for _ in range(config.steps):
        for p in params.values():
            p.grad = None
        loss = cross_entropy(probe.logits(pooled), labels)
        T.backward(loss)
        opt.step(params, {k: p.grad for k, p in params.items()})
    return probe


def train_probe(source: FeatureSource, dataset_train, config: ProbeConfig, n_classes: int | None = None) -> ProbeModel:
    if not len(dataset_train):
        raise ConfigError("probe training set is empty")
    labels = labels_of(dataset_train)
    n_classes = n_classes or int(labels.max()) + 1
    before = source.backbone_hash()
    pooled = pooled_hidden_states(source, waves_of(dataset_train))
    probe = fit_probe(pooled, labels, n_classes, config)
    if source.backbone_hash() != before:
        raise ContractError("backbone parameters changed during probe training")
    return probe


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    mode: str
    metrics: dict[str, float]
    counts: dict[str, int]
    params: dict[str, int]
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "mode": self.mode,
            "seeds": self.seeds,
            "params": self.params,
            "metrics": self.metrics,
            "counts": self.counts,
            "config": self.config,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(mode=d["mode"], metrics=d["metrics"], counts=d.get("counts", {}), params=d["params"],
                   seeds=d.get("seeds", {}), config=d.get("config", {}), extra=d.get("extra", {}),
                   version=d["version"])


def accuracy(probe, source: FeatureSource, samples) -> float:
    if not len(samples):
        raise ConfigError("evaluation set is empty")
    pooled = pooled_hidden_states(source, waves_of(samples))
    return float(np.mean(probe.predict(pooled) == labels_of(samples)))


def evaluate(source: FeatureSource, probe, split: DatasetSplit, mode: str = "", head_params: int = 0,
             seeds: dict | None = None, config: dict | None = None) -> MetricsReport:
    conditions = split.conditions()
    metrics, counts = {}, {}
    for name in CONDITIONS:
        samples = conditions[name]
        metrics[name] = accuracy(probe, source, samples)
        counts[name] = len(samples)
    return MetricsReport(
        mode=mode,
        metrics=metrics,
        counts=counts,
        params={"backbone": int(source.backbone_params()), "heads": int(head_params)},
        seeds=seeds or {},
        config=config or {},
    )
