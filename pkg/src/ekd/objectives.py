"""Layer-wise distillation loss and the three ensemble objectives.

The per-layer loss is an L1 term plus ``-log sigmoid(cos)``, where ``cos`` is
the cosine similarity averaged over timesteps. Teacher targets are always
treated as constants.

Inputs may carry a leading batch axis ``(B, t, d)``; the loss is computed per
item and averaged uniformly over items.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, EnsembleShapeError, NumericError
from .models import HiddenState
from .tensor import Tensor

COS_EPS = 1e-8
NORMALIZATIONS = ("per_timestep", "paper_exact")
# -log sigmoid(1): the loss of a perfect prediction.
LOSS_FLOOR = float(np.log1p(np.exp(-1.0)))


def _tensor(x) -> Tensor:
    if isinstance(x, HiddenState):
        return x.values
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite values in loss input")
    return Tensor(arr)


def _array(x) -> np.ndarray:
    if isinstance(x, HiddenState):
        return x.values.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def cossim_timestep_avg(a, b, eps: float = COS_EPS) -> Tensor:
    """Mean over timesteps of the row-wise cosine similarity.

    Returns a scalar for ``(t, d)`` inputs and a ``(B,)`` vector for batched ones.
    """
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine similarity needs equal shapes, got {a.shape} and {b.shape}")
    if a.ndim < 2 or a.shape[-2] < 1:
        raise DimensionError(f"expected (t, d) rows with t >= 1, got {a.shape}")
    dots = T.tsum(a * b, axis=-1)
    denom = T.row_norm(a) * T.row_norm(b) + eps
    return T.mean(dots / denom, axis=-1)


def layer_loss(h_student, h_teacher, normalization: str = "per_timestep") -> Tensor:
    """Single-layer distillation loss; differentiable in ``h_student`` only.

    ``per_timestep`` divides the L1 norm by ``t * d``; ``paper_exact`` divides
    by ``d`` alone, summing over timesteps.
    """
    hs = _tensor(h_student)
    ht = _tensor(h_teacher).detach()
    if hs.shape != ht.shape:
        raise DimensionError(f"prediction shape {hs.shape} does not match target shape {ht.shape}")
    if normalization == "per_timestep":
        l1 = T.mean(T.tabs(hs - ht), axis=(-2, -1))
    elif normalization == "paper_exact":
        l1 = T.tsum(T.tabs(hs - ht), axis=(-2, -1)) * (1.0 / hs.shape[-1])
    else:
        raise ContractError(f"unknown loss normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    per_item = l1 - T.log_sigmoid(cossim_timestep_avg(hs, ht))
    if per_item.ndim:
        return T.mean(per_item)
    return per_item


# ---------------------------------------------------------------------------
# Target aggregation


@dataclass
class DistillTargets:
    mode: str
    layers: list[np.ndarray] | None = None
    per_teacher: list[list[np.ndarray]] | None = None
    M: int = 1

    @property
    def width(self) -> int:
        if self.layers is not None:
            return self.layers[0].shape[-1]
        return self.per_teacher[0][0].shape[-1]


def _check_ensemble(per_teacher) -> list[list[np.ndarray]]:
    arrays = [[_array(h) for h in layers] for layers in per_teacher]
    if not arrays:
        raise EnsembleShapeError("no teachers given")
    n_taps = len(arrays[0])
    if n_taps == 0:
        raise EnsembleShapeError("teachers expose no tap layers")
    ref = arrays[0][0].shape
    for m, layers in enumerate(arrays):
        if len(layers) != n_taps:
            raise EnsembleShapeError(f"teacher {m} has {len(layers)} tap layers, expected {n_taps}")
        for i, h in enumerate(layers):
            if h.shape != ref:
                raise EnsembleShapeError(f"teacher {m} tap {i} has shape {h.shape}, expected {ref}")
    return arrays


def aggregate_average(per_teacher) -> DistillTargets:
    """Per-tap elementwise mean across teachers.

    Values are sorted across the teacher axis before the left-to-right sum,
    so the result is bit-identical under any teacher ordering.
    """
    arrays = _check_ensemble(per_teacher)
    M = len(arrays)
    layers = []
    for i in range(len(arrays[0])):
        stacked = np.sort(np.stack([arrays[m][i] for m in range(M)]), axis=0)
        acc = stacked[0].copy()
        for m in range(1, M):
            acc += stacked[m]
        layers.append(acc / M)
    return DistillTargets(mode="avg", layers=layers, M=M)


def aggregate_concat(per_teacher) -> DistillTargets:
    """Per-tap feature-axis concatenation in ensemble order (width ``D_T * M``)."""
    arrays = _check_ensemble(per_teacher)
    layers = [np.concatenate([layers_m[i] for layers_m in arrays], axis=-1) for i in range(len(arrays[0]))]
    return DistillTargets(mode="concat", layers=layers, M=len(arrays))


def per_teacher_targets(per_teacher) -> DistillTargets:
    arrays = _check_ensemble(per_teacher)
    return DistillTargets(mode="multi_pred", per_teacher=arrays, M=len(arrays))


def single_targets(per_teacher, teacher: int = 0) -> DistillTargets:
    arrays = _check_ensemble(per_teacher)
    return DistillTargets(mode="single", layers=[h.copy() for h in arrays[teacher]], M=1)


def build_targets(mode: str, per_teacher, single_teacher: int = 0) -> DistillTargets:
    if mode == "avg":
        return aggregate_average(per_teacher)
    if mode == "concat":
        return aggregate_concat(per_teacher)
    if mode == "multi_pred":
        return per_teacher_targets(per_teacher)
    if mode == "single":
        return single_targets(per_teacher, single_teacher)
    raise ContractError(f"unknown distillation mode {mode!r}")


# ---------------------------------------------------------------------------
# Ensemble objectives


def _mean_over_layers(predictions: Sequence, targets: Sequence[np.ndarray], normalization: str) -> tuple[Tensor, int]:
    if len(predictions) != len(targets):
        raise ContractError(f"got {len(predictions)} predictions for {len(targets)} tap layers")
    total = None
    for pred, target in zip(predictions, targets):
        term = layer_loss(pred, target, normalization)
        total = term if total is None else total + term
    return total, len(targets)


def _expect_mode(targets: DistillTargets, mode: str) -> None:
    if targets.mode != mode:
        raise ContractError(f"{mode} loss called with {targets.mode} targets")


def loss_single(predictions, targets: DistillTargets, normalization: str = "per_timestep") -> Tensor:
    _expect_mode(targets, "single")
    total, n = _mean_over_layers(predictions, targets.layers, normalization)
    return total / float(n)


def loss_avg(predictions, targets: DistillTargets, normalization: str = "per_timestep") -> Tensor:
    _expect_mode(targets, "avg")
    total, n = _mean_over_layers(predictions, targets.layers, normalization)
    return total / float(n)


def loss_concat(predictions, targets: DistillTargets, normalization: str = "per_timestep") -> Tensor:
    _expect_mode(targets, "concat")
    expected = targets.width
    for pred in predictions:
        width = _tensor(pred).shape[-1]
        if width != expected:
            raise DimensionError(f"concat prediction width {width} != D_T*M = {expected}")
    total, n = _mean_over_layers(predictions, targets.layers, normalization)
    return total / float(n)


def loss_multi_pred(predictions, targets: DistillTargets, normalization: str = "per_timestep") -> Tensor:
    _expect_mode(targets, "multi_pred")
    if len(predictions) != targets.M:
        raise ContractError(f"got {len(predictions)} prediction-head sets for {targets.M} teachers")
    total = None
    n_taps = 0
    for preds_m, targets_m in zip(predictions, targets.per_teacher):
        set_total, n_taps = _mean_over_layers(preds_m, targets_m, normalization)
        total = set_total if total is None else total + set_total
    return total / float(n_taps * targets.M)


_LOSSES = {"single": loss_single, "avg": loss_avg, "concat": loss_concat, "multi_pred": loss_multi_pred}


def distillation_loss(mode: str, predictions, targets: DistillTargets, normalization: str = "per_timestep") -> Tensor:
    try:
        fn = _LOSSES[mode]
    except KeyError:
        raise ContractError(f"unknown distillation mode {mode!r}") from None
    return fn(predictions, targets, normalization)
