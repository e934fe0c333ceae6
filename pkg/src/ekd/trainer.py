"""Distillation loop, checkpoints and the JSON-lines training log."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointParseError,
    CheckpointVersionError,
    CompatibilityError,
    ConfigError,
    ContractError,
    NumericError,
)
from .models import MODES, EncoderConfig, StudentModel, TeacherEnsemble, build_student, head_width, heads_forward
from .objectives import NORMALIZATIONS, build_targets, distillation_loss
from .optim import Adam, clip_by_global_norm

CHECKPOINT_MAGIC = b"EKDCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "multi_pred"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    warmup_frac: float = 0.05
    seed: int = 0
    loss_normalization: str = "per_timestep"
    single_teacher: int = 0
    shared_head_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss_normalization not in NORMALIZATIONS:
            raise ConfigError(f"loss_normalization must be one of {NORMALIZATIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    student: StudentModel
    config: TrainConfig
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    grad_norm_history: list[float] = field(default_factory=list)
    order: np.ndarray | None = None
    cursor: int = 0
    n_teachers: int = 1
    d_teacher: int = 0
    n_taps: int = 0


def init_state(config: TrainConfig, student_cfg: EncoderConfig, ensemble: TeacherEnsemble) -> TrainState:
    n_teachers = ensemble.M
    if config.mode == "single" and not 0 <= config.single_teacher < n_teachers:
        raise ConfigError(f"single_teacher={config.single_teacher} is out of range for {n_teachers} teachers")
    student = build_student(
        student_cfg,
        config.mode,
        ensemble.d_model,
        len(ensemble.tap_layers),
        n_teachers,
        seed=config.seed,
        shared_head_init=config.shared_head_init,
    )
    return _fresh_state(student, config, n_teachers, ensemble.d_model, len(ensemble.tap_layers))


def _fresh_state(student, config, n_teachers, d_teacher, n_taps) -> TrainState:
    params = student.named_parameters()
    optimizer = Adam(list(params), [p.shape for p in params.values()], config.lr, config.betas, config.adam_eps)
    rng = np.random.default_rng([config.seed, 31337])
    return TrainState(student, config, optimizer, rng, n_teachers=n_teachers, d_teacher=d_teacher, n_taps=n_taps)


def learning_rate(config: TrainConfig, step: int) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then constant."""
    warmup = max(1, math.ceil(config.warmup_frac * config.steps))
    return config.lr * min(1.0, (step + 1) / warmup)


def _check_heads(state: TrainState, mode: str) -> None:
    student = state.student
    expected_sets = state.n_teachers if mode == "multi_pred" else 1
    if len(student.head_sets) != expected_sets:
        raise ContractError(f"{mode} mode needs {expected_sets} head set(s), student has {len(student.head_sets)}")
    width = head_width(mode, state.d_teacher, state.n_teachers)
    for heads in student.head_sets:
        if len(heads) != state.n_taps:
            raise ContractError(f"expected {state.n_taps} heads per set, found {len(heads)}")
        for head in heads:
            if head.weight.shape != (student.cfg.d_model, width):
                raise ContractError(f"head shape {head.weight.shape} inconsistent with {mode} mode (expected {(student.cfg.d_model, width)})")


def distill_step(state: TrainState, batch: np.ndarray, ensemble: TeacherEnsemble, mode: str | None = None,
                 teacher_taps: np.ndarray | None = None) -> tuple[TrainState, float]:
    """One optimisation step on a ``(B, n)`` batch of waveforms.

    ``teacher_taps`` may carry precomputed ensemble outputs of shape
    ``(M, n_taps, B, t, D_T)``; otherwise the frozen teachers are run here.
    """
    cfg = state.config
    mode = mode or cfg.mode
    if mode != cfg.mode:
        raise ContractError(f"state was configured for {cfg.mode}, step requested {mode}")
    _check_heads(state, mode)
    batch = np.asarray(batch, dtype=np.float64)
    if teacher_taps is None:
        teacher_taps = ensemble.forward_batch(batch)
    student = state.student
    try:
        loss = student_loss(student, batch, teacher_taps, mode, cfg.single_teacher, cfg.loss_normalization)
        params = student.named_parameters()
        for p in params.values():
            p.grad = None
        T.backward(loss)
    except NumericError as exc:
        raise NumericError(f"step {state.step}: {exc}") from exc
    names = list(params)
    grads = [np.zeros_like(params[n].data) if params[n].grad is None else params[n].grad for n in names]
    for n, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"step {state.step}: non-finite gradient for {n}")
    grads, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
    state.optimizer.step(params, dict(zip(names, grads)), lr=learning_rate(cfg, state.step))
    for n in names:
        if not np.all(np.isfinite(params[n].data)):
            raise NumericError(f"step {state.step}: parameter {n} became non-finite")
    value = loss.item()
    state.step += 1
    state.loss_history.append(value)
    state.grad_norm_history.append(norm)
    return state, value


def student_loss(student: StudentModel, batch: np.ndarray, teacher_taps, mode: str, single_teacher: int = 0,
                 normalization: str = "per_timestep") -> T.Tensor:
    """Full distillation loss of ``student`` on a batch, given ensemble outputs ``(M, n_taps, B, t, D_T)``."""
    targets = build_targets(mode, [list(taps_m) for taps_m in teacher_taps], single_teacher)
    z = student.encoder.forward(batch)[-1]
    heads = student.head_sets if mode == "multi_pred" else student.head_sets[0]
    return distillation_loss(mode, heads_forward(z, heads), targets, normalization)


def corpus_loss(state: TrainState, dataset, ensemble: TeacherEnsemble, batch_size: int = 64) -> float:
    """Mean distillation loss of the current student over a whole corpus (no update)."""
    cfg = state.config
    waves = np.stack([np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in dataset])
    total = 0.0
    with T.no_grad():
        for start in range(0, len(waves), batch_size):
            batch = waves[start:start + batch_size]
            loss = student_loss(state.student, batch, ensemble.forward_batch(batch), cfg.mode,
                                cfg.single_teacher, cfg.loss_normalization)
            total += loss.item() * len(batch)
    return total / len(waves)


def _next_batch(state: TrainState, n_items: int) -> np.ndarray:
    size = min(state.config.batch_size, n_items)
    if state.order is None or state.cursor + size > n_items:
        state.order = state.rng.permutation(n_items)
        state.cursor = 0
    idx = state.order[state.cursor: state.cursor + size]
    state.cursor += size
    return idx


def train(config: TrainConfig, dataset, ensemble: TeacherEnsemble, student_cfg: EncoderConfig | None = None,
          state: TrainState | None = None, stop_at: int | None = None, log_path=None) -> tuple[TrainState, list[float]]:
    """Run distillation until ``config.steps`` (or ``stop_at``) steps are done.

    Pass ``state`` to resume from a checkpoint. Teacher outputs for the whole
    corpus are computed once, since the teachers are frozen.
    """
    waves = np.stack([np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in dataset]) if len(dataset) else None
    if waves is None:
        raise ConfigError("training dataset is empty")
    if state is None:
        state = init_state(config, student_cfg or EncoderConfig.student_default(), ensemble)
    taps_all = ensemble.forward_batch(waves)
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    log = open(log_path, "a") if log_path else None
    try:
        while state.step < end:
            idx = _next_batch(state, len(waves))
            step = state.step
            _, loss = distill_step(state, waves[idx], ensemble, teacher_taps=taps_all[:, :, idx])
            if log:
                log.write(json.dumps({"step": step, "loss": loss, "grad_norm": state.grad_norm_history[-1],
                                      "lr": learning_rate(config, step)}) + "\n")
    finally:
        if log:
            log.close()
    return state, state.loss_history


# ---------------------------------------------------------------------------
# Checkpoints: magic, u64 header length, JSON header, little-endian float64 blob


def save_checkpoint(state: TrainState, path, include_heads: bool = True) -> None:
    params = state.student.named_parameters()
    if not include_heads:
        params = {k: v for k, v in params.items() if k.startswith("encoder.")}
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in params.items():
        arrays.append((f"param/{name}", p.data))
        arrays.append((f"adam_m/{name}", state.optimizer.m[name]))
        arrays.append((f"adam_v/{name}", state.optimizer.v[name]))
    arrays.append(("loss_history", np.asarray(state.loss_history, dtype=np.float64)))
    arrays.append(("grad_norm_history", np.asarray(state.grad_norm_history, dtype=np.float64)))
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": state.student.cfg.to_dict(),
        "mode": state.student.mode,
        "has_heads": include_heads and bool(state.student.head_sets),
        "n_teachers": state.n_teachers,
        "d_teacher": state.d_teacher,
        "n_taps": state.n_taps,
        "seed": state.config.seed,
        "step": state.step,
        "adam_t": state.optimizer.t,
        "train_config": state.config.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "order": None if state.order is None else [int(i) for i in state.order],
        "cursor": state.cursor,
        "arrays": entries,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(head_bytes)))
        f.write(head_bytes)
        f.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint file into its header and named arrays."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointParseError("bad magic bytes", 0)
    if len(raw) < 16:
        raise CheckpointParseError("truncated header length", 8)
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointParseError(f"header length {hlen} exceeds file size {len(raw)}", 8)
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointParseError("header is not UTF-8", 16 + exc.start) from exc
    except json.JSONDecodeError as exc:
        raise CheckpointParseError(f"malformed JSON header: {exc.msg}", 16 + exc.pos) from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version!r}, this build reads {CHECKPOINT_VERSION}")
    blob_start = 16 + hlen
    blob = raw[blob_start:]
    if len(blob) % 8:
        raise CheckpointParseError("array payload is not a whole number of float64 values", blob_start + len(blob) - len(blob) % 8)
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        start, stop = e["offset"], e["offset"] + size
        if stop > len(values):
            raise CheckpointParseError(f"array {e['name']} runs past end of file", blob_start + 8 * len(values))
        arrays[e["name"]] = values[start:stop].reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, expected_config: EncoderConfig | None = None) -> TrainState:
    header, arrays = read_checkpoint(path)
    try:
        cfg = EncoderConfig(**header["encoder_config"])
    except (ConfigError, TypeError) as exc:
        raise CompatibilityError(f"checkpoint encoder config is unusable: {exc}") from exc
    if expected_config is not None and cfg != expected_config:
        raise CompatibilityError(f"checkpoint encoder config {cfg} differs from expected {expected_config}")
    tc = TrainConfig(**header["train_config"])
    student = build_student(cfg, header["mode"], header["d_teacher"], header["n_taps"], header["n_teachers"],
                            seed=header["seed"], shared_head_init=tc.shared_head_init)
    if not header["has_heads"]:
        student = student.without_heads()
    state = _fresh_state(student, tc, header["n_teachers"], header["d_teacher"], header["n_taps"])
    params = student.named_parameters()
    stored = {k[len("param/"):] for k in arrays if k.startswith("param/")}
    if stored != set(params):
        missing = sorted(set(params) - stored)[:3]
        extra = sorted(stored - set(params))[:3]
        raise CompatibilityError(f"checkpoint parameters do not match the model (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        data = arrays[f"param/{name}"]
        if data.shape != p.shape:
            raise CompatibilityError(f"parameter {name}: stored shape {data.shape} vs config shape {p.shape}")
        p.data[...] = data
        state.optimizer.m[name][...] = arrays[f"adam_m/{name}"]
        state.optimizer.v[name][...] = arrays[f"adam_v/{name}"]
    state.optimizer.t = header["adam_t"]
    state.step = header["step"]
    state.loss_history = [float(x) for x in arrays["loss_history"]]
    state.grad_norm_history = [float(x) for x in arrays["grad_norm_history"]]
    state.rng.bit_generator.state = header["rng_state"]
    state.order = None if header["order"] is None else np.asarray(header["order"], dtype=np.int64)
    state.cursor = header["cursor"]
    return state
