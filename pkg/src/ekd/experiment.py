"""Experiment matrix: build teachers, distil every requested mode, probe, report.

A config is one TOML or JSON document::

    version = 1
    modes = ["single", "avg", "concat", "multi_pred", "distilled_ensemble"]
    teacher_seeds = [1, 2]
    tap_layers = [2, 4, 6]
    output_dir = "runs/desk"

    [teacher]   # EncoderConfig fields
    [student]   # EncoderConfig fields
    [train]     # TrainConfig fields except mode
    [data]      # SplitConfig fields
    [probe]     # ProbeConfig fields

``EKD_OUTPUT_DIR`` overrides ``output_dir``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, EKDError, NumericError, SchemaVersionError
from .models import MODES, EncoderConfig, build_student, build_teacher_ensemble, validate_tap_layers
from .probe import REPORT_VERSION, ConcatenatedStudents, MetricsReport, ProbeConfig, evaluate, train_probe
from .synth import SplitConfig, make_split
from .tensor import grad_check
from .trainer import TrainConfig, corpus_loss, init_state, load_checkpoint, save_checkpoint, student_loss, train

CONFIG_VERSION = 1
ENSEMBLE_MODE = "distilled_ensemble"
EXPERIMENT_MODES = MODES + (ENSEMBLE_MODE,)
OUTPUT_ENV = "EKD_OUTPUT_DIR"
METRIC_COLUMNS = ("clean", "seen_noise", "unseen_noise")

_TOP_LEVEL = {"version", "modes", "teacher_seeds", "tap_layers", "output_dir",
              "teacher", "student", "train", "data", "probe"}


@dataclass(frozen=True)
class ExperimentConfig:
    modes: tuple[str, ...]
    teacher: EncoderConfig = field(default_factory=EncoderConfig.teacher_default)
    student: EncoderConfig = field(default_factory=EncoderConfig.student_default)
    teacher_seeds: tuple[int, ...] = (1, 2)
    tap_layers: tuple[int, ...] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SplitConfig = field(default_factory=SplitConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    output_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "teacher_seeds", tuple(int(s) for s in self.teacher_seeds))
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"field 'version': expected {CONFIG_VERSION}, got {self.version!r}")
        if not self.modes:
            raise ConfigError("field 'modes': at least one mode is required")
        for mode in self.modes:
            if mode not in EXPERIMENT_MODES:
                raise ConfigError(f"field 'modes': unknown mode {mode!r}; valid modes: {', '.join(EXPERIMENT_MODES)}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("field 'modes': duplicate entries")
        if not self.teacher_seeds:
            raise ConfigError("field 'teacher_seeds': at least one teacher is required")
        taps = self.tap_layers
        if taps is not None:
            try:
                taps = validate_tap_layers(taps, self.teacher.n_layers)
            except ConfigError as exc:
                raise ConfigError(f"field 'tap_layers': {exc}") from exc
            object.__setattr__(self, "tap_layers", taps)
        if self.student.window != self.teacher.window or self.student.hop != self.teacher.hop:
            raise ConfigError("fields 'student.window/hop' must match the teacher framing")
        if self.data.window != self.teacher.window:
            raise ConfigError("field 'data.window' must match the encoder window")

    def to_dict(self) -> dict:
        """Config echo for reports; the output directory is deliberately left out."""
        return {
            "version": self.version,
            "modes": list(self.modes),
            "teacher_seeds": list(self.teacher_seeds),
            "tap_layers": None if self.tap_layers is None else list(self.tap_layers),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "mode"},
            "data": self.data.to_dict(),
            "probe": {f.name: getattr(self.probe, f.name) for f in fields(self.probe)},
        }


def _section(cls, raw, name: str, base=None):
    if raw is None:
        return base if base is not None else cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"field '{name}': expected a table, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known or (cls is TrainConfig and key == "mode"):
            raise ConfigError(f"field '{name}.{key}': unknown field")
    if base is not None:
        merged = base.to_dict()
        if "d_model" in raw and "d_ff" not in raw:
            merged["d_ff"] = None
        merged.update(raw)
        raw = merged
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise ConfigError(f"field '{name}': {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{name}': {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table/object")
    for key in raw:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"field '{key}': unknown field")
    if "version" not in raw:
        raise ConfigError("field 'version': missing")
    if "modes" not in raw:
        raise ConfigError("field 'modes': missing")
    modes = raw["modes"]
    if isinstance(modes, str) or not isinstance(modes, list):
        raise ConfigError("field 'modes': expected a list of mode names")
    teacher = _section(EncoderConfig, raw.get("teacher"), "teacher", EncoderConfig.teacher_default())
    student = _section(EncoderConfig, raw.get("student"), "student", EncoderConfig.student_default())
    train_cfg = _section(TrainConfig, raw.get("train"), "train")
    data = _section(SplitConfig, raw.get("data"), "data")
    probe = _section(ProbeConfig, raw.get("probe"), "probe")
    kwargs = {}
    for key in ("teacher_seeds", "tap_layers", "output_dir", "version"):
        if key in raw:
            kwargs[key] = raw[key]
    return ExperimentConfig(modes=modes, teacher=teacher, student=student, train=train_cfg, data=data,
                            probe=probe, **kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse a ``.toml`` or ``.json`` config; syntax errors carry the line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def output_dir(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or config.output_dir)


# ---------------------------------------------------------------------------
# Running


@dataclass
class ExperimentResult:
    reports: dict[str, Path]
    failures: dict[str, str]
    output_dir: Path

    @property
    def ok(self) -> bool:
        return not self.failures

    def exit_code(self) -> int:
        if not self.failures:
            return 0
        if any(kind == "NumericError" for kind in self.failures.values()):
            return 3
        if any(kind == "ConfigError" for kind in self.failures.values()):
            return 2
        return 1


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class _RunLog:
    """Timestamps live only here, never in reports."""

    def __init__(self, path: Path):
        self.path = path

    def write(self, event: str, **info) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "event": event, **info}) + "\n")


def _distil(config: ExperimentConfig, mode: str, ensemble, split, out: Path, tag: str, single_teacher: int = 0):
    tc = replace(config.train, mode=mode, single_teacher=single_teacher)
    initial = corpus_loss(init_state(tc, config.student, ensemble), split.train, ensemble)
    log_path = out / "logs" / f"train_{tag}.jsonl"
    log_path.unlink(missing_ok=True)
    state, _ = train(tc, split.train, ensemble, config.student, log_path=log_path)
    final = corpus_loss(state, split.train, ensemble)
    save_checkpoint(state, out / "checkpoints" / f"{tag}.ckpt")
    return state, {"loss_initial": initial, "loss_final": final}


def run_mode(config: ExperimentConfig, mode: str, ensemble, split, out: Path) -> MetricsReport:
    if mode == ENSEMBLE_MODE:
        students, losses = [], []
        for m in range(ensemble.M):
            state, info = _distil(config, "single", ensemble, split, out, f"{mode}.{m}", single_teacher=m)
            students.append(state.student)
            losses.append(info)
        source = ConcatenatedStudents(students)
        head_params = source.head_params()
        extra = {"members": losses}
    else:
        state, info = _distil(config, mode, ensemble, split, out, mode)
        source = state.student
        head_params = source.head_params()
        extra = dict(info)
    probe = train_probe(source, split.train, config.probe, n_classes=config.data.n_classes)
    extra["layer_weights"] = [float(w) for w in probe.layer_weights()]
    seeds = {"teachers": list(config.teacher_seeds), "student": config.train.seed,
             "data": config.data.seed, "probe": config.probe.seed}
    report = evaluate(source, probe, split, mode=mode, head_params=head_params, seeds=seeds, config=config.to_dict())
    report.extra = extra
    return report


def run_experiment(config_or_path) -> ExperimentResult:
    """Run every configured mode; completed reports survive a later failure."""
    config = config_or_path if isinstance(config_or_path, ExperimentConfig) else load_config(config_or_path)
    out = output_dir(config)
    for sub in ("reports", "checkpoints", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    log = _RunLog(out / "run.log")
    log.write("start", modes=list(config.modes))
    ensemble = build_teacher_ensemble(config.teacher, config.teacher_seeds, config.tap_layers)
    split = make_split(config.data)
    result = ExperimentResult({}, {}, out)
    for mode in config.modes:
        log.write("mode_start", mode=mode)
        try:
            report = run_mode(config, mode, ensemble, split, out)
        except EKDError as exc:
            kind = "NumericError" if isinstance(exc, NumericError) else type(exc).__name__
            if isinstance(exc, ConfigError):
                kind = "ConfigError"
            result.failures[mode] = kind
            log.write("mode_failed", mode=mode, error=kind, message=str(exc))
            continue
        path = out / "reports" / f"{mode}.json"
        _atomic_write(path, report.to_json())
        result.reports[mode] = path
        log.write("mode_done", mode=mode, report=str(path), metrics=report.metrics)
    log.write("finish", completed=sorted(result.reports), failed=sorted(result.failures))
    return result


def load_feature_source(checkpoint_paths):
    """Rebuild a student (or concatenated students) from checkpoint files."""
    students = [load_checkpoint(p).student for p in checkpoint_paths]
    return students[0] if len(students) == 1 else ConcatenatedStudents(students)


def evaluate_checkpoints(checkpoint_paths, split, probe_config: ProbeConfig, mode: str = "") -> MetricsReport:
    source = load_feature_source(checkpoint_paths)
    probe = train_probe(source, split.train, probe_config, n_classes=split.config.n_classes if split.config else None)
    return evaluate(source, probe, split, mode=mode, head_params=source.head_params())


# ---------------------------------------------------------------------------
# Comparison tables


@dataclass
class ComparisonTable:
    rows: list[dict]
    baseline: str | None

    def flagged(self) -> list[tuple[str, str]]:
        return [(r["mode"], c) for r in self.rows for c in METRIC_COLUMNS if r["flags"][c]]

    def to_text(self) -> str:
        header = ["mode", "params", *METRIC_COLUMNS]
        body = []
        for r in self.rows:
            cells = [r["mode"] + (" (baseline)" if r["mode"] == self.baseline else ""), str(r["params"])]
            cells += [f"{r[c]:.4f}" + ("*" if r["flags"][c] else "") for c in METRIC_COLUMNS]
            body.append(cells)
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip() for cells in body]
        if self.baseline:
            lines.append(f"* better than baseline '{self.baseline}'")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "params", *METRIC_COLUMNS, *(f"{c}_flag" for c in METRIC_COLUMNS)])
        for r in self.rows:
            w.writerow([r["mode"], r["params"], *(repr(r[c]) for c in METRIC_COLUMNS),
                        *(int(r["flags"][c]) for c in METRIC_COLUMNS)])
        return buf.getvalue()


def _mode_order(mode: str) -> tuple:
    return (EXPERIMENT_MODES.index(mode), "") if mode in EXPERIMENT_MODES else (len(EXPERIMENT_MODES), mode)


def load_report(path) -> MetricsReport:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    version = raw.get("version") if isinstance(raw, dict) else None
    if version != REPORT_VERSION:
        raise SchemaVersionError(f"report {path} has schema version {version!r}; expected {REPORT_VERSION}")
    try:
        return MetricsReport.from_dict(raw)
    except KeyError as exc:
        raise ConfigError(f"report {path} lacks field {exc}") from exc


def compare(report_paths, baseline: str | None = None) -> ComparisonTable:
    """Rows are modes in a fixed order; metric cells strictly above the baseline are flagged."""
    if not report_paths:
        raise ConfigError("compare needs at least one report")
    reports = [load_report(p) for p in report_paths]
    by_mode = {}
    for r in reports:
        if r.mode in by_mode:
            raise ConfigError(f"two reports for mode {r.mode!r}")
        by_mode[r.mode] = r
    if baseline is not None and baseline not in by_mode:
        raise ConfigError(f"baseline mode {baseline!r} not among reports ({', '.join(sorted(by_mode))})")
    base = by_mode.get(baseline) if baseline else None
    rows = []
    for mode in sorted(by_mode, key=_mode_order):
        r = by_mode[mode]
        row = {"mode": mode, "params": int(r.params["backbone"])}
        row.update({c: float(r.metrics[c]) for c in METRIC_COLUMNS})
        row["flags"] = {c: bool(base is not None and mode != baseline and r.metrics[c] > base.metrics[c])
                        for c in METRIC_COLUMNS}
        rows.append(row)
    return ComparisonTable(rows, baseline)


# ---------------------------------------------------------------------------
# Gradient check of every mode on a small fixed configuration

GRAD_CHECK_TEACHER = EncoderConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16)
GRAD_CHECK_STUDENT = EncoderConfig(d_model=4, n_layers=2, n_heads=1, d_ff=8)
# Parameters are redrawn at this scale before checking; at the 0.02 init scale the
# query/key gradients sit near the finite-difference noise floor.
GRAD_CHECK_PARAM_STD = 0.6


def gradient_check_modes(seed: int = 0, eps: float = 1e-5, n_samples: int = 40) -> dict[str, float]:
    """Max relative finite-difference error of each mode's full loss over all student parameters."""
    ensemble = build_teacher_ensemble(GRAD_CHECK_TEACHER, (1, 2), tap_layers=(1, 2))
    rng = np.random.default_rng([seed, 2024])
    wave = rng.normal(size=(1, n_samples))
    taps = ensemble.forward_batch(wave)
    errors = {}
    for mode in MODES:
        student = build_student(GRAD_CHECK_STUDENT, mode, ensemble.d_model, len(ensemble.tap_layers), ensemble.M,
                                seed=seed)
        params = list(student.named_parameters().values())
        for p in params:
            p.data[...] = rng.normal(0.0, GRAD_CHECK_PARAM_STD, size=p.shape)
        errors[mode] = grad_check(lambda: student_loss(student, wave, taps, mode), params, eps=eps)
    return errors
