"""Toy teacher and student encoders.

Both are a framing front-end (fixed windows, linear projection, sinusoidal
positions) followed by pre-norm transformer layers. Hidden state ``0`` is the
projected input and hidden state ``l`` is the output of layer ``l``, so an
encoder with ``n_layers`` layers exposes ``n_layers + 1`` states. Teacher tap
indices use the same numbering.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, InputTooShortError
from .tensor import Tensor

MODES = ("single", "avg", "concat", "multi_pred")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int | None = None
    window: int = 16
    hop: int = 8
    init_std: float = 0.02
    pos_scale: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "window", "hop"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"EncoderConfig.{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.window >= self.hop >= 1:
            raise ConfigError(f"need window >= hop >= 1, got window={self.window} hop={self.hop}")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    @classmethod
    def teacher_default(cls) -> "EncoderConfig":
        return cls(d_model=32, n_layers=6)

    @classmethod
    def student_default(cls) -> "EncoderConfig":
        return cls(d_model=16, n_layers=2)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "window": self.window,
            "hop": self.hop,
            "init_std": self.init_std,
            "pos_scale": self.pos_scale,
            "ln_eps": self.ln_eps,
        }


@dataclass
class HiddenState:
    values: Tensor
    layer_index: int
    source: str

    @property
    def shape(self):
        return self.values.shape


def frame_count(n: int, window: int, hop: int) -> int:
    if n < window:
        raise InputTooShortError(f"input of length {n} is shorter than the window ({window})")
    return (n - window) // hop + 1


def frame_waves(waves: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Slice ``(B, n)`` waveforms into ``(B, t, window)`` frames."""
    waves = np.asarray(waves, dtype=np.float64)
    if waves.ndim == 1:
        waves = waves[None, :]
    t = frame_count(waves.shape[1], window, hop)
    idx = np.arange(t)[:, None] * hop + np.arange(window)[None, :]
    return np.ascontiguousarray(waves[:, idx])


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t, dtype=np.float64)[:, None]
    dims = np.arange(0, d, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, dims / d)
    out = np.zeros((t, d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : d // 2])
    return out


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


class Encoder:
    """Framing front-end plus a stack of pre-norm transformer layers."""

    def __init__(self, cfg: EncoderConfig, seed: int, trainable: bool = True, name: str = "encoder"):
        self.cfg = cfg
        self.seed = seed
        self.name = name
        self.trainable = trainable
        rng = np.random.default_rng(seed)
        d, f, std = cfg.d_model, cfg.d_ff, cfg.init_std
        shapes: list[tuple[str, tuple[int, ...], str]] = [
            ("in_proj.weight", (cfg.window, d), "normal"),
            ("in_proj.bias", (d,), "zeros"),
        ]
        for l in range(cfg.n_layers):
            p = f"layers.{l}."
            shapes += [
                (p + "ln1.gain", (d,), "ones"),
                (p + "ln1.bias", (d,), "zeros"),
                (p + "attn.wq", (d, d), "normal"),
                (p + "attn.bq", (d,), "zeros"),
                (p + "attn.wk", (d, d), "normal"),
                (p + "attn.wv", (d, d), "normal"),
                (p + "attn.bv", (d,), "zeros"),
                (p + "attn.wo", (d, d), "normal"),
                (p + "attn.bo", (d,), "zeros"),
                (p + "ln2.gain", (d,), "ones"),
                (p + "ln2.bias", (d,), "zeros"),
                (p + "ffn.w1", (d, f), "normal"),
                (p + "ffn.b1", (f,), "zeros"),
                (p + "ffn.w2", (f, d), "normal"),
                (p + "ffn.b2", (d,), "zeros"),
            ]
        self.params: dict[str, Tensor] = {}
        for pname, shape, kind in shapes:
            if kind == "normal":
                data = rng.normal(0.0, std, size=shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            t = Tensor(data, requires_grad=trainable, name=f"{name}.{pname}", frozen=not trainable)
            if not trainable:
                t.data.flags.writeable = False
            self.params[pname] = t

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def hash(self) -> str:
        return params_hash(self.params)

    def _attention(self, x: Tensor, prefix: str, probs_out: list | None = None) -> Tensor:
        P = self.params
        B, t, d = x.shape
        h = self.cfg.n_heads
        dh = d // h

        def split(y):
            return T.transpose(T.reshape(y, (B, t, h, dh)), (0, 2, 1, 3))

        q = split(T.linear(x, P[prefix + "wq"], P[prefix + "bq"]))
        # no key bias: it shifts every score of a query equally, which softmax ignores
        k = split(T.linear(x, P[prefix + "wk"]))
        v = split(T.linear(x, P[prefix + "wv"], P[prefix + "bv"]))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        probs = T.softmax(scores, axis=-1)
        if probs_out is not None:
            probs_out.append(probs.data)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, t, d))
        return T.linear(ctx, P[prefix + "wo"], P[prefix + "bo"])

    def forward(self, waves: np.ndarray, probs_out: list | None = None) -> list[Tensor]:
        """Hidden states ``[x_0, ..., x_L]`` of shape ``(B, t, d_model)``."""
        cfg, P = self.cfg, self.params
        frames = frame_waves(waves, cfg.window, cfg.hop)
        t = frames.shape[1]
        x = T.linear(Tensor(frames), P["in_proj.weight"], P["in_proj.bias"])
        if cfg.pos_scale:
            x = x + Tensor(cfg.pos_scale * sinusoidal_positions(t, cfg.d_model))
        states = [x]
        for l in range(cfg.n_layers):
            p = f"layers.{l}."
            a = T.layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"], cfg.ln_eps)
            x = x + self._attention(a, p + "attn.", probs_out)
            m = T.layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"], cfg.ln_eps)
            hid = T.gelu(T.linear(m, P[p + "ffn.w1"], P[p + "ffn.b1"]))
            x = x + T.linear(hid, P[p + "ffn.w2"], P[p + "ffn.b2"])
            states.append(x)
        return states


# ---------------------------------------------------------------------------
# Teachers


@dataclass
class TeacherEnsemble:
    cfg: EncoderConfig
    teachers: list[Encoder]
    tap_layers: tuple[int, ...]
    seeds: tuple[int, ...]

    @property
    def M(self) -> int:
        return len(self.teachers)

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def hash(self) -> str:
        h = hashlib.sha256()
        for teacher in self.teachers:
            h.update(teacher.hash().encode())
        return h.hexdigest()

    def forward_batch(self, waves: np.ndarray) -> np.ndarray:
        """Tap-layer outputs for a batch, shape ``(M, n_taps, B, t, D_T)``."""
        out = []
        with T.no_grad():
            for teacher in self.teachers:
                states = teacher.forward(waves)
                out.append([states[i].data for i in self.tap_layers])
        return np.asarray(out)


def validate_tap_layers(tap_layers: Sequence[int], n_layers: int) -> tuple[int, ...]:
    taps = tuple(int(i) for i in tap_layers)
    if not taps:
        raise ConfigError("tap_layers must not be empty")
    if any(b <= a for a, b in zip(taps, taps[1:])):
        raise ConfigError(f"tap_layers must be strictly increasing, got {list(taps)}")
    if taps[0] < 1 or taps[-1] > n_layers:
        raise ConfigError(f"tap_layers {list(taps)} must lie in [1, {n_layers}]")
    return taps


def default_tap_layers(n_layers: int) -> tuple[int, ...]:
    """Three evenly spaced taps ending at the top layer (2,4,6 for six layers)."""
    if n_layers >= 3 and n_layers % 3 == 0:
        step = n_layers // 3
        return (step, 2 * step, 3 * step)
    return tuple(range(1, n_layers + 1))


def build_teacher_ensemble(
    cfg: EncoderConfig,
    seeds: Sequence[int],
    tap_layers: Sequence[int] | None = None,
    allow_identical: bool = False,
) -> TeacherEnsemble:
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ConfigError("an ensemble needs at least one teacher")
    if len(set(seeds)) != len(seeds) and not allow_identical:
        raise ConfigError(f"duplicate teacher seeds {list(seeds)}; pass allow_identical=True to request identical teachers")
    taps = validate_tap_layers(default_tap_layers(cfg.n_layers) if tap_layers is None else tap_layers, cfg.n_layers)
    teachers = [Encoder(cfg, s, trainable=False, name=f"teacher{m}") for m, s in enumerate(seeds)]
    return TeacherEnsemble(cfg=cfg, teachers=teachers, tap_layers=taps, seeds=seeds)


def teacher_forward(ens: TeacherEnsemble, wave) -> list[dict[int, HiddenState]]:
    """Per-teacher map from tap layer index to its hidden state for one wave."""
    taps = ens.forward_batch(np.asarray(wave, dtype=np.float64)[None, :])
    return [
        {i: HiddenState(Tensor(taps[m, k, 0]), i, f"teacher{m}") for k, i in enumerate(ens.tap_layers)}
        for m in range(ens.M)
    ]


# ---------------------------------------------------------------------------
# Student


@dataclass
class Head:
    weight: Tensor
    bias: Tensor

    def __call__(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"head expects width {self.weight.shape[0]}, got input of shape {z.shape}")
        return T.linear(z, self.weight, self.bias)


def head_width(mode: str, d_teacher: int, n_teachers: int) -> int:
    return d_teacher * n_teachers if mode == "concat" else d_teacher


@dataclass
class StudentModel:
    encoder: Encoder
    mode: str
    head_sets: list[list[Head]] = field(default_factory=list)

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def named_parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        for m, heads in enumerate(self.head_sets):
            for i, head in enumerate(heads):
                params[f"heads.{m}.{i}.weight"] = head.weight
                params[f"heads.{m}.{i}.bias"] = head.bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def backbone_params(self) -> int:
        return self.encoder.num_params()

    def head_params(self) -> int:
        return int(sum(h.weight.size + h.bias.size for heads in self.head_sets for h in heads))

    def backbone_hash(self) -> str:
        return self.encoder.hash()

    def without_heads(self) -> "StudentModel":
        return StudentModel(encoder=self.encoder, mode=self.mode, head_sets=[])

    def hidden_states(self, waves: np.ndarray) -> list[Tensor]:
        return self.encoder.forward(waves)


def build_student(
    cfg: EncoderConfig,
    mode: str,
    d_teacher: int,
    n_taps: int,
    n_teachers: int = 1,
    seed: int = 0,
    shared_head_init: bool = False,
) -> StudentModel:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    encoder = Encoder(cfg, seed, trainable=True, name="student")
    width = head_width(mode, d_teacher, n_teachers)
    n_sets = n_teachers if mode == "multi_pred" else 1
    head_sets = []
    for m in range(n_sets):
        rng = np.random.default_rng([seed, 7919, 0 if shared_head_init else m])
        heads = []
        for i in range(n_taps):
            w = Tensor(rng.normal(0.0, cfg.init_std, size=(cfg.d_model, width)), requires_grad=True, name=f"heads.{m}.{i}.weight")
            b = Tensor(np.zeros(width), requires_grad=True, name=f"heads.{m}.{i}.bias")
            heads.append(Head(w, b))
        head_sets.append(heads)
    return StudentModel(encoder=encoder, mode=mode, head_sets=head_sets)


def student_forward(model: StudentModel, wave) -> tuple[HiddenState, list[HiddenState]]:
    """Run one waveform through the student; returns ``(z, all_states)``.

    ``all_states[0]`` is the projected input and ``all_states[-1]`` is ``z``.
    """
    wave = np.asarray(wave, dtype=np.float64)
    states = model.encoder.forward(wave[None, :])
    hidden = [HiddenState(T.reshape(s, s.shape[1:]), l, "student") for l, s in enumerate(states)]
    return hidden[-1], hidden


def heads_forward(z: HiddenState | Tensor, heads) -> list:
    """Apply prediction heads to ``z``.

    ``heads`` is either one list of heads (one prediction per tap layer) or a
    list of such lists (multi-prediction mode), mirrored in the return value.
    """
    zt = z.values if isinstance(z, HiddenState) else z
    if heads and isinstance(heads[0], (list, tuple)):
        return [[head(zt) for head in head_set] for head_set in heads]
    return [head(zt) for head in heads]
