"""Deterministic synthetic waveforms and distortion families.

Clean samples are harmonic tones whose fundamental lies in a class-specific
frequency band. Four distortion families stand in for real noise corpora;
a :class:`DatasetSplit` divides them into families seen during any
pretraining and families held out for evaluation only.

Every output is a pure function of the seeds passed in: sample ``k`` of a
corpus draws from ``numpy.random.default_rng([seed, stream, k])``, so
generation order never matters.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError

FAMILIES = ("gaussian", "tonal_hum", "band_reject", "impulse_burst")
ADDITIVE_FAMILIES = ("gaussian", "tonal_hum", "impulse_burst")
HEADROOM = 4.0
SAMPLE_RATE = 16000
CORPUS_FORMAT_VERSION = 1

# Fundamental frequencies live in [F_LO, F_HI] cycles/sample so that the third
# harmonic stays below Nyquist.
F_LO, F_HI = 0.02, 0.16
BAND_FILL = 0.7
NOISE_FLOOR = 0.02
AMPLITUDE = (0.4, 0.9)

_TRAIN_STREAM, _EVAL_STREAM = 0, 1


@dataclass
class WaveSample:
    samples: np.ndarray
    label: int
    generator_seed: int
    index: int = 0
    sample_rate: int = SAMPLE_RATE
    distortion: dict | None = None

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class DistortionSpec:
    family: str
    snr_db: float
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown distortion family {self.family!r}; valid: {', '.join(FAMILIES)}")
        if not -10.0 <= self.snr_db <= 60.0:
            raise ConfigError(f"snr_db must lie in [-10, 60], got {self.snr_db}")


def class_band(label: int, n_classes: int) -> tuple[float, float]:
    """Fundamental-frequency band (cycles/sample) for one class."""
    slot = (F_HI - F_LO) / n_classes
    centre = F_LO + (label + 0.5) * slot
    half = 0.5 * BAND_FILL * slot
    return centre - half, centre + half


def _clean_wave(rng: np.random.Generator, length: int, label: int, n_classes: int) -> np.ndarray:
    lo, hi = class_band(label, n_classes)
    f0 = rng.uniform(lo, hi)
    amps = rng.uniform(0.2, 1.0, size=3)
    amps *= rng.uniform(*AMPLITUDE) / amps.sum()
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    n = np.arange(length)
    wave = np.zeros(length)
    for k in range(3):
        wave += amps[k] * np.sin(2.0 * np.pi * (k + 1) * f0 * n + phases[k])
    wave += rng.normal(0.0, NOISE_FLOOR, size=length)
    return wave


def gen_clean(seed: int, count: int, length: int, n_classes: int, window: int = 16, stream: int = _TRAIN_STREAM) -> list[WaveSample]:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if length < window:
        raise ConfigError(f"length {length} is shorter than the frame window {window}")
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    out = []
    for k in range(count):
        label = k % n_classes
        rng = np.random.default_rng([seed, stream, k])
        out.append(WaveSample(_clean_wave(rng, length, label, n_classes), label, seed, index=k))
    return out


def _noise(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n)
    if family == "gaussian":
        return rng.normal(size=n)
    if family == "tonal_hum":
        f = rng.uniform(0.005, 0.02)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        return sum(a * np.sin(2.0 * np.pi * (k + 1) * f * t + phases[k]) for k, a in enumerate((1.0, 0.5, 0.25)))
    if family == "impulse_burst":
        noise = np.zeros(n)
        burst = 6
        envelope = np.exp(-np.arange(burst) / 2.0)
        for _ in range(1 + n // 32):
            start = int(rng.integers(0, max(1, n - burst)))
            seg = envelope * rng.normal(size=burst)
            stop = min(n, start + burst)
            noise[start:stop] += seg[: stop - start]
        return noise
    raise ConfigError(f"{family} is not an additive family")


def apply_distortion(w: WaveSample, spec: DistortionSpec) -> WaveSample:
    """Distort one sample.

    Additive families are scaled so that the power ratio of the clean signal
    to the added noise equals ``spec.snr_db``. ``band_reject`` removes a
    seeded frequency band and ignores ``snr_db``. Should a mixture exceed the
    +/-4.0 headroom it is attenuated as a whole, which leaves the
    signal-to-noise ratio unchanged.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, FAMILIES.index(spec.family)])
    if spec.family == "band_reject":
        spectrum = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(len(x))
        lo = rng.uniform(0.02, 0.35)
        spectrum[(freqs >= lo) & (freqs <= lo + 0.06)] = 0.0
        out = np.fft.irfft(spectrum, n=len(x))
    else:
        p_signal = np.mean(x * x)
        if p_signal == 0.0:
            raise DegenerateInputError("cannot mix noise at a target SNR into a zero-power signal")
        noise = _noise(spec.family, len(x), rng)
        p_noise = np.mean(noise * noise)
        if p_noise == 0.0:
            raise DegenerateInputError(f"{spec.family} generated a zero-power noise draw")
        gain = np.sqrt(p_signal / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
        out = x + gain * noise
    peak = np.max(np.abs(out))
    if peak > HEADROOM:
        out = out * (HEADROOM / peak)
    return replace(w, samples=out, distortion={"family": spec.family, "snr_db": float(spec.snr_db), "seed": int(spec.seed)})


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return float(10.0 * np.log10(np.mean(clean * clean) / np.mean(noise * noise)))


def spectral_statistics(samples, n_bins: int | None = None) -> np.ndarray:
    """Hand-crafted features: normalised log power spectrum of each waveform."""
    waves = np.stack([np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in samples])
    window = np.hanning(waves.shape[1])
    power = np.abs(np.fft.rfft(waves * window, axis=1)) ** 2
    if n_bins is not None:
        power = power[:, :n_bins]
    power /= power.sum(axis=1, keepdims=True) + 1e-12
    feats = np.log(power + 1e-6)
    return (feats - feats.mean(axis=1, keepdims=True)) / 10.0


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitConfig:
    seed: int = 0
    n_train: int = 256
    n_eval: int = 128
    length: int = 128
    n_classes: int = 4
    window: int = 16
    seen_families: tuple[str, ...] = ("gaussian", "tonal_hum")
    unseen_families: tuple[str, ...] = ("impulse_burst", "band_reject")
    eval_snr_db: float = 5.0
    train_families: tuple[str, ...] = ()
    train_snr_db: float = 10.0

    def __post_init__(self):
        for name in ("seen_families", "unseen_families", "train_families"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.seen_families or not self.unseen_families:
            raise ConfigError("seen_families and unseen_families must both be non-empty")
        for fam in self.seen_families + self.unseen_families + self.train_families:
            if fam not in FAMILIES:
                raise ConfigError(f"unknown distortion family {fam!r}; valid: {', '.join(FAMILIES)}")
        overlap = set(self.seen_families) & set(self.unseen_families)
        if overlap:
            raise ConfigError(f"seen and unseen families overlap: {sorted(overlap)}")
        if set(self.train_families) & set(self.unseen_families):
            raise ConfigError("training distortions must not use unseen families")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("seen_families", "unseen_families", "train_families"):
            d[k] = list(d[k])
        return d


@dataclass
class DatasetSplit:
    train: list[WaveSample]
    eval_clean: list[WaveSample]
    eval_seen_noise: list[WaveSample]
    eval_unseen_noise: list[WaveSample]
    seen_families: tuple[str, ...]
    unseen_families: tuple[str, ...]
    config: SplitConfig | None = field(default=None)

    def conditions(self) -> dict[str, list[WaveSample]]:
        return {"clean": self.eval_clean, "seen_noise": self.eval_seen_noise, "unseen_noise": self.eval_unseen_noise}


def _distort_all(samples, families, snr_db, seed, stream) -> list[WaveSample]:
    out = []
    for s in samples:
        rng = np.random.default_rng([seed, stream, s.index])
        family = families[int(rng.integers(len(families)))]
        spec_seed = int(rng.integers(2**31 - 1))
        out.append(apply_distortion(s, DistortionSpec(family, snr_db, spec_seed)))
    return out


def make_split(config: SplitConfig) -> DatasetSplit:
    train = gen_clean(config.seed, config.n_train, config.length, config.n_classes, config.window, _TRAIN_STREAM)
    if config.train_families:
        train = _distort_all(train, config.train_families, config.train_snr_db, config.seed, 10)
    clean = gen_clean(config.seed, config.n_eval, config.length, config.n_classes, config.window, _EVAL_STREAM)
    seen = _distort_all(clean, config.seen_families, config.eval_snr_db, config.seed, 11)
    unseen = _distort_all(clean, config.unseen_families, config.eval_snr_db, config.seed, 12)
    return DatasetSplit(train, clean, seen, unseen, config.seen_families, config.unseen_families, config)


def waves_of(samples) -> np.ndarray:
    return np.stack([s.samples for s in samples])


def labels_of(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# Corpus export / import: raw little-endian float64 files plus a JSON manifest


def export_corpus(samples, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        fname = f"{k:06d}.f64"
        np.asarray(s.samples, dtype="<f8").tofile(directory / fname)
        entries.append({
            "file": fname,
            "length": len(s.samples),
            "label": int(s.label),
            "generator_seed": int(s.generator_seed),
            "index": int(s.index),
            "sample_rate": int(s.sample_rate),
            "distortion": s.distortion,
        })
    manifest = {"version": CORPUS_FORMAT_VERSION, "samples": entries}
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, directory / "manifest.json")
    return directory


def import_corpus(directory) -> list[WaveSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CORPUS_FORMAT_VERSION:
        raise ConfigError(f"unsupported corpus version {manifest.get('version')!r}")
    out = []
    for e in manifest["samples"]:
        data = np.fromfile(directory / e["file"], dtype="<f8").astype(np.float64)
        if len(data) != e["length"]:
            raise ConfigError(f"{e['file']}: expected {e['length']} samples, found {len(data)}")
        out.append(WaveSample(data, e["label"], e["generator_seed"], e["index"], e["sample_rate"], e["distortion"]))
    return out


def export_split(split: DatasetSplit, directory) -> Path:
    directory = Path(directory)
    for name, samples in (("train", split.train), *split.conditions().items()):
        export_corpus(samples, directory / name)
    meta = {
        "version": CORPUS_FORMAT_VERSION,
        "seen_families": list(split.seen_families),
        "unseen_families": list(split.unseen_families),
        "config": split.config.to_dict() if split.config else None,
    }
    (directory / "split.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return directory


def import_split(directory) -> DatasetSplit:
    directory = Path(directory)
    meta = json.loads((directory / "split.json").read_text())
    parts = {name: import_corpus(directory / name) for name in ("train", "clean", "seen_noise", "unseen_noise")}
    cfg = SplitConfig(**meta["config"]) if meta.get("config") else None
    return DatasetSplit(parts["train"], parts["clean"], parts["seen_noise"], parts["unseen_noise"],
                        tuple(meta["seen_families"]), tuple(meta["unseen_families"]), cfg)
