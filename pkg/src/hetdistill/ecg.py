"""Synthetic multi-lead ECG-like records and patch tokenization.

Each beat is a sum of Gaussian bumps (P, Q, R, S, T) centred on the R peak.
Five diagnostic classes perturb the baseline sinus template:

``st_shift``
    constant offset between the end of the QRS complex and the T-wave onset
``wide_qrs``
    Q, R and S bumps widened and spread by ``qrs_widen``, with a deep S wave
    (bundle-branch-block-like)
``irregular_rhythm``
    beat-to-beat RR jitter and no P waves (atrial-fibrillation-like)
``axis_deviation``
    per-lead gains swapped for a right-axis gain table
``t_inversion``
    T-wave polarity flipped

All random draws happen regardless of the class mask, so two records with the
same seed differ only where a class perturbation acts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hetdistill.errors import ContractError, InputError
from hetdistill.tensor import Tensor, l2_normalize

CLASS_NAMES = ("st_shift", "wide_qrs", "irregular_rhythm", "axis_deviation", "t_inversion")
N_CLASSES = len(CLASS_NAMES)
ST_SHIFT, WIDE_QRS, IRREGULAR, AXIS, T_INVERSION = range(N_CLASSES)

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
# R-wave gain per lead: normal axis, and a right-axis variant
LEAD_GAINS = (0.8, 1.2, 0.5, -0.9, 0.4, 0.85, -0.5, 0.3, 0.8, 1.2, 1.1, 0.9)
AXIS_GAINS = (-0.6, 0.7, 1.2, -0.2, -0.9, 1.0, 0.6, 0.9, 0.6, 0.5, 0.3, -0.2)


@dataclass(frozen=True)
class GeneratorConfig:
    """Waveform parameters; times in seconds, amplitudes relative to the R wave."""

    sample_rate: float = 250.0
    heart_rate: tuple = (60.0, 100.0)
    amplitude: tuple = (0.8, 1.2)
    noise_fraction: float = 0.02
    st_offset: float = -0.4
    qrs_widen: float = 3.0
    wide_s_amplitude: float = -0.8
    rr_jitter: float = 0.3
    lead_gains: tuple = LEAD_GAINS
    axis_gains: tuple = AXIS_GAINS

    def gains(self, n_leads: int, axis: bool) -> np.ndarray:
        table = np.asarray(self.axis_gains if axis else self.lead_gains, dtype=np.float64)
        return np.resize(table, n_leads)


# (centre, width, amplitude) of each bump relative to the R peak
_P = (-0.16, 0.02, 0.12)
_Q = (-0.025, 0.008, -0.12)
_R = (0.0, 0.01, 1.0)
_S = (0.025, 0.008, -0.25)
_T = (0.28, 0.045, 0.3)
_QRS_END = 0.05


def _bump(t, centre, width, amp):
    return amp * np.exp(-0.5 * ((t - centre) / width) ** 2)


def st_window(wide: bool, cfg: GeneratorConfig = GeneratorConfig()) -> tuple:
    """``(start, stop)`` of the ST segment relative to the R peak, in seconds."""
    start = _QRS_END * (cfg.qrs_widen if wide else 1.0)
    stop = _T[0] - 2.0 * _T[1]
    return start, stop


@dataclass
class EcgRecord:
    signal: np.ndarray  # (n_leads, n_samples)
    sample_rate: float
    labels: np.ndarray  # (K,) of 0/1
    seed: int
    r_peaks: np.ndarray = field(default=None, repr=False)  # seconds

    @property
    def n_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]


def generate_record(seed: int, n_leads: int = 12, n_samples: int = 500,
                    sample_rate: float | None = None, class_mask=None,
                    config: GeneratorConfig = GeneratorConfig()) -> EcgRecord:
    """Deterministically synthesise one record from ``seed`` and ``class_mask``."""
    if n_leads < 1 or n_samples < 2:
        raise InputError(f"need n_leads >= 1 and n_samples >= 2, got {n_leads}, {n_samples}")
    fs = float(sample_rate or config.sample_rate)
    if fs <= 0:
        raise InputError(f"sample_rate must be positive, got {fs}")
    mask = np.zeros(N_CLASSES, dtype=np.int8) if class_mask is None else np.asarray(class_mask, dtype=np.int8)
    if mask.shape != (N_CLASSES,):
        raise InputError(f"class_mask must have length {N_CLASSES}, got shape {mask.shape}")

    rng = np.random.default_rng(seed)
    duration = n_samples / fs
    rr = 60.0 / rng.uniform(*config.heart_rate)
    amplitude = rng.uniform(*config.amplitude)
    first_r = rng.uniform(0.0, min(rr, duration))
    n_beats = int(math.ceil(duration / (rr * (1.0 - config.rr_jitter)))) + 2
    jitter = rng.uniform(-config.rr_jitter, config.rr_jitter, size=n_beats)
    noise = rng.standard_normal((n_leads, n_samples))

    steps = rr * (1.0 + jitter * mask[IRREGULAR])
    # one beat before the first visible R so its T wave can enter the window
    r_peaks = first_r + np.concatenate([[-steps[0], 0.0], np.cumsum(steps[1:])])
    r_peaks = r_peaks[r_peaks < duration + 0.5]

    widen = config.qrs_widen if mask[WIDE_QRS] else 1.0
    s_amp = config.wide_s_amplitude if mask[WIDE_QRS] else _S[2]
    t = np.arange(n_samples) / fs
    beat = np.zeros(n_samples)
    st_lo, st_hi = st_window(bool(mask[WIDE_QRS]), config)
    for r in r_peaks:
        rel = t - r
        if not mask[IRREGULAR]:
            beat += _bump(rel, *_P)
        beat += _bump(rel, _Q[0] * widen, _Q[1] * widen, _Q[2])
        beat += _bump(rel, _R[0], _R[1] * widen, _R[2])
        beat += _bump(rel, _S[0] * widen, _S[1] * widen, s_amp)
        beat += _bump(rel, _T[0], _T[1], -_T[2] if mask[T_INVERSION] else _T[2])
        if mask[ST_SHIFT]:
            beat += np.where((rel >= st_lo) & (rel < st_hi), config.st_offset, 0.0)

    gains = config.gains(n_leads, bool(mask[AXIS]))
    signal = amplitude * gains[:, None] * beat[None, :]
    signal = signal + config.noise_fraction * amplitude * noise
    return EcgRecord(signal=signal, sample_rate=fs, labels=mask.astype(np.int8), seed=int(seed),
                     r_peaks=r_peaks)


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchTokenizerConfig:
    patch_length: int = 25
    stride: int = 25
    embed_width: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.patch_length < 1 or self.stride < 1 or self.embed_width < 1:
            raise InputError("patch_length, stride and embed_width must be >= 1")

    def windows_per_lead(self, n_samples: int) -> int:
        if self.patch_length > n_samples:
            raise InputError(f"patch_length {self.patch_length} exceeds signal length {n_samples}")
        return (n_samples - self.patch_length) // self.stride + 1

    def token_count(self, n_leads: int, n_samples: int) -> int:
        return n_leads * self.windows_per_lead(n_samples)

    def embedding(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((self.patch_length, self.embed_width)) / math.sqrt(self.patch_length)


def patch_tokens(signals: np.ndarray, cfg: PatchTokenizerConfig) -> np.ndarray:
    """Tokenize ``(..., n_leads, n_samples)`` signals to ``(..., V, embed_width)`` arrays."""
    signals = np.asarray(signals, dtype=np.float64)
    cfg.windows_per_lead(signals.shape[-1])
    windows = np.lib.stride_tricks.sliding_window_view(signals, cfg.patch_length, axis=-1)
    windows = windows[..., :: cfg.stride, :]
    lead_shape = windows.shape[:-3]
    flat = windows.reshape(lead_shape + (-1, cfg.patch_length))
    emb = flat @ cfg.embedding()
    norm = np.sqrt((emb * emb).sum(axis=-1, keepdims=True))
    return emb / np.maximum(norm, 1e-12)


def patchify(record: EcgRecord, cfg: PatchTokenizerConfig) -> Tensor:
    """Sliding-window patches, lead-major then time, embedded and L2-normalised."""
    cfg.windows_per_lead(record.n_samples)
    windows = np.lib.stride_tricks.sliding_window_view(record.signal, cfg.patch_length, axis=-1)
    flat = windows[:, :: cfg.stride, :].reshape(-1, cfg.patch_length)
    return l2_normalize(Tensor(flat @ cfg.embedding()), 1e-12)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    n_records: int = 600
    split_ratio: float = 0.8
    n_leads: int = 12
    n_samples: int = 500
    positive_rate: float = 0.3
    teacher_records: int = 3000  # 0: the teacher trains on the student train split
    generator: GeneratorConfig = GeneratorConfig()

    def __post_init__(self):
        if self.teacher_records < 0:
            raise InputError(f"teacher_records must be non-negative, got {self.teacher_records}")

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown data config keys: {', '.join(unknown)}")
        if "generator" in data and isinstance(data["generator"], dict):
            gen = dict(data["generator"])
            gknown = {f.name for f in dataclasses.fields(GeneratorConfig)}
            bad = sorted(set(gen) - gknown)
            if bad:
                raise InputError(f"unknown generator keys: {', '.join(bad)}")
            data["generator"] = GeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                   for k, v in gen.items()})
        return cls(**data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def config_hash(obj) -> str:
    """sha256 over the canonical JSON of a (possibly nested) dataclass or dict."""
    payload = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def record_seed(seed: int, index: int) -> int:
    return int(seed) * 1_000_003 + int(index)


def _balanced_labels(rng, n: int, k: int, rate: float) -> np.ndarray:
    labels = np.zeros((n, k), dtype=np.int8)
    n_pos = int(round(rate * n))
    for c in range(k):
        labels[rng.permutation(n)[:n_pos], c] = 1
    return labels


def make_dataset(n_records: int, split_ratio: float = 0.8, seed: int = 0,
                 config: DataConfig | None = None, threads: int = 1):
    """Return ``(train, eval)`` lists of records.

    Labels are drawn separately for each split with the same exact per-class
    positive count (up to rounding), so class frequencies match across splits.
    """
    if n_records < 2:
        raise InputError(f"n_records must be >= 2, got {n_records}")
    if not 0.0 < split_ratio < 1.0:
        raise InputError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    cfg = config or DataConfig()
    n_train = min(max(int(round(split_ratio * n_records)), 1), n_records - 1)
    rng = np.random.default_rng([seed, 7919])
    labels = np.concatenate([
        _balanced_labels(rng, n_train, N_CLASSES, cfg.positive_rate),
        _balanced_labels(rng, n_records - n_train, N_CLASSES, cfg.positive_rate),
    ])

    def build(i):
        return generate_record(record_seed(seed, i), cfg.n_leads, cfg.n_samples,
                               cfg.generator.sample_rate, labels[i], cfg.generator)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(build, range(n_records)))
    else:
        records = [build(i) for i in range(n_records)]
    return records[:n_train], records[n_train:]


def make_teacher_pool(n_records: int, seed: int = 0, config: DataConfig | None = None,
                      threads: int = 1):
    """Records reserved for teacher training.

    Record seeds continue after the ``config.n_records`` indices used by
    :func:`make_dataset`, so the pool never overlaps the student splits.
    """
    if n_records < 1:
        raise InputError(f"n_records must be >= 1, got {n_records}")
    cfg = config or DataConfig()
    rng = np.random.default_rng([seed, 7927])
    labels = _balanced_labels(rng, n_records, N_CLASSES, cfg.positive_rate)

    def build(i):
        return generate_record(record_seed(seed, cfg.n_records + i), cfg.n_leads, cfg.n_samples,
                               cfg.generator.sample_rate, labels[i], cfg.generator)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(build, range(n_records)))
    return [build(i) for i in range(n_records)]


def stack(records) -> tuple:
    """``(signals, labels)`` arrays for a list of records."""
    return (np.stack([r.signal for r in records]),
            np.stack([r.labels for r in records]).astype(np.float64))


class EcgData:
    """Stacked signals and labels of a record list, with per-tokenizer token caches."""

    def __init__(self, records):
        records = list(records)
        if not records:
            raise InputError("empty record collection")
        self.records = records
        self.signals, self.labels = stack(records)
        self._tokens = {}

    def __len__(self):
        return len(self.records)

    def tokens(self, cfg: PatchTokenizerConfig) -> np.ndarray:
        if cfg not in self._tokens:
            self._tokens[cfg] = patch_tokens(self.signals, cfg)
        return self._tokens[cfg]


def export_dataset(records, directory, config: DataConfig, split: str = "train") -> str:
    """Write one ``.npy`` per record plus ``manifest.json`` with seeds, labels and config hash."""
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        name = f"{split}_{i:05d}.npy"
        np.save(os.path.join(directory, name), rec.signal, allow_pickle=False)
        entries.append({"file": name, "seed": rec.seed, "labels": rec.labels.tolist(),
                        "sample_rate": rec.sample_rate})
    manifest_path = os.path.join(directory, "manifest.json")
    manifest = {"config": config.to_dict(), "config_hash": config_hash(config), "splits": {}}
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            previous = json.load(fh)
        if previous.get("config_hash") == manifest["config_hash"]:
            manifest["splits"] = previous.get("splits", {})
    manifest["splits"][split] = entries
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest_path


def import_dataset(directory, split: str = "train", expected: DataConfig | None = None):
    """Load a split written by :func:`export_dataset`, verifying the config hash."""
    directory = os.fspath(directory)
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = DataConfig.from_dict(manifest["config"])
    if config_hash(cfg) != manifest["config_hash"]:
        raise ContractError("dataset manifest config does not match its recorded hash")
    if expected is not None and config_hash(expected) != manifest["config_hash"]:
        raise ContractError("dataset was generated under a different config")
    if split not in manifest["splits"]:
        raise InputError(f"split {split!r} not present in {directory}")
    records = []
    for entry in manifest["splits"][split]:
        signal = np.load(os.path.join(directory, entry["file"]), allow_pickle=False)
        records.append(EcgRecord(signal=signal, sample_rate=entry["sample_rate"],
                                 labels=np.asarray(entry["labels"], dtype=np.int8),
                                 seed=entry["seed"]))
    return records
